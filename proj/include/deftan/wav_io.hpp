#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "deftan/errors.hpp"

namespace deftan {

// Multichannel time-domain audio. Channels are stored as separate rows of
// equal length; samples live in [-1, 1).
struct Waveform {
  std::vector<std::vector<float>> samples;  // [channel][sample]
  int sample_rate = 16000;

  int64_t channels() const { return static_cast<int64_t>(samples.size()); }
  int64_t length() const {
    return samples.empty() ? 0 : static_cast<int64_t>(samples[0].size());
  }
  bool all_finite() const;
};

// RIFF PCM, 16-bit signed little-endian. Values are normalized by 1/32768
// on read; write clips out-of-range samples and returns the clip count.
Waveform read_wav(const std::string& path);
int64_t write_wav(const std::string& path, const Waveform& w);

}  // namespace deftan
