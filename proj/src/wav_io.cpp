#include "deftan/wav_io.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>

namespace deftan {

bool Waveform::all_finite() const {
  for (const auto& ch : samples)
    for (float v : ch)
      if (!std::isfinite(v)) return false;
  return true;
}

namespace {

uint32_t read_u32(const uint8_t* p) {
  return static_cast<uint32_t>(p[0]) | (static_cast<uint32_t>(p[1]) << 8) |
         (static_cast<uint32_t>(p[2]) << 16) | (static_cast<uint32_t>(p[3]) << 24);
}

uint16_t read_u16(const uint8_t* p) {
  return static_cast<uint16_t>(p[0] | (p[1] << 8));
}

void put_u32(std::vector<uint8_t>& v, uint32_t x) {
  v.push_back(static_cast<uint8_t>(x & 0xff));
  v.push_back(static_cast<uint8_t>((x >> 8) & 0xff));
  v.push_back(static_cast<uint8_t>((x >> 16) & 0xff));
  v.push_back(static_cast<uint8_t>((x >> 24) & 0xff));
}

void put_u16(std::vector<uint8_t>& v, uint16_t x) {
  v.push_back(static_cast<uint8_t>(x & 0xff));
  v.push_back(static_cast<uint8_t>((x >> 8) & 0xff));
}

}  // namespace

Waveform read_wav(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path);
  std::vector<uint8_t> buf((std::istreambuf_iterator<char>(f)),
                           std::istreambuf_iterator<char>());
  if (buf.size() < 44 || std::memcmp(buf.data(), "RIFF", 4) != 0 ||
      std::memcmp(buf.data() + 8, "WAVE", 4) != 0)
    throw IoError(path + ": not a RIFF/WAVE file");

  uint16_t format = 0, channels = 0, bits = 0;
  uint32_t rate = 0;
  const uint8_t* data = nullptr;
  uint32_t data_len = 0;

  size_t pos = 12;
  while (pos + 8 <= buf.size()) {
    const uint32_t chunk_len = read_u32(buf.data() + pos + 4);
    const uint8_t* body = buf.data() + pos + 8;
    if (pos + 8 + chunk_len > buf.size())
      throw IoError(path + ": truncated chunk at offset " + std::to_string(pos));
    if (std::memcmp(buf.data() + pos, "fmt ", 4) == 0) {
      if (chunk_len < 16) throw IoError(path + ": fmt chunk too short");
      format = read_u16(body);
      channels = read_u16(body + 2);
      rate = read_u32(body + 4);
      bits = read_u16(body + 14);
    } else if (std::memcmp(buf.data() + pos, "data", 4) == 0) {
      data = body;
      data_len = chunk_len;
    }
    pos += 8 + chunk_len + (chunk_len & 1);
  }
  if (!data) throw IoError(path + ": no data chunk");
  if (format != 1 || bits != 16)
    throw IoError(path + ": only 16-bit PCM supported (format=" +
                  std::to_string(format) + ", bits=" + std::to_string(bits) + ")");
  if (rate != 16000)
    throw IoError(path + ": sample rate " + std::to_string(rate) +
                  " unsupported, expected 16000");
  if (channels == 0) throw IoError(path + ": zero channels");

  const int64_t frames = data_len / (2 * channels);
  Waveform w;
  w.sample_rate = static_cast<int>(rate);
  w.samples.assign(channels, std::vector<float>(static_cast<size_t>(frames)));
  for (int64_t i = 0; i < frames; ++i)
    for (int c = 0; c < channels; ++c) {
      const uint8_t* p = data + (i * channels + c) * 2;
      const int16_t s = static_cast<int16_t>(p[0] | (p[1] << 8));
      w.samples[static_cast<size_t>(c)][static_cast<size_t>(i)] =
          static_cast<float>(s) / 32768.0f;
    }
  return w;
}

int64_t write_wav(const std::string& path, const Waveform& w) {
  if (w.channels() == 0 || w.length() == 0)
    throw IoError("write_wav: empty waveform");
  for (const auto& ch : w.samples)
    if (static_cast<int64_t>(ch.size()) != w.length())
      throw IoError("write_wav: ragged channels");

  const int64_t frames = w.length();
  const int channels = static_cast<int>(w.channels());
  int64_t clipped = 0;

  std::vector<uint8_t> out;
  out.reserve(static_cast<size_t>(44 + frames * channels * 2));
  out.insert(out.end(), {'R', 'I', 'F', 'F'});
  put_u32(out, static_cast<uint32_t>(36 + frames * channels * 2));
  out.insert(out.end(), {'W', 'A', 'V', 'E', 'f', 'm', 't', ' '});
  put_u32(out, 16);
  put_u16(out, 1);  // PCM
  put_u16(out, static_cast<uint16_t>(channels));
  put_u32(out, static_cast<uint32_t>(w.sample_rate));
  put_u32(out, static_cast<uint32_t>(w.sample_rate * channels * 2));
  put_u16(out, static_cast<uint16_t>(channels * 2));
  put_u16(out, 16);
  out.insert(out.end(), {'d', 'a', 't', 'a'});
  put_u32(out, static_cast<uint32_t>(frames * channels * 2));

  for (int64_t i = 0; i < frames; ++i)
    for (int c = 0; c < channels; ++c) {
      const float v = w.samples[static_cast<size_t>(c)][static_cast<size_t>(i)];
      double s = std::lround(static_cast<double>(v) * 32768.0);
      if (s > 32767.0) { s = 32767.0; ++clipped; }
      if (s < -32768.0) { s = -32768.0; ++clipped; }
      put_u16(out, static_cast<uint16_t>(static_cast<int16_t>(s)));
    }

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write " + path);
  f.write(reinterpret_cast<const char*>(out.data()),
          static_cast<std::streamsize>(out.size()));
  if (!f) throw IoError("short write to " + path);
  if (clipped > 0)
    std::fprintf(stderr, "warning: %lld samples clipped writing %s\n",
                 static_cast<long long>(clipped), path.c_str());
  return clipped;
}

}  // namespace deftan
