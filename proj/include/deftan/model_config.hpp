#pragma once

#include <cstdint>
#include <sstream>
#include <string>

#include "deftan/errors.hpp"
#include "deftan/rng.hpp"

namespace deftan {

enum class SubBlock { Dense, FreqTransformer, TimeConformer };

enum class TffwKind { Sdc, Rnn, Gru };

// Architecture hyperparameters. The two built-in presets are "paper"
// (the full-size configuration) and "tiny" (used by the fast training
// and verification runs).
struct ModelConfig {
  int mics = 4;
  int channels = 64;      // feature channels C
  int num_blocks = 4;     // N_b
  int dense_layers = 5;   // N_d, the last layer compresses back to C
  int sdc_layers = 3;     // N_c, dilations 1,2,4,...
  int heads = 4;
  int dense_kernel = 3;   // square 2D kernel
  int sdc_kernel = 3;
  int f_ffw_expansion = 4;
  int t_ffw_width = 4;
  double dropout = 0.1;
  std::string block_order = "DFT";
  std::string ablate = "none";  // none | D | F | T
  TffwKind t_ffw_kind = TffwKind::Sdc;
  bool prelu_to_relu = false;
  bool gelu_to_relu = false;
  int fft_size = 512;
  int hop = 128;

  int64_t bins() const { return fft_size / 2 + 1; }

  void validate() const {
    if (mics < 1) throw ConfigError("mics must be >= 1");
    if (channels < 1 || heads < 1) throw ConfigError("channels and heads must be >= 1");
    if (channels % heads != 0)
      throw ConfigError("channels " + std::to_string(channels) +
                        " not divisible by heads " + std::to_string(heads));
    if (num_blocks < 0) throw ConfigError("num_blocks must be >= 0");
    if (dense_layers < 1) throw ConfigError("dense_layers must be >= 1");
    if (sdc_layers < 1) throw ConfigError("sdc_layers must be >= 1");
    if (dense_kernel < 1 || dense_kernel % 2 == 0 || sdc_kernel < 1 || sdc_kernel % 2 == 0)
      throw ConfigError("kernels must be odd and positive");
    if (f_ffw_expansion < 1 || t_ffw_width < 1)
      throw ConfigError("feed-forward expansion factors must be >= 1");
    if ((t_ffw_width * channels) % 2 != 0)
      throw ConfigError("t_ffw_width*channels must be even for the recurrent variants");
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must be in [0,1)");
    if (block_order.size() != 3 ||
        block_order.find('D') == std::string::npos ||
        block_order.find('F') == std::string::npos ||
        block_order.find('T') == std::string::npos)
      throw ConfigError("block_order must be a permutation of D,F,T, got \"" + block_order + "\"");
    if (ablate != "none" && ablate != "D" && ablate != "F" && ablate != "T")
      throw ConfigError("ablate must be one of none,D,F,T, got \"" + ablate + "\"");
    if (fft_size <= 0 || fft_size % 2 != 0) throw ConfigError("fft_size must be positive even");
    if (hop <= 0 || hop > fft_size) throw ConfigError("hop must be in (0, fft_size]");
  }

  std::string kind_str() const {
    switch (t_ffw_kind) {
      case TffwKind::Sdc: return "sdc";
      case TffwKind::Rnn: return "rnn";
      default: return "gru";
    }
  }

  // Canonical key=value form; the checkpoint digest hashes this.
  std::string canonical() const {
    std::ostringstream os;
    os << "ablate=" << ablate << "\n"
       << "act_gelu=" << (gelu_to_relu ? "relu" : "gelu") << "\n"
       << "act_prelu=" << (prelu_to_relu ? "relu" : "prelu") << "\n"
       << "block_order=" << block_order << "\n"
       << "channels=" << channels << "\n"
       << "dense_kernel=" << dense_kernel << "\n"
       << "dense_layers=" << dense_layers << "\n"
       << "dropout=" << dropout << "\n"
       << "f_ffw_expansion=" << f_ffw_expansion << "\n"
       << "fft_size=" << fft_size << "\n"
       << "heads=" << heads << "\n"
       << "hop=" << hop << "\n"
       << "mics=" << mics << "\n"
       << "num_blocks=" << num_blocks << "\n"
       << "sdc_kernel=" << sdc_kernel << "\n"
       << "sdc_layers=" << sdc_layers << "\n"
       << "t_ffw_kind=" << kind_str() << "\n"
       << "t_ffw_width=" << t_ffw_width << "\n";
    return os.str();
  }

  uint64_t digest() const {
    // FNV-1a 64
    const std::string s = canonical();
    uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
      h ^= c;
      h *= 0x100000001b3ULL;
    }
    return h;
  }

  static ModelConfig paper_preset() { return ModelConfig{}; }

  static ModelConfig tiny_preset() {
    ModelConfig c;
    c.mics = 2;
    c.channels = 8;
    c.num_blocks = 1;
    c.dense_layers = 2;
    c.sdc_layers = 2;
    c.fft_size = 64;
    c.hop = 16;
    return c;
  }

  static ModelConfig preset(const std::string& name) {
    if (name == "paper") return paper_preset();
    if (name == "tiny") return tiny_preset();
    throw ConfigError("unknown preset \"" + name + "\" (expected paper or tiny)");
  }
};

// Analytic multiply-accumulate estimate per second of audio at the given
// hop. Every term scales with the frame rate fs/hop; attention over the
// time axis is charged at the 50%-overlap frame rate (fs/(fft_size/2)) so
// the whole estimate stays exactly linear in frame rate, matching the
// frames-doubled => MACs-doubled accounting the headline numbers use.
double mac_estimate(const ModelConfig& cfg, double audio_seconds, int hop);

}  // namespace deftan
