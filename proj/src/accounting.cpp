#include "deftan/model_config.hpp"

namespace deftan {

double mac_estimate(const ModelConfig& cfg, double audio_seconds, int hop) {
  cfg.validate();
  if (audio_seconds <= 0.0) throw ParamError("mac_estimate: audio_seconds must be > 0");
  if (hop <= 0 || hop > cfg.fft_size) throw ParamError("mac_estimate: bad hop");
  const double fs = 16000.0;
  const double F = static_cast<double>(cfg.bins());
  const double C = static_cast<double>(cfg.channels);
  const double T = audio_seconds * fs / static_cast<double>(hop);
  const double t_ctx = audio_seconds * fs / (cfg.fft_size / 2.0);  // 50%-overlap frames
  const double k2 = static_cast<double>(cfg.dense_kernel) * cfg.dense_kernel;
  const double W = static_cast<double>(cfg.t_ffw_width) * C;

  // cost per (f,t) position, summed over the network
  double per_pos = 0.0;
  per_pos += 2.0 * cfg.mics * C * k2;  // up-conv
  per_pos += C * 2.0 * k2;             // down-conv

  double dense = 0.0;
  for (int k = 1; k <= cfg.dense_layers; ++k) dense += k * C * C * k2;

  double f_tr = 4.0 * C * C             // q,k,v,out projections
                + 2.0 * F * C           // logits + weighted sum over the F sequence
                + 2.0 * cfg.f_ffw_expansion * C * C;  // 1x1 conv pair

  double t_conf = 4.0 * C * C
                  + 2.0 * t_ctx * C     // time-axis attention, fixed context
                  + 2.0 * W * C;        // pointwise linear pair
  switch (cfg.t_ffw_kind) {
    case TffwKind::Sdc:
      t_conf += cfg.sdc_layers * W * cfg.sdc_kernel;
      break;
    case TffwKind::Rnn:
      t_conf += 2.0 * (W * (W / 2.0) + (W / 2.0) * (W / 2.0));
      break;
    case TffwKind::Gru:
      t_conf += 3.0 * 2.0 * (W * (W / 2.0) + (W / 2.0) * (W / 2.0));
      break;
  }

  double block = 0.0;
  if (cfg.ablate != "D") block += dense;
  if (cfg.ablate != "F") block += f_tr;
  if (cfg.ablate != "T") block += t_conf;
  per_pos += cfg.num_blocks * block;

  return per_pos * F * T / audio_seconds;
}

}  // namespace deftan
