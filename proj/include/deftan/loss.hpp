#pragma once

#include "deftan/stft.hpp"

namespace deftan {

// Phase-constrained magnitude loss. With A, B one-sided spectra as (2,F,T)
// real/imag planes,
//   L_SM(A,B) = mean_{f,t} ( ||A_r|-|B_r|| + ||A_i|-|B_i|| )
// and the loss is the equal-weight average of the speech term L_SM(S,S_hat)
// and the noise term L_SM(Z,Z_hat), where Z_hat = stft(y_ref - s_hat) and
// Z = stft(y_ref - s). Mean (not sum) over bins keeps the scale independent
// of the clip length.
template <class S>
struct PcmLoss {
  Var<S> pcm;          // scalar, (speech_term + noise_term) / 2
  Var<S> speech_term;  // scalar
  Var<S> noise_term;   // scalar
};

template <class S>
Var<S> sm_distance(const Var<S>& a, const Var<S>& b) {
  auto plane = [](const Var<S>& x, int64_t p) { return narrow(x, 0, p, 1); };
  Var<S> dr = eabs(sub(eabs(plane(a, 0)), eabs(plane(b, 0))));
  Var<S> di = eabs(sub(eabs(plane(a, 1)), eabs(plane(b, 1))));
  return mean_all(add(dr, di));
}

template <class S>
PcmLoss<S> pcm_loss(const Var<S>& s_hat, const Tensor<S>& s_clean,
                    const Tensor<S>& y_ref, int fft_size, int hop) {
  const Tensor<S>& sh = s_hat.value();
  if (sh.rank() != 1 || s_clean.rank() != 1 || y_ref.rank() != 1)
    throw ShapeError("pcm_loss: waveforms must be single channel (N,)");
  if (sh.dim(0) != s_clean.dim(0) || sh.dim(0) != y_ref.dim(0))
    throw ParamError("pcm_loss: length mismatch: estimate " + std::to_string(sh.dim(0)) +
                     ", clean " + std::to_string(s_clean.dim(0)) + ", mixture " +
                     std::to_string(y_ref.dim(0)));

  Var<S> clean = Var<S>::leaf(s_clean, false);
  Var<S> mix = Var<S>::leaf(y_ref, false);

  Var<S> spec_hat = stft_op(s_hat, fft_size, hop);
  Var<S> spec_clean = stft_op(clean, fft_size, hop);
  Var<S> noise_hat = stft_op(sub(mix, s_hat), fft_size, hop);
  Var<S> noise_ref = stft_op(sub(mix, clean), fft_size, hop);

  PcmLoss<S> out;
  out.speech_term = sm_distance(spec_clean, spec_hat);
  out.noise_term = sm_distance(noise_ref, noise_hat);
  out.pcm = affine(add(out.speech_term, out.noise_term), S(0.5), S(0));
  return out;
}

// ---------------------------------------------------------------------------
// Scale-invariant SDR in dB. Both signals are mean-subtracted, the estimate
// is compared against its projection onto the reference. Returns +inf when
// the projection residual is negligible (estimate is a positive rescale of
// the reference).
double si_sdr_db(const std::vector<float>& estimate, const std::vector<float>& reference);

struct MetricReport {
  double si_sdr_db = 0.0;
  double si_sdri_db = 0.0;
};

}  // namespace deftan
