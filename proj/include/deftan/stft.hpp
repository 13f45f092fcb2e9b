#pragma once

#include <map>
#include <memory>
#include <mutex>

#include "deftan/autograd.hpp"
#include "deftan/wav_io.hpp"

namespace deftan {

// STFT with a rectangular (boxcar) analysis window of fft_size samples.
// Convention: unnormalized forward DFT, 1/fft_size on the inverse; one-sided
// spectra with F = fft_size/2 + 1 bins. Frames start at t*hop with tail
// zero-padding only (no centering); inverse overlap-add divides by the
// per-sample window-overlap count, which reconstructs exactly for any
// hop <= fft_size. All DFT sums are accumulated in double.

inline int64_t stft_num_frames(int64_t n, int fft_size, int hop) {
  if (n < fft_size)
    throw ParamError("stft: input length " + std::to_string(n) +
                     " shorter than window " + std::to_string(fft_size));
  return (n - fft_size + hop - 1) / hop + 1;
}

inline void check_stft_params(int fft_size, int hop) {
  if (fft_size <= 0 || fft_size % 2 != 0)
    throw ConfigError("stft: fft_size must be positive even, got " + std::to_string(fft_size));
  if (hop <= 0 || hop > fft_size)
    throw ConfigError("stft: hop must be in (0, fft_size], got " + std::to_string(hop));
}

template <class S>
struct ComplexSpectrogram {
  Tensor<S> real, imag;  // (channels, F, T)
  int fft_size = 0;
  int hop = 0;
  int64_t orig_len = 0;

  int64_t channels() const { return real.dim(0); }
  int64_t bins() const { return real.dim(1); }
  int64_t frames() const { return real.dim(2); }
};

template <class S>
struct ComplexMask {
  Tensor<S> real, imag;  // (F, T)
};

namespace detail {

struct DftTables {
  int fft_size;
  int64_t bins;
  std::vector<double> cosv, sinv;  // [k * fft_size + n]
};

inline std::shared_ptr<const DftTables> dft_tables(int fft_size) {
  static std::mutex mu;
  static std::map<int, std::shared_ptr<const DftTables>> cache;
  std::lock_guard<std::mutex> lock(mu);
  auto it = cache.find(fft_size);
  if (it != cache.end()) return it->second;
  auto t = std::make_shared<DftTables>();
  t->fft_size = fft_size;
  t->bins = fft_size / 2 + 1;
  t->cosv.resize(static_cast<size_t>(t->bins * fft_size));
  t->sinv.resize(static_cast<size_t>(t->bins * fft_size));
  const double w = 2.0 * 3.14159265358979323846 / fft_size;
  for (int64_t k = 0; k < t->bins; ++k)
    for (int64_t n = 0; n < fft_size; ++n) {
      const int64_t phase = k * n % fft_size;  // reduce for accuracy
      double c, s;
      if (phase == 0) {
        c = 1.0; s = 0.0;
      } else if (2 * phase == fft_size) {
        c = -1.0; s = 0.0;  // exact half period, keeps Nyquist/DC exactly real
      } else {
        c = std::cos(w * static_cast<double>(phase));
        s = std::sin(w * static_cast<double>(phase));
      }
      t->cosv[static_cast<size_t>(k * fft_size + n)] = c;
      t->sinv[static_cast<size_t>(k * fft_size + n)] = s;
    }
  cache[fft_size] = t;
  return t;
}

// Per-sample boxcar overlap count over the padded OLA buffer.
inline std::vector<double> cola_counts(int64_t frames, int fft_size, int hop) {
  std::vector<double> c(static_cast<size_t>((frames - 1) * hop + fft_size), 0.0);
  for (int64_t t = 0; t < frames; ++t)
    for (int n = 0; n < fft_size; ++n) c[static_cast<size_t>(t * hop + n)] += 1.0;
  return c;
}

}  // namespace detail

// Analysis of a multichannel tensor (M, N) -> spectrogram (M, F, T).
template <class S>
ComplexSpectrogram<S> stft(const Tensor<S>& wave, int fft_size, int hop) {
  check_stft_params(fft_size, hop);
  if (wave.rank() != 2) throw ShapeError("stft: expected (channels, samples), got " + shape_str(wave.shape()));
  const int64_t M = wave.dim(0), N = wave.dim(1);
  const int64_t T = stft_num_frames(N, fft_size, hop);
  auto tab = detail::dft_tables(fft_size);
  const int64_t F = tab->bins;

  ComplexSpectrogram<S> out;
  out.real = Tensor<S>(Shape{M, F, T});
  out.imag = Tensor<S>(Shape{M, F, T});
  out.fft_size = fft_size;
  out.hop = hop;
  out.orig_len = N;
#pragma omp parallel for schedule(static) collapse(2)
  for (int64_t m = 0; m < M; ++m)
    for (int64_t t = 0; t < T; ++t) {
      const int64_t start = t * hop;
      const int64_t nmax = std::min<int64_t>(fft_size, N - start);
      const S* x = wave.data() + m * N + start;
      for (int64_t k = 0; k < F; ++k) {
        const double* ct = tab->cosv.data() + k * fft_size;
        const double* st = tab->sinv.data() + k * fft_size;
        double re = 0.0, im = 0.0;
        for (int64_t n = 0; n < nmax; ++n) {
          const double xv = static_cast<double>(x[n]);
          re += xv * ct[n];
          im -= xv * st[n];
        }
        out.real(m, k, t) = static_cast<S>(re);
        out.imag(m, k, t) = static_cast<S>(im);
      }
    }
  return out;
}

template <class S>
ComplexSpectrogram<S> stft(const Waveform& wave, int fft_size, int hop) {
  const int64_t M = wave.channels(), N = wave.length();
  Tensor<S> t(Shape{M, N});
  for (int64_t m = 0; m < M; ++m)
    for (int64_t n = 0; n < N; ++n)
      t(m, n) = static_cast<S>(wave.samples[static_cast<size_t>(m)][static_cast<size_t>(n)]);
  return stft<S>(t, fft_size, hop);
}

// Synthesis back to (M, orig_len) by normalized overlap-add.
template <class S>
Tensor<S> istft(const ComplexSpectrogram<S>& spec) {
  check_stft_params(spec.fft_size, spec.hop);
  const int64_t M = spec.channels(), F = spec.bins(), T = spec.frames();
  const int fft_size = spec.fft_size, hop = spec.hop;
  if (F != fft_size / 2 + 1)
    throw ConfigError("istft: bins " + std::to_string(F) + " inconsistent with fft_size " +
                      std::to_string(fft_size));
  require_same_shape(spec.real, spec.imag, "istft real/imag");
  if (spec.orig_len < fft_size || spec.orig_len > (T - 1) * hop + fft_size)
    throw ConfigError("istft: orig_len " + std::to_string(spec.orig_len) +
                      " inconsistent with frame count " + std::to_string(T));
  auto tab = detail::dft_tables(fft_size);
  const auto cola = detail::cola_counts(T, fft_size, hop);
  const double inv_n = 1.0 / fft_size;

  Tensor<S> out(Shape{M, spec.orig_len});
#pragma omp parallel for schedule(static)
  for (int64_t m = 0; m < M; ++m) {
    std::vector<double> ola(cola.size(), 0.0);
    std::vector<double> frame(static_cast<size_t>(fft_size));
    for (int64_t t = 0; t < T; ++t) {
      for (int64_t n = 0; n < fft_size; ++n) {
        double acc = static_cast<double>(spec.real(m, 0, t));
        acc += (n % 2 == 0 ? 1.0 : -1.0) * static_cast<double>(spec.real(m, F - 1, t));
        for (int64_t k = 1; k < F - 1; ++k) {
          acc += 2.0 * (static_cast<double>(spec.real(m, k, t)) * tab->cosv[static_cast<size_t>(k * fft_size + n)] -
                        static_cast<double>(spec.imag(m, k, t)) * tab->sinv[static_cast<size_t>(k * fft_size + n)]);
        }
        frame[static_cast<size_t>(n)] = acc * inv_n;
      }
      for (int64_t n = 0; n < fft_size; ++n)
        ola[static_cast<size_t>(t * hop + n)] += frame[static_cast<size_t>(n)];
    }
    for (int64_t i = 0; i < spec.orig_len; ++i)
      out(m, i) = static_cast<S>(ola[static_cast<size_t>(i)] / cola[static_cast<size_t>(i)]);
  }
  return out;
}

// RI stacking: channels ordered [re(mic 0..M-1), im(mic 0..M-1)].
template <class S>
Tensor<S> stack_ri(const ComplexSpectrogram<S>& spec) {
  const int64_t M = spec.channels(), F = spec.bins(), T = spec.frames();
  Tensor<S> out(Shape{2 * M, F, T});
  std::copy(spec.real.data(), spec.real.data() + M * F * T, out.data());
  std::copy(spec.imag.data(), spec.imag.data() + M * F * T, out.data() + M * F * T);
  return out;
}

template <class S>
ComplexSpectrogram<S> unstack_ri(const Tensor<S>& t, int fft_size, int hop, int64_t orig_len) {
  if (t.rank() != 3 || t.dim(0) % 2 != 0)
    throw ShapeError("unstack_ri: expected (2M,F,T), got " + shape_str(t.shape()));
  const int64_t M = t.dim(0) / 2, F = t.dim(1), T = t.dim(2);
  ComplexSpectrogram<S> spec;
  spec.real = Tensor<S>(Shape{M, F, T});
  spec.imag = Tensor<S>(Shape{M, F, T});
  spec.fft_size = fft_size;
  spec.hop = hop;
  spec.orig_len = orig_len;
  std::copy(t.data(), t.data() + M * F * T, spec.real.data());
  std::copy(t.data() + M * F * T, t.data() + 2 * M * F * T, spec.imag.data());
  return spec;
}

// ---------------------------------------------------------------------------
// Differentiable single-channel transforms for the loss path. Waveforms are
// (N,) tensors, spectra are (2,F,T) with plane 0 = real, plane 1 = imag.

template <class S>
Var<S> stft_op(const Var<S>& wave, int fft_size, int hop) {
  check_stft_params(fft_size, hop);
  const Tensor<S>& xv = wave.value();
  if (xv.rank() != 1) throw ShapeError("stft_op: expected (samples,), got " + shape_str(xv.shape()));
  const int64_t N = xv.dim(0);
  const int64_t T = stft_num_frames(N, fft_size, hop);
  auto tab = detail::dft_tables(fft_size);
  const int64_t F = tab->bins;

  Tensor<S> out(Shape{2, F, T});
#pragma omp parallel for schedule(static)
  for (int64_t t = 0; t < T; ++t) {
    const int64_t start = t * hop;
    const int64_t nmax = std::min<int64_t>(fft_size, N - start);
    const S* x = xv.data() + start;
    for (int64_t k = 0; k < F; ++k) {
      const double* ct = tab->cosv.data() + k * fft_size;
      const double* st = tab->sinv.data() + k * fft_size;
      double re = 0.0, im = 0.0;
      for (int64_t n = 0; n < nmax; ++n) {
        const double v = static_cast<double>(x[n]);
        re += v * ct[n];
        im -= v * st[n];
      }
      out(0, k, t) = static_cast<S>(re);
      out(1, k, t) = static_cast<S>(im);
    }
  }

  return Var<S>::op(std::move(out), {wave}, [N, T, F, fft_size, hop, tab](Node<S>& n_) {
    const Tensor<S>& g = n_.grad;
    Tensor<S>& gx = n_.parents[0]->ensure_grad();
    // frames overlap, so accumulate serially per frame
    for (int64_t t = 0; t < T; ++t) {
      const int64_t start = t * hop;
      const int64_t nmax = std::min<int64_t>(fft_size, N - start);
#pragma omp parallel for schedule(static)
      for (int64_t n = 0; n < nmax; ++n) {
        double acc = 0.0;
        for (int64_t k = 0; k < F; ++k) {
          acc += static_cast<double>(g(0, k, t)) * tab->cosv[static_cast<size_t>(k * fft_size + n)] -
                 static_cast<double>(g(1, k, t)) * tab->sinv[static_cast<size_t>(k * fft_size + n)];
        }
        gx[start + n] += static_cast<S>(acc);
      }
    }
  });
}

template <class S>
Var<S> istft_op(const Var<S>& spec, int fft_size, int hop, int64_t orig_len) {
  check_stft_params(fft_size, hop);
  const Tensor<S>& sv = spec.value();
  auto tab = detail::dft_tables(fft_size);
  const int64_t F = tab->bins;
  if (sv.rank() != 3 || sv.dim(0) != 2 || sv.dim(1) != F)
    throw ShapeError("istft_op: expected (2," + std::to_string(F) + ",T), got " + shape_str(sv.shape()));
  const int64_t T = sv.dim(2);
  if (orig_len < fft_size || orig_len > (T - 1) * hop + fft_size)
    throw ConfigError("istft_op: orig_len " + std::to_string(orig_len) +
                      " inconsistent with " + std::to_string(T) + " frames");
  auto cola = std::make_shared<std::vector<double>>(detail::cola_counts(T, fft_size, hop));
  const double inv_n = 1.0 / fft_size;

  std::vector<double> ola(cola->size(), 0.0);
  for (int64_t t = 0; t < T; ++t) {
#pragma omp parallel for schedule(static)
    for (int64_t n = 0; n < fft_size; ++n) {
      double acc = static_cast<double>(sv(0, 0, t));
      acc += (n % 2 == 0 ? 1.0 : -1.0) * static_cast<double>(sv(0, F - 1, t));
      for (int64_t k = 1; k < F - 1; ++k)
        acc += 2.0 * (static_cast<double>(sv(0, k, t)) * tab->cosv[static_cast<size_t>(k * fft_size + n)] -
                      static_cast<double>(sv(1, k, t)) * tab->sinv[static_cast<size_t>(k * fft_size + n)]);
      ola[static_cast<size_t>(t * hop + n)] += acc * inv_n;
    }
  }
  Tensor<S> out(Shape{orig_len});
  for (int64_t i = 0; i < orig_len; ++i)
    out[i] = static_cast<S>(ola[static_cast<size_t>(i)] / (*cola)[static_cast<size_t>(i)]);

  return Var<S>::op(std::move(out), {spec}, [T, F, fft_size, hop, orig_len, tab, cola](Node<S>& n_) {
    const Tensor<S>& g = n_.grad;
    Tensor<S>& gs = n_.parents[0]->ensure_grad();
    const double inv_n = 1.0 / fft_size;
    // normalized upstream gradient over the padded buffer
    std::vector<double> gp(cola->size(), 0.0);
    for (int64_t i = 0; i < orig_len; ++i)
      gp[static_cast<size_t>(i)] = static_cast<double>(g[i]) / (*cola)[static_cast<size_t>(i)];
#pragma omp parallel for schedule(static)
    for (int64_t t = 0; t < T; ++t) {
      const double* gf = gp.data() + t * hop;
      for (int64_t k = 0; k < F; ++k) {
        const double wk = (k == 0 || k == F - 1) ? 1.0 : 2.0;
        const double* ct = tab->cosv.data() + k * fft_size;
        const double* st = tab->sinv.data() + k * fft_size;
        double ar = 0.0, ai = 0.0;
        for (int64_t n = 0; n < fft_size; ++n) {
          ar += gf[n] * ct[n];
          ai -= gf[n] * st[n];
        }
        gs(0, k, t) += static_cast<S>(ar * wk * inv_n);
        if (k != 0 && k != F - 1) gs(1, k, t) += static_cast<S>(ai * 2.0 * inv_n);
      }
    }
  });
}

// Complex mask application: S_hat = M * Y elementwise over (F,T), both
// encoded as (2,F,T) real/imag planes. Bilinear in (mask, spectrum).
template <class S>
Var<S> apply_mask(const Var<S>& mask, const Var<S>& ref) {
  const Tensor<S>& mv = mask.value();
  const Tensor<S>& yv = ref.value();
  require_same_shape(mv, yv, "apply_mask");
  if (mv.rank() != 3 || mv.dim(0) != 2)
    throw ShapeError("apply_mask: expected (2,F,T), got " + shape_str(mv.shape()));
  const int64_t P = mv.dim(1) * mv.dim(2);

  Tensor<S> out(mv.shape());
  const S* mr = mv.data();
  const S* mi = mv.data() + P;
  const S* yr = yv.data();
  const S* yi = yv.data() + P;
  S* or_ = out.data();
  S* oi_ = out.data() + P;
  for (int64_t p = 0; p < P; ++p) {
    or_[p] = mr[p] * yr[p] - mi[p] * yi[p];
    oi_[p] = mr[p] * yi[p] + mi[p] * yr[p];
  }

  return Var<S>::op(std::move(out), {mask, ref}, [P](Node<S>& n) {
    const S* gr = n.grad.data();
    const S* gi = n.grad.data() + P;
    const Tensor<S>& mv = n.parents[0]->value;
    const Tensor<S>& yv = n.parents[1]->value;
    if (n.parents[0]->requires_grad) {
      Tensor<S>& gm = n.parents[0]->ensure_grad();
      const S* yr = yv.data();
      const S* yi = yv.data() + P;
      for (int64_t p = 0; p < P; ++p) {
        gm[p] += gr[p] * yr[p] + gi[p] * yi[p];
        gm[P + p] += -gr[p] * yi[p] + gi[p] * yr[p];
      }
    }
    if (n.parents[1]->requires_grad) {
      Tensor<S>& gy = n.parents[1]->ensure_grad();
      const S* mr = mv.data();
      const S* mi = mv.data() + P;
      for (int64_t p = 0; p < P; ++p) {
        gy[p] += gr[p] * mr[p] + gi[p] * mi[p];
        gy[P + p] += -gr[p] * mi[p] + gi[p] * mr[p];
      }
    }
  });
}

template <class S>
Tensor<S> waveform_channel(const Waveform& w, int64_t channel) {
  Tensor<S> t(Shape{w.length()});
  for (int64_t i = 0; i < w.length(); ++i)
    t[i] = static_cast<S>(w.samples[static_cast<size_t>(channel)][static_cast<size_t>(i)]);
  return t;
}

template <class S>
Tensor<S> waveform_tensor(const Waveform& w) {
  Tensor<S> t(Shape{w.channels(), w.length()});
  for (int64_t m = 0; m < w.channels(); ++m)
    for (int64_t i = 0; i < w.length(); ++i)
      t(m, i) = static_cast<S>(w.samples[static_cast<size_t>(m)][static_cast<size_t>(i)]);
  return t;
}

}  // namespace deftan
