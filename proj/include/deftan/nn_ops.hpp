#pragma once

#include <algorithm>
#include <cmath>

#include "deftan/autograd.hpp"
#include "deftan/rng.hpp"

// Dense NN kernels with hand-derived adjoints. Parallel loops only ever
// write disjoint output elements and accumulate in a fixed per-element
// order, so results are bit-identical for any thread count.

namespace deftan {

// -----------------------------------------------------------------------
// conv2d: zero "same" padding, odd kernels. x (Ci,F,T), w (Co,Ci,kF,kT),
// b (Co) -> (Co,F,T).
template <class S>
Var<S> conv2d(const Var<S>& x, const Var<S>& w, const Var<S>& b) {
  const Tensor<S>& xv = x.value();
  const Tensor<S>& wv = w.value();
  const Tensor<S>& bv = b.value();
  if (xv.rank() != 3) throw ShapeError("conv2d: input must be rank 3, got " + shape_str(xv.shape()));
  if (wv.rank() != 4) throw ShapeError("conv2d: weight must be rank 4, got " + shape_str(wv.shape()));
  const int64_t Ci = xv.dim(0), F = xv.dim(1), T = xv.dim(2);
  const int64_t Co = wv.dim(0), kF = wv.dim(2), kT = wv.dim(3);
  if (wv.dim(1) != Ci)
    throw ShapeError("conv2d: weight in-channel axis " + std::to_string(wv.dim(1)) +
                     " != input channel axis " + std::to_string(Ci));
  if (kF % 2 == 0 || kT % 2 == 0)
    throw ParamError("conv2d: kernel dims must be odd, got " +
                     std::to_string(kF) + "x" + std::to_string(kT));
  if (bv.rank() != 1 || bv.dim(0) != Co)
    throw ShapeError("conv2d: bias axis 0 must equal out channels " + std::to_string(Co));
  const int64_t pF = kF / 2, pT = kT / 2;

  Tensor<S> out(Shape{Co, F, T});
#pragma omp parallel for schedule(static)
  for (int64_t co = 0; co < Co; ++co) {
    S* o = out.data() + co * F * T;
    for (int64_t i = 0; i < F * T; ++i) o[i] = bv[co];
    for (int64_t ci = 0; ci < Ci; ++ci) {
      const S* xin = xv.data() + ci * F * T;
      for (int64_t kf = 0; kf < kF; ++kf) {
        const int64_t df = kf - pF;
        const int64_t f0 = std::max<int64_t>(0, -df), f1 = std::min(F, F - df);
        for (int64_t kt = 0; kt < kT; ++kt) {
          const int64_t dt = kt - pT;
          const int64_t t0 = std::max<int64_t>(0, -dt), t1 = std::min(T, T - dt);
          const S wk = wv(co, ci, kf, kt);
          for (int64_t f = f0; f < f1; ++f) {
            S* orow = o + f * T;
            const S* xrow = xin + (f + df) * T + dt;
            for (int64_t t = t0; t < t1; ++t) orow[t] += wk * xrow[t];
          }
        }
      }
    }
  }

  return Var<S>::op(std::move(out), {x, w, b},
                    [Ci, Co, F, T, kF, kT, pF, pT](Node<S>& n) {
    const Tensor<S>& g = n.grad;
    const Tensor<S>& xv = n.parents[0]->value;
    const Tensor<S>& wv = n.parents[1]->value;
    if (n.parents[0]->requires_grad) {
      Tensor<S>& gx = n.parents[0]->ensure_grad();
#pragma omp parallel for schedule(static)
      for (int64_t ci = 0; ci < Ci; ++ci) {
        S* gxin = gx.data() + ci * F * T;
        for (int64_t co = 0; co < Co; ++co) {
          const S* go = g.data() + co * F * T;
          for (int64_t kf = 0; kf < kF; ++kf) {
            const int64_t df = kf - pF;  // out row f reads in row f+df
            const int64_t f0 = std::max<int64_t>(0, df), f1 = std::min(F, F + df);
            for (int64_t kt = 0; kt < kT; ++kt) {
              const int64_t dt = kt - pT;
              const int64_t t0 = std::max<int64_t>(0, dt), t1 = std::min(T, T + dt);
              const S wk = wv(co, ci, kf, kt);
              for (int64_t f = f0; f < f1; ++f) {
                S* gxrow = gxin + f * T;
                const S* grow = go + (f - df) * T - dt;
                for (int64_t t = t0; t < t1; ++t) gxrow[t] += wk * grow[t];
              }
            }
          }
        }
      }
    }
    if (n.parents[1]->requires_grad) {
      Tensor<S>& gw = n.parents[1]->ensure_grad();
#pragma omp parallel for schedule(static)
      for (int64_t co = 0; co < Co; ++co) {
        const S* go = g.data() + co * F * T;
        for (int64_t ci = 0; ci < Ci; ++ci) {
          const S* xin = xv.data() + ci * F * T;
          for (int64_t kf = 0; kf < kF; ++kf) {
            const int64_t df = kf - pF;
            const int64_t f0 = std::max<int64_t>(0, -df), f1 = std::min(F, F - df);
            for (int64_t kt = 0; kt < kT; ++kt) {
              const int64_t dt = kt - pT;
              const int64_t t0 = std::max<int64_t>(0, -dt), t1 = std::min(T, T - dt);
              S acc = S(0);
              for (int64_t f = f0; f < f1; ++f) {
                const S* grow = go + f * T;
                const S* xrow = xin + (f + df) * T + dt;
                for (int64_t t = t0; t < t1; ++t) acc += grow[t] * xrow[t];
              }
              gw(co, ci, kf, kt) += acc;
            }
          }
        }
      }
    }
    if (n.parents[2]->requires_grad) {
      Tensor<S>& gb = n.parents[2]->ensure_grad();
#pragma omp parallel for schedule(static)
      for (int64_t co = 0; co < Co; ++co) {
        const S* go = g.data() + co * F * T;
        S acc = S(0);
        for (int64_t i = 0; i < F * T; ++i) acc += go[i];
        gb[co] += acc;
      }
    }
  });
}

// -----------------------------------------------------------------------
// Depthwise dilated 1D convolution over the last axis, zero "same"
// padding, no bias. x (B,C,T) or (C,T), w (C,k). Channel c of the output
// depends only on channel c of the input; receptive field 1 + (k-1)*dilation.
template <class S>
Var<S> dd_conv1d(const Var<S>& x, const Var<S>& w, int64_t dilation) {
  if (dilation < 1)
    throw ParamError("dd_conv1d: dilation must be >= 1, got " + std::to_string(dilation));
  const Tensor<S>& xv = x.value();
  const Tensor<S>& wv = w.value();
  const bool batched = xv.rank() == 3;
  if (!batched && xv.rank() != 2)
    throw ShapeError("dd_conv1d: input must be rank 2 or 3, got " + shape_str(xv.shape()));
  const int64_t B = batched ? xv.dim(0) : 1;
  const int64_t C = batched ? xv.dim(1) : xv.dim(0);
  const int64_t T = batched ? xv.dim(2) : xv.dim(1);
  if (wv.rank() != 2 || wv.dim(0) != C)
    throw ShapeError("dd_conv1d: weight must be (" + std::to_string(C) + ",k), got " + shape_str(wv.shape()));
  const int64_t k = wv.dim(1);
  if (k % 2 == 0) throw ParamError("dd_conv1d: kernel size must be odd, got " + std::to_string(k));
  const int64_t half = k / 2;

  Tensor<S> out(xv.shape());
#pragma omp parallel for schedule(static)
  for (int64_t bc = 0; bc < B * C; ++bc) {
    const int64_t c = bc % C;
    const S* xin = xv.data() + bc * T;
    S* o = out.data() + bc * T;
    for (int64_t t = 0; t < T; ++t) o[t] = S(0);
    for (int64_t kk = 0; kk < k; ++kk) {
      const int64_t dt = (kk - half) * dilation;
      const int64_t t0 = std::max<int64_t>(0, -dt), t1 = std::min(T, T - dt);
      const S wk = wv(c, kk);
      for (int64_t t = t0; t < t1; ++t) o[t] += wk * xin[t + dt];
    }
  }

  return Var<S>::op(std::move(out), {x, w}, [B, C, T, k, half, dilation](Node<S>& n) {
    const Tensor<S>& g = n.grad;
    const Tensor<S>& xv = n.parents[0]->value;
    const Tensor<S>& wv = n.parents[1]->value;
    if (n.parents[0]->requires_grad) {
      Tensor<S>& gx = n.parents[0]->ensure_grad();
#pragma omp parallel for schedule(static)
      for (int64_t bc = 0; bc < B * C; ++bc) {
        const int64_t c = bc % C;
        const S* go = g.data() + bc * T;
        S* gxr = gx.data() + bc * T;
        for (int64_t kk = 0; kk < k; ++kk) {
          const int64_t dt = (kk - half) * dilation;
          const int64_t t0 = std::max<int64_t>(0, dt), t1 = std::min(T, T + dt);
          const S wk = wv(c, kk);
          for (int64_t t = t0; t < t1; ++t) gxr[t] += wk * go[t - dt];
        }
      }
    }
    if (n.parents[1]->requires_grad) {
      Tensor<S>& gw = n.parents[1]->ensure_grad();
#pragma omp parallel for schedule(static)
      for (int64_t c = 0; c < C; ++c) {
        for (int64_t kk = 0; kk < k; ++kk) {
          const int64_t dt = (kk - half) * dilation;
          const int64_t t0 = std::max<int64_t>(0, -dt), t1 = std::min(T, T - dt);
          S acc = S(0);
          for (int64_t b = 0; b < B; ++b) {
            const S* go = g.data() + (b * C + c) * T;
            const S* xin = xv.data() + (b * C + c) * T + dt;
            for (int64_t t = t0; t < t1; ++t) acc += go[t] * xin[t];
          }
          gw(c, kk) += acc;
        }
      }
    }
  });
}

// -----------------------------------------------------------------------
// Layer norm over an axis set. Population variance, eps inside the sqrt.
// gamma/beta are shaped like the normalized slice.
namespace detail {

struct LnLayout {
  int64_t n_pos = 1, n_slice = 1;
  std::vector<int64_t> pos_offsets;    // base data offset per slice position
  std::vector<int64_t> slice_offsets;  // data offset per in-slice element
};

inline LnLayout ln_layout(const Shape& shape, const std::vector<int>& axes) {
  const int r = static_cast<int>(shape.size());
  std::vector<bool> norm(static_cast<size_t>(r), false);
  for (int a : axes) {
    if (a < 0 || a >= r) throw ParamError("layer_norm: axis out of range");
    if (norm[static_cast<size_t>(a)]) throw ParamError("layer_norm: duplicate axis");
    norm[static_cast<size_t>(a)] = true;
  }
  auto strides = row_major_strides(shape);
  LnLayout lo;
  lo.pos_offsets = {0};
  lo.slice_offsets = {0};
  for (int i = 0; i < r; ++i) {
    const int64_t d = shape[static_cast<size_t>(i)];
    const int64_t st = strides[static_cast<size_t>(i)];
    auto& offs = norm[static_cast<size_t>(i)] ? lo.slice_offsets : lo.pos_offsets;
    std::vector<int64_t> next;
    next.reserve(offs.size() * static_cast<size_t>(d));
    for (int64_t base : offs)
      for (int64_t j = 0; j < d; ++j) next.push_back(base + j * st);
    offs = std::move(next);
    (norm[static_cast<size_t>(i)] ? lo.n_slice : lo.n_pos) *= d;
  }
  return lo;
}

}  // namespace detail

template <class S>
Var<S> layer_norm(const Var<S>& x, const std::vector<int>& axes,
                  const Var<S>& gamma, const Var<S>& beta, S eps = S(1e-5)) {
  const Tensor<S>& xv = x.value();
  if (axes.empty()) throw ParamError("layer_norm: empty axis set");
  auto lo = std::make_shared<detail::LnLayout>(detail::ln_layout(xv.shape(), axes));
  if (lo->n_slice == 0) throw ParamError("layer_norm: zero-size normalized slice");
  if (gamma.numel() != lo->n_slice || beta.numel() != lo->n_slice)
    throw ShapeError("layer_norm: gamma/beta size " + std::to_string(gamma.numel()) +
                     " != slice size " + std::to_string(lo->n_slice));

  const int64_t P = lo->n_pos, L = lo->n_slice;
  auto mu = std::make_shared<std::vector<S>>(static_cast<size_t>(P));
  auto istd = std::make_shared<std::vector<S>>(static_cast<size_t>(P));
  Tensor<S> out(xv.shape());
  const Tensor<S>& gv = gamma.value();
  const Tensor<S>& bv = beta.value();
#pragma omp parallel for schedule(static)
  for (int64_t p = 0; p < P; ++p) {
    const int64_t base = lo->pos_offsets[static_cast<size_t>(p)];
    S m = S(0);
    for (int64_t j = 0; j < L; ++j) m += xv[base + lo->slice_offsets[static_cast<size_t>(j)]];
    m /= static_cast<S>(L);
    S var = S(0);
    for (int64_t j = 0; j < L; ++j) {
      const S d = xv[base + lo->slice_offsets[static_cast<size_t>(j)]] - m;
      var += d * d;
    }
    var /= static_cast<S>(L);
    const S is = S(1) / std::sqrt(var + eps);
    (*mu)[static_cast<size_t>(p)] = m;
    (*istd)[static_cast<size_t>(p)] = is;
    for (int64_t j = 0; j < L; ++j) {
      const int64_t o = base + lo->slice_offsets[static_cast<size_t>(j)];
      out[o] = (xv[o] - m) * is * gv[j] + bv[j];
    }
  }

  return Var<S>::op(std::move(out), {x, gamma, beta}, [lo, mu, istd](Node<S>& n) {
    const int64_t P = lo->n_pos, L = lo->n_slice;
    const Tensor<S>& g = n.grad;
    const Tensor<S>& xv = n.parents[0]->value;
    const Tensor<S>& gv = n.parents[1]->value;
    if (n.parents[0]->requires_grad) {
      Tensor<S>& gx = n.parents[0]->ensure_grad();
#pragma omp parallel for schedule(static)
      for (int64_t p = 0; p < P; ++p) {
        const int64_t base = lo->pos_offsets[static_cast<size_t>(p)];
        const S m = (*mu)[static_cast<size_t>(p)], is = (*istd)[static_cast<size_t>(p)];
        S sum_dy = S(0), sum_dy_xh = S(0);
        for (int64_t j = 0; j < L; ++j) {
          const int64_t o = base + lo->slice_offsets[static_cast<size_t>(j)];
          const S dy = g[o] * gv[j];
          sum_dy += dy;
          sum_dy_xh += dy * (xv[o] - m) * is;
        }
        sum_dy /= static_cast<S>(L);
        sum_dy_xh /= static_cast<S>(L);
        for (int64_t j = 0; j < L; ++j) {
          const int64_t o = base + lo->slice_offsets[static_cast<size_t>(j)];
          const S dy = g[o] * gv[j];
          const S xh = (xv[o] - m) * is;
          gx[o] += is * (dy - sum_dy - xh * sum_dy_xh);
        }
      }
    }
    const bool ng = n.parents[1]->requires_grad, nb = n.parents[2]->requires_grad;
    if (ng || nb) {
      Tensor<S>* gg = ng ? &n.parents[1]->ensure_grad() : nullptr;
      Tensor<S>* gb = nb ? &n.parents[2]->ensure_grad() : nullptr;
#pragma omp parallel for schedule(static)
      for (int64_t j = 0; j < L; ++j) {
        S ag = S(0), ab = S(0);
        for (int64_t p = 0; p < P; ++p) {
          const int64_t o = lo->pos_offsets[static_cast<size_t>(p)] +
                            lo->slice_offsets[static_cast<size_t>(j)];
          const S m = (*mu)[static_cast<size_t>(p)], is = (*istd)[static_cast<size_t>(p)];
          ag += g[o] * (xv[o] - m) * is;
          ab += g[o];
        }
        if (gg) (*gg)[j] += ag;
        if (gb) (*gb)[j] += ab;
      }
    }
  });
}

// -----------------------------------------------------------------------
// Affine map on the last axis. x (..., Ein), w (Eout, Ein), b (Eout).
template <class S>
Var<S> linear(const Var<S>& x, const Var<S>& w, const Var<S>& b) {
  const Tensor<S>& xv = x.value();
  const Tensor<S>& wv = w.value();
  const Tensor<S>& bv = b.value();
  if (wv.rank() != 2) throw ShapeError("linear: weight must be rank 2, got " + shape_str(wv.shape()));
  const int64_t Ein = wv.dim(1), Eout = wv.dim(0);
  if (xv.rank() < 1 || xv.dim(xv.rank() - 1) != Ein)
    throw ShapeError("linear: input last axis " + shape_str(xv.shape()) +
                     " != weight in axis " + std::to_string(Ein));
  if (bv.rank() != 1 || bv.dim(0) != Eout)
    throw ShapeError("linear: bias must be (" + std::to_string(Eout) + ")");
  const int64_t R = xv.numel() / Ein;
  Shape os = xv.shape();
  os.back() = Eout;

  Tensor<S> out(os);
#pragma omp parallel for schedule(static)
  for (int64_t r = 0; r < R; ++r) {
    const S* xr = xv.data() + r * Ein;
    S* o = out.data() + r * Eout;
    for (int64_t eo = 0; eo < Eout; ++eo) {
      const S* wr = wv.data() + eo * Ein;
      S acc = bv[eo];
      for (int64_t ei = 0; ei < Ein; ++ei) acc += wr[ei] * xr[ei];
      o[eo] = acc;
    }
  }

  return Var<S>::op(std::move(out), {x, w, b}, [R, Ein, Eout](Node<S>& n) {
    const Tensor<S>& g = n.grad;
    const Tensor<S>& xv = n.parents[0]->value;
    const Tensor<S>& wv = n.parents[1]->value;
    if (n.parents[0]->requires_grad) {
      Tensor<S>& gx = n.parents[0]->ensure_grad();
#pragma omp parallel for schedule(static)
      for (int64_t r = 0; r < R; ++r) {
        const S* gr = g.data() + r * Eout;
        S* gxr = gx.data() + r * Ein;
        for (int64_t eo = 0; eo < Eout; ++eo) {
          const S ge = gr[eo];
          const S* wr = wv.data() + eo * Ein;
          for (int64_t ei = 0; ei < Ein; ++ei) gxr[ei] += ge * wr[ei];
        }
      }
    }
    if (n.parents[1]->requires_grad) {
      Tensor<S>& gw = n.parents[1]->ensure_grad();
#pragma omp parallel for schedule(static)
      for (int64_t eo = 0; eo < Eout; ++eo) {
        S* gwr = gw.data() + eo * Ein;
        for (int64_t r = 0; r < R; ++r) {
          const S ge = g[r * Eout + eo];
          const S* xr = xv.data() + r * Ein;
          for (int64_t ei = 0; ei < Ein; ++ei) gwr[ei] += ge * xr[ei];
        }
      }
    }
    if (n.parents[2]->requires_grad) {
      Tensor<S>& gb = n.parents[2]->ensure_grad();
#pragma omp parallel for schedule(static)
      for (int64_t eo = 0; eo < Eout; ++eo) {
        S acc = S(0);
        for (int64_t r = 0; r < R; ++r) acc += g[r * Eout + eo];
        gb[eo] += acc;
      }
    }
  });
}

// -----------------------------------------------------------------------
// PReLU with one learned slope per channel along `axis`.
template <class S>
Var<S> prelu(const Var<S>& x, const Var<S>& alpha, int axis) {
  const Tensor<S>& xv = x.value();
  if (axis < 0 || axis >= xv.rank()) throw ParamError("prelu: bad channel axis");
  const int64_t C = xv.dim(axis);
  if (alpha.numel() != C)
    throw ShapeError("prelu: alpha size " + std::to_string(alpha.numel()) +
                     " != channels " + std::to_string(C));
  int64_t inner = 1;
  for (int i = axis + 1; i < xv.rank(); ++i) inner *= xv.dim(i);
  const Tensor<S>& av = alpha.value();

  Tensor<S> out(xv.shape());
  const int64_t N = xv.numel();
  for (int64_t i = 0; i < N; ++i) {
    const S v = xv[i];
    out[i] = v >= S(0) ? v : av[(i / inner) % C] * v;
  }

  return Var<S>::op(std::move(out), {x, alpha}, [C, inner](Node<S>& n) {
    const Tensor<S>& g = n.grad;
    const Tensor<S>& xv = n.parents[0]->value;
    const Tensor<S>& av = n.parents[1]->value;
    if (n.parents[0]->requires_grad) {
      Tensor<S>& gx = n.parents[0]->ensure_grad();
      for (int64_t i = 0; i < g.numel(); ++i) {
        const S v = xv[i];
        gx[i] += g[i] * (v >= S(0) ? S(1) : av[(i / inner) % C]);
      }
    }
    if (n.parents[1]->requires_grad) {
      Tensor<S>& ga = n.parents[1]->ensure_grad();
      const int64_t N = g.numel();
#pragma omp parallel for schedule(static)
      for (int64_t c = 0; c < C; ++c) {
        S acc = S(0);
        for (int64_t i = c * inner; i < N; i += C * inner)
          for (int64_t j = 0; j < inner; ++j)
            if (xv[i + j] < S(0)) acc += g[i + j] * xv[i + j];
        ga[c] += acc;
      }
    }
  });
}

// -----------------------------------------------------------------------
// Exact GELU: x * Phi(x) with the standard normal CDF.
template <class S>
Var<S> gelu(const Var<S>& x) {
  constexpr double kInvSqrt2 = 0.7071067811865476;
  Tensor<S> out(x.shape());
  const Tensor<S>& xv = x.value();
  for (int64_t i = 0; i < out.numel(); ++i) {
    const double v = static_cast<double>(xv[i]);
    out[i] = static_cast<S>(v * 0.5 * (1.0 + std::erf(v * kInvSqrt2)));
  }
  return Var<S>::op(std::move(out), {x}, [](Node<S>& n) {
    constexpr double kInvSqrt2 = 0.7071067811865476;
    constexpr double kInvSqrt2Pi = 0.3989422804014327;
    const Tensor<S>& xv = n.parents[0]->value;
    Tensor<S>& gx = n.parents[0]->ensure_grad();
    for (int64_t i = 0; i < n.grad.numel(); ++i) {
      const double v = static_cast<double>(xv[i]);
      const double phi = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
      const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
      gx[i] += n.grad[i] * static_cast<S>(phi + v * pdf);
    }
  });
}

template <class S>
Var<S> relu(const Var<S>& x) {
  Tensor<S> out(x.shape());
  const Tensor<S>& xv = x.value();
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::max(S(0), xv[i]);
  return Var<S>::op(std::move(out), {x}, [](Node<S>& n) {
    const Tensor<S>& xv = n.parents[0]->value;
    Tensor<S>& gx = n.parents[0]->ensure_grad();
    for (int64_t i = 0; i < n.grad.numel(); ++i)
      if (xv[i] > S(0)) gx[i] += n.grad[i];
  });
}

// -----------------------------------------------------------------------
// Inverted dropout; identity in eval mode. The Bernoulli mask comes from a
// counter hash of (seed, index), so a fixed seed fixes the mask.
template <class S>
Var<S> dropout(const Var<S>& x, double rate, bool training, uint64_t seed) {
  if (rate < 0.0 || rate >= 1.0)
    throw ParamError("dropout: rate must be in [0,1), got " + std::to_string(rate));
  if (!training || rate == 0.0) return x;
  const S inv_keep = static_cast<S>(1.0 / (1.0 - rate));
  auto mask = std::make_shared<Tensor<S>>(x.shape());
  Tensor<S> out(x.shape());
  const Tensor<S>& xv = x.value();
  for (int64_t i = 0; i < out.numel(); ++i) {
    const double u = bits_to_unit_double(hash_combine(seed, static_cast<uint64_t>(i)));
    const S m = u >= rate ? inv_keep : S(0);
    (*mask)[i] = m;
    out[i] = xv[i] * m;
  }
  return Var<S>::op(std::move(out), {x}, [mask](Node<S>& n) {
    Tensor<S>& gx = n.parents[0]->ensure_grad();
    for (int64_t i = 0; i < n.grad.numel(); ++i) gx[i] += n.grad[i] * (*mask)[i];
  });
}

// -----------------------------------------------------------------------
// Scaled dot-product attention core on (B,H,S,D) tensors. Softmax rows are
// never materialized across the graph: forward streams one query row at a
// time and backward recomputes the row (and its dropout mask) from the
// stored seed. Scale is 1/sqrt(D).
template <class S>
Var<S> attention_core(const Var<S>& q, const Var<S>& k, const Var<S>& v,
                      double drop_rate, bool training, uint64_t seed) {
  const Tensor<S>& qv = q.value();
  if (qv.rank() != 4) throw ShapeError("attention: q/k/v must be (B,H,S,D)");
  require_same_shape(qv, k.value(), "attention q/k");
  require_same_shape(qv, v.value(), "attention q/v");
  if (drop_rate < 0.0 || drop_rate >= 1.0) throw ParamError("attention: bad dropout rate");
  const int64_t B = qv.dim(0), H = qv.dim(1), Sq = qv.dim(2), D = qv.dim(3);
  const S scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(D)));
  const bool drop = training && drop_rate > 0.0;
  const S inv_keep = static_cast<S>(drop ? 1.0 / (1.0 - drop_rate) : 1.0);

  const Tensor<S>& kv = k.value();
  const Tensor<S>& vv = v.value();
  Tensor<S> out(qv.shape());
#pragma omp parallel for schedule(static)
  for (int64_t bh = 0; bh < B * H; ++bh) {
    const S* qs = qv.data() + bh * Sq * D;
    const S* ks = kv.data() + bh * Sq * D;
    const S* vs = vv.data() + bh * Sq * D;
    S* os = out.data() + bh * Sq * D;
    std::vector<S> p(static_cast<size_t>(Sq));
    for (int64_t i = 0; i < Sq; ++i) {
      const S* qi = qs + i * D;
      S mx = std::numeric_limits<S>::lowest();
      for (int64_t j = 0; j < Sq; ++j) {
        const S* kj = ks + j * D;
        S acc = S(0);
        for (int64_t d = 0; d < D; ++d) acc += qi[d] * kj[d];
        acc *= scale;
        p[static_cast<size_t>(j)] = acc;
        mx = std::max(mx, acc);
      }
      S denom = S(0);
      for (int64_t j = 0; j < Sq; ++j) {
        const S e = std::exp(p[static_cast<size_t>(j)] - mx);
        p[static_cast<size_t>(j)] = e;
        denom += e;
      }
      const S inv = S(1) / denom;
      S* oi = os + i * D;
      for (int64_t d = 0; d < D; ++d) oi[d] = S(0);
      const uint64_t row_key = (static_cast<uint64_t>(bh) * static_cast<uint64_t>(Sq) +
                                static_cast<uint64_t>(i)) * static_cast<uint64_t>(Sq);
      for (int64_t j = 0; j < Sq; ++j) {
        S pj = p[static_cast<size_t>(j)] * inv;
        if (drop) {
          const double u = bits_to_unit_double(hash_combine(seed, row_key + static_cast<uint64_t>(j)));
          pj = u >= drop_rate ? pj * inv_keep : S(0);
        }
        if (pj != S(0)) {
          const S* vj = vs + j * D;
          for (int64_t d = 0; d < D; ++d) oi[d] += pj * vj[d];
        }
      }
    }
  }

  return Var<S>::op(
      std::move(out), {q, k, v},
      [B, H, Sq, D, scale, drop, drop_rate, inv_keep, seed](Node<S>& n) {
        const Tensor<S>& g = n.grad;
        const Tensor<S>& qv = n.parents[0]->value;
        const Tensor<S>& kv = n.parents[1]->value;
        const Tensor<S>& vv = n.parents[2]->value;
        Tensor<S>& gq = n.parents[0]->ensure_grad();
        Tensor<S>& gk = n.parents[1]->ensure_grad();
        Tensor<S>& gv = n.parents[2]->ensure_grad();
#pragma omp parallel for schedule(static)
        for (int64_t bh = 0; bh < B * H; ++bh) {
          const int64_t base = bh * Sq * D;
          const S* qs = qv.data() + base;
          const S* ks = kv.data() + base;
          const S* vs = vv.data() + base;
          const S* gs = g.data() + base;
          S* gqs = gq.data() + base;
          S* gks = gk.data() + base;
          S* gvs = gv.data() + base;
          std::vector<S> u(static_cast<size_t>(Sq)), du(static_cast<size_t>(Sq)),
              m(static_cast<size_t>(Sq));
          for (int64_t i = 0; i < Sq; ++i) {
            const S* qi = qs + i * D;
            const S* gi = gs + i * D;
            // recompute softmax row u and dropout mask m
            S mx = std::numeric_limits<S>::lowest();
            for (int64_t j = 0; j < Sq; ++j) {
              const S* kj = ks + j * D;
              S acc = S(0);
              for (int64_t d = 0; d < D; ++d) acc += qi[d] * kj[d];
              acc *= scale;
              u[static_cast<size_t>(j)] = acc;
              mx = std::max(mx, acc);
            }
            S denom = S(0);
            for (int64_t j = 0; j < Sq; ++j) {
              const S e = std::exp(u[static_cast<size_t>(j)] - mx);
              u[static_cast<size_t>(j)] = e;
              denom += e;
            }
            const S inv = S(1) / denom;
            const uint64_t row_key =
                (static_cast<uint64_t>(bh) * static_cast<uint64_t>(Sq) +
                 static_cast<uint64_t>(i)) * static_cast<uint64_t>(Sq);
            for (int64_t j = 0; j < Sq; ++j) {
              u[static_cast<size_t>(j)] *= inv;
              S mk = S(1);
              if (drop) {
                const double uu = bits_to_unit_double(
                    hash_combine(seed, row_key + static_cast<uint64_t>(j)));
                mk = uu >= drop_rate ? inv_keep : S(0);
              }
              m[static_cast<size_t>(j)] = mk;
            }
            // dv_j += (u_j m_j) g_i ; du_j = m_j <g_i, v_j>
            S dot = S(0);
            for (int64_t j = 0; j < Sq; ++j) {
              const S* vj = vs + j * D;
              S a = S(0);
              for (int64_t d = 0; d < D; ++d) a += gi[d] * vj[d];
              const S duj = m[static_cast<size_t>(j)] * a;
              du[static_cast<size_t>(j)] = duj;
              dot += duj * u[static_cast<size_t>(j)];
              const S pj = u[static_cast<size_t>(j)] * m[static_cast<size_t>(j)];
              if (pj != S(0)) {
                S* gvj = gvs + j * D;
                for (int64_t d = 0; d < D; ++d) gvj[d] += pj * gi[d];
              }
            }
            // softmax jacobian, then route into q and k
            S* gqi = gqs + i * D;
            for (int64_t j = 0; j < Sq; ++j) {
              const S dl = u[static_cast<size_t>(j)] *
                           (du[static_cast<size_t>(j)] - dot) * scale;
              if (dl != S(0)) {
                const S* kj = ks + j * D;
                S* gkj = gks + j * D;
                for (int64_t d = 0; d < D; ++d) {
                  gqi[d] += dl * kj[d];
                  gkj[d] += dl * qi[d];
                }
              }
            }
          }
        }
      });
}

// Multi-head self-attention on (B,S,E). Weights project E->E; heads split
// the feature axis. No positional encoding anywhere.
template <class S>
struct MhsaParams {
  Var<S> wq, bq, wk, bk, wv, bv, wo, bo;
};

template <class S>
Var<S> mhsa(const Var<S>& x, const MhsaParams<S>& p, int heads,
            double attn_dropout, bool training, uint64_t seed) {
  const Tensor<S>& xv = x.value();
  if (xv.rank() != 3) throw ShapeError("mhsa: input must be (B,S,E)");
  const int64_t B = xv.dim(0), Sq = xv.dim(1), E = xv.dim(2);
  if (heads <= 0 || E % heads != 0)
    throw ConfigError("mhsa: embed dim " + std::to_string(E) +
                      " not divisible by heads " + std::to_string(heads));
  const int64_t D = E / heads;
  auto split = [&](const Var<S>& t) {
    return permute(reshape(t, {B, Sq, heads, D}), {0, 2, 1, 3});
  };
  Var<S> q = split(linear(x, p.wq, p.bq));
  Var<S> k = split(linear(x, p.wk, p.bk));
  Var<S> v = split(linear(x, p.wv, p.bv));
  Var<S> o = attention_core(q, k, v, attn_dropout, training, seed);
  o = reshape(permute(o, {0, 2, 1, 3}), {B, Sq, E});
  return linear(o, p.wo, p.bo);
}

}  // namespace deftan
