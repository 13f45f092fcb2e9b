#pragma once

#include <string>
#include <vector>

#include "deftan/model_config.hpp"
#include "deftan/nn_ops.hpp"
#include "deftan/stft.hpp"

namespace deftan {

//   mics (M,N) ── stft ── RI stack (2M,F,T)
//        │
//     Up-Conv: 3x3 conv 2M->C, LN, PReLU
//        │
//     DeFT-A block  x N_b          (order configurable, default D,F,T)
//        │    Dense:    N_d x [concat -> 3x3 conv kC->C -> LN -> PReLU]
//        │    F-transformer: attention over frequency + 1x1-conv FFW
//        │    T-conformer:   attention over time + SDC position-wise FFW
//        │
//     Down-Conv: 3x3 conv C->2    (complex mask, unbounded)
//        │
//     mask * Y_ref ── istft ── enhanced (N,)

template <class S>
class ParamStore {
 public:
  int64_t add(const std::string& name, Tensor<S> init) {
    for (const auto& n : names_)
      if (n == name) throw ConfigError("duplicate parameter name " + name);
    names_.push_back(name);
    vars_.push_back(Var<S>::leaf(std::move(init), true));
    return static_cast<int64_t>(vars_.size()) - 1;
  }

  Var<S>& operator[](int64_t i) { return vars_[static_cast<size_t>(i)]; }
  const Var<S>& operator[](int64_t i) const { return vars_[static_cast<size_t>(i)]; }

  size_t size() const { return vars_.size(); }
  const std::string& name(size_t i) const { return names_[i]; }
  const std::vector<std::string>& names() const { return names_; }

  int64_t total_scalars() const {
    int64_t n = 0;
    for (const auto& v : vars_) n += v.numel();
    return n;
  }

  std::vector<Tensor<S>> values() const {
    std::vector<Tensor<S>> out;
    out.reserve(vars_.size());
    for (const auto& v : vars_) out.push_back(v.value());
    return out;
  }

  // Swap in external leaves (finite-difference verification drives the
  // model through this).
  void bind(std::vector<Var<S>> vars) {
    if (vars.size() != vars_.size()) throw ParamError("bind: arity mismatch");
    vars_ = std::move(vars);
  }

  void zero_grads() {
    for (auto& v : vars_) v.zero_grad();
  }

  int64_t index_of(const std::string& name) const {
    for (size_t i = 0; i < names_.size(); ++i)
      if (names_[i] == name) return static_cast<int64_t>(i);
    return -1;
  }

 private:
  std::vector<std::string> names_;
  std::vector<Var<S>> vars_;
};

// Per-forward dropout seed stream; one draw per dropout site in a fixed
// traversal order.
struct FwdCtx {
  bool training = false;
  uint64_t seed = 0;
  uint64_t counter = 0;
  uint64_t next() { return hash_combine(seed, counter++); }
};

template <class S>
struct ModelForward {
  Var<S> enhanced;     // (N,) reference-channel estimate
  Var<S> mask;         // (2,F,T)
  Var<S> masked_spec;  // (2,F,T)
  ComplexSpectrogram<S> input_spec;
};

template <class S>
class DeftAn {
 public:
  DeftAn(const ModelConfig& cfg, uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(hash_combine(0x6d6f64656cULL, seed));
    build(rng);
  }

  const ModelConfig& config() const { return cfg_; }
  ParamStore<S>& params() { return params_; }
  const ParamStore<S>& params() const { return params_; }
  int64_t param_count() const { return params_.total_scalars(); }

  // (M,N) multichannel input -> reference-channel estimate of equal length.
  ModelForward<S> forward(const Tensor<S>& mics, bool training, uint64_t seed) {
    if (mics.rank() != 2 || mics.dim(0) != cfg_.mics)
      throw ConfigError("forward: expected " + std::to_string(cfg_.mics) +
                        " mic channels, got " + shape_str(mics.shape()));
    const int64_t n = mics.dim(1);
    if (n < cfg_.fft_size)
      throw ParamError("forward: input length " + std::to_string(n) +
                       " shorter than the " + std::to_string(cfg_.fft_size) +
                       "-sample analysis window");
    FwdCtx ctx{training, seed, 0};

    ModelForward<S> out;
    out.input_spec = stft<S>(mics, cfg_.fft_size, cfg_.hop);
    Var<S> stacked = Var<S>::leaf(stack_ri(out.input_spec), false);

    out.mask = mask_from_stacked(stacked, ctx);

    // reference microphone 0: planes [re, im]
    const int64_t F = out.input_spec.bins(), T = out.input_spec.frames();
    Tensor<S> ref(Shape{2, F, T});
    std::copy(out.input_spec.real.data(), out.input_spec.real.data() + F * T, ref.data());
    std::copy(out.input_spec.imag.data(), out.input_spec.imag.data() + F * T, ref.data() + F * T);
    out.masked_spec = apply_mask(out.mask, Var<S>::leaf(std::move(ref), false));
    out.enhanced = istft_op(out.masked_spec, cfg_.fft_size, cfg_.hop, n);
    return out;
  }

  // Full mask-estimation network on an RI-stacked (2M,F,T) input.
  Var<S> mask_from_stacked(const Var<S>& stacked, FwdCtx& ctx) {
    Var<S> x = up_conv(stacked, ctx);
    for (int b = 0; b < cfg_.num_blocks; ++b) x = deft_a_block(b, x, ctx);
    return down_conv(x);
  }

  Var<S> up_conv(const Var<S>& y, FwdCtx& ctx) {
    (void)ctx;
    if (y.value().dim(0) != 2 * cfg_.mics)
      throw ConfigError("up_conv: expected " + std::to_string(2 * cfg_.mics) +
                        " stacked RI channels, got " + std::to_string(y.value().dim(0)));
    Var<S> x = conv2d(y, P(up_.w), P(up_.b));
    x = layer_norm(x, {0}, P(up_ln_.gamma), P(up_ln_.beta));
    return channel_act(x, up_act_, 0);
  }

  Var<S> deft_a_block(int i, const Var<S>& x, FwdCtx& ctx) {
    Var<S> h = x;
    for (char c : cfg_.block_order) {
      if (cfg_.ablate.size() == 1 && cfg_.ablate[0] == c) continue;
      switch (c) {
        case 'D': h = dense_block(i, h, ctx); break;
        case 'F': h = f_transformer(i, h, ctx); break;
        default: h = t_conformer(i, h, ctx); break;
      }
    }
    return h;
  }

  // Dense feature aggregation: layer k sees the block input concatenated
  // with every previous layer output (k*C channels in, C out).
  Var<S> dense_block(int i, const Var<S>& x, FwdCtx& ctx) {
    (void)ctx;
    const auto& d = blocks_[static_cast<size_t>(i)].dense;
    std::vector<Var<S>> feats{x};
    Var<S> y = x;
    for (int k = 0; k < cfg_.dense_layers; ++k) {
      Var<S> in = k == 0 ? x : cat(feats, 0);
      const int64_t want = static_cast<int64_t>(k + 1) * cfg_.channels;
      if (in.value().dim(0) != want)
        throw ShapeError("dense layer " + std::to_string(k + 1) + " expected " +
                         std::to_string(want) + " channels");
      y = conv2d(in, P(d.conv_w[static_cast<size_t>(k)]), P(d.conv_b[static_cast<size_t>(k)]));
      y = layer_norm(y, {0}, P(d.ln_gamma[static_cast<size_t>(k)]), P(d.ln_beta[static_cast<size_t>(k)]));
      y = channel_act(y, d.act[static_cast<size_t>(k)], 0);
      feats.push_back(y);
    }
    return y;
  }

  // Attention over the frequency axis; time frames act as batch items.
  Var<S> f_transformer(int i, const Var<S>& x, FwdCtx& ctx) {
    const auto& f = blocks_[static_cast<size_t>(i)].ftr;
    Var<S> p = permute(x, {2, 1, 0});  // (T,F,C)
    Var<S> a = run_mhsa(p, f.attn, ctx);
    p = layer_norm(add(p, dropout(a, cfg_.dropout, ctx.training, ctx.next())), {2},
                   P(f.ln_attn_gamma), P(f.ln_attn_beta));

    Var<S> h = linear(p, P(f.w1), P(f.b1));
    h = layer_norm(h, {2}, P(f.ln1_gamma), P(f.ln1_beta));
    h = cfg_.gelu_to_relu ? relu(h) : gelu(h);
    h = linear(h, P(f.w2), P(f.b2));
    h = layer_norm(h, {2}, P(f.ln2_gamma), P(f.ln2_beta));
    h = dropout(h, cfg_.dropout, ctx.training, ctx.next());
    p = layer_norm(add(p, h), {2}, P(f.ln_out_gamma), P(f.ln_out_beta));
    return permute(p, {2, 1, 0});
  }

  // Attention over the time axis; the position-wise feed-forward runs
  // dilated depthwise convolutions (or a recurrent map) at width W.
  Var<S> t_conformer(int i, const Var<S>& x, FwdCtx& ctx) {
    const auto& t = blocks_[static_cast<size_t>(i)].tcf;
    Var<S> p = permute(x, {1, 2, 0});  // (F,T,C)
    Var<S> a = run_mhsa(p, t.attn, ctx);
    p = layer_norm(add(p, dropout(a, cfg_.dropout, ctx.training, ctx.next())), {2},
                   P(t.ln_attn_gamma), P(t.ln_attn_beta));

    Var<S> h = linear(p, P(t.w1), P(t.b1));  // (F,T,W)
    h = channel_act(h, t.act1, 2);
    if (cfg_.t_ffw_kind == TffwKind::Sdc) {
      Var<S> s = permute(h, {0, 2, 1});  // (F,W,T)
      s = sdc_stack(i, s, ctx);
      h = permute(s, {0, 2, 1});
    } else {
      h = birnn(t.rnn, h, cfg_.t_ffw_kind == TffwKind::Gru);
    }
    h = linear(h, P(t.w2), P(t.b2));  // back to C
    h = layer_norm(h, {2}, P(t.ln_f_gamma), P(t.ln_f_beta));
    h = dropout(h, cfg_.dropout, ctx.training, ctx.next());
    p = layer_norm(add(p, h), {2}, P(t.ln_out_gamma), P(t.ln_out_beta));
    return permute(p, {2, 0, 1});
  }

  // The SDC layers of block i on a (B,W,T) tensor: DD-Conv, LN, PReLU per
  // layer with dilations 1,2,4,...
  Var<S> sdc_stack(int i, Var<S> s, FwdCtx& ctx) {
    (void)ctx;
    const auto& t = blocks_[static_cast<size_t>(i)].tcf;
    int64_t dilation = 1;
    for (int j = 0; j < cfg_.sdc_layers; ++j, dilation *= 2) {
      const auto& l = t.sdc[static_cast<size_t>(j)];
      s = dd_conv1d(s, P(l.dw), dilation);
      s = layer_norm(s, {1}, P(l.ln_gamma), P(l.ln_beta));
      s = channel_act(s, l.act, 1);
    }
    return s;
  }

  Var<S> down_conv(const Var<S>& x) {
    return conv2d(x, P(down_.w), P(down_.b));
  }

 private:
  struct ActIdx { int64_t alpha = -1; };  // -1: plain ReLU (activation ablation)
  struct ConvIdx { int64_t w = -1, b = -1; };
  struct MhsaIdx { int64_t wq, bq, wk, bk, wv, bv, wo, bo; };
  struct SdcIdx { int64_t dw, ln_gamma, ln_beta; ActIdx act; };
  struct RnnIdx {
    // [direction][gate]; one gate for the plain recurrent map, three for
    // the gated variant (update, reset, candidate)
    std::vector<std::vector<int64_t>> w_ih, w_hh, b;
  };
  struct DenseIdx {
    std::vector<int64_t> conv_w, conv_b, ln_gamma, ln_beta;
    std::vector<ActIdx> act;
  };
  struct FtrIdx {
    MhsaIdx attn;
    int64_t ln_attn_gamma, ln_attn_beta;
    int64_t w1, b1, ln1_gamma, ln1_beta, w2, b2, ln2_gamma, ln2_beta;
    int64_t ln_out_gamma, ln_out_beta;
  };
  struct TcfIdx {
    MhsaIdx attn;
    int64_t ln_attn_gamma, ln_attn_beta;
    int64_t w1, b1;
    ActIdx act1;
    std::vector<SdcIdx> sdc;
    RnnIdx rnn;
    int64_t w2, b2, ln_f_gamma, ln_f_beta;
    int64_t ln_out_gamma, ln_out_beta;
  };
  struct BlockIdx {
    DenseIdx dense;
    FtrIdx ftr;
    TcfIdx tcf;
  };

  Var<S>& P(int64_t i) { return params_[i]; }

  Var<S> channel_act(const Var<S>& x, const ActIdx& a, int axis) {
    if (a.alpha < 0) return relu(x);
    return prelu(x, P(a.alpha), axis);
  }

  Var<S> run_mhsa(const Var<S>& x, const MhsaIdx& m, FwdCtx& ctx) {
    MhsaParams<S> p{P(m.wq), P(m.bq), P(m.wk), P(m.bk),
                    P(m.wv), P(m.bv), P(m.wo), P(m.bo)};
    return mhsa(x, p, cfg_.heads, cfg_.dropout, ctx.training, ctx.next());
  }

  // Single-layer bidirectional recurrence over time at width W; hidden
  // size W/2 per direction, outputs concatenated back to W.
  Var<S> birnn(const RnnIdx& r, const Var<S>& x, bool gated) {
    const int64_t B = x.value().dim(0), T = x.value().dim(1), W = x.value().dim(2);
    const int64_t Wh = W / 2;
    std::vector<Var<S>> outs(2);
    for (int dir = 0; dir < 2; ++dir) {
      Var<S> h = Var<S>::leaf(Tensor<S>(Shape{B, Wh}), false);
      std::vector<Var<S>> hs(static_cast<size_t>(T));
      for (int64_t step = 0; step < T; ++step) {
        const int64_t tt = dir == 0 ? step : T - 1 - step;
        Var<S> xt = reshape(narrow(x, 1, tt, 1), {B, W});
        if (!gated) {
          const auto& wih = r.w_ih[static_cast<size_t>(dir)];
          const auto& whh = r.w_hh[static_cast<size_t>(dir)];
          const auto& bb = r.b[static_cast<size_t>(dir)];
          h = etanh(add(linear(xt, P(wih[0]), P(bb[0])),
                        linear(h, P(whh[0]), zero_bias_)));
        } else {
          const auto& wih = r.w_ih[static_cast<size_t>(dir)];
          const auto& whh = r.w_hh[static_cast<size_t>(dir)];
          const auto& bb = r.b[static_cast<size_t>(dir)];
          Var<S> z = esigmoid(add(linear(xt, P(wih[0]), P(bb[0])),
                                  linear(h, P(whh[0]), zero_bias_)));
          Var<S> rr = esigmoid(add(linear(xt, P(wih[1]), P(bb[1])),
                                   linear(h, P(whh[1]), zero_bias_)));
          Var<S> cand = etanh(add(linear(xt, P(wih[2]), P(bb[2])),
                                  linear(mul(rr, h), P(whh[2]), zero_bias_)));
          h = add(mul(affine(z, S(-1), S(1)), h), mul(z, cand));
        }
        hs[static_cast<size_t>(tt)] = reshape(h, {B, 1, Wh});
      }
      outs[static_cast<size_t>(dir)] = cat(hs, 1);
    }
    return cat(outs, 2);
  }

  Tensor<S> uniform_init(Rng& rng, Shape shape, int64_t fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    Tensor<S> t(shape);
    for (int64_t i = 0; i < t.numel(); ++i)
      t[i] = static_cast<S>(rng.uniform(-bound, bound));
    return t;
  }

  ConvIdx add_conv(Rng& rng, const std::string& name, int64_t co, int64_t ci,
                   int64_t kf, int64_t kt) {
    ConvIdx c;
    c.w = params_.add(name + ".weight", uniform_init(rng, {co, ci, kf, kt}, ci * kf * kt));
    c.b = params_.add(name + ".bias", uniform_init(rng, {co}, ci * kf * kt));
    return c;
  }

  void add_linear(Rng& rng, const std::string& name, int64_t eo, int64_t ei,
                  int64_t& w, int64_t& b) {
    w = params_.add(name + ".weight", uniform_init(rng, {eo, ei}, ei));
    b = params_.add(name + ".bias", uniform_init(rng, {eo}, ei));
  }

  void add_ln(const std::string& name, int64_t len, int64_t& gamma, int64_t& beta) {
    gamma = params_.add(name + ".gamma", Tensor<S>(Shape{len}, S(1)));
    beta = params_.add(name + ".beta", Tensor<S>(Shape{len}, S(0)));
  }

  ActIdx add_prelu(const std::string& name, int64_t channels) {
    ActIdx a;
    if (!cfg_.prelu_to_relu)
      a.alpha = params_.add(name + ".alpha", Tensor<S>(Shape{channels}, S(0.25)));
    return a;
  }

  MhsaIdx add_mhsa(Rng& rng, const std::string& name) {
    const int64_t E = cfg_.channels;
    MhsaIdx m;
    add_linear(rng, name + ".q", E, E, m.wq, m.bq);
    add_linear(rng, name + ".k", E, E, m.wk, m.bk);
    add_linear(rng, name + ".v", E, E, m.wv, m.bv);
    add_linear(rng, name + ".out", E, E, m.wo, m.bo);
    return m;
  }

  void build(Rng& rng) {
    const int64_t C = cfg_.channels;
    const int64_t k = cfg_.dense_kernel;
    const int64_t W = static_cast<int64_t>(cfg_.t_ffw_width) * C;

    up_ = add_conv(rng, "up_conv.conv", C, 2 * cfg_.mics, k, k);
    add_ln("up_conv.ln", C, up_ln_.gamma, up_ln_.beta);
    up_act_ = add_prelu("up_conv.prelu", C);

    for (int b = 0; b < cfg_.num_blocks; ++b) {
      const std::string bn = "block" + std::to_string(b);
      BlockIdx blk;

      for (int l = 0; l < cfg_.dense_layers; ++l) {
        const std::string ln = bn + ".dense.conv" + std::to_string(l);
        auto cv = add_conv(rng, ln, C, static_cast<int64_t>(l + 1) * C, k, k);
        blk.dense.conv_w.push_back(cv.w);
        blk.dense.conv_b.push_back(cv.b);
        int64_t g, be;
        add_ln(bn + ".dense.ln" + std::to_string(l), C, g, be);
        blk.dense.ln_gamma.push_back(g);
        blk.dense.ln_beta.push_back(be);
        blk.dense.act.push_back(add_prelu(bn + ".dense.prelu" + std::to_string(l), C));
      }

      auto& f = blk.ftr;
      f.attn = add_mhsa(rng, bn + ".f_tr.attn");
      add_ln(bn + ".f_tr.ln_attn", C, f.ln_attn_gamma, f.ln_attn_beta);
      add_linear(rng, bn + ".f_tr.ffw.w1", cfg_.f_ffw_expansion * C, C, f.w1, f.b1);
      add_ln(bn + ".f_tr.ffw.ln1", cfg_.f_ffw_expansion * C, f.ln1_gamma, f.ln1_beta);
      add_linear(rng, bn + ".f_tr.ffw.w2", C, cfg_.f_ffw_expansion * C, f.w2, f.b2);
      add_ln(bn + ".f_tr.ffw.ln2", C, f.ln2_gamma, f.ln2_beta);
      add_ln(bn + ".f_tr.ln_out", C, f.ln_out_gamma, f.ln_out_beta);

      auto& t = blk.tcf;
      t.attn = add_mhsa(rng, bn + ".t_conf.attn");
      add_ln(bn + ".t_conf.ln_attn", C, t.ln_attn_gamma, t.ln_attn_beta);
      add_linear(rng, bn + ".t_conf.ffw.w1", W, C, t.w1, t.b1);
      t.act1 = add_prelu(bn + ".t_conf.ffw.prelu", W);
      if (cfg_.t_ffw_kind == TffwKind::Sdc) {
        for (int j = 0; j < cfg_.sdc_layers; ++j) {
          const std::string sn = bn + ".t_conf.ffw.sdc" + std::to_string(j);
          SdcIdx s;
          s.dw = params_.add(sn + ".dw.weight",
                             uniform_init(rng, {W, cfg_.sdc_kernel}, cfg_.sdc_kernel));
          add_ln(sn + ".ln", W, s.ln_gamma, s.ln_beta);
          s.act = add_prelu(sn + ".prelu", W);
          t.sdc.push_back(s);
        }
      } else {
        const int gates = cfg_.t_ffw_kind == TffwKind::Gru ? 3 : 1;
        const int64_t Wh = W / 2;
        t.rnn.w_ih.assign(2, {});
        t.rnn.w_hh.assign(2, {});
        t.rnn.b.assign(2, {});
        for (int dir = 0; dir < 2; ++dir)
          for (int g = 0; g < gates; ++g) {
            const std::string rn = bn + ".t_conf.ffw.rnn." +
                                   (dir == 0 ? std::string("fwd") : std::string("bwd")) +
                                   ".gate" + std::to_string(g);
            int64_t wih, bb;
            add_linear(rng, rn + ".ih", Wh, W, wih, bb);
            t.rnn.w_ih[static_cast<size_t>(dir)].push_back(wih);
            t.rnn.b[static_cast<size_t>(dir)].push_back(bb);
            t.rnn.w_hh[static_cast<size_t>(dir)].push_back(
                params_.add(rn + ".hh.weight", uniform_init(rng, {Wh, Wh}, Wh)));
          }
      }
      add_linear(rng, bn + ".t_conf.ffw.w2", C, W, t.w2, t.b2);
      add_ln(bn + ".t_conf.ffw.ln", C, t.ln_f_gamma, t.ln_f_beta);
      add_ln(bn + ".t_conf.ln_out", C, t.ln_out_gamma, t.ln_out_beta);

      blocks_.push_back(std::move(blk));
    }

    down_ = add_conv(rng, "down_conv.conv", 2, C, k, k);

    // fixed zero bias for the recurrent hidden-to-hidden projections
    if (cfg_.t_ffw_kind != TffwKind::Sdc)
      zero_bias_ = Var<S>::leaf(Tensor<S>(Shape{W / 2}, S(0)), false);
  }

  ModelConfig cfg_;
  ParamStore<S> params_;
  ConvIdx up_;
  struct { int64_t gamma = -1, beta = -1; } up_ln_;
  ActIdx up_act_;
  std::vector<BlockIdx> blocks_;
  ConvIdx down_;
  Var<S> zero_bias_;
};

// Exact trainable-scalar count for a configuration.
int64_t param_count(const ModelConfig& cfg);

}  // namespace deftan
