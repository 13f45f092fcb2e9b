#include <doctest.h>

#include "deftan/grad_check.hpp"
#include "deftan/loss.hpp"
#include "deftan/model.hpp"
#include "oracles.hpp"

using namespace deftan;

namespace {

ModelConfig tiny() { return ModelConfig::tiny_preset(); }

template <class S>
Tensor<S> rand_feature(Rng& rng, const ModelConfig& cfg, int64_t F, int64_t T) {
  return oracle::rand_tensor<S>(rng, {cfg.channels, F, T});
}

}  // namespace

TEST_CASE("config validation and digest stability") {
  ModelConfig c = tiny();
  c.validate();
  CHECK(c.digest() == tiny().digest());
  c.channels = 9;  // 9 % 4 != 0
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = tiny();
  c.block_order = "DDF";
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = tiny();
  c.ablate = "X";
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = tiny();
  c.hop = c.fft_size + 1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  ModelConfig d = tiny();
  d.dropout = 0.2;
  CHECK(d.digest() != tiny().digest());
  CHECK_THROWS_AS(ModelConfig::preset("medium"), ConfigError);
}

TEST_CASE("up_conv output shape and zero-input behaviour") {
  // full-size shape check: (2M,F,T)=(8,257,122) -> (64,257,122)
  ModelConfig paper = ModelConfig::paper_preset();
  DeftAn<float> model(paper, 1);
  Rng rng(2);
  FwdCtx ctx;
  auto y = Var<float>::leaf(oracle::rand_tensor<float>(rng, {8, 257, 122}), false);
  auto x = model.up_conv(y, ctx);
  CHECK(x.shape() == Shape{64, 257, 122});

  // zero input: bias + LN + PReLU gives one constant per channel
  DeftAn<float> small(tiny(), 1);
  auto z = Var<float>::leaf(Tensor<float>(Shape{4, 9, 7}), false);
  auto out = small.up_conv(z, ctx);
  for (int64_t c = 0; c < out.value().dim(0); ++c)
    for (int64_t i = 1; i < 63; ++i)
      CHECK(out.value()[c * 63 + i] == out.value()[c * 63]);

  auto bad = Var<float>::leaf(Tensor<float>(Shape{3, 9, 7}), false);
  CHECK_THROWS_AS(small.up_conv(bad, ctx), ConfigError);
}

TEST_CASE("dense block preserves shape and checks channel growth") {
  DeftAn<double> model(tiny(), 3);
  Rng rng(4);
  FwdCtx ctx;
  auto x = Var<double>::leaf(rand_feature<double>(rng, tiny(), 9, 7), false);
  auto y = model.dense_block(0, x, ctx);
  CHECK(y.shape() == x.shape());
}

TEST_CASE("dense block parameter count matches the closed form") {
  // one dense block at C=64, 3x3 kernels, N_d=5:
  //   convs: sum_k k*64*64*9 + 64 = 553,280 ; LN+PReLU: 5*(128+64) = 960
  ModelConfig cfg = ModelConfig::paper_preset();
  cfg.num_blocks = 1;
  DeftAn<float> model(cfg, 0);
  int64_t dense = 0;
  const auto& ps = model.params();
  for (size_t i = 0; i < ps.size(); ++i)
    if (ps.name(i).rfind("block0.dense.", 0) == 0) dense += ps[static_cast<int64_t>(i)].numel();
  CHECK(dense == 553280 + 960);
}

TEST_CASE("f_transformer and t_conformer preserve shapes") {
  DeftAn<float> model(tiny(), 5);
  Rng rng(6);
  FwdCtx ctx;
  auto x = Var<float>::leaf(rand_feature<float>(rng, tiny(), 9, 11), false);
  CHECK(model.f_transformer(0, x, ctx).shape() == x.shape());
  CHECK(model.t_conformer(0, x, ctx).shape() == x.shape());
  CHECK(model.deft_a_block(0, x, ctx).shape() == x.shape());
}

TEST_CASE("f_transformer is equivariant along the frequency axis") {
  DeftAn<double> model(tiny(), 7);
  Rng rng(8);
  FwdCtx ctx;
  const int64_t F = 6, T = 4, C = tiny().channels;
  auto x = rand_feature<double>(rng, tiny(), F, T);
  auto y = model.f_transformer(0, Var<double>::leaf(x, false), ctx);

  const int64_t perm[6] = {4, 2, 0, 5, 1, 3};
  Tensor<double> xp(x.shape());
  for (int64_t c = 0; c < C; ++c)
    for (int64_t f = 0; f < F; ++f)
      for (int64_t t = 0; t < T; ++t) xp(c, f, t) = x(c, perm[f], t);
  auto yp = model.f_transformer(0, Var<double>::leaf(xp, false), ctx);
  for (int64_t c = 0; c < C; ++c)
    for (int64_t f = 0; f < F; ++f)
      for (int64_t t = 0; t < T; ++t)
        CHECK(yp.value()(c, f, t) ==
              doctest::Approx(y.value()(c, perm[f], t)).epsilon(1e-9));
}

TEST_CASE("SDC stack jacobian support is exactly |t-t'| <= 7") {
  ModelConfig cfg = tiny();
  cfg.sdc_layers = 3;  // dilations 1,2,4 with kernel 3
  DeftAn<double> model(cfg, 9);
  Rng rng(10);
  FwdCtx ctx;
  const int64_t W = static_cast<int64_t>(cfg.t_ffw_width) * cfg.channels;
  const int64_t T = 32;
  auto x = oracle::rand_tensor<double>(rng, {1, W, T});
  auto base = model.sdc_stack(0, Var<double>::leaf(x, false), ctx);

  for (int64_t tp : {0L, 9L, 20L, 31L}) {
    Tensor<double> xpert = x;
    for (int64_t w = 0; w < W; ++w) xpert(0, w, tp) += 0.05 * (1.0 + 0.1 * static_cast<double>(w));
    auto out = model.sdc_stack(0, Var<double>::leaf(xpert, false), ctx);
    for (int64_t t = 0; t < T; ++t) {
      double delta = 0.0;
      for (int64_t w = 0; w < W; ++w)
        delta = std::max(delta, std::abs(out.value()(0, w, t) - base.value()(0, w, t)));
      if (std::llabs(t - tp) <= 7)
        CHECK(delta > 1e-12);
      else
        CHECK(delta == 0.0);
    }
  }
}

TEST_CASE("SDC with center-tap kernels reduces to a pointwise LN/PReLU pipeline") {
  ModelConfig cfg = tiny();
  DeftAn<double> model(cfg, 11);
  auto& ps = model.params();
  const int64_t W = static_cast<int64_t>(cfg.t_ffw_width) * cfg.channels;
  for (int j = 0; j < cfg.sdc_layers; ++j) {
    const std::string base = "block0.t_conf.ffw.sdc" + std::to_string(j);
    auto& w = ps[ps.index_of(base + ".dw.weight")].mutable_value();
    w.fill(0.0);
    for (int64_t c = 0; c < W; ++c) w(c, 1) = 1.0;  // center tap
  }
  Rng rng(12);
  FwdCtx ctx;
  auto x = oracle::rand_tensor<double>(rng, {2, W, 6});
  auto y = model.sdc_stack(0, Var<double>::leaf(x, false), ctx);

  // reference: per-layer LN over channels then PReLU, no temporal mixing
  Tensor<double> h = x;
  for (int j = 0; j < cfg.sdc_layers; ++j) {
    const std::string base = "block0.t_conf.ffw.sdc" + std::to_string(j);
    auto ln_g = Var<double>::leaf(ps[ps.index_of(base + ".ln.gamma")].value(), false);
    auto ln_b = Var<double>::leaf(ps[ps.index_of(base + ".ln.beta")].value(), false);
    auto al = Var<double>::leaf(ps[ps.index_of(base + ".prelu.alpha")].value(), false);
    auto t = layer_norm(Var<double>::leaf(h, false), {1}, ln_g, ln_b);
    h = prelu(t, al, 1).value();
  }
  CHECK(oracle::max_abs_diff(y.value(), h) < 1e-12);
}

TEST_CASE("block order composition and ablation") {
  Rng rng(13);
  FwdCtx ctx;  // eval mode: composition must match exactly
  auto x = Var<double>::leaf(rand_feature<double>(rng, tiny(), 9, 7), false);

  DeftAn<double> dft(tiny(), 20);
  auto composed = dft.t_conformer(0, dft.f_transformer(0, dft.dense_block(0, x, ctx), ctx), ctx);
  auto block = dft.deft_a_block(0, x, ctx);
  CHECK(oracle::max_abs_diff(block.value(), composed.value()) == 0.0);

  ModelConfig no_d = tiny();
  no_d.ablate = "D";
  DeftAn<double> ab(no_d, 20);  // same seed: identical parameter draws per name
  auto ab_out = ab.deft_a_block(0, x, ctx);
  auto ft = ab.t_conformer(0, ab.f_transformer(0, x, ctx), ctx);
  CHECK(oracle::max_abs_diff(ab_out.value(), ft.value()) == 0.0);

  for (const char* order : {"TFD", "FTD", "DFT"}) {
    ModelConfig oc = tiny();
    oc.block_order = order;
    DeftAn<double> om(oc, 21);
    CHECK(om.deft_a_block(0, x, ctx).shape() == x.shape());
  }
}

TEST_CASE("down_conv emits an unbounded 2-plane mask") {
  DeftAn<float> model(tiny(), 14);
  Rng rng(15);
  auto x = Var<float>::leaf(rand_feature<float>(rng, tiny(), 9, 7), false);
  auto mask = model.down_conv(x);
  CHECK(mask.shape() == Shape{2, 9, 7});
}

TEST_CASE("identity mask passes the reference channel through") {
  ModelConfig cfg = tiny();
  DeftAn<float> model(cfg, 16);
  auto& ps = model.params();
  ps[ps.index_of("down_conv.conv.weight")].mutable_value().fill(0.0f);
  auto& b = ps[ps.index_of("down_conv.conv.bias")].mutable_value();
  b[0] = 1.0f;  // mask = 1 + 0j everywhere
  b[1] = 0.0f;

  Rng rng(17);
  Tensor<float> mics(Shape{2, 1600});
  for (int64_t i = 0; i < mics.numel(); ++i) mics[i] = static_cast<float>(rng.uniform(-0.5, 0.5));
  auto out = model.forward(mics, false, 0);
  CHECK(out.enhanced.numel() == 1600);
  double err = 0.0;
  for (int64_t i = 0; i < 1600; ++i)
    err = std::max(err, std::abs(static_cast<double>(out.enhanced.value()[i]) - mics(0, i)));
  CHECK(err < 1e-5);
  for (int64_t i = 0; i < out.mask.numel(); ++i)
    CHECK(out.mask.value()[i] == (i < out.mask.numel() / 2 ? 1.0f : 0.0f));
}

TEST_CASE("forward smoke: finite, length preserving, deterministic") {
  DeftAn<float> model(tiny(), 18);
  Rng rng(19);
  Tensor<float> mics(Shape{2, 16000});
  for (int64_t i = 0; i < mics.numel(); ++i) mics[i] = static_cast<float>(rng.uniform(-0.5, 0.5));

  auto a = model.forward(mics, false, 0);
  CHECK(a.enhanced.numel() == 16000);
  CHECK(a.enhanced.value().all_finite());
  CHECK(a.enhanced.value().max_abs() < 1e3);
  CHECK(a.mask.value().all_finite());

  auto b = model.forward(mics, false, 123);  // eval: seed must not matter
  CHECK(oracle::max_abs_diff(a.enhanced.value(), b.enhanced.value()) == 0.0);

  auto t1 = model.forward(mics, true, 7);
  auto t2 = model.forward(mics, true, 7);
  CHECK(oracle::max_abs_diff(t1.enhanced.value(), t2.enhanced.value()) == 0.0);
  auto t3 = model.forward(mics, true, 8);
  CHECK(oracle::max_abs_diff(t1.enhanced.value(), t3.enhanced.value()) > 0.0);

  Tensor<float> wrong(Shape{3, 16000});
  CHECK_THROWS_AS(model.forward(wrong, false, 0), ConfigError);
  Tensor<float> tooshort(Shape{2, 60});
  CHECK_THROWS_AS(model.forward(tooshort, false, 0), ParamError);
}

TEST_CASE("non-causality witness: last input frame reaches the first mask frame") {
  DeftAn<float> model(tiny(), 22);
  Rng rng(23);
  Tensor<float> mics(Shape{2, 3200});
  for (int64_t i = 0; i < mics.numel(); ++i) mics[i] = static_cast<float>(rng.uniform(-0.5, 0.5));
  auto base = model.forward(mics, false, 0);

  Tensor<float> pert = mics;
  for (int64_t i = 3200 - 64; i < 3200; ++i) pert(0, i) += 0.2f;
  auto moved = model.forward(pert, false, 0);
  double delta = 0.0;
  const int64_t F = base.mask.value().dim(1), T = base.mask.value().dim(2);
  for (int64_t p = 0; p < 2; ++p)
    for (int64_t f = 0; f < F; ++f)
      delta = std::max(delta, std::abs(static_cast<double>(base.mask.value()(p, f, 0)) -
                                       moved.mask.value()(p, f, 0)));
  CHECK(delta > 1e-7);
  (void)T;
}

TEST_CASE("recurrent T-conformer variants run and differ in size") {
  ModelConfig rnn = tiny();
  rnn.t_ffw_kind = TffwKind::Rnn;
  ModelConfig gru = tiny();
  gru.t_ffw_kind = TffwKind::Gru;
  DeftAn<float> mr(rnn, 30);
  DeftAn<float> mg(gru, 30);
  DeftAn<float> ms(tiny(), 30);
  CHECK(mr.param_count() > ms.param_count());
  CHECK(mg.param_count() > mr.param_count());

  Rng rng(31);
  Tensor<float> mics(Shape{2, 640});
  for (int64_t i = 0; i < mics.numel(); ++i) mics[i] = static_cast<float>(rng.uniform(-0.5, 0.5));
  for (auto* m : {&mr, &mg}) {
    auto out = m->forward(mics, false, 0);
    CHECK(out.enhanced.value().all_finite());
    CHECK(out.enhanced.numel() == 640);
  }
}

TEST_CASE("recurrent variant gradients pass finite differences") {
  ModelConfig cfg;
  cfg.mics = 1;
  cfg.channels = 2;
  cfg.heads = 2;
  cfg.num_blocks = 1;
  cfg.dense_layers = 1;
  cfg.sdc_layers = 1;
  cfg.t_ffw_width = 2;
  cfg.f_ffw_expansion = 2;
  cfg.fft_size = 16;
  cfg.hop = 4;
  cfg.dropout = 0.0;
  cfg.t_ffw_kind = TffwKind::Gru;
  DeftAn<double> model(cfg, 40);
  Rng rng(41);
  Tensor<double> mics(Shape{1, 80});
  for (int64_t i = 0; i < 80; ++i) mics[i] = rng.uniform(-0.5, 0.5);
  Tensor<double> clean(Shape{80});
  for (int64_t i = 0; i < 80; ++i) clean[i] = rng.uniform(-0.5, 0.5);
  Tensor<double> yref(Shape{80});
  for (int64_t i = 0; i < 80; ++i) yref[i] = mics(0, i);

  // fresh model per evaluation: finite differencing runs concurrently
  auto rep = grad_check<double>(
      [&](const std::vector<Var<double>>& leaves) {
        DeftAn<double> local(cfg, 40);
        local.params().bind(leaves);
        auto out = local.forward(mics, false, 0);
        return pcm_loss(out.enhanced, clean, yref, cfg.fft_size, cfg.hop).pcm;
      },
      model.params().values());
  INFO("gru model grad err ", rep.max_rel_error);
  CHECK(rep.max_rel_error < 1e-3);
}

TEST_CASE("parameter counts: anchors, zero-block closed form, block scaling") {
  ModelConfig paper = ModelConfig::paper_preset();
  const int64_t full = param_count(paper);
  CHECK(full == 2645378);  // frozen; see the closed forms below
  CHECK(full >= 2300000);
  CHECK(full <= 3100000);

  ModelConfig nb0 = paper;
  nb0.num_blocks = 0;
  // up: 2M*C*9 + C + 2C + C ; down: C*2*9 + 2
  CHECK(param_count(nb0) == 8 * 64 * 9 + 64 + 128 + 64 + 64 * 2 * 9 + 2);

  ModelConfig nb2 = paper;
  nb2.num_blocks = 2;
  ModelConfig nb3 = paper;
  nb3.num_blocks = 3;
  const int64_t c2 = param_count(nb2), c3 = param_count(nb3);
  // per-block share doubles from 2 to 4 blocks; totals track 1.3M/2.0M/2.7M
  CHECK(c2 >= 1100000);
  CHECK(c2 <= 1500000);
  CHECK(c3 >= 1700000);
  CHECK(c3 <= 2300000);
  CHECK(2 * (c3 - c2) == (full - c2));  // equal per-block increments

  // names are unique and iteration order is deterministic
  DeftAn<float> m1(paper, 5), m2(paper, 5);
  CHECK(m1.params().size() == m2.params().size());
  for (size_t i = 0; i < m1.params().size(); ++i)
    CHECK(m1.params().name(i) == m2.params().name(i));
}

TEST_CASE("sub-block ablations strictly shrink the model in the reported order") {
  ModelConfig paper = ModelConfig::paper_preset();
  ModelConfig wd = paper, wf = paper, wt = paper;
  wd.ablate = "D";
  wf.ablate = "F";
  wt.ablate = "T";
  const int64_t full = param_count(paper);
  const int64_t no_d = param_count(wd), no_f = param_count(wf), no_t = param_count(wt);
  CHECK(no_d < no_t);
  CHECK(no_t < no_f);
  CHECK(no_f < full);
  CHECK(no_d < 600000);  // dense blocks carry most of the parameters
}

TEST_CASE("mac_estimate: anchors, exact hop ratio, zero-block closed form") {
  ModelConfig paper = ModelConfig::paper_preset();
  const double g256 = mac_estimate(paper, 1.0, 256);
  const double g128 = mac_estimate(paper, 1.0, 128);
  CHECK(g128 == 2.0 * g256);
  CHECK(g256 > 0.75 * 47.8e9);
  CHECK(g256 < 1.25 * 47.8e9);

  ModelConfig nb0 = paper;
  nb0.num_blocks = 0;
  const double want = (8.0 * 64 * 9 + 64.0 * 2 * 9) * 257.0 * (16000.0 / 256.0);
  CHECK(mac_estimate(nb0, 1.0, 256) == doctest::Approx(want).epsilon(1e-12));

  CHECK_THROWS_AS(mac_estimate(paper, 0.0, 256), ParamError);
  CHECK_THROWS_AS(mac_estimate(paper, 1.0, 0), ParamError);
}

TEST_CASE("end-to-end gradients through the full tiny model (double)") {
  ModelConfig cfg = tiny();
  cfg.heads = 2;
  cfg.dropout = 0.1;  // disabled via eval mode below
  DeftAn<double> model(cfg, 50);
  Rng rng(51);
  const int64_t n = 800;  // 0.05 s keeps this a unit test; acceptance runs 0.1 s
  Tensor<double> mics(Shape{2, n});
  for (int64_t i = 0; i < mics.numel(); ++i) mics[i] = rng.uniform(-0.5, 0.5);
  Tensor<double> clean(Shape{n}), yref(Shape{n});
  for (int64_t i = 0; i < n; ++i) {
    clean[i] = rng.uniform(-0.5, 0.5);
    yref[i] = mics(0, i);
  }
  auto rep = grad_check<double>(
      [&](const std::vector<Var<double>>& leaves) {
        DeftAn<double> local(cfg, 50);
        local.params().bind(leaves);
        auto out = local.forward(mics, false, 0);
        return pcm_loss(out.enhanced, clean, yref, cfg.fft_size, cfg.hop).pcm;
      },
      model.params().values());
  INFO("tiny model grad err ", rep.max_rel_error);
  CHECK(rep.max_rel_error < 1e-3);
}
