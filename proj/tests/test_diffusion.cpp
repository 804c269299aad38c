#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "dyadgen/diffusion.hpp"

using namespace dyadgen;
using namespace dyadgen::diffusion;

namespace {

Tensor random_mat(std::vector<int> shape, uint64_t seed, double scale = 1.0) {
  Tensor t(shape);
  Rng rng(seed);
  for (long long i = 0; i < t.numel(); ++i) t[i] = scale * rng.normal();
  return t;
}

DenoiserConfig small_denoiser() {
  DenoiserConfig d;
  d.blocks = 2;
  d.heads = 2;
  d.width = 32;
  d.window = 10;
  d.motion_dim = 8;
  d.feature_dim = 16;
  d.prev_tail = 4;
  return d;
}

Stage2Config small_stage2() {
  Stage2Config cfg;
  cfg.T = 100;
  cfg.denoiser = small_denoiser();
  cfg.denoiser.motion_dim = 32;
  cfg.guider.motion_dim = 32;
  cfg.guider.feature_dim = 16;
  cfg.guider.bank_size = 4;
  cfg.guider.bank_dim = 16;
  cfg.guider.style_dim = 8;
  return cfg;
}

}  // namespace

TEST_CASE("make_schedule") {
  NoiseSchedule s = make_schedule(1000, 1e-4, 0.02);
  REQUIRE(s.T == 1000);
  CHECK(s.alpha_bar[999] < 0.01);
  CHECK(s.alpha_bar[0] > 0.999);
  for (int t = 0; t < 1000; ++t) {
    CHECK(s.beta[t] > 0.0);
    CHECK(s.beta[t] < 1.0);
    if (t > 0) {
      CHECK(s.beta[t] > s.beta[t - 1]);
      CHECK(s.alpha_bar[t] < s.alpha_bar[t - 1]);
    }
    CHECK(s.alpha[t] == doctest::Approx(1.0 - s.beta[t]).epsilon(1e-15));
  }
  CHECK(s.alpha_bar_at(-1) == 1.0);

  NoiseSchedule one = make_schedule(1, 1e-4, 0.02);
  CHECK(one.alpha_bar[0] == doctest::Approx(1.0 - 1e-4).epsilon(1e-15));

  CHECK_THROWS_AS(make_schedule(0, 1e-4, 0.02), ParamError);
  CHECK_THROWS_AS(make_schedule(10, 0.02, 1e-4), ParamError);
  CHECK_THROWS_AS(make_schedule(10, 1e-4, 1.0), ParamError);
}

TEST_CASE("forward_diffuse") {
  // synthetic one-step schedules pin the closed form exactly
  NoiseSchedule unit;
  unit.T = 1;
  unit.beta = {0.0};
  unit.alpha = {1.0};
  unit.alpha_bar = {1.0};
  Tensor x0({2, 3});
  for (long long i = 0; i < x0.numel(); ++i) x0[i] = 0.3 * i - 0.5;
  Tensor noise = random_mat({2, 3}, 7);
  Tensor same = forward_diffuse(x0, 0, noise, unit);
  CHECK(same.vec() == x0.vec());

  NoiseSchedule quarter = unit;
  quarter.alpha_bar = {0.25};
  Tensor ones({2, 3});
  for (long long i = 0; i < ones.numel(); ++i) ones[i] = 1.0;
  Tensor mixed = forward_diffuse(ones, 0, ones, quarter);
  for (long long i = 0; i < mixed.numel(); ++i)
    CHECK(mixed[i] == doctest::Approx(0.5 + std::sqrt(0.75)).epsilon(1e-12));

  CHECK_THROWS_AS(forward_diffuse(x0, 1, noise, unit), ParamError);
  CHECK_THROWS_AS(forward_diffuse(x0, 0, Tensor({3, 2}), unit), ShapeError);

  // Monte-Carlo moments at a mid schedule step
  NoiseSchedule s = make_schedule(1000, 1e-4, 0.02);
  int t = 500;
  double x0v = 0.7;
  Rng rng(11);
  double sum = 0, sum2 = 0;
  int n = 100000;
  Tensor xi({1, 1}), ni({1, 1});
  xi[0] = x0v;
  for (int i = 0; i < n; ++i) {
    ni[0] = rng.normal();
    double v = forward_diffuse(xi, t, ni, s)[0];
    sum += v;
    sum2 += v * v;
  }
  double mean = sum / n;
  double sd = std::sqrt(sum2 / n - mean * mean);
  CHECK(mean == doctest::Approx(std::sqrt(s.alpha_bar[t]) * x0v).epsilon(0.01));
  CHECK(sd == doctest::Approx(std::sqrt(1.0 - s.alpha_bar[t])).epsilon(0.01));
}

TEST_CASE("sinusoidal_embed") {
  Tensor e0 = sinusoidal_embed(0.0, 16);
  REQUIRE(e0.numel() == 16);
  for (int i = 0; i < 16; i += 2) {
    CHECK(e0[i] == 0.0);      // sin slots
    CHECK(e0[i + 1] == 1.0);  // cos slots
  }

  std::vector<Tensor> embs;
  for (int t = 0; t < 1000; ++t) embs.push_back(sinusoidal_embed(t, 16));
  double min_l2 = 1e300;
  for (int a = 0; a < 1000; ++a) {
    for (long long i = 0; i < 16; ++i) {
      CHECK(embs[a][i] >= -1.0);
      CHECK(embs[a][i] <= 1.0);
    }
    for (int b = a + 1; b < 1000; ++b) {
      double d2 = 0;
      for (int i = 0; i < 16; ++i) {
        double d = embs[a][i] - embs[b][i];
        d2 += d * d;
      }
      min_l2 = std::min(min_l2, d2);
    }
  }
  CHECK(min_l2 > 0.0);

  CHECK_THROWS_AS(sinusoidal_embed(0.0, 15), ParamError);
}

TEST_CASE("denoiser forward shapes and NULL handling") {
  DenoiserConfig cfg = small_denoiser();
  nn::ParamStore store(3);
  DenoiserModel model(cfg, store);
  Tensor x = random_mat({10, 8}, 5);
  Tensor f_m = random_mat({10, 16}, 6);
  Tensor f_m2 = random_mat({10, 16}, 66);
  Tensor ctx = random_mat({4, 8}, 7);

  for (const Tensor* fm : std::vector<const Tensor*>{nullptr, &f_m})
    for (const Tensor* cx : std::vector<const Tensor*>{nullptr, &ctx}) {
      Tensor out = model.forward(store, x, 17, fm, cx);
      REQUIRE(out.shape() == std::vector<int>{10, 8});
      for (long long i = 0; i < out.numel(); ++i) CHECK(std::isfinite(out[i]));
    }

  // NULL f_m: output independent of whatever f_m would have been
  Tensor a = model.forward(store, x, 17, nullptr, &ctx);
  Tensor b = model.forward(store, x, 17, nullptr, &ctx);
  CHECK(a.vec() == b.vec());
  // and the conditional branches actually change the output
  Tensor with_fm = model.forward(store, x, 17, &f_m, &ctx);
  Tensor with_fm2 = model.forward(store, x, 17, &f_m2, &ctx);
  bool fm_matters = false, fm_value_matters = false;
  for (long long i = 0; i < a.numel(); ++i) {
    fm_matters = fm_matters || with_fm[i] != a[i];
    fm_value_matters = fm_value_matters || with_fm[i] != with_fm2[i];
  }
  CHECK(fm_matters);
  CHECK(fm_value_matters);

  CHECK_THROWS_AS(model.forward(store, Tensor({10, 4}), 17, nullptr, nullptr), ShapeError);
  CHECK_THROWS_AS(model.forward(store, x, 17, &f_m, &x), ShapeError);  // bad tail shape
}

TEST_CASE("denoiser gradient check through all attentions") {
  DenoiserConfig cfg = small_denoiser();
  cfg.window = 5;
  nn::ParamStore store(9);
  DenoiserModel model(cfg, store);
  Tensor x = random_mat({5, 8}, 13, 0.5);
  Tensor f_m = random_mat({5, 16}, 14, 0.5);
  Tensor ctx = random_mat({4, 8}, 15, 0.5);
  Tensor target({5, 8});

  auto loss_fn = [&](const nn::LeafMap& lv) {
    nn::NodePtr out =
        model.forward_node(lv, ad::constant(x), 23, ad::constant(f_m), ad::constant(ctx));
    return ad::mse_loss(out, ad::constant(target));
  };
  CHECK(nn::gradient_check(store, loss_fn, 2, 19) <= 1e-3);
}

TEST_CASE("cfg_predict composition") {
  Tensor x = random_mat({4, 3}, 21);
  Tensor f_m = random_mat({4, 5}, 22);
  Tensor ctx = random_mat({2, 3}, 23);
  Tensor base = random_mat({4, 3}, 24), da = random_mat({4, 3}, 25),
         db = random_mat({4, 3}, 26);
  DenoiseFn eps = [&](const Tensor& xt, int, const Tensor* fm, const Tensor* cx) {
    Tensor out = base;
    for (long long i = 0; i < out.numel(); ++i) {
      if (fm) out[i] += da[i];
      if (cx) out[i] += db[i];
    }
    return out;
  };

  Tensor unit = cfg_predict(eps, x, 5, &f_m, &ctx, 1.0, 1.0);
  for (long long i = 0; i < unit.numel(); ++i)
    CHECK(unit[i] == doctest::Approx(base[i] + da[i] + db[i]).epsilon(1e-12));

  Tensor no_ctx = cfg_predict(eps, x, 5, &f_m, nullptr, 1.0, 0.7);
  for (long long i = 0; i < no_ctx.numel(); ++i)
    CHECK(no_ctx[i] == doctest::Approx(base[i] + da[i]).epsilon(1e-12));

  Tensor guided = cfg_predict(eps, x, 5, &f_m, &ctx, 2.0, 1.5);
  for (long long i = 0; i < guided.numel(); ++i) {
    double e0 = base[i], e1 = base[i] + da[i], e2 = e1 + db[i];
    CHECK(guided[i] ==
          doctest::Approx(e0 + 2.0 * (e1 - e0) + 1.5 * (e2 - e1)).epsilon(1e-6));
  }

  CHECK_THROWS_AS(cfg_predict(eps, x, 5, &f_m, &ctx, -1.0, 1.0), ParamError);
}

TEST_CASE("ddim stepping") {
  NoiseSchedule s = make_schedule(1000, 1e-4, 0.02);
  Tensor x0 = random_mat({4, 2}, 31);
  Tensor noise = random_mat({4, 2}, 32);

  // exact-noise inversion straight back to x0
  Tensor xt = forward_diffuse(x0, 700, noise, s);
  Tensor back = ddim_step(xt, 700, -1, noise, s);
  for (long long i = 0; i < x0.numel(); ++i)
    CHECK(back[i] == doctest::Approx(x0[i]).epsilon(1e-6));

  // zero predicted noise is a pure rescale
  Tensor zero({4, 2});
  Tensor scaled = ddim_step(xt, 700, 300, zero, s);
  double r = std::sqrt(s.alpha_bar[300] / s.alpha_bar[700]);
  for (long long i = 0; i < xt.numel(); ++i)
    CHECK(scaled[i] == doctest::Approx(r * xt[i]).epsilon(1e-12));

  CHECK_THROWS_AS(ddim_step(xt, 300, 700, noise, s), ParamError);

  std::vector<int> ts = ddim_timesteps(1000, 20);
  REQUIRE(ts.size() == 20);
  CHECK(ts.front() == 999);
  CHECK(ts.back() == 49);
  for (size_t i = 1; i < ts.size(); ++i) CHECK(ts[i - 1] - ts[i] == 50);
  CHECK_THROWS_AS(ddim_timesteps(1000, 21), ParamError);

  // full 20-step trajectory with the true-noise oracle reconstructs x0
  Tensor x = forward_diffuse(x0, 999, noise, s);
  for (size_t i = 0; i < ts.size(); ++i)
    x = ddim_step(x, ts[i], i + 1 < ts.size() ? ts[i + 1] : -1, noise, s);
  for (long long i = 0; i < x.numel(); ++i)
    CHECK(std::fabs(x[i] - x0[i]) <= 1e-4);
}

TEST_CASE("generate_window") {
  NoiseSchedule s = make_schedule(100, 1e-4, 0.02);
  DenoiserConfig cfg = small_denoiser();
  Tensor m_self = random_mat({8}, 41, 0.3);

  // oracle that always reports the noise consistent with x_hat0 = target
  Tensor target({cfg.window, cfg.motion_dim});
  for (int r = 0; r < cfg.window; ++r)
    for (int c = 0; c < cfg.motion_dim; ++c) target.at2(r, c) = m_self[c];
  DenoiseFn oracle = [&](const Tensor& xt, int t, const Tensor*, const Tensor*) {
    Tensor e({cfg.window, cfg.motion_dim});
    double ab = s.alpha_bar[t];
    for (long long i = 0; i < e.numel(); ++i)
      e[i] = (xt[i] - std::sqrt(ab) * target[i]) / std::sqrt(1.0 - ab);
    return e;
  };
  Tensor out = generate_window(oracle, nullptr, nullptr, m_self, s, cfg, -1, 77);
  REQUIRE(out.shape() == std::vector<int>{10, 8});
  for (long long i = 0; i < out.numel(); ++i)
    CHECK(out[i] == doctest::Approx(target[i]).epsilon(1e-3));

  // determinism in the seed
  DenoiseFn noisy = [&](const Tensor& xt, int, const Tensor*, const Tensor*) {
    Tensor e({cfg.window, cfg.motion_dim});
    for (long long i = 0; i < e.numel(); ++i) e[i] = 0.1 * xt[i];
    return e;
  };
  Tensor a = generate_window(noisy, nullptr, nullptr, m_self, s, cfg, -1, 5);
  Tensor b = generate_window(noisy, nullptr, nullptr, m_self, s, cfg, -1, 5);
  Tensor c = generate_window(noisy, nullptr, nullptr, m_self, s, cfg, -1, 6);
  CHECK(a.vec() == b.vec());
  bool differs = false;
  for (long long i = 0; i < a.numel(); ++i) differs = differs || a[i] != c[i];
  CHECK(differs);

  CHECK_THROWS_AS(generate_window(noisy, nullptr, nullptr, m_self, s, cfg, 100, 5),
                  ParamError);
  CHECK_THROWS_AS(generate_window(noisy, nullptr, nullptr, Tensor({4}), s, cfg, -1, 5),
                  ShapeError);
}

TEST_CASE("stream_generate windows and causality") {
  Stage2Model model(small_stage2(), 51);
  int N = model.config().denoiser.window;  // 10
  Tensor a_self = random_mat({3 * N, 24}, 52, 0.4);
  Tensor a_other = random_mat({3 * N, 24}, 53, 0.4);
  Tensor m_self = random_mat({32}, 54, 0.3);

  Tensor full = stream_generate(model, a_self, a_other, m_self, std::nullopt, 91);
  REQUIRE(full.shape() == std::vector<int>{3 * N, 32});
  for (long long i = 0; i < full.numel(); ++i) CHECK(std::isfinite(full[i]));

  Tensor again = stream_generate(model, a_self, a_other, m_self, std::nullopt, 91);
  CHECK(full.vec() == again.vec());

  // causality: dropping future windows leaves the prefix untouched
  auto head = [&](const Tensor& t, int rows) {
    Tensor out({rows, t.dim(1)});
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < t.dim(1); ++c) out.at2(r, c) = t.at2(r, c);
    return out;
  };
  Tensor part = stream_generate(model, head(a_self, 2 * N), head(a_other, 2 * N), m_self,
                                std::nullopt, 91);
  for (int r = 0; r < 2 * N; ++r)
    for (int c = 0; c < 32; ++c) CHECK(part.at2(r, c) == full.at2(r, c));

  // M = 1 equals a single window with no context
  Tensor one = stream_generate(model, head(a_self, N), head(a_other, N), m_self,
                               std::nullopt, 91);
  Tensor f_m = model.guider().forward(model.store(), head(a_self, N), head(a_other, N),
                                      std::nullopt, false);
  DenoiseFn eps = [&](const Tensor& xt, int t, const Tensor* fm, const Tensor* cx) {
    return model.denoiser().forward(model.store(), xt, t, fm, cx);
  };
  Tensor m_std = model.standardize(m_self.reshaped({1, 32})).reshaped({32});
  Tensor win = generate_window(eps, &f_m, nullptr, m_std, model.schedule(),
                               model.config().denoiser, -1, derive_seed(91, 0));
  Tensor raw = model.destandardize(win);
  CHECK(one.vec() == raw.vec());

  CHECK_THROWS_AS(stream_generate(model, head(a_self, N - 4), head(a_other, N - 4), m_self,
                                  std::nullopt, 91),
                  ShapeError);
}

TEST_CASE("conditioning dropout rates") {
  Stage2Config cfg = small_stage2();
  Rng rng(61);
  int null_style = 0, drop_fm = 0, drop_ctx = 0;
  int n = 10000;
  for (int i = 0; i < n; ++i) {
    CondDraw d = draw_conditioning(rng, cfg);
    null_style += d.null_style;
    drop_fm += d.drop_fm;
    drop_ctx += d.drop_ctx;
  }
  CHECK(std::fabs(null_style / double(n) - 0.3) <= 0.02);
  CHECK(std::fabs(drop_fm / double(n) - 0.5) <= 0.02);
  CHECK(std::fabs(drop_ctx / double(n) - 0.5) <= 0.02);

  cfg.joint_drop = true;
  Rng rng2(62);
  for (int i = 0; i < 1000; ++i) {
    CondDraw d = draw_conditioning(rng2, cfg);
    CHECK(d.drop_fm == d.drop_ctx);
  }
}

TEST_CASE("train_stage2 smoke") {
  world::GenParams gp;
  gp.n_clips = 4;
  gp.n_frames = 60;
  gp.clips_per_identity = 2;
  gp.single_sided_per_identity = 1;
  world::Dataset ds = world::generate_dataset(gp, 71);

  motion::Stage1Model stage1(motion::Stage1Config{}, 72);
  std::vector<Tensor> codes = encode_dataset_codes(stage1, ds, motion::HybridMode::kHybrid);
  REQUIRE(codes.size() == 4);
  REQUIRE(codes[0].shape() == std::vector<int>{60, 32});

  Stage2TrainConfig tc;
  tc.epochs = 20;
  tc.steps_per_epoch = 25;
  tc.batch = 16;
  tc.lr = 1e-3;
  tc.seed = 73;

  Stage2Model a(small_stage2(), 74);
  Stage2TrainTrace ta = train_stage2(a, codes, ds, tc);
  REQUIRE(ta.epoch_loss.size() == 20);
  for (double l : ta.epoch_loss) CHECK(std::isfinite(l));
  REQUIRE(ta.epoch_clips.size() == 20);

  // first two (warm-up) epochs draw only single-sided clips
  for (int e = 0; e < 2; ++e) {
    CHECK_FALSE(ta.epoch_clips[e].empty());
    for (int clip : ta.epoch_clips[e]) CHECK(ds.clips[clip].single_sided());
  }
  // dropout bookkeeping actually ran
  CHECK(ta.style_draws > 0);
  CHECK(ta.fm_dropped > 0);

  Stage2Model b(small_stage2(), 74);
  Stage2TrainTrace tb = train_stage2(b, codes, ds, tc);
  CHECK(ta.epoch_loss == tb.epoch_loss);
  CHECK(a.store().checksum() == b.store().checksum());

  // better than the constant-zero noise predictor (expected MSE 1.0)
  double loss = eval_stage2_loss(a, codes, ds, {0, 1, 2, 3}, 16, 75);
  CHECK(loss < 0.8);
}
