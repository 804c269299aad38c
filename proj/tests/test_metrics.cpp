#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "dyadgen/metrics.hpp"
#include "dyadgen/rng.hpp"

using namespace dyadgen;
using namespace dyadgen::metrics;

namespace {

Tensor random_img(std::vector<int> shape, uint64_t seed) {
  Tensor t(shape);
  Rng rng(seed);
  for (long long i = 0; i < t.numel(); ++i) t[i] = rng.uniform();
  return t;
}

}  // namespace

TEST_CASE("psnr") {
  Tensor img = random_img({3, 16, 16}, 1);
  CHECK(psnr(img, img) == 99.0);

  // uniform offset 0.1 -> MSE 0.01 -> 20 dB
  Tensor base({3, 16, 16});
  Tensor off({3, 16, 16});
  for (long long i = 0; i < base.numel(); ++i) {
    base[i] = 0.4;
    off[i] = 0.5;
  }
  CHECK(psnr(off, base) == doctest::Approx(20.0).epsilon(1e-12));
  CHECK(psnr(base, off) == doctest::Approx(20.0).epsilon(1e-12));

  CHECK_THROWS_AS(psnr(img, Tensor({3, 16, 8})), ShapeError);
  Tensor bad = img;
  bad[0] = 1.5;
  CHECK_THROWS_AS(psnr(bad, img), ParamError);
}

TEST_CASE("ssim") {
  Tensor img = random_img({16, 16}, 2);
  CHECK(ssim(img, img) == doctest::Approx(1.0).epsilon(1e-12));

  Tensor inv({16, 16});
  for (long long i = 0; i < img.numel(); ++i) inv[i] = 1.0 - img[i];
  CHECK(ssim(inv, img) < 1.0);
  CHECK(ssim(inv, img) == ssim(img, inv));  // exact symmetry

  // brute-force reference on a random color pair
  Tensor a = random_img({3, 16, 16}, 3), b = random_img({3, 16, 16}, 4);
  auto gray = [](const Tensor& t, int y, int x) {
    return (t.at3(0, y, x) + t.at3(1, y, x) + t.at3(2, y, x)) / 3.0;
  };
  const double c1 = 1e-4, c2 = 9e-4;
  double total = 0;
  int count = 0;
  for (int y0 = 0; y0 + 8 <= 16; y0 += 4)
    for (int x0 = 0; x0 + 8 <= 16; x0 += 4) {
      double ma = 0, mb = 0;
      for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) {
          ma += gray(a, y0 + y, x0 + x);
          mb += gray(b, y0 + y, x0 + x);
        }
      ma /= 64;
      mb /= 64;
      double va = 0, vb = 0, cov = 0;
      for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) {
          double da = gray(a, y0 + y, x0 + x) - ma;
          double db = gray(b, y0 + y, x0 + x) - mb;
          va += da * da;
          vb += db * db;
          cov += da * db;
        }
      va /= 64;
      vb /= 64;
      cov /= 64;
      total += ((2 * ma * mb + c1) * (2 * cov + c2)) /
               ((ma * ma + mb * mb + c1) * (va + vb + c2));
      ++count;
    }
  CHECK(ssim(a, b) == doctest::Approx(total / count).epsilon(1e-9));

  CHECK_THROWS_AS(ssim(Tensor({4, 4}), Tensor({4, 4})), ShapeError);
}

TEST_CASE("motion_var") {
  Tensor constant({10, 3});
  for (long long i = 0; i < constant.numel(); ++i) constant[i] = 0.5;
  CHECK(motion_var(constant) == 0.0);

  Tensor two({2, 1});
  two.at2(0, 0) = 0.0;
  two.at2(1, 0) = 2.0;
  CHECK(motion_var(two) == doctest::Approx(1.0).epsilon(1e-12));

  Tensor seq = random_img({20, 4}, 5);
  Tensor shifted = seq;
  for (int r = 0; r < 20; ++r)
    for (int c = 0; c < 4; ++c) shifted.at2(r, c) += 3.0 + c;
  CHECK(motion_var(shifted) == doctest::Approx(motion_var(seq)).epsilon(1e-9));

  CHECK_THROWS_AS(motion_var(Tensor({1, 4})), ParamError);
}

TEST_CASE("motion_sid") {
  Tensor constant({32, 2});
  for (long long i = 0; i < constant.numel(); ++i) constant[i] = 0.1;
  CHECK(motion_sid(constant, 4) == 0.0);

  // two well-separated points, evenly populated -> ln 2
  Tensor two({40, 2});
  for (int r = 0; r < 40; ++r) {
    two.at2(r, 0) = r % 2 == 0 ? -10.0 : 10.0;
    two.at2(r, 1) = r % 2 == 0 ? -10.0 : 10.0;
  }
  CHECK(motion_sid(two, 2) == doctest::Approx(std::log(2.0)).epsilon(1e-6));

  Tensor seq = random_img({64, 4}, 7);
  for (int k : {2, 4, 8}) {
    double h = motion_sid(seq, k);
    CHECK(h >= 0.0);
    CHECK(h <= std::log(double(k)) + 1e-12);
    CHECK(motion_sid(seq, k) == h);  // deterministic under the fixed seed
  }

  CHECK_THROWS_AS(motion_sid(seq, 0), ParamError);
  CHECK_THROWS_AS(motion_sid(seq, 65), ParamError);
}

TEST_CASE("av_sync_corr") {
  Rng rng(9);
  std::vector<double> energy(200);
  for (double& v : energy) v = rng.uniform();

  SyncResult same = av_sync_corr(energy, energy);
  CHECK(same.corr == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(same.best_lag == 0);
  CHECK_FALSE(same.degenerate);

  // mouth follows energy 3 frames later
  std::vector<double> mouth(200, 0.0);
  for (int t = 3; t < 200; ++t) mouth[t] = energy[t - 3];
  SyncResult lag = av_sync_corr(mouth, energy);
  CHECK(lag.best_lag == 3);
  CHECK(lag.corr == doctest::Approx(1.0).epsilon(1e-12));

  // independent noise stays near zero
  std::vector<double> wa(1000), wb(1000);
  Rng ra(10), rb(11);
  for (int t = 0; t < 1000; ++t) {
    wa[t] = ra.normal();
    wb[t] = rb.normal();
  }
  CHECK(std::fabs(av_sync_corr(wa, wb).corr) < 0.15);

  std::vector<double> flat(100, 0.3);
  SyncResult deg = av_sync_corr(flat, energy.size() >= 100
                                          ? std::vector<double>(energy.begin(),
                                                                energy.begin() + 100)
                                          : energy);
  CHECK(deg.degenerate);
  CHECK(deg.corr == 0.0);

  CHECK_THROWS_AS(av_sync_corr(std::vector<double>(10, 0.0), std::vector<double>(10, 0.0)),
                  ParamError);
  CHECK_THROWS_AS(av_sync_corr(wa, std::vector<double>(999, 0.0)), ShapeError);
}

TEST_CASE("linear probe") {
  // exact linear relation is recovered almost perfectly
  Rng rng(13);
  int n = 200, d = 6;
  Tensor X({n, d});
  std::vector<double> y(n);
  std::vector<double> w_true = {0.5, -1.2, 0.0, 2.0, 0.3, -0.7};
  for (int r = 0; r < n; ++r) {
    double v = 0.25;  // intercept
    for (int c = 0; c < d; ++c) {
      X.at2(r, c) = rng.normal();
      v += w_true[c] * X.at2(r, c);
    }
    y[r] = v;
  }
  LinearProbe p = fit_probe(X, y);
  CHECK(probe_r2(p, X, y) > 0.999);
  for (int c = 0; c < d; ++c)
    CHECK(p.w[c] == doctest::Approx(w_true[c]).epsilon(1e-3));
  CHECK(p.b == doctest::Approx(0.25).epsilon(1e-2));

  // pure-noise target gives low R^2; constant target gives exactly 0
  std::vector<double> noise(n);
  Rng nr(14);
  for (double& v : noise) v = nr.normal();
  LinearProbe pn = fit_probe(X, noise);
  CHECK(probe_r2(pn, X, noise) < 0.2);
  std::vector<double> flat(n, 0.5);
  LinearProbe pf = fit_probe(X, flat);
  CHECK(probe_r2(pf, X, flat) == 0.0);

  CHECK_THROWS_AS(fit_probe(Tensor({4, 6}), std::vector<double>(4, 0.0)), ParamError);
  CHECK_THROWS_AS(fit_probe(X, std::vector<double>(n - 1, 0.0)), ShapeError);
}

TEST_CASE("eval report") {
  CHECK(metric_registry().size() == 10);
  CHECK(metric_available("psnr"));
  CHECK_FALSE(metric_available("fid"));

  EvalReport rep;
  rep.set("psnr", 31.5);
  rep.set("motion_sid", 1.2);
  rep.unavailable["fid"] = "requires a pretrained network";
  rep.config_hash = "abc123";
  rep.per_clip["clip_000"] = {{"psnr", 30.0}};

  CHECK_THROWS_AS(rep.set("made_up_metric", 1.0), ParamError);
  CHECK_THROWS_AS(rep.set("ssim", std::nan("")), NumericError);

  nlohmann::json j = rep.to_json();
  CHECK(j["metrics"]["psnr"] == 31.5);
  CHECK(j["unavailable"]["fid"] == "requires a pretrained network");
  CHECK(j["config_hash"] == "abc123");

  // round trip through text stays identical
  nlohmann::json j2 = nlohmann::json::parse(j.dump());
  CHECK(j2 == j);
}
