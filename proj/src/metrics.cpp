#include "dyadgen/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "dyadgen/rng.hpp"

namespace dyadgen::metrics {

namespace {

constexpr double kPsnrCap = 99.0;

Tensor to_gray(const Tensor& img) {
  if (img.ndim() == 2) return img;
  if (img.ndim() == 3) {
    int c = img.dim(0), h = img.dim(1), w = img.dim(2);
    Tensor g({h, w});
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double acc = 0.0;
        for (int ch = 0; ch < c; ++ch) acc += img.at3(ch, y, x);
        g.at2(y, x) = acc / c;
      }
    return g;
  }
  throw ShapeError("image must be [H,W] or [C,H,W], got " +
                   Tensor::shape_str(img.shape()));
}

void check_range(const Tensor& t, const char* op) {
  for (long long i = 0; i < t.numel(); ++i)
    if (!(t[i] >= -1e-9 && t[i] <= 1.0 + 1e-9))
      throw ParamError(std::string(op) + ": pixel values must lie in [0,1]");
}

}  // namespace

double psnr(const Tensor& pred, const Tensor& target) {
  check_same_shape(pred, target, "psnr");
  check_range(pred, "psnr");
  check_range(target, "psnr");
  double mse = 0.0;
  for (long long i = 0; i < pred.numel(); ++i) {
    double d = pred[i] - target[i];
    mse += d * d;
  }
  mse /= static_cast<double>(pred.numel());
  if (mse <= 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

double ssim(const Tensor& pred, const Tensor& target) {
  check_same_shape(pred, target, "ssim");
  Tensor a = to_gray(pred), b = to_gray(target);
  const int win = 8, stride = 4;
  int h = a.dim(0), w = a.dim(1);
  if (h < win || w < win)
    throw ShapeError("ssim: image smaller than the " + std::to_string(win) +
                     "x" + std::to_string(win) + " window");
  const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  double total = 0.0;
  int count = 0;
  for (int y0 = 0; y0 + win <= h; y0 += stride)
    for (int x0 = 0; x0 + win <= w; x0 += stride) {
      double ma = 0, mb = 0;
      for (int y = 0; y < win; ++y)
        for (int x = 0; x < win; ++x) {
          ma += a.at2(y0 + y, x0 + x);
          mb += b.at2(y0 + y, x0 + x);
        }
      const double n = win * win;
      ma /= n;
      mb /= n;
      double va = 0, vb = 0, cov = 0;
      for (int y = 0; y < win; ++y)
        for (int x = 0; x < win; ++x) {
          double da = a.at2(y0 + y, x0 + x) - ma;
          double db = b.at2(y0 + y, x0 + x) - mb;
          va += da * da;
          vb += db * db;
          cov += da * db;
        }
      va /= n;
      vb /= n;
      cov /= n;
      total += ((2 * ma * mb + c1) * (2 * cov + c2)) /
               ((ma * ma + mb * mb + c1) * (va + vb + c2));
      ++count;
    }
  return total / count;
}

double motion_var(const Tensor& codes) {
  if (codes.ndim() != 2) throw ShapeError("motion_var: expected [n,d]");
  int n = codes.dim(0), d = codes.dim(1);
  if (n < 2) throw ParamError("motion_var: need at least 2 frames");
  double acc = 0.0;
  for (int c = 0; c < d; ++c) {
    double mean = 0.0;
    for (int r = 0; r < n; ++r) mean += codes.at2(r, c);
    mean /= n;
    double var = 0.0;
    for (int r = 0; r < n; ++r) {
      double dv = codes.at2(r, c) - mean;
      var += dv * dv;
    }
    acc += var / n;
  }
  return acc / d;
}

double motion_sid(const Tensor& codes, int k, uint64_t seed) {
  if (codes.ndim() != 2) throw ShapeError("motion_sid: expected [n,d]");
  int n = codes.dim(0), d = codes.dim(1);
  if (k < 1 || k > n)
    throw ParamError("motion_sid: k must be in [1, n], got k=" + std::to_string(k) +
                     " n=" + std::to_string(n));
  auto dist2 = [&](int row, const std::vector<double>& center) {
    double acc = 0.0;
    for (int c = 0; c < d; ++c) {
      double dv = codes.at2(row, c) - center[c];
      acc += dv * dv;
    }
    return acc;
  };

  // k-means++ seeding
  Rng rng(derive_seed(seed, 0x51d));
  std::vector<std::vector<double>> centers;
  centers.reserve(static_cast<size_t>(k));
  int first = rng.uniform_int(n);
  centers.emplace_back(codes.vec().begin() + static_cast<long>(first) * d,
                       codes.vec().begin() + static_cast<long>(first + 1) * d);
  std::vector<double> dmin(static_cast<size_t>(n));
  while (static_cast<int>(centers.size()) < k) {
    double total = 0.0;
    for (int r = 0; r < n; ++r) {
      double best = std::numeric_limits<double>::infinity();
      for (const auto& c : centers) best = std::min(best, dist2(r, c));
      dmin[r] = best;
      total += best;
    }
    int pick;
    if (total <= 0.0) {
      pick = rng.uniform_int(n);  // all points coincide with a center
    } else {
      double u = rng.uniform() * total, run = 0.0;
      pick = n - 1;
      for (int r = 0; r < n; ++r) {
        run += dmin[r];
        if (u < run) {
          pick = r;
          break;
        }
      }
    }
    centers.emplace_back(codes.vec().begin() + static_cast<long>(pick) * d,
                         codes.vec().begin() + static_cast<long>(pick + 1) * d);
  }

  std::vector<int> assign(static_cast<size_t>(n), 0);
  for (int iter = 0; iter < 20; ++iter) {
    for (int r = 0; r < n; ++r) {
      double best = std::numeric_limits<double>::infinity();
      for (int c = 0; c < k; ++c) {
        double dd = dist2(r, centers[c]);
        if (dd < best) {
          best = dd;
          assign[r] = c;
        }
      }
    }
    std::vector<std::vector<double>> sums(static_cast<size_t>(k),
                                          std::vector<double>(d, 0.0));
    std::vector<int> counts(static_cast<size_t>(k), 0);
    for (int r = 0; r < n; ++r) {
      ++counts[assign[r]];
      for (int c = 0; c < d; ++c) sums[assign[r]][c] += codes.at2(r, c);
    }
    for (int c = 0; c < k; ++c)
      if (counts[c] > 0)
        for (int j = 0; j < d; ++j) centers[c][j] = sums[c][j] / counts[c];
  }

  std::vector<int> counts(static_cast<size_t>(k), 0);
  for (int r = 0; r < n; ++r) ++counts[assign[r]];
  double h = 0.0;
  for (int c = 0; c < k; ++c) {
    if (counts[c] == 0) continue;
    double p = static_cast<double>(counts[c]) / n;
    h -= p * std::log(p);
  }
  return h;
}

SyncResult av_sync_corr(const std::vector<double>& mouth,
                        const std::vector<double>& energy, int max_lag) {
  if (mouth.size() != energy.size())
    throw ShapeError("av_sync_corr: sequence lengths differ");
  int n = static_cast<int>(mouth.size());
  if (n < 50) throw ParamError("av_sync_corr: need length >= 50");
  if (max_lag < 0 || max_lag >= n / 2)
    throw ParamError("av_sync_corr: invalid max_lag");

  auto is_constant = [](const std::vector<double>& v) {
    for (double x : v)
      if (x != v.front()) return false;
    return true;
  };
  SyncResult res;
  if (is_constant(mouth) || is_constant(energy)) {
    res.degenerate = true;
    return res;
  }

  // lag L pairs mouth[t] with energy[t - L]
  double best = -std::numeric_limits<double>::infinity();
  int best_lag = 0;
  for (int lag = -max_lag; lag <= max_lag; ++lag) {
    int lo = std::max(0, lag), hi = n + std::min(0, lag);
    int m = hi - lo;
    double mm = 0, me = 0;
    for (int t = lo; t < hi; ++t) {
      mm += mouth[t];
      me += energy[t - lag];
    }
    mm /= m;
    me /= m;
    double num = 0, va = 0, vb = 0;
    for (int t = lo; t < hi; ++t) {
      double a = mouth[t] - mm, b = energy[t - lag] - me;
      num += a * b;
      va += a * a;
      vb += b * b;
    }
    double r = (va <= 0.0 || vb <= 0.0) ? 0.0 : num / std::sqrt(va * vb);
    if (r > best) {
      best = r;
      best_lag = lag;
    }
  }
  res.corr = best;
  res.best_lag = best_lag;
  return res;
}

LinearProbe fit_probe(const Tensor& X, const std::vector<double>& y, double ridge) {
  if (X.ndim() != 2) throw ShapeError("fit_probe: expected [n,d]");
  int n = X.dim(0), d = X.dim(1);
  if (static_cast<size_t>(n) != y.size())
    throw ShapeError("fit_probe: target length mismatch");
  if (n < d + 1) throw ParamError("fit_probe: need more rows than features");

  std::vector<double> xm(static_cast<size_t>(d), 0.0);
  double ym = 0.0;
  for (int r = 0; r < n; ++r) {
    for (int c = 0; c < d; ++c) xm[c] += X.at2(r, c);
    ym += y[r];
  }
  for (int c = 0; c < d; ++c) xm[c] /= n;
  ym /= n;

  // normal equations on centered data, ridge on the diagonal
  std::vector<double> a(static_cast<size_t>(d) * d, 0.0);
  std::vector<double> rhs(static_cast<size_t>(d), 0.0);
  for (int r = 0; r < n; ++r)
    for (int i = 0; i < d; ++i) {
      double xi = X.at2(r, i) - xm[i];
      rhs[i] += xi * (y[r] - ym);
      for (int j = i; j < d; ++j) a[i * d + j] += xi * (X.at2(r, j) - xm[j]);
    }
  for (int i = 0; i < d; ++i) {
    a[i * d + i] += ridge;
    for (int j = 0; j < i; ++j) a[i * d + j] = a[j * d + i];
  }

  // Gaussian elimination with partial pivoting
  std::vector<double> w(rhs);
  for (int col = 0; col < d; ++col) {
    int piv = col;
    for (int r = col + 1; r < d; ++r)
      if (std::fabs(a[r * d + col]) > std::fabs(a[piv * d + col])) piv = r;
    if (std::fabs(a[piv * d + col]) < 1e-300)
      throw NumericError("fit_probe: singular normal matrix");
    if (piv != col) {
      for (int c = 0; c < d; ++c) std::swap(a[col * d + c], a[piv * d + c]);
      std::swap(w[col], w[piv]);
    }
    for (int r = col + 1; r < d; ++r) {
      double f = a[r * d + col] / a[col * d + col];
      for (int c = col; c < d; ++c) a[r * d + c] -= f * a[col * d + c];
      w[r] -= f * w[col];
    }
  }
  for (int r = d - 1; r >= 0; --r) {
    for (int c = r + 1; c < d; ++c) w[r] -= a[r * d + c] * w[c];
    w[r] /= a[r * d + r];
  }

  LinearProbe p;
  p.w = Tensor({d}, w);
  p.b = ym;
  for (int c = 0; c < d; ++c) p.b -= p.w[c] * xm[c];
  return p;
}

std::vector<double> probe_predict(const LinearProbe& p, const Tensor& X) {
  if (X.ndim() != 2 || X.dim(1) != p.w.numel())
    throw ShapeError("probe_predict: feature dim mismatch");
  std::vector<double> out(static_cast<size_t>(X.dim(0)));
  for (int r = 0; r < X.dim(0); ++r) {
    double v = p.b;
    for (int c = 0; c < X.dim(1); ++c) v += p.w[c] * X.at2(r, c);
    out[r] = v;
  }
  return out;
}

double probe_r2(const LinearProbe& p, const Tensor& X, const std::vector<double>& y) {
  std::vector<double> pred = probe_predict(p, X);
  if (pred.size() != y.size()) throw ShapeError("probe_r2: target length mismatch");
  double ym = 0.0;
  for (double v : y) ym += v;
  ym /= static_cast<double>(y.size());
  double ss_res = 0.0, ss_tot = 0.0;
  for (size_t i = 0; i < y.size(); ++i) {
    double dr = y[i] - pred[i], dt = y[i] - ym;
    ss_res += dr * dr;
    ss_tot += dt * dt;
  }
  if (ss_tot <= 0.0) return 0.0;
  return 1.0 - ss_res / ss_tot;
}

const std::vector<std::string>& metric_registry() {
  static const std::vector<std::string> names = {
      "psnr",        "ssim",          "motion_var",    "motion_sid",
      "av_sync_corr", "pose_var",     "pose_sid",      "fid",
      "lpips",       "csim",
  };
  return names;
}

bool metric_available(const std::string& name) {
  return name != "fid" && name != "lpips" && name != "csim";
}

void EvalReport::set(const std::string& name, double value) {
  const auto& reg = metric_registry();
  if (std::find(reg.begin(), reg.end(), name) == reg.end())
    throw ParamError("EvalReport: metric '" + name + "' not in the registry");
  if (!std::isfinite(value))
    throw NumericError("EvalReport: non-finite value for metric '" + name + "'");
  scalars[name] = value;
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json j;
  j["metrics"] = scalars;
  j["unavailable"] = unavailable;
  j["per_clip"] = per_clip;
  j["config_hash"] = config_hash;
  return j;
}

}  // namespace dyadgen::metrics
