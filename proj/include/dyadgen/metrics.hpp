#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "dyadgen/tensor.hpp"

namespace dyadgen::metrics {

// images are [3,H,W] or [H,W] with values in [0,1]

double psnr(const Tensor& pred, const Tensor& target);  // dB, capped at 99
double ssim(const Tensor& pred, const Tensor& target);  // 8x8 windows, stride 4

// codes: [n, d] sequence of motion codes (or pose fields)
double motion_var(const Tensor& codes);
double motion_sid(const Tensor& codes, int k = 8, uint64_t seed = 0);

struct SyncResult {
  double corr = 0.0;
  int best_lag = 0;
  bool degenerate = false;  // constant input, correlation undefined
};
SyncResult av_sync_corr(const std::vector<double>& mouth,
                        const std::vector<double>& energy, int max_lag = 5);

// Ridge-regression probe from code rows to a scalar target.
struct LinearProbe {
  Tensor w;       // [d]
  double b = 0.0;
};
LinearProbe fit_probe(const Tensor& X, const std::vector<double>& y,
                      double ridge = 1e-3);
std::vector<double> probe_predict(const LinearProbe& p, const Tensor& X);
// coefficient of determination on (X, y); constant y -> 0
double probe_r2(const LinearProbe& p, const Tensor& X,
                const std::vector<double>& y);

// Fixed metric registry; names outside it never appear in a report.
const std::vector<std::string>& metric_registry();
bool metric_available(const std::string& name);

struct EvalReport {
  std::map<std::string, double> scalars;            // available metrics only
  std::map<std::string, std::string> unavailable;   // name -> reason
  nlohmann::json per_clip = nlohmann::json::object();
  std::string config_hash;

  void set(const std::string& name, double value);  // validates registry + finite
  nlohmann::json to_json() const;                   // sorted keys
};

}  // namespace dyadgen::metrics
