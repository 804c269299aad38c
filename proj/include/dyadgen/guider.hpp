#pragma once

#include <cstdint>
#include <optional>

#include "dyadgen/nn.hpp"
#include "dyadgen/tensor.hpp"

namespace dyadgen::guider {

struct GuiderConfig {
  int audio_dim = 24;     // D_a
  int motion_dim = 32;    // D_m (style encoder input)
  int feature_dim = 128;  // d_f
  int bank_size = 16;     // K (paper-scale: 64)
  int bank_dim = 128;     // d  (paper-scale: 512)
  int style_dim = 64;     // d_s
};

// Style vector; NULL is a distinguished absent value, not a zero vector.
using StyleVector = std::optional<Tensor>;  // [d_s] when present

// Interactive motion guider: dual-track audio -> per-frame conditioning f_m.
// Verbal/non-verbal memory banks are read through cross-attention; a style
// vector can reshape the banks via modulation + row demodulation.
class GuiderModel {
 public:
  GuiderModel(GuiderConfig cfg, nn::ParamStore& store, const std::string& prefix = "guider");

  const GuiderConfig& config() const { return cfg_; }

  // [n, D_m] motion codes -> [1, d_s] global style descriptor
  nn::NodePtr encode_style_node(const nn::LeafMap& lv, nn::NodePtr codes) const;
  Tensor encode_style(const nn::ParamStore& store, const Tensor& codes) const;

  // bank in {"verbal","nonverbal"}; style may be null (identity path)
  nn::NodePtr modulate_bank_node(const nn::LeafMap& lv, const std::string& bank,
                                 nn::NodePtr style /*nullable*/) const;

  // query [n, d_f], bank matrix [K, d]; single-head cross attention
  nn::NodePtr cross_attend_node(const nn::LeafMap& lv, const std::string& bank,
                                nn::NodePtr query, nn::NodePtr bank_matrix) const;

  nn::NodePtr fuse_features_node(const nn::LeafMap& lv, nn::NodePtr verbal,
                                 nn::NodePtr nonverbal) const;

  // full forward: [n, D_a] x2 (+ optional style [1,d_s]) -> f_m [n, d_f]
  nn::NodePtr forward_node(const nn::LeafMap& lv, nn::NodePtr audio_self,
                           nn::NodePtr audio_other, nn::NodePtr style /*nullable*/,
                           bool ablate_banks) const;
  Tensor forward(const nn::ParamStore& store, const Tensor& audio_self,
                 const Tensor& audio_other, const StyleVector& style,
                 bool ablate_banks) const;

 private:
  GuiderConfig cfg_;
  std::string pfx_;
  std::string key(const std::string& s) const { return pfx_ + "." + s; }
};

// Exposed for unit tests: attention weights for a query against a bank.
Tensor cross_attention_rows(const nn::ParamStore& store, const GuiderModel& model,
                            const std::string& bank, const Tensor& query,
                            const Tensor& bank_matrix);

}  // namespace dyadgen::guider
