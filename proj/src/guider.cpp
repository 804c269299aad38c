#include "dyadgen/guider.hpp"

#include <cmath>

namespace dyadgen::guider {

using nn::LeafMap;
using nn::NodePtr;
using nn::P;
namespace ad = dyadgen::ad;

GuiderModel::GuiderModel(GuiderConfig cfg, nn::ParamStore& store, const std::string& prefix)
    : cfg_(cfg), pfx_(prefix) {
  using nn::Init;
  nn::register_mlp(store, key("style"), cfg_.motion_dim, {64, cfg_.style_dim});
  for (const char* bank : {"verbal", "nonverbal"}) {
    std::string b = key(std::string("bank.") + bank);
    store.add(b + ".emb", {cfg_.bank_size, cfg_.bank_dim}, Init::kFanIn, cfg_.bank_dim);
    store.add(b + ".key_proj", {cfg_.bank_dim, cfg_.bank_dim}, Init::kFanIn, cfg_.bank_dim);
    store.add(b + ".value_proj", {cfg_.bank_dim, cfg_.bank_dim}, Init::kFanIn, cfg_.bank_dim);
    // style affine emits all-ones at s = 0: style-insensitive at init
    store.add(b + ".mod.w", {cfg_.bank_dim, cfg_.style_dim}, Init::kZero);
    store.add(b + ".mod.b", {cfg_.bank_dim}, Init::kOnes);
    store.add(b + ".attn.wq", {cfg_.bank_dim, cfg_.feature_dim}, Init::kFanIn,
              cfg_.feature_dim);
    store.add(b + ".attn.wo", {cfg_.feature_dim, cfg_.bank_dim}, Init::kFanIn, cfg_.bank_dim);
  }
  nn::register_mlp(store, key("proj.self"), cfg_.audio_dim, {cfg_.feature_dim, cfg_.feature_dim});
  nn::register_mlp(store, key("proj.other"), cfg_.audio_dim,
                   {cfg_.feature_dim, cfg_.feature_dim});
  nn::register_mlp(store, key("fuse"), cfg_.feature_dim,
                   {cfg_.feature_dim, cfg_.feature_dim, cfg_.feature_dim});
  nn::register_mlp(store, key("ablate"), 2 * cfg_.feature_dim,
                   {cfg_.feature_dim, cfg_.feature_dim, cfg_.feature_dim});
}

NodePtr GuiderModel::encode_style_node(const LeafMap& lv, NodePtr codes) const {
  if (codes->value.ndim() != 2 || codes->value.dim(1) != cfg_.motion_dim)
    throw ShapeError("encode_style: expected [n," + std::to_string(cfg_.motion_dim) + "]");
  if (codes->value.dim(0) < 1) throw ParamError("encode_style: empty code sequence");
  NodePtr per_frame = nn::mlp_forward(lv, key("style"), codes, 2);
  return ad::reshape(ad::mean_rows(per_frame), {1, cfg_.style_dim});
}

Tensor GuiderModel::encode_style(const nn::ParamStore& store, const Tensor& codes) const {
  LeafMap lv = store.leaves();
  return encode_style_node(lv, ad::constant(codes))->value;
}

NodePtr GuiderModel::modulate_bank_node(const LeafMap& lv, const std::string& bank,
                                        NodePtr style) const {
  std::string b = key("bank." + bank);
  NodePtr emb = P(lv, b + ".emb");
  if (!style) return emb;  // NULL style: banks pass through untouched
  if (style->value.numel() != cfg_.style_dim)
    throw ShapeError("modulate_bank: style must have dim " + std::to_string(cfg_.style_dim));
  NodePtr srow = style->value.ndim() == 2 ? style : ad::reshape(style, {1, cfg_.style_dim});
  NodePtr scale = ad::linear(srow, P(lv, b + ".mod.w"), P(lv, b + ".mod.b"));
  NodePtr scaled = ad::mul_rowvec(emb, ad::reshape(scale, {cfg_.bank_dim}));
  return ad::row_rms_norm(scaled, 1e-8);
}

NodePtr GuiderModel::cross_attend_node(const LeafMap& lv, const std::string& bank,
                                       NodePtr query, NodePtr bank_matrix) const {
  if (query->value.ndim() != 2 || query->value.dim(1) != cfg_.feature_dim)
    throw ShapeError("cross_attend: query must be [n," + std::to_string(cfg_.feature_dim) +
                     "], got " + Tensor::shape_str(query->value.shape()));
  if (bank_matrix->value.ndim() != 2 || bank_matrix->value.dim(1) != cfg_.bank_dim)
    throw ShapeError("cross_attend: bank matrix must be [K," +
                     std::to_string(cfg_.bank_dim) + "]");
  std::string b = key("bank." + bank);
  NodePtr q = ad::linear(query, P(lv, b + ".attn.wq"), nullptr);
  NodePtr k = ad::linear(bank_matrix, P(lv, b + ".key_proj"), nullptr);
  NodePtr v = ad::linear(bank_matrix, P(lv, b + ".value_proj"), nullptr);
  NodePtr logits = ad::scale(ad::matmul(q, ad::transpose(k)), 1.0 / std::sqrt(cfg_.bank_dim));
  NodePtr attn = ad::softmax_rows(logits);
  NodePtr mixed = ad::matmul(attn, v);
  return ad::linear(mixed, P(lv, b + ".attn.wo"), nullptr);
}

NodePtr GuiderModel::fuse_features_node(const LeafMap& lv, NodePtr verbal,
                                        NodePtr nonverbal) const {
  check_same_shape(verbal->value, nonverbal->value, "fuse_features");
  return nn::mlp_forward(lv, key("fuse"), ad::add(verbal, nonverbal), 3);
}

NodePtr GuiderModel::forward_node(const LeafMap& lv, NodePtr audio_self,
                                  NodePtr audio_other, NodePtr style,
                                  bool ablate_banks) const {
  if (audio_self->value.ndim() != 2 || audio_other->value.ndim() != 2 ||
      audio_self->value.dim(0) != audio_other->value.dim(0) ||
      audio_self->value.dim(1) != cfg_.audio_dim ||
      audio_other->value.dim(1) != cfg_.audio_dim)
    throw ShapeError("guider: audio tracks must both be [n," +
                     std::to_string(cfg_.audio_dim) + "]");
  NodePtr qs = nn::mlp_forward(lv, key("proj.self"), audio_self, 2);
  NodePtr qo = nn::mlp_forward(lv, key("proj.other"), audio_other, 2);
  if (ablate_banks)
    return nn::mlp_forward(lv, key("ablate"), ad::concat_cols(qs, qo), 3);
  NodePtr verbal = cross_attend_node(lv, "verbal", qs, modulate_bank_node(lv, "verbal", style));
  NodePtr nonverbal =
      cross_attend_node(lv, "nonverbal", qo, modulate_bank_node(lv, "nonverbal", style));
  return fuse_features_node(lv, verbal, nonverbal);
}

Tensor GuiderModel::forward(const nn::ParamStore& store, const Tensor& audio_self,
                            const Tensor& audio_other, const StyleVector& style,
                            bool ablate_banks) const {
  LeafMap lv = store.leaves();
  NodePtr style_node = style ? ad::constant(*style) : nullptr;
  return forward_node(lv, ad::constant(audio_self), ad::constant(audio_other), style_node,
                      ablate_banks)
      ->value;
}

Tensor cross_attention_rows(const nn::ParamStore& store, const GuiderModel& model,
                            const std::string& bank, const Tensor& query,
                            const Tensor& bank_matrix) {
  // mirrors cross_attend_node up to the softmax; used by tests
  LeafMap lv = store.leaves();
  const auto& cfg = model.config();
  std::string b = "guider.bank." + bank;
  NodePtr q = ad::linear(ad::constant(query), P(lv, b + ".attn.wq"), nullptr);
  NodePtr k = ad::linear(ad::constant(bank_matrix), P(lv, b + ".key_proj"), nullptr);
  NodePtr logits = ad::scale(ad::matmul(q, ad::transpose(k)), 1.0 / std::sqrt(cfg.bank_dim));
  return ad::softmax_rows(logits)->value;
}

}  // namespace dyadgen::guider
