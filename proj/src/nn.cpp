#include "dyadgen/nn.hpp"

#include <cmath>
#include <cstring>
#include <functional>

namespace dyadgen::nn {

namespace {

uint64_t fnv1a(const void* data, size_t len, uint64_t h = 0xcbf29ce484222325ULL) {
  const unsigned char* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

uint64_t name_hash(const std::string& s) { return fnv1a(s.data(), s.size()); }

}  // namespace

Tensor& ParamStore::add(const std::string& name, std::vector<int> shape, Init init,
                        int fan_in) {
  if (params_.count(name)) throw ParamError("duplicate parameter: " + name);
  Entry e;
  e.value = Tensor(shape);
  e.grad = Tensor(shape);
  switch (init) {
    case Init::kZero:
      break;
    case Init::kOnes:
      e.value.fill(1.0);
      break;
    case Init::kFanIn: {
      if (fan_in <= 0) throw ParamError("fan_in init requires fan_in > 0: " + name);
      Rng rng(derive_seed(init_seed_, name_hash(name)));
      double std = 1.0 / std::sqrt(static_cast<double>(fan_in));
      for (long long i = 0; i < e.value.numel(); ++i) e.value[i] = std * rng.normal();
      break;
    }
  }
  auto [it, ok] = params_.emplace(name, std::move(e));
  return it->second.value;
}

Tensor& ParamStore::value(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw ParamError("unknown parameter: " + name);
  return it->second.value;
}

const Tensor& ParamStore::value(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw ParamError("unknown parameter: " + name);
  return it->second.value;
}

Tensor& ParamStore::grad(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw ParamError("unknown parameter: " + name);
  return it->second.grad;
}

LeafMap ParamStore::leaves() const {
  LeafMap m;
  for (const auto& [name, e] : params_) m.emplace(name, ad::leaf(e.value));
  return m;
}

void ParamStore::accumulate(const LeafMap& leaves) {
  for (const auto& [name, node] : leaves) {
    auto it = params_.find(name);
    if (it == params_.end()) continue;
    if (node->grad.numel() != it->second.grad.numel()) continue;  // never touched
    Tensor& g = it->second.grad;
    for (long long i = 0; i < g.numel(); ++i) g[i] += node->grad[i];
  }
}

void ParamStore::zero_grads() {
  for (auto& [name, e] : params_) e.grad.fill(0.0);
}

std::vector<std::string> ParamStore::names() const {
  std::vector<std::string> out;
  out.reserve(params_.size());
  for (const auto& [name, e] : params_) out.push_back(name);
  return out;
}

uint64_t ParamStore::checksum() const {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& [name, e] : params_) {
    h = fnv1a(name.data(), name.size(), h);
    h = fnv1a(e.value.data(), sizeof(double) * e.value.numel(), h);
  }
  return h;
}

void AdamW::step(double grad_scale) {
  ++t_;
  double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (const auto& name : store_->names()) {
    Tensor& w = store_->value(name);
    Tensor& g = store_->grad(name);
    Tensor& m = m_.try_emplace(name, Tensor(w.shape())).first->second;
    Tensor& v = v_.try_emplace(name, Tensor(w.shape())).first->second;
    for (long long i = 0; i < w.numel(); ++i) {
      double gi = g[i] / grad_scale;
      if (!std::isfinite(gi)) throw NumericError("AdamW: non-finite gradient in " + name);
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi;
      v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi;
      double mhat = m[i] / bc1;
      double vhat = v[i] / bc2;
      w[i] -= cfg_.lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * w[i]);
    }
  }
}

std::map<std::string, Tensor> AdamW::state_arrays() const {
  std::map<std::string, Tensor> out;
  for (const auto& [name, t] : m_) out.emplace("adam.m." + name, t);
  for (const auto& [name, t] : v_) out.emplace("adam.v." + name, t);
  return out;
}

void AdamW::load_state(const std::map<std::string, Tensor>& arrays, int64_t step_count) {
  m_.clear();
  v_.clear();
  for (const auto& [name, t] : arrays) {
    if (name.rfind("adam.m.", 0) == 0) m_.emplace(name.substr(7), t);
    else if (name.rfind("adam.v.", 0) == 0) v_.emplace(name.substr(7), t);
  }
  t_ = step_count;
}

void register_mlp(ParamStore& s, const std::string& prefix, int in_dim,
                  const std::vector<int>& widths, bool zero_last) {
  int prev = in_dim;
  for (size_t i = 0; i < widths.size(); ++i) {
    bool last = (i + 1 == widths.size());
    Init wi = (last && zero_last) ? Init::kZero : Init::kFanIn;
    s.add(prefix + ".w" + std::to_string(i), {widths[i], prev}, wi, prev);
    s.add(prefix + ".b" + std::to_string(i), {widths[i]}, Init::kZero);
    prev = widths[i];
  }
}

NodePtr mlp_forward(const LeafMap& leaves, const std::string& prefix, NodePtr x,
                    int n_layers) {
  for (int i = 0; i < n_layers; ++i) {
    x = ad::linear(x, P(leaves, prefix + ".w" + std::to_string(i)),
                   P(leaves, prefix + ".b" + std::to_string(i)));
    if (i + 1 < n_layers) x = ad::tanh_(x);
  }
  return x;
}

void register_attention(ParamStore& s, const std::string& prefix, int width) {
  for (const char* part : {"wq", "wk", "wv", "wo"})
    s.add(prefix + "." + part, {width, width}, Init::kFanIn, width);
  for (const char* part : {"bq", "bk", "bv", "bo"})
    s.add(prefix + "." + part, {width}, Init::kZero);
}

NodePtr attention_forward(const LeafMap& leaves, const std::string& prefix,
                          NodePtr q_in, NodePtr kv_in, int heads) {
  int width = q_in->value.dim(1);
  if (width % heads != 0) throw ShapeError("attention: width not divisible by heads");
  int hd = width / heads;
  NodePtr q = ad::linear(q_in, P(leaves, prefix + ".wq"), P(leaves, prefix + ".bq"));
  NodePtr k = ad::linear(kv_in, P(leaves, prefix + ".wk"), P(leaves, prefix + ".bk"));
  NodePtr v = ad::linear(kv_in, P(leaves, prefix + ".wv"), P(leaves, prefix + ".bv"));
  NodePtr merged;
  for (int h = 0; h < heads; ++h) {
    NodePtr qh = heads == 1 ? q : ad::slice_cols(q, h * hd, (h + 1) * hd);
    NodePtr kh = heads == 1 ? k : ad::slice_cols(k, h * hd, (h + 1) * hd);
    NodePtr vh = heads == 1 ? v : ad::slice_cols(v, h * hd, (h + 1) * hd);
    NodePtr logits = ad::scale(ad::matmul(qh, ad::transpose(kh)), 1.0 / std::sqrt(hd));
    NodePtr attn = ad::softmax_rows(logits);
    NodePtr out = ad::matmul(attn, vh);
    merged = merged ? ad::concat_cols(merged, out) : out;
  }
  return ad::linear(merged, P(leaves, prefix + ".wo"), P(leaves, prefix + ".bo"));
}

void register_layer_norm(ParamStore& s, const std::string& prefix, int width) {
  s.add(prefix + ".gamma", {width}, Init::kOnes);
  s.add(prefix + ".beta", {width}, Init::kZero);
}

NodePtr layer_norm(const LeafMap& leaves, const std::string& prefix, NodePtr x) {
  return ad::layer_norm_rows(x, P(leaves, prefix + ".gamma"), P(leaves, prefix + ".beta"));
}

double gradient_check(ParamStore& store,
                      const std::function<NodePtr(const LeafMap&)>& loss_fn,
                      int coords_per_param, uint64_t seed, double fd_step) {
  // analytic pass
  store.zero_grads();
  {
    LeafMap leaves = store.leaves();
    NodePtr loss = loss_fn(leaves);
    ad::backward(loss);
    store.accumulate(leaves);
  }
  auto eval = [&]() {
    LeafMap leaves = store.leaves();
    return loss_fn(leaves)->value[0];
  };
  double max_rel = 0.0;
  Rng rng(seed);
  for (const auto& name : store.names()) {
    Tensor& w = store.value(name);
    const Tensor& g = store.grad(name);
    int n = static_cast<int>(w.numel());
    for (int c = 0; c < coords_per_param && c < n; ++c) {
      int i = coords_per_param >= n ? c : rng.uniform_int(n);
      double orig = w[i];
      w[i] = orig + fd_step;
      double lp = eval();
      w[i] = orig - fd_step;
      double lm = eval();
      w[i] = orig;
      double num = (lp - lm) / (2.0 * fd_step);
      double ana = g[i];
      double denom = std::max({std::fabs(num), std::fabs(ana), 1e-6});
      max_rel = std::max(max_rel, std::fabs(num - ana) / denom);
    }
  }
  return max_rel;
}

}  // namespace dyadgen::nn
