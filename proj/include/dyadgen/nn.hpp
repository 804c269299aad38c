#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "dyadgen/graph.hpp"
#include "dyadgen/rng.hpp"
#include "dyadgen/tensor.hpp"

namespace dyadgen::nn {

using ad::Node;
using ad::NodePtr;

// Per-graph view of the parameters: fresh leaf nodes sharing current values.
// Thread-safe to build graphs against (each worker gets its own leaves).
using LeafMap = std::map<std::string, NodePtr>;

enum class Init {
  kZero,
  kOnes,
  kFanIn,   // normal, std = 1/sqrt(fan_in)
};

// Named parameter registry with gradient accumulators. Values are mutated
// only by the optimizer; graphs are built from leaf copies.
class ParamStore {
 public:
  explicit ParamStore(uint64_t init_seed = 0) : init_seed_(init_seed) {}

  Tensor& add(const std::string& name, std::vector<int> shape, Init init,
              int fan_in = 0);
  bool has(const std::string& name) const { return params_.count(name) > 0; }
  Tensor& value(const std::string& name);
  const Tensor& value(const std::string& name) const;
  Tensor& grad(const std::string& name);

  LeafMap leaves() const;
  // Adds each leaf's gradient into the store accumulators; deterministic
  // given call order.
  void accumulate(const LeafMap& leaves);
  void zero_grads();

  std::vector<std::string> names() const;
  size_t size() const { return params_.size(); }
  uint64_t init_seed() const { return init_seed_; }

  // FNV-1a over the raw f64 bytes of all parameters in name order.
  uint64_t checksum() const;

 private:
  struct Entry {
    Tensor value;
    Tensor grad;
  };
  std::map<std::string, Entry> params_;
  uint64_t init_seed_;
};

struct AdamWConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-2;
};

class AdamW {
 public:
  AdamW(ParamStore& store, AdamWConfig cfg) : store_(&store), cfg_(cfg) {}

  // One update from the accumulated gradients scaled by 1/grad_scale
  // (grad_scale = number of samples summed into the accumulators).
  void step(double grad_scale = 1.0);

  int64_t step_count() const { return t_; }

  // Optimizer state round-trips through checkpoints for exact resume.
  std::map<std::string, Tensor> state_arrays() const;
  void load_state(const std::map<std::string, Tensor>& arrays, int64_t step_count);

 private:
  ParamStore* store_;
  AdamWConfig cfg_;
  std::map<std::string, Tensor> m_, v_;
  int64_t t_ = 0;
};

inline NodePtr P(const LeafMap& leaves, const std::string& name) {
  auto it = leaves.find(name);
  if (it == leaves.end()) throw ParamError("unknown parameter: " + name);
  return it->second;
}

// y = tanh(x W1^T + b1) ... with a linear final layer.
// Registers prefix.w0/b0, prefix.w1/b1, ... over the given widths.
void register_mlp(ParamStore& s, const std::string& prefix, int in_dim,
                  const std::vector<int>& widths, bool zero_last = false);
NodePtr mlp_forward(const LeafMap& leaves, const std::string& prefix, NodePtr x,
                    int n_layers);

// Multi-head attention. q:[nq,w], kv:[nk,w]; all projections are w->w.
// Registers prefix.{wq,wk,wv,wo} (+biases bq,bk,bv,bo).
void register_attention(ParamStore& s, const std::string& prefix, int width);
NodePtr attention_forward(const LeafMap& leaves, const std::string& prefix,
                          NodePtr q_in, NodePtr kv_in, int heads);

void register_layer_norm(ParamStore& s, const std::string& prefix, int width);
NodePtr layer_norm(const LeafMap& leaves, const std::string& prefix, NodePtr x);

// Central finite differences against the analytic gradient for a sampled set
// of coordinates of every parameter. Returns max relative error observed.
// `loss_fn` must rebuild the graph from fresh leaves each call.
double gradient_check(ParamStore& store,
                      const std::function<NodePtr(const LeafMap&)>& loss_fn,
                      int coords_per_param, uint64_t seed, double fd_step = 1e-4);

}  // namespace dyadgen::nn
