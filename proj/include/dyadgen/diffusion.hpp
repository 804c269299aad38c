#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include "dyadgen/guider.hpp"
#include "dyadgen/motion_space.hpp"
#include "dyadgen/nn.hpp"
#include "dyadgen/rng.hpp"
#include "dyadgen/tensor.hpp"
#include "dyadgen/world.hpp"

namespace dyadgen::diffusion {

struct NoiseSchedule {
  int T = 0;
  std::vector<double> beta;
  std::vector<double> alpha;
  std::vector<double> alpha_bar;

  // alpha_bar with the boundary convention alpha_bar(-1) = 1
  double alpha_bar_at(int t) const;
};

NoiseSchedule make_schedule(int T, double beta_min, double beta_max);

// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) noise
Tensor forward_diffuse(const Tensor& x0, int t, const Tensor& noise,
                       const NoiseSchedule& sched);

// interleaved sin/cos, geometric frequencies, base 10000; dim must be even
Tensor sinusoidal_embed(double t, int dim);

struct DenoiserConfig {
  int blocks = 4;
  int heads = 4;
  int width = 128;
  int window = 40;       // N
  int motion_dim = 32;   // D_m
  int feature_dim = 128; // d_f of the guider output
  int prev_tail = 10;
  double cfg_motion = 2.0;
  double cfg_prev = 1.5;
  int ddim_steps = 20;
};

// Conditional transformer over N+1 tokens (window rows plus a timestep
// token). Each block runs self-attention, then motion-attention against f_m
// and temporal-attention against the previous-window tail; conditional
// sublayers are skipped entirely when their input is NULL.
class DenoiserModel {
 public:
  DenoiserModel(DenoiserConfig cfg, nn::ParamStore& store,
                const std::string& prefix = "denoiser");

  const DenoiserConfig& config() const { return cfg_; }

  nn::NodePtr forward_node(const nn::LeafMap& lv, nn::NodePtr x_t, int t,
                           nn::NodePtr f_m /*nullable*/,
                           nn::NodePtr ctx /*nullable*/) const;
  Tensor forward(const nn::ParamStore& store, const Tensor& x_t, int t,
                 const Tensor* f_m, const Tensor* ctx) const;

 private:
  DenoiserConfig cfg_;
  std::string pfx_;
  Tensor pos_window_;  // [N, width] fixed positional table
  Tensor pos_tail_;    // [prev_tail, width], positions -prev_tail..-1
  std::string key(const std::string& s) const { return pfx_ + "." + s; }
};

// eps(x_t, t, f_m or null, ctx or null) -> predicted noise
using DenoiseFn =
    std::function<Tensor(const Tensor&, int, const Tensor*, const Tensor*)>;

// e0 + s_motion (e1 - e0) + s_prev (e2 - e1); e2 pass skipped when ctx NULL
Tensor cfg_predict(const DenoiseFn& eps, const Tensor& x_t, int t,
                   const Tensor* f_m, const Tensor* ctx, double s_motion,
                   double s_prev);

// deterministic (eta = 0); t_prev = -1 means a final step to x0
Tensor ddim_step(const Tensor& x_t, int t, int t_prev, const Tensor& eps_hat,
                 const NoiseSchedule& sched);

// uniformly spaced subset starting at T-1; the implicit final target is -1
std::vector<int> ddim_timesteps(int T, int steps);

struct Stage2Config {
  int T = 1000;
  double beta_min = 1e-4;
  double beta_max = 0.02;
  guider::GuiderConfig guider;
  DenoiserConfig denoiser;
  double p_null_style = 0.3;
  double p_drop_cond = 0.5;
  bool joint_drop = false;  // drop f_m and ctx together instead of independently
  int warmup_epochs = 2;
  int init_noise_t = -1;    // inference start level; -1 means T-1
};

// Stage-2 bundle: guider + denoiser share one ParamStore; the schedule and
// the motion-code standardization stats ride along for checkpointing.
class Stage2Model {
 public:
  Stage2Model(Stage2Config cfg, uint64_t init_seed);

  const Stage2Config& config() const { return cfg_; }
  nn::ParamStore& store() { return store_; }
  const nn::ParamStore& store() const { return store_; }
  const guider::GuiderModel& guider() const { return guider_; }
  const DenoiserModel& denoiser() const { return denoiser_; }
  const NoiseSchedule& schedule() const { return sched_; }

  // per-dim stats over the training codes; identity until set
  const Tensor& code_mean() const { return code_mean_; }
  const Tensor& code_std() const { return code_std_; }
  void set_code_stats(const Tensor& mean, const Tensor& std);

  Tensor standardize(const Tensor& codes) const;    // [n, D_m]
  Tensor destandardize(const Tensor& codes) const;

 private:
  Stage2Config cfg_;
  nn::ParamStore store_;
  guider::GuiderModel guider_;
  DenoiserModel denoiser_;
  NoiseSchedule sched_;
  Tensor code_mean_, code_std_;
};

// One DDIM window in standardized code space. m_self_std is a single
// standardized code [D_m]; ctx_tail (standardized, [prev_tail, D_m]) may be
// null for the first window.
Tensor generate_window(const DenoiseFn& eps, const Tensor* f_m,
                       const Tensor* ctx_tail, const Tensor& m_self_std,
                       const NoiseSchedule& sched, const DenoiserConfig& cfg,
                       int init_noise_t, uint64_t seed);

// Full streaming pipeline over M = n_frames / N windows; audio tracks are
// [M*N, D_a], m_self is a raw (unstandardized) motion code [D_m]. Returns
// raw codes [M*N, D_m].
Tensor stream_generate(const Stage2Model& model, const Tensor& audio_self,
                       const Tensor& audio_other, const Tensor& m_self,
                       const guider::StyleVector& style, uint64_t seed,
                       bool ablate_banks = false);

// Conditioning dropout decisions for one training sample; exposed so the
// empirical rates can be checked directly.
struct CondDraw {
  bool null_style = false;
  bool drop_fm = false;
  bool drop_ctx = false;
};
CondDraw draw_conditioning(Rng& rng, const Stage2Config& cfg);

struct Stage2TrainConfig {
  int epochs = 10;
  int steps_per_epoch = 50;
  int batch = 16;
  double lr = 1e-4;
  double weight_decay = 1e-2;
  uint64_t seed = 0;
  int start_epoch = 0;
  motion::HybridMode mode = motion::HybridMode::kHybrid;
  std::vector<int> holdout_clips;  // excluded from sampling
  bool ablate_banks = false;       // guider bypasses the memory banks
  bool style_mod = true;           // off forces NULL style throughout
};

struct Stage2TrainTrace {
  std::vector<double> epoch_loss;
  int64_t style_draws = 0;
  int64_t style_null = 0;
  int64_t fm_dropped = 0;
  int64_t ctx_dropped = 0;
  // clip index of every sampled item, per epoch (warm-up pool assertions)
  std::vector<std::vector<int>> epoch_clips;
};

// Precomputed per-clip stage-1 codes, shared between training and eval.
std::vector<Tensor> encode_dataset_codes(const motion::Stage1Model& stage1,
                                         const world::Dataset& dataset,
                                         motion::HybridMode mode);

Stage2TrainTrace train_stage2(Stage2Model& model,
                              const std::vector<Tensor>& clip_codes,
                              const world::Dataset& dataset,
                              const Stage2TrainConfig& cfg,
                              nn::AdamW* optimizer = nullptr,
                              const std::function<void(int, const Stage2TrainTrace&)>&
                                  on_epoch = nullptr);

// Mean noise-prediction MSE over seeded windows of the listed clips.
double eval_stage2_loss(const Stage2Model& model,
                        const std::vector<Tensor>& clip_codes,
                        const world::Dataset& dataset,
                        const std::vector<int>& clips, int n_samples,
                        uint64_t seed, bool ablate_banks = false);

}  // namespace dyadgen::diffusion
