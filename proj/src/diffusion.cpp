#include "dyadgen/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <mutex>
#include <set>

#include "dyadgen/parallel.hpp"

namespace dyadgen::diffusion {

using nn::LeafMap;
using nn::NodePtr;
using nn::P;
namespace ad = dyadgen::ad;

double NoiseSchedule::alpha_bar_at(int t) const {
  if (t == -1) return 1.0;
  if (t < 0 || t >= T)
    throw ParamError("alpha_bar_at: t=" + std::to_string(t) + " outside [-1," +
                     std::to_string(T) + ")");
  return alpha_bar[static_cast<size_t>(t)];
}

NoiseSchedule make_schedule(int T, double beta_min, double beta_max) {
  if (T < 1) throw ParamError("make_schedule: T must be >= 1");
  if (!(beta_min > 0.0 && beta_min < beta_max && beta_max < 1.0))
    throw ParamError("make_schedule: need 0 < beta_min < beta_max < 1");
  NoiseSchedule s;
  s.T = T;
  s.beta.resize(static_cast<size_t>(T));
  s.alpha.resize(static_cast<size_t>(T));
  s.alpha_bar.resize(static_cast<size_t>(T));
  double prod = 1.0;
  for (int t = 0; t < T; ++t) {
    double frac = T == 1 ? 0.0 : static_cast<double>(t) / (T - 1);
    s.beta[t] = beta_min + (beta_max - beta_min) * frac;
    s.alpha[t] = 1.0 - s.beta[t];
    prod *= s.alpha[t];
    s.alpha_bar[t] = prod;
  }
  return s;
}

Tensor forward_diffuse(const Tensor& x0, int t, const Tensor& noise,
                       const NoiseSchedule& sched) {
  check_same_shape(x0, noise, "forward_diffuse");
  if (t < 0 || t >= sched.T)
    throw ParamError("forward_diffuse: t=" + std::to_string(t) + " outside [0," +
                     std::to_string(sched.T) + ")");
  double ab = sched.alpha_bar_at(t);
  double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
  Tensor out(x0.shape());
  for (long long i = 0; i < x0.numel(); ++i) out[i] = a * x0[i] + b * noise[i];
  return out;
}

Tensor sinusoidal_embed(double t, int dim) {
  if (dim <= 0 || dim % 2 != 0)
    throw ParamError("sinusoidal_embed: dim must be positive even, got " +
                     std::to_string(dim));
  Tensor out({dim});
  int half = dim / 2;
  for (int i = 0; i < half; ++i) {
    double freq = std::pow(10000.0, -2.0 * i / dim);
    out[2 * i] = std::sin(t * freq);
    out[2 * i + 1] = std::cos(t * freq);
  }
  return out;
}

namespace {

void register_linear(nn::ParamStore& s, const std::string& prefix, int in_dim,
                     int out_dim) {
  s.add(prefix + ".w", {out_dim, in_dim}, nn::Init::kFanIn, in_dim);
  s.add(prefix + ".b", {out_dim}, nn::Init::kZero);
}

NodePtr linear_fwd(const LeafMap& lv, const std::string& prefix, NodePtr x) {
  return ad::linear(x, P(lv, prefix + ".w"), P(lv, prefix + ".b"));
}

Tensor rows_copy(const Tensor& t, int r0, int r1) {
  int d = t.dim(1);
  Tensor out({r1 - r0, d});
  for (int r = r0; r < r1; ++r)
    for (int c = 0; c < d; ++c) out.at2(r - r0, c) = t.at2(r, c);
  return out;
}

}  // namespace

DenoiserModel::DenoiserModel(DenoiserConfig cfg, nn::ParamStore& store,
                             const std::string& prefix)
    : cfg_(cfg), pfx_(prefix) {
  if (cfg_.width % cfg_.heads != 0)
    throw ParamError("denoiser: width must be divisible by heads");
  register_linear(store, key("in_proj"), cfg_.motion_dim, cfg_.width);
  register_linear(store, key("t_proj"), cfg_.width, cfg_.width);
  register_linear(store, key("fm_proj"), cfg_.feature_dim, cfg_.width);
  register_linear(store, key("ctx_proj"), cfg_.motion_dim, cfg_.width);
  for (int b = 0; b < cfg_.blocks; ++b) {
    std::string bk = key("block" + std::to_string(b));
    for (const char* sub : {"sa", "ma", "ta"}) {
      nn::register_attention(store, bk + "." + sub, cfg_.width);
      nn::register_layer_norm(store, bk + "." + sub + "_ln", cfg_.width);
    }
  }
  register_linear(store, key("head"), cfg_.width, cfg_.motion_dim);

  // fixed sinusoidal position tables; the tail sits at negative positions so
  // continuity attention can tell how far back each context frame is
  pos_window_ = Tensor({cfg_.window, cfg_.width});
  for (int i = 0; i < cfg_.window; ++i) {
    Tensor e = sinusoidal_embed(i, cfg_.width);
    for (int j = 0; j < cfg_.width; ++j) pos_window_.at2(i, j) = e[j];
  }
  pos_tail_ = Tensor({cfg_.prev_tail, cfg_.width});
  for (int i = 0; i < cfg_.prev_tail; ++i) {
    Tensor e = sinusoidal_embed(i - cfg_.prev_tail, cfg_.width);
    for (int j = 0; j < cfg_.width; ++j) pos_tail_.at2(i, j) = e[j];
  }
}

NodePtr DenoiserModel::forward_node(const LeafMap& lv, NodePtr x_t, int t,
                                    NodePtr f_m, NodePtr ctx) const {
  if (x_t->value.ndim() != 2 || x_t->value.dim(0) != cfg_.window ||
      x_t->value.dim(1) != cfg_.motion_dim)
    throw ShapeError("denoiser: x_t must be [" + std::to_string(cfg_.window) + "," +
                     std::to_string(cfg_.motion_dim) + "], got " +
                     Tensor::shape_str(x_t->value.shape()));
  if (t < 0) throw ParamError("denoiser: negative timestep");
  if (f_m && (f_m->value.ndim() != 2 || f_m->value.dim(0) != cfg_.window ||
              f_m->value.dim(1) != cfg_.feature_dim))
    throw ShapeError("denoiser: f_m must be [" + std::to_string(cfg_.window) + "," +
                     std::to_string(cfg_.feature_dim) + "]");
  if (ctx && (ctx->value.ndim() != 2 || ctx->value.dim(0) != cfg_.prev_tail ||
              ctx->value.dim(1) != cfg_.motion_dim))
    throw ShapeError("denoiser: ctx must be [" + std::to_string(cfg_.prev_tail) + "," +
                     std::to_string(cfg_.motion_dim) + "]");

  NodePtr tokens = ad::add(linear_fwd(lv, key("in_proj"), x_t), ad::constant(pos_window_));
  NodePtr t_emb = ad::constant(sinusoidal_embed(t, cfg_.width).reshaped({1, cfg_.width}));
  tokens = ad::concat_rows(tokens, linear_fwd(lv, key("t_proj"), t_emb));

  NodePtr fm_tok, ctx_tok;
  if (f_m)
    fm_tok = ad::add(linear_fwd(lv, key("fm_proj"), f_m), ad::constant(pos_window_));
  if (ctx)
    ctx_tok = ad::add(linear_fwd(lv, key("ctx_proj"), ctx), ad::constant(pos_tail_));

  NodePtr h = tokens;
  for (int b = 0; b < cfg_.blocks; ++b) {
    std::string bk = key("block" + std::to_string(b));
    h = nn::layer_norm(lv, bk + ".sa_ln",
                       ad::add(h, nn::attention_forward(lv, bk + ".sa", h, h, cfg_.heads)));
    if (fm_tok)
      h = nn::layer_norm(
          lv, bk + ".ma_ln",
          ad::add(h, nn::attention_forward(lv, bk + ".ma", h, fm_tok, cfg_.heads)));
    if (ctx_tok)
      h = nn::layer_norm(
          lv, bk + ".ta_ln",
          ad::add(h, nn::attention_forward(lv, bk + ".ta", h, ctx_tok, cfg_.heads)));
  }
  return linear_fwd(lv, key("head"), ad::slice_rows(h, 0, cfg_.window));
}

Tensor DenoiserModel::forward(const nn::ParamStore& store, const Tensor& x_t, int t,
                              const Tensor* f_m, const Tensor* ctx) const {
  LeafMap lv = store.leaves();
  NodePtr fm_node = f_m ? ad::constant(*f_m) : nullptr;
  NodePtr ctx_node = ctx ? ad::constant(*ctx) : nullptr;
  return forward_node(lv, ad::constant(x_t), t, fm_node, ctx_node)->value;
}

Tensor cfg_predict(const DenoiseFn& eps, const Tensor& x_t, int t, const Tensor* f_m,
                   const Tensor* ctx, double s_motion, double s_prev) {
  if (s_motion < 0.0 || s_prev < 0.0)
    throw ParamError("cfg_predict: guidance scales must be >= 0");
  Tensor e0 = eps(x_t, t, nullptr, nullptr);
  Tensor e1 = eps(x_t, t, f_m, nullptr);
  Tensor out(e0.shape());
  for (long long i = 0; i < out.numel(); ++i)
    out[i] = e0[i] + s_motion * (e1[i] - e0[i]);
  if (ctx) {
    Tensor e2 = eps(x_t, t, f_m, ctx);
    for (long long i = 0; i < out.numel(); ++i) out[i] += s_prev * (e2[i] - e1[i]);
  }
  return out;
}

Tensor ddim_step(const Tensor& x_t, int t, int t_prev, const Tensor& eps_hat,
                 const NoiseSchedule& sched) {
  if (t_prev >= t)
    throw ParamError("ddim_step: t_prev=" + std::to_string(t_prev) +
                     " must be < t=" + std::to_string(t));
  check_same_shape(x_t, eps_hat, "ddim_step");
  double ab_t = sched.alpha_bar_at(t);
  double ab_p = sched.alpha_bar_at(t_prev);
  double st = std::sqrt(1.0 - ab_t), rt = std::sqrt(ab_t);
  double sp = std::sqrt(1.0 - ab_p), rp = std::sqrt(ab_p);
  Tensor out(x_t.shape());
  for (long long i = 0; i < x_t.numel(); ++i) {
    double x0 = (x_t[i] - st * eps_hat[i]) / rt;
    out[i] = rp * x0 + sp * eps_hat[i];
  }
  return out;
}

std::vector<int> ddim_timesteps(int T, int steps) {
  if (steps < 1 || T < steps || T % steps != 0)
    throw ParamError("ddim_timesteps: need steps >= 1 and T divisible by steps");
  int stride = T / steps;
  std::vector<int> ts(static_cast<size_t>(steps));
  for (int i = 0; i < steps; ++i) ts[i] = T - 1 - i * stride;
  return ts;
}

Stage2Model::Stage2Model(Stage2Config cfg, uint64_t init_seed)
    : cfg_(cfg),
      store_(init_seed),
      guider_(cfg.guider, store_),
      denoiser_(cfg.denoiser, store_),
      sched_(make_schedule(cfg.T, cfg.beta_min, cfg.beta_max)) {
  if (cfg_.denoiser.feature_dim != cfg_.guider.feature_dim)
    throw ParamError("stage2: denoiser feature_dim must match guider feature_dim");
  code_mean_ = Tensor({cfg_.denoiser.motion_dim});
  code_std_ = Tensor::full({cfg_.denoiser.motion_dim}, 1.0);
}

void Stage2Model::set_code_stats(const Tensor& mean, const Tensor& std) {
  check_same_shape(mean, code_mean_, "set_code_stats");
  check_same_shape(std, code_std_, "set_code_stats");
  for (long long i = 0; i < std.numel(); ++i)
    if (!(std[i] > 0.0)) throw ParamError("set_code_stats: std must be positive");
  code_mean_ = mean;
  code_std_ = std;
}

Tensor Stage2Model::standardize(const Tensor& codes) const {
  int d = cfg_.denoiser.motion_dim;
  if (codes.ndim() != 2 || codes.dim(1) != d)
    throw ShapeError("standardize: expected [n," + std::to_string(d) + "]");
  Tensor out(codes.shape());
  for (int r = 0; r < codes.dim(0); ++r)
    for (int c = 0; c < d; ++c)
      out.at2(r, c) = (codes.at2(r, c) - code_mean_[c]) / code_std_[c];
  return out;
}

Tensor Stage2Model::destandardize(const Tensor& codes) const {
  int d = cfg_.denoiser.motion_dim;
  if (codes.ndim() != 2 || codes.dim(1) != d)
    throw ShapeError("destandardize: expected [n," + std::to_string(d) + "]");
  Tensor out(codes.shape());
  for (int r = 0; r < codes.dim(0); ++r)
    for (int c = 0; c < d; ++c)
      out.at2(r, c) = codes.at2(r, c) * code_std_[c] + code_mean_[c];
  return out;
}

Tensor generate_window(const DenoiseFn& eps, const Tensor* f_m, const Tensor* ctx_tail,
                       const Tensor& m_self_std, const NoiseSchedule& sched,
                       const DenoiserConfig& cfg, int init_noise_t, uint64_t seed) {
  int N = cfg.window, d = cfg.motion_dim;
  if (m_self_std.numel() != d)
    throw ShapeError("generate_window: m_self must have dim " + std::to_string(d));
  int t_init = init_noise_t < 0 ? sched.T - 1 : init_noise_t;
  if (t_init >= sched.T) throw ParamError("generate_window: init noise level out of range");

  std::vector<int> ts = ddim_timesteps(sched.T, cfg.ddim_steps);
  size_t first = 0;
  while (first + 1 < ts.size() && ts[first] > t_init) ++first;
  ts.erase(ts.begin(), ts.begin() + static_cast<long>(first));

  Tensor x0({N, d});
  for (int r = 0; r < N; ++r)
    for (int c = 0; c < d; ++c) x0.at2(r, c) = m_self_std[c];
  Rng rng(derive_seed(seed, 0x9010));
  Tensor noise({N, d});
  for (long long i = 0; i < noise.numel(); ++i) noise[i] = rng.normal();

  Tensor x = forward_diffuse(x0, ts.front(), noise, sched);
  for (size_t i = 0; i < ts.size(); ++i) {
    int t = ts[i];
    int t_prev = i + 1 < ts.size() ? ts[i + 1] : -1;
    Tensor e = cfg_predict(eps, x, t, f_m, ctx_tail, cfg.cfg_motion, cfg.cfg_prev);
    x = ddim_step(x, t, t_prev, e, sched);
  }
  return x;
}

Tensor stream_generate(const Stage2Model& model, const Tensor& audio_self,
                       const Tensor& audio_other, const Tensor& m_self,
                       const guider::StyleVector& style, uint64_t seed,
                       bool ablate_banks) {
  const auto& dcfg = model.config().denoiser;
  int N = dcfg.window, d = dcfg.motion_dim;
  int da = model.config().guider.audio_dim;
  if (audio_self.ndim() != 2 || audio_self.dim(1) != da ||
      audio_other.ndim() != 2 || audio_other.dim(1) != da ||
      audio_self.dim(0) != audio_other.dim(0))
    throw ShapeError("stream_generate: audio tracks must both be [M*N," +
                     std::to_string(da) + "]");
  int total = audio_self.dim(0);
  if (total < N || total % N != 0)
    throw ShapeError("stream_generate: audio length must be a positive multiple of " +
                     std::to_string(N));
  int M = total / N;
  if (m_self.numel() != d)
    throw ShapeError("stream_generate: m_self must have dim " + std::to_string(d));

  Tensor m_std = model.standardize(m_self.reshaped({1, d})).reshaped({d});
  DenoiseFn eps = [&](const Tensor& x_t, int t, const Tensor* fm, const Tensor* cx) {
    return model.denoiser().forward(model.store(), x_t, t, fm, cx);
  };

  Tensor out({total, d});
  Tensor prev_tail;
  for (int k = 0; k < M; ++k) {
    Tensor a_self = rows_copy(audio_self, k * N, (k + 1) * N);
    Tensor a_other = rows_copy(audio_other, k * N, (k + 1) * N);
    Tensor f_m =
        model.guider().forward(model.store(), a_self, a_other, style, ablate_banks);
    const Tensor* ctx = k > 0 ? &prev_tail : nullptr;
    Tensor win = generate_window(eps, &f_m, ctx, m_std, model.schedule(), dcfg,
                                 model.config().init_noise_t, derive_seed(seed, k));
    for (int r = 0; r < N; ++r)
      for (int c = 0; c < d; ++c) out.at2(k * N + r, c) = win.at2(r, c);
    prev_tail = rows_copy(win, N - dcfg.prev_tail, N);
  }
  return model.destandardize(out);
}

CondDraw draw_conditioning(Rng& rng, const Stage2Config& cfg) {
  CondDraw d;
  d.null_style = rng.bernoulli(cfg.p_null_style);
  if (cfg.joint_drop) {
    d.drop_fm = d.drop_ctx = rng.bernoulli(cfg.p_drop_cond);
  } else {
    d.drop_fm = rng.bernoulli(cfg.p_drop_cond);
    d.drop_ctx = rng.bernoulli(cfg.p_drop_cond);
  }
  return d;
}

std::vector<Tensor> encode_dataset_codes(const motion::Stage1Model& stage1,
                                         const world::Dataset& dataset,
                                         motion::HybridMode mode) {
  std::vector<Tensor> codes(dataset.clips.size());
  for (size_t i = 0; i < dataset.clips.size(); ++i)
    codes[i] = stage1.encode_clip_codes(dataset.clips[i], mode);
  return codes;
}

namespace {

struct SampleDesc {
  int clip = 0;
  int start = 0;
  int t = 0;
  int style_clip = -1;  // -1 means NULL style
  bool use_fm = false;
  bool use_ctx = false;
  Tensor noise;
};

}  // namespace

Stage2TrainTrace train_stage2(Stage2Model& model, const std::vector<Tensor>& clip_codes,
                              const world::Dataset& dataset, const Stage2TrainConfig& cfg,
                              nn::AdamW* optimizer,
                              const std::function<void(int, const Stage2TrainTrace&)>&
                                  on_epoch) {
  const auto& scfg = model.config();
  int N = scfg.denoiser.window, d = scfg.denoiser.motion_dim;
  int tail = scfg.denoiser.prev_tail;
  if (clip_codes.size() != dataset.clips.size())
    throw ParamError("train_stage2: clip code count does not match dataset");

  std::set<int> holdout(cfg.holdout_clips.begin(), cfg.holdout_clips.end());
  std::vector<int> pool, warmup_pool;
  for (int i = 0; i < static_cast<int>(dataset.clips.size()); ++i) {
    if (holdout.count(i)) continue;
    if (dataset.clips[i].script.n_frames < N)
      throw ParamError("train_stage2: clip " + dataset.clips[i].id +
                       " shorter than one window");
    pool.push_back(i);
    if (dataset.clips[i].single_sided()) warmup_pool.push_back(i);
  }
  if (pool.empty()) throw ParamError("train_stage2: no training clips");
  if (scfg.warmup_epochs > 0 && warmup_pool.empty())
    throw ParamError("train_stage2: warm-up requested but no single-sided clips");

  // per-dimension standardization over the training pool
  {
    Tensor mean({d}), var({d});
    long long n = 0;
    for (int ci : pool) {
      const Tensor& c = clip_codes[ci];
      for (int r = 0; r < c.dim(0); ++r, ++n)
        for (int k = 0; k < d; ++k) mean[k] += c.at2(r, k);
    }
    for (int k = 0; k < d; ++k) mean[k] /= static_cast<double>(n);
    for (int ci : pool) {
      const Tensor& c = clip_codes[ci];
      for (int r = 0; r < c.dim(0); ++r)
        for (int k = 0; k < d; ++k) {
          double dv = c.at2(r, k) - mean[k];
          var[k] += dv * dv;
        }
    }
    Tensor stdv({d});
    for (int k = 0; k < d; ++k)
      stdv[k] = std::max(std::sqrt(var[k] / static_cast<double>(n)), 1e-6);
    model.set_code_stats(mean, stdv);
  }
  std::vector<Tensor> std_codes(clip_codes.size());
  for (size_t i = 0; i < clip_codes.size(); ++i)
    std_codes[i] = model.standardize(clip_codes[i]);

  // same-identity style candidates, excluding the clip itself
  std::vector<std::vector<int>> style_cands(dataset.clips.size());
  for (size_t i = 0; i < dataset.clips.size(); ++i)
    for (size_t j = 0; j < dataset.clips.size(); ++j)
      if (i != j &&
          dataset.clips[i].identity_index == dataset.clips[j].identity_index &&
          !holdout.count(static_cast<int>(j)))
        style_cands[i].push_back(static_cast<int>(j));

  nn::AdamW local_opt(model.store(),
                      {cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay});
  nn::AdamW* opt = optimizer ? optimizer : &local_opt;

  Stage2TrainTrace trace;
  for (int epoch = cfg.start_epoch; epoch < cfg.epochs; ++epoch) {
    Rng rng(derive_seed(cfg.seed, 0x52a9e00ULL + static_cast<uint64_t>(epoch)));
    const std::vector<int>& epool = epoch < scfg.warmup_epochs ? warmup_pool : pool;
    double epoch_loss = 0.0;
    trace.epoch_clips.emplace_back();

    for (int step = 0; step < cfg.steps_per_epoch; ++step) {
      std::vector<SampleDesc> batch(static_cast<size_t>(cfg.batch));
      for (auto& s : batch) {
        s.clip = epool[rng.uniform_int(static_cast<int>(epool.size()))];
        int n_frames = dataset.clips[s.clip].script.n_frames;
        s.start = rng.uniform_int(n_frames - N + 1);
        s.t = rng.uniform_int(scfg.T);
        CondDraw cd = draw_conditioning(rng, scfg);
        trace.style_draws++;
        trace.style_null += cd.null_style ? 1 : 0;
        trace.fm_dropped += cd.drop_fm ? 1 : 0;
        trace.ctx_dropped += cd.drop_ctx ? 1 : 0;
        s.use_fm = !cd.drop_fm;
        s.use_ctx = !cd.drop_ctx && s.start >= tail;
        if (s.use_fm && !cd.null_style && cfg.style_mod && !cfg.ablate_banks) {
          const auto& cands = style_cands[s.clip];
          s.style_clip = cands.empty()
                             ? s.clip
                             : cands[rng.uniform_int(static_cast<int>(cands.size()))];
        }
        s.noise = Tensor({N, d});
        for (long long i = 0; i < s.noise.numel(); ++i) s.noise[i] = rng.normal();
        trace.epoch_clips.back().push_back(s.clip);
      }

      std::vector<LeafMap> leaves(batch.size());
      std::vector<double> losses(batch.size());
      parallel_for(batch.size(), [&](size_t bi) {
        const SampleDesc& s = batch[bi];
        const world::Clip& clip = dataset.clips[s.clip];
        leaves[bi] = model.store().leaves();
        const LeafMap& lv = leaves[bi];

        Tensor x0 = rows_copy(std_codes[s.clip], s.start, s.start + N);
        Tensor x_t = forward_diffuse(x0, s.t, s.noise, model.schedule());

        NodePtr f_m;
        if (s.use_fm) {
          NodePtr style;
          if (s.style_clip >= 0)
            style = model.guider().encode_style_node(
                lv, ad::constant(std_codes[s.style_clip]));
          Tensor a_self = rows_copy(clip.audio.self_track, s.start, s.start + N);
          Tensor a_other = rows_copy(clip.audio.other_track, s.start, s.start + N);
          f_m = model.guider().forward_node(lv, ad::constant(a_self),
                                            ad::constant(a_other), style,
                                            cfg.ablate_banks);
        }
        NodePtr ctx;
        if (s.use_ctx)
          ctx = ad::constant(rows_copy(std_codes[s.clip], s.start - tail, s.start));

        NodePtr pred =
            model.denoiser().forward_node(lv, ad::constant(x_t), s.t, f_m, ctx);
        NodePtr loss = ad::mse_loss(pred, ad::constant(s.noise));
        losses[bi] = loss->value[0];
        if (!std::isfinite(losses[bi]))
          throw NumericError("stage2 loss non-finite at epoch " + std::to_string(epoch) +
                             " step " + std::to_string(step) + " sample " +
                             std::to_string(bi) + " (clip " + clip.id + ", t=" +
                             std::to_string(s.t) + ")");
        ad::backward(loss);
      });

      model.store().zero_grads();
      for (const auto& lm : leaves) model.store().accumulate(lm);
      opt->step(static_cast<double>(batch.size()));
      for (double l : losses) epoch_loss += l;
    }
    trace.epoch_loss.push_back(epoch_loss /
                               (static_cast<double>(cfg.steps_per_epoch) * cfg.batch));
    if (on_epoch) on_epoch(epoch, trace);
  }
  return trace;
}

double eval_stage2_loss(const Stage2Model& model, const std::vector<Tensor>& clip_codes,
                        const world::Dataset& dataset, const std::vector<int>& clips,
                        int n_samples, uint64_t seed, bool ablate_banks) {
  const auto& scfg = model.config();
  int N = scfg.denoiser.window, d = scfg.denoiser.motion_dim;
  int tail = scfg.denoiser.prev_tail;
  if (clips.empty() || n_samples < 1)
    throw ParamError("eval_stage2_loss: need clips and samples");

  struct EvalDesc {
    int clip, start, t;
    Tensor noise;
  };
  Rng rng(derive_seed(seed, 0xe7a1));
  std::vector<EvalDesc> descs(static_cast<size_t>(n_samples));
  for (auto& e : descs) {
    e.clip = clips[rng.uniform_int(static_cast<int>(clips.size()))];
    int n_frames = dataset.clips[e.clip].script.n_frames;
    e.start = rng.uniform_int(n_frames - N + 1);
    e.t = rng.uniform_int(scfg.T);
    e.noise = Tensor({N, d});
    for (long long i = 0; i < e.noise.numel(); ++i) e.noise[i] = rng.normal();
  }

  std::vector<double> losses(descs.size());
  parallel_for(descs.size(), [&](size_t i) {
    const EvalDesc& e = descs[i];
    const world::Clip& clip = dataset.clips[e.clip];
    Tensor std_code = model.standardize(clip_codes[e.clip]);
    Tensor x0 = rows_copy(std_code, e.start, e.start + N);
    Tensor x_t = forward_diffuse(x0, e.t, e.noise, model.schedule());
    Tensor a_self = rows_copy(clip.audio.self_track, e.start, e.start + N);
    Tensor a_other = rows_copy(clip.audio.other_track, e.start, e.start + N);
    Tensor f_m = model.guider().forward(model.store(), a_self, a_other, std::nullopt,
                                        ablate_banks);
    Tensor ctx, *ctx_p = nullptr;
    if (e.start >= tail) {
      ctx = rows_copy(std_code, e.start - tail, e.start);
      ctx_p = &ctx;
    }
    Tensor pred = model.denoiser().forward(model.store(), x_t, e.t, &f_m, ctx_p);
    double acc = 0.0;
    for (long long k = 0; k < pred.numel(); ++k) {
      double dv = pred[k] - e.noise[k];
      acc += dv * dv;
    }
    losses[i] = acc / static_cast<double>(pred.numel());
  });
  double total = 0.0;
  for (double l : losses) total += l;
  return total / static_cast<double>(losses.size());
}

}  // namespace dyadgen::diffusion
