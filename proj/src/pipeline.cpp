#include "dyadgen/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>

#include "dyadgen/container.hpp"

namespace dyadgen::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void merge_strict(json& base, const json& user, const std::string& path) {
  if (!user.is_object())
    throw ParamError("config: expected an object at " + (path.empty() ? "top level" : path));
  for (auto it = user.begin(); it != user.end(); ++it) {
    std::string here = path.empty() ? it.key() : path + "." + it.key();
    if (!base.contains(it.key()))
      throw ParamError("config: unknown key \"" + here + "\"");
    if (base[it.key()].is_object())
      merge_strict(base[it.key()], it.value(), here);
    else
      base[it.key()] = it.value();
  }
}

bool on_off(const json& v, const std::string& key) {
  std::string s = v.get<std::string>();
  if (s == "on") return true;
  if (s == "off") return false;
  throw ParamError("config: " + key + " must be \"on\" or \"off\"");
}

int find_clip(const world::Dataset& ds, const std::string& id) {
  for (size_t i = 0; i < ds.clips.size(); ++i)
    if (ds.clips[i].id == id) return static_cast<int>(i);
  throw ParamError("clip \"" + id + "\" not found in dataset");
}

std::string frame_name(int i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "frame_%06d.ppm", i);
  return buf;
}

json checkpoint_arrays_meta(const nn::ParamStore& store) {
  json j;
  j["weights_checksum"] = io::hex64(store.checksum());
  return j;
}

}  // namespace

json default_config_json() {
  json j;
  j["seed"] = 0;
  j["dataset_path"] = "data";
  j["checkpoint_dir"] = "ckpt";
  j["output_dir"] = "out";
  j["data"] = {{"n_clips", 64},
               {"n_frames", 250},
               {"clips_per_identity", 4},
               {"turn_len_mean_s", 2.0},
               {"overlap_prob", 0.1},
               {"single_sided_per_identity", 1}};
  j["stage1"] = {{"image_size", 64}, {"motion_dim", 32},  {"vol_channels", 16},
                 {"vol_depth", 4},   {"vol_hw", 16},      {"flow_clamp", 2.0},
                 {"epochs", 8},      {"steps_per_epoch", 100}, {"batch", 16},
                 {"lr", 1e-4},       {"weight_decay", 1e-2}};
  j["stage2"] = {{"T", 1000},
                 {"beta_min", 1e-4},
                 {"beta_max", 0.02},
                 {"blocks", 4},
                 {"heads", 4},
                 {"width", 128},
                 {"N", 40},
                 {"D_m", 32},
                 {"ddim_steps", 20},
                 {"cfg_motion", 2.0},
                 {"cfg_prev", 1.5},
                 {"p_null_style", 0.3},
                 {"p_drop_cond", 0.5},
                 {"joint_drop", false},
                 {"warmup_epochs", 2},
                 {"init_noise_t", -1},
                 {"bank_size", 16},
                 {"bank_dim", 128},
                 {"style_dim", 64},
                 {"feature_dim", 128},
                 {"epochs", 10},
                 {"steps_per_epoch", 50},
                 {"batch", 16},
                 {"lr", 1e-4},
                 {"weight_decay", 1e-2},
                 {"holdout_clips", json::array()}};
  j["ablation"] = {{"memory_banks", "on"}, {"style_mod", "on"}, {"input_mode", "HYBRID"}};
  j["generate"] = {{"portrait_clip", ""},
                   {"audio_clip", ""},
                   {"style_clip", ""},
                   {"n_windows", 0}};
  return j;
}

RunConfig parse_config(const json& user) {
  json j = default_config_json();
  merge_strict(j, user, "");

  RunConfig c;
  try {
    c.seed = j["seed"].get<uint64_t>();
    c.dataset_path = j["dataset_path"].get<std::string>();
    c.checkpoint_dir = j["checkpoint_dir"].get<std::string>();
    c.output_dir = j["output_dir"].get<std::string>();

    const json& d = j["data"];
    c.data.n_clips = d["n_clips"].get<int>();
    c.data.n_frames = d["n_frames"].get<int>();
    c.data.clips_per_identity = d["clips_per_identity"].get<int>();
    c.data.turn_len_mean_s = d["turn_len_mean_s"].get<double>();
    c.data.overlap_prob = d["overlap_prob"].get<double>();
    c.data.single_sided_per_identity = d["single_sided_per_identity"].get<int>();

    const json& a = j["ablation"];
    c.ablation.memory_banks = on_off(a["memory_banks"], "ablation.memory_banks");
    c.ablation.style_mod = on_off(a["style_mod"], "ablation.style_mod");
    c.ablation.input_mode =
        motion::hybrid_mode_from_string(a["input_mode"].get<std::string>());

    const json& s1 = j["stage1"];
    c.stage1_model.image_size = s1["image_size"].get<int>();
    c.stage1_model.motion_dim = s1["motion_dim"].get<int>();
    c.stage1_model.vol_channels = s1["vol_channels"].get<int>();
    c.stage1_model.vol_depth = s1["vol_depth"].get<int>();
    c.stage1_model.vol_hw = s1["vol_hw"].get<int>();
    c.stage1_model.flow_clamp = s1["flow_clamp"].get<double>();
    c.stage1_train.epochs = s1["epochs"].get<int>();
    c.stage1_train.steps_per_epoch = s1["steps_per_epoch"].get<int>();
    c.stage1_train.batch = s1["batch"].get<int>();
    c.stage1_train.lr = s1["lr"].get<double>();
    c.stage1_train.weight_decay = s1["weight_decay"].get<double>();
    c.stage1_train.mode = c.ablation.input_mode;

    const json& s2 = j["stage2"];
    c.stage2_model.T = s2["T"].get<int>();
    c.stage2_model.beta_min = s2["beta_min"].get<double>();
    c.stage2_model.beta_max = s2["beta_max"].get<double>();
    c.stage2_model.denoiser.blocks = s2["blocks"].get<int>();
    c.stage2_model.denoiser.heads = s2["heads"].get<int>();
    c.stage2_model.denoiser.width = s2["width"].get<int>();
    c.stage2_model.denoiser.window = s2["N"].get<int>();
    c.stage2_model.denoiser.motion_dim = s2["D_m"].get<int>();
    c.stage2_model.denoiser.feature_dim = s2["feature_dim"].get<int>();
    c.stage2_model.denoiser.ddim_steps = s2["ddim_steps"].get<int>();
    c.stage2_model.denoiser.cfg_motion = s2["cfg_motion"].get<double>();
    c.stage2_model.denoiser.cfg_prev = s2["cfg_prev"].get<double>();
    c.stage2_model.guider.motion_dim = c.stage1_model.motion_dim;
    c.stage2_model.guider.bank_size = s2["bank_size"].get<int>();
    c.stage2_model.guider.bank_dim = s2["bank_dim"].get<int>();
    c.stage2_model.guider.style_dim = s2["style_dim"].get<int>();
    c.stage2_model.guider.feature_dim = s2["feature_dim"].get<int>();
    c.stage2_model.p_null_style = s2["p_null_style"].get<double>();
    c.stage2_model.p_drop_cond = s2["p_drop_cond"].get<double>();
    c.stage2_model.joint_drop = s2["joint_drop"].get<bool>();
    c.stage2_model.warmup_epochs = s2["warmup_epochs"].get<int>();
    c.stage2_model.init_noise_t = s2["init_noise_t"].get<int>();
    c.stage2_train.epochs = s2["epochs"].get<int>();
    c.stage2_train.steps_per_epoch = s2["steps_per_epoch"].get<int>();
    c.stage2_train.batch = s2["batch"].get<int>();
    c.stage2_train.lr = s2["lr"].get<double>();
    c.stage2_train.weight_decay = s2["weight_decay"].get<double>();
    c.stage2_train.holdout_clips = s2["holdout_clips"].get<std::vector<int>>();
    c.stage2_train.mode = c.ablation.input_mode;
    c.stage2_train.ablate_banks = !c.ablation.memory_banks;
    c.stage2_train.style_mod = c.ablation.style_mod;

    const json& g = j["generate"];
    c.generate.portrait_clip = g["portrait_clip"].get<std::string>();
    c.generate.audio_clip = g["audio_clip"].get<std::string>();
    c.generate.style_clip = g["style_clip"].get<std::string>();
    c.generate.n_windows = g["n_windows"].get<int>();
  } catch (const json::exception& e) {
    throw ParamError(std::string("config: ") + e.what());
  }
  return c;
}

RunConfig load_config(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw FormatError("cannot open config: " + path.string());
  json j;
  try {
    f >> j;
  } catch (const json::exception& e) {
    throw ParamError("config parse error in " + path.string() + ": " + e.what());
  }
  return parse_config(j);
}

uint64_t config_hash(const json& j) {
  std::string s = j.dump();
  return io::fnv1a_bytes(s.data(), s.size());
}

// ---- checkpoints ----

namespace {

std::map<std::string, Tensor> collect_arrays(const nn::ParamStore& store,
                                             const nn::AdamW& opt) {
  std::map<std::string, Tensor> arrays;
  for (const std::string& name : store.names()) arrays.emplace(name, store.value(name));
  for (auto& [name, t] : opt.state_arrays()) arrays.emplace(name, t);
  return arrays;
}

void restore_store(nn::ParamStore& store, const std::map<std::string, Tensor>& arrays) {
  for (const std::string& name : store.names()) {
    auto it = arrays.find(name);
    if (it == arrays.end())
      throw FormatError("checkpoint missing parameter \"" + name + "\"");
    check_same_shape(store.value(name), it->second, "checkpoint load");
    store.value(name) = it->second;
  }
}

}  // namespace

void save_stage1(const fs::path& dir, const motion::Stage1Model& model,
                 const nn::AdamW& opt, const json& meta) {
  json m = meta;
  m["stage"] = 1;
  m["adam_step"] = opt.step_count();
  m.update(checkpoint_arrays_meta(model.store()));
  io::save_checkpoint(dir, collect_arrays(model.store(), opt), m);
}

json load_stage1(const fs::path& dir, motion::Stage1Model& model, nn::AdamW& opt) {
  io::Checkpoint cp = io::load_checkpoint(dir);
  if (io::require(cp.meta, "stage").get<int>() != 1)
    throw FormatError("checkpoint in " + dir.string() + " is not a stage-1 checkpoint");
  restore_store(model.store(), cp.arrays);
  opt.load_state(cp.arrays, io::require(cp.meta, "adam_step").get<int64_t>());
  return cp.meta;
}

void save_stage2(const fs::path& dir, const diffusion::Stage2Model& model,
                 const nn::AdamW& opt, const json& meta) {
  json m = meta;
  m["stage"] = 2;
  m["adam_step"] = opt.step_count();
  m.update(checkpoint_arrays_meta(model.store()));
  auto arrays = collect_arrays(model.store(), opt);
  arrays.emplace("stats.code_mean", model.code_mean());
  arrays.emplace("stats.code_std", model.code_std());
  io::save_checkpoint(dir, arrays, m);
}

json load_stage2(const fs::path& dir, diffusion::Stage2Model& model, nn::AdamW& opt) {
  io::Checkpoint cp = io::load_checkpoint(dir);
  if (io::require(cp.meta, "stage").get<int>() != 2)
    throw FormatError("checkpoint in " + dir.string() + " is not a stage-2 checkpoint");
  restore_store(model.store(), cp.arrays);
  auto mi = cp.arrays.find("stats.code_mean");
  auto si = cp.arrays.find("stats.code_std");
  if (mi == cp.arrays.end() || si == cp.arrays.end())
    throw FormatError("stage-2 checkpoint missing code statistics");
  model.set_code_stats(mi->second, si->second);
  opt.load_state(cp.arrays, io::require(cp.meta, "adam_step").get<int64_t>());
  return cp.meta;
}

// ---- frame I/O ----

void write_ppm(const fs::path& path, const Tensor& image) {
  if (image.ndim() != 3 || image.dim(0) != 3)
    throw ShapeError("write_ppm: expected [3,H,W], got " +
                     Tensor::shape_str(image.shape()));
  int h = image.dim(1), w = image.dim(2);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open for write: " + path.string());
  f << "P6\n" << w << " " << h << "\n255\n";
  std::vector<unsigned char> row(static_cast<size_t>(w) * 3);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) {
        double v = std::clamp(image.at3(c, y, x), 0.0, 1.0);
        row[static_cast<size_t>(x) * 3 + c] =
            static_cast<unsigned char>(std::lround(v * 255.0));
      }
    f.write(reinterpret_cast<const char*>(row.data()), static_cast<long>(row.size()));
  }
  if (!f) throw FormatError("write failed: " + path.string());
}

Tensor read_ppm(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open: " + path.string());
  std::string magic;
  int w = 0, h = 0, maxval = 0;
  f >> magic >> w >> h >> maxval;
  if (magic != "P6" || w <= 0 || h <= 0 || maxval != 255)
    throw FormatError("unsupported PPM header in " + path.string());
  f.get();  // single whitespace after the header
  std::vector<unsigned char> buf(static_cast<size_t>(w) * h * 3);
  f.read(reinterpret_cast<char*>(buf.data()), static_cast<long>(buf.size()));
  if (!f) throw FormatError("truncated PPM data in " + path.string());
  Tensor img({3, h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        img.at3(c, y, x) =
            buf[(static_cast<size_t>(y) * w + x) * 3 + c] / 255.0;
  return img;
}

// ---- commands ----

void cmd_gen_data(const RunConfig& cfg) {
  world::Dataset ds = world::generate_dataset(cfg.data, cfg.seed);
  fs::create_directories(cfg.dataset_path);
  world::write_dataset(ds, cfg.dataset_path);
  long long frames = 0;
  for (const auto& c : ds.clips) frames += c.script.n_frames;
  std::cout << "wrote " << ds.clips.size() << " clips, " << frames << " frames to "
            << cfg.dataset_path.string() << "\n";
}

namespace {

void train_stage1_cmd(const RunConfig& cfg) {
  world::Dataset ds = world::read_dataset(cfg.dataset_path);
  motion::Stage1Model model(cfg.stage1_model, derive_seed(cfg.seed, 0x57a100));
  nn::AdamW opt(model.store(), {cfg.stage1_train.lr, 0.9, 0.999, 1e-8,
                                cfg.stage1_train.weight_decay});
  fs::path dir = cfg.checkpoint_dir / "stage1";

  motion::Stage1TrainConfig tc = cfg.stage1_train;
  tc.seed = derive_seed(cfg.seed, 0x57a101);
  json prior_trace = json::array();
  if (fs::exists(dir / "manifest.json")) {
    json meta = load_stage1(dir, model, opt);
    tc.start_epoch = io::require(meta, "epoch").get<int>() + 1;
    prior_trace = io::require(meta, "loss_trace");
    std::cout << "resuming stage 1 from epoch " << tc.start_epoch << "\n";
  }

  auto save = [&](int epoch, const motion::TrainTrace& trace) {
    json trace_j = prior_trace;
    for (double l : trace.epoch_loss) trace_j.push_back(l);
    json meta;
    meta["epoch"] = epoch;
    meta["loss_trace"] = trace_j;
    meta["seed"] = cfg.seed;
    meta["input_mode"] = motion::to_string(tc.mode);
    save_stage1(dir, model, opt, meta);
  };
  motion::train_stage1(model, ds, tc, &opt, save);
  std::cout << "stage 1 checkpoint at " << dir.string() << "\n";
}

void train_stage2_cmd(const RunConfig& cfg) {
  fs::path s1dir = cfg.checkpoint_dir / "stage1";
  if (!fs::exists(s1dir / "manifest.json"))
    throw FormatError("stage 2 requires a stage-1 checkpoint at " + s1dir.string());
  world::Dataset ds = world::read_dataset(cfg.dataset_path);

  motion::Stage1Model stage1(cfg.stage1_model, derive_seed(cfg.seed, 0x57a100));
  nn::AdamW s1_opt(stage1.store(), {});
  load_stage1(s1dir, stage1, s1_opt);
  uint64_t frozen = stage1.store().checksum();

  diffusion::Stage2Model model(cfg.stage2_model, derive_seed(cfg.seed, 0x57a200));
  nn::AdamW opt(model.store(), {cfg.stage2_train.lr, 0.9, 0.999, 1e-8,
                                cfg.stage2_train.weight_decay});
  fs::path dir = cfg.checkpoint_dir / "stage2";

  diffusion::Stage2TrainConfig tc = cfg.stage2_train;
  tc.seed = derive_seed(cfg.seed, 0x57a201);
  json prior_trace = json::array();
  if (fs::exists(dir / "manifest.json")) {
    json meta = load_stage2(dir, model, opt);
    tc.start_epoch = io::require(meta, "epoch").get<int>() + 1;
    prior_trace = io::require(meta, "loss_trace");
    std::cout << "resuming stage 2 from epoch " << tc.start_epoch << "\n";
  }

  std::vector<Tensor> codes = diffusion::encode_dataset_codes(stage1, ds, tc.mode);
  auto save = [&](int epoch, const diffusion::Stage2TrainTrace& trace) {
    json trace_j = prior_trace;
    for (double l : trace.epoch_loss) trace_j.push_back(l);
    json meta;
    meta["epoch"] = epoch;
    meta["loss_trace"] = trace_j;
    meta["seed"] = cfg.seed;
    meta["input_mode"] = motion::to_string(tc.mode);
    meta["ablate_banks"] = tc.ablate_banks;
    meta["style_mod"] = tc.style_mod;
    meta["stage1_checksum"] = io::hex64(frozen);
    save_stage2(dir, model, opt, meta);
  };
  diffusion::train_stage2(model, codes, ds, tc, &opt, save);

  if (stage1.store().checksum() != frozen)
    throw NumericError("stage-1 weights changed during stage-2 training");
  std::cout << "stage 2 checkpoint at " << dir.string() << "\n";
}

}  // namespace

void cmd_train(int stage, const RunConfig& cfg) {
  if (stage == 1)
    train_stage1_cmd(cfg);
  else if (stage == 2)
    train_stage2_cmd(cfg);
  else
    throw ParamError("train: stage must be 1 or 2");
}

void cmd_generate(const RunConfig& cfg) {
  world::Dataset ds = world::read_dataset(cfg.dataset_path);
  int portrait_idx = find_clip(ds, cfg.generate.portrait_clip);
  int audio_idx = find_clip(ds, cfg.generate.audio_clip);

  fs::path s1dir = cfg.checkpoint_dir / "stage1";
  fs::path s2dir = cfg.checkpoint_dir / "stage2";
  for (const fs::path& d : {s1dir, s2dir})
    if (!fs::exists(d / "manifest.json"))
      throw FormatError("missing checkpoint at " + d.string());

  motion::Stage1Model stage1(cfg.stage1_model, derive_seed(cfg.seed, 0x57a100));
  nn::AdamW s1_opt(stage1.store(), {});
  load_stage1(s1dir, stage1, s1_opt);
  diffusion::Stage2Model stage2(cfg.stage2_model, derive_seed(cfg.seed, 0x57a200));
  nn::AdamW s2_opt(stage2.store(), {});
  load_stage2(s2dir, stage2, s2_opt);

  int N = cfg.stage2_model.denoiser.window;
  const world::Clip& audio_clip = ds.clips[audio_idx];
  int max_windows = audio_clip.script.n_frames / N;
  if (max_windows < 1)
    throw ParamError("audio clip shorter than one window; need a multiple of " +
                     std::to_string(N) + " frames");
  int windows = cfg.generate.n_windows > 0 ? cfg.generate.n_windows : max_windows;
  if (windows > max_windows)
    throw ParamError("requested " + std::to_string(windows) + " windows but audio has " +
                     std::to_string(max_windows) + " (multiples of " +
                     std::to_string(N) + " frames)");
  int n_frames = windows * N;

  const world::Clip& portrait_clip = ds.clips[portrait_idx];
  world::RenderedFrame portrait = world::render_face(portrait_clip.params[0],
                                                     cfg.stage1_model.image_size);
  motion::HybridMode mode = cfg.ablation.input_mode;
  Tensor m_self = stage1.encode_motion(motion::build_hybrid_rep(portrait, mode));

  guider::StyleVector style;
  if (!cfg.generate.style_clip.empty() && cfg.ablation.style_mod) {
    int style_idx = find_clip(ds, cfg.generate.style_clip);
    Tensor style_codes =
        stage2.standardize(stage1.encode_clip_codes(ds.clips[style_idx], mode));
    style = stage2.guider()
                .encode_style(stage2.store(), style_codes)
                .reshaped({cfg.stage2_model.guider.style_dim});
  }

  auto take_rows = [](const Tensor& t, int n) {
    Tensor out({n, t.dim(1)});
    for (int r = 0; r < n; ++r)
      for (int c = 0; c < t.dim(1); ++c) out.at2(r, c) = t.at2(r, c);
    return out;
  };
  Tensor a_self = take_rows(audio_clip.audio.self_track, n_frames);
  Tensor a_other = take_rows(audio_clip.audio.other_track, n_frames);

  auto t0 = std::chrono::steady_clock::now();
  Tensor latents =
      diffusion::stream_generate(stage2, a_self, a_other, m_self, style,
                                 derive_seed(cfg.seed, 0x9e4e), !cfg.ablation.memory_banks);
  std::vector<Tensor> frames = stage1.animate(portrait, latents, mode);
  auto t1 = std::chrono::steady_clock::now();

  fs::create_directories(cfg.output_dir / "frames");
  for (size_t i = 0; i < frames.size(); ++i)
    write_ppm(cfg.output_dir / "frames" / frame_name(static_cast<int>(i)), frames[i]);

  fs::path lat_dir = cfg.output_dir / "latents";
  fs::create_directories(lat_dir);
  io::write_f32(lat_dir / "codes.f32", latents);
  json lat_manifest;
  lat_manifest["version"] = io::kContainerVersion;
  lat_manifest["kind"] = "latents";
  lat_manifest["shape"] = latents.shape();
  lat_manifest["checksum"] = io::hex64(io::fnv1a_file(lat_dir / "codes.f32"));
  io::write_manifest(lat_dir, lat_manifest);

  json run;
  run["portrait_clip"] = cfg.generate.portrait_clip;
  run["audio_clip"] = cfg.generate.audio_clip;
  run["style_clip"] = cfg.generate.style_clip;
  run["n_frames"] = n_frames;
  run["seed"] = cfg.seed;
  run["input_mode"] = motion::to_string(mode);
  run["memory_banks"] = cfg.ablation.memory_banks;
  run["style_mod"] = cfg.ablation.style_mod;
  run["latents_checksum"] = lat_manifest["checksum"];
  run["config_hash"] = io::hex64(config_hash(default_config_json()));
  std::ofstream rf(cfg.output_dir / "run.json");
  rf << run.dump(2) << "\n";
  if (!rf) throw FormatError("cannot write run.json in " + cfg.output_dir.string());

  double secs = std::chrono::duration<double>(t1 - t0).count();
  double fps = secs > 0 ? n_frames / secs : 0.0;
  std::cout << "generated " << n_frames << " frames (" << fps << " frames/s) in "
            << cfg.output_dir.string() << "\n";
}

metrics::EvalReport cmd_evaluate(const RunConfig& cfg, const fs::path& run_dir) {
  std::ifstream rf(run_dir / "run.json");
  if (!rf) throw FormatError("missing run.json in " + run_dir.string());
  json run;
  rf >> run;

  world::Dataset ds = world::read_dataset(cfg.dataset_path);
  int n_frames = io::require(run, "n_frames").get<int>();
  motion::HybridMode mode =
      motion::hybrid_mode_from_string(io::require(run, "input_mode").get<std::string>());

  json lat_manifest = io::read_manifest(run_dir / "latents");
  std::vector<int> lat_shape = io::require(lat_manifest, "shape").get<std::vector<int>>();
  Tensor latents = io::read_f32(run_dir / "latents" / "codes.f32", lat_shape);

  metrics::EvalReport report;
  report.config_hash = io::require(run, "config_hash").get<std::string>();
  for (const std::string& name : metrics::metric_registry())
    if (!metrics::metric_available(name))
      report.unavailable[name] = "requires a pretrained network";

  // probes are fit on ground-truth stage-1 codes of a fixed dataset slice
  fs::path s1dir = cfg.checkpoint_dir / "stage1";
  motion::Stage1Model stage1(cfg.stage1_model, derive_seed(cfg.seed, 0x57a100));
  nn::AdamW s1_opt(stage1.store(), {});
  load_stage1(s1dir, stage1, s1_opt);

  int probe_clips = std::min<int>(8, static_cast<int>(ds.clips.size()));
  std::vector<Tensor> gt_codes;
  std::vector<std::vector<double>> gt_pose(world::FaceParams::kNumPoseFields);
  long long gt_rows = 0;
  for (int i = 0; i < probe_clips; ++i) gt_rows += ds.clips[i].script.n_frames;
  Tensor X({static_cast<int>(gt_rows), cfg.stage1_model.motion_dim});
  long long row = 0;
  for (int i = 0; i < probe_clips; ++i) {
    Tensor codes = stage1.encode_clip_codes(ds.clips[i], mode);
    for (int r = 0; r < codes.dim(0); ++r, ++row) {
      for (int c = 0; c < codes.dim(1); ++c)
        X.at2(static_cast<int>(row), c) = codes.at2(r, c);
      auto pf = ds.clips[i].params[r].pose_fields();
      for (int p = 0; p < world::FaceParams::kNumPoseFields; ++p)
        gt_pose[p].push_back(pf[p]);
    }
  }
  std::vector<metrics::LinearProbe> probes(world::FaceParams::kNumPoseFields);
  for (int p = 0; p < world::FaceParams::kNumPoseFields; ++p)
    probes[p] = metrics::fit_probe(X, gt_pose[p]);

  // diversity on raw latents and on probe-recovered pose fields
  report.set("motion_var", metrics::motion_var(latents));
  report.set("motion_sid", metrics::motion_sid(latents, 8, cfg.seed));
  Tensor pose_pred({latents.dim(0), world::FaceParams::kNumPoseFields});
  for (int p = 0; p < world::FaceParams::kNumPoseFields; ++p) {
    std::vector<double> v = metrics::probe_predict(probes[p], latents);
    for (int r = 0; r < latents.dim(0); ++r) pose_pred.at2(r, p) = v[r];
  }
  report.set("pose_var", metrics::motion_var(pose_pred));
  report.set("pose_sid", metrics::motion_sid(pose_pred, 8, cfg.seed));

  // sync: probe-recovered mouth_open against the driving self-energy
  bool have_gt = true;
  std::string gt_reason;
  int audio_idx = -1;
  try {
    audio_idx = find_clip(ds, io::require(run, "audio_clip").get<std::string>());
  } catch (const ParamError&) {
    have_gt = false;
    gt_reason = "driving clip not present in dataset";
  }
  if (have_gt) {
    const world::Clip& clip = ds.clips[audio_idx];
    constexpr int kMouthField = 5;  // pose_fields order
    std::vector<double> mouth = metrics::probe_predict(probes[kMouthField], latents);
    std::vector<double> energy(clip.script.energy_self.begin(),
                               clip.script.energy_self.begin() + n_frames);
    metrics::SyncResult sync = metrics::av_sync_corr(mouth, energy);
    report.set("av_sync_corr", sync.degenerate ? 0.0 : sync.corr);

    int portrait_idx = find_clip(ds, io::require(run, "portrait_clip").get<std::string>());
    if (ds.clips[portrait_idx].identity_index != clip.identity_index) {
      report.unavailable["psnr"] = "portrait identity differs from ground truth";
      report.unavailable["ssim"] = "portrait identity differs from ground truth";
    } else {
      double psnr_acc = 0, ssim_acc = 0;
      for (int t = 0; t < n_frames; ++t) {
        Tensor gen = read_ppm(run_dir / "frames" / frame_name(t));
        Tensor gt = world::render_face(clip.params[t], cfg.stage1_model.image_size).pixels;
        psnr_acc += metrics::psnr(gen, gt);
        ssim_acc += metrics::ssim(gen, gt);
      }
      report.set("psnr", psnr_acc / n_frames);
      report.set("ssim", ssim_acc / n_frames);
    }
    json clip_entry;
    clip_entry["n_frames"] = n_frames;
    clip_entry["sync_best_lag"] = sync.best_lag;
    clip_entry["sync_degenerate"] = sync.degenerate;
    report.per_clip[clip.id] = clip_entry;
  } else {
    report.unavailable["psnr"] = gt_reason;
    report.unavailable["ssim"] = gt_reason;
    report.unavailable["av_sync_corr"] = gt_reason;
  }

  std::ofstream out(run_dir / "eval_report.json");
  out << report.to_json().dump(2) << "\n";
  if (!out) throw FormatError("cannot write eval_report.json in " + run_dir.string());
  return report;
}

int run_command(const std::string& command, const RunConfig& cfg,
                const fs::path& run_dir) {
  try {
    if (command == "gen-data") cmd_gen_data(cfg);
    else if (command == "train-stage1") cmd_train(1, cfg);
    else if (command == "train-stage2") cmd_train(2, cfg);
    else if (command == "generate") cmd_generate(cfg);
    else if (command == "evaluate") cmd_evaluate(cfg, run_dir);
    else throw ParamError("unknown command: " + command);
    return 0;
  } catch (const ParamError& e) {
    std::cerr << "parameter error: " << e.what() << "\n";
    return 2;
  } catch (const ShapeError& e) {
    std::cerr << "parameter error: " << e.what() << "\n";
    return 2;
  } catch (const NumericError& e) {
    std::cerr << "numerical abort: " << e.what() << "\n";
    return 4;
  } catch (const FormatError& e) {
    std::cerr << "I/O error: " << e.what() << "\n";
    return 3;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "I/O error: " << e.what() << "\n";
    return 3;
  }
}

}  // namespace dyadgen::pipeline
