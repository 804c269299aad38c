#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include <json.hpp>

#include "dyadgen/diffusion.hpp"
#include "dyadgen/metrics.hpp"
#include "dyadgen/motion_space.hpp"
#include "dyadgen/world.hpp"

namespace dyadgen::pipeline {

struct AblationConfig {
  bool memory_banks = true;
  bool style_mod = true;
  motion::HybridMode input_mode = motion::HybridMode::kHybrid;
};

struct GenerateConfig {
  std::string portrait_clip;  // identity source (frame 0)
  std::string audio_clip;     // driving dyadic audio + ground truth
  std::string style_clip;     // empty -> NULL style
  int n_windows = 0;          // 0 -> as many as the audio allows
};

struct RunConfig {
  uint64_t seed = 0;
  std::filesystem::path dataset_path = "data";
  std::filesystem::path checkpoint_dir = "ckpt";
  std::filesystem::path output_dir = "out";
  world::GenParams data;
  motion::Stage1Config stage1_model;
  motion::Stage1TrainConfig stage1_train;
  diffusion::Stage2Config stage2_model;
  diffusion::Stage2TrainConfig stage2_train;
  AblationConfig ablation;
  GenerateConfig generate;
};

// Full schema with default values; parse rejects any key outside it.
nlohmann::json default_config_json();
RunConfig parse_config(const nlohmann::json& j);
RunConfig load_config(const std::filesystem::path& path);
uint64_t config_hash(const nlohmann::json& j);

// ---- checkpoints ----

void save_stage1(const std::filesystem::path& dir, const motion::Stage1Model& model,
                 const nn::AdamW& opt, const nlohmann::json& meta);
// returns the checkpoint meta; model/opt are restored in place
nlohmann::json load_stage1(const std::filesystem::path& dir, motion::Stage1Model& model,
                           nn::AdamW& opt);

void save_stage2(const std::filesystem::path& dir, const diffusion::Stage2Model& model,
                 const nn::AdamW& opt, const nlohmann::json& meta);
nlohmann::json load_stage2(const std::filesystem::path& dir,
                           diffusion::Stage2Model& model, nn::AdamW& opt);

// ---- lossless frame I/O (binary PPM, 8-bit) ----

void write_ppm(const std::filesystem::path& path, const Tensor& image);  // [3,H,W]
Tensor read_ppm(const std::filesystem::path& path);

// ---- commands; throw on failure, CLI maps exceptions to exit codes ----

void cmd_gen_data(const RunConfig& cfg);
void cmd_train(int stage, const RunConfig& cfg);
void cmd_generate(const RunConfig& cfg);
metrics::EvalReport cmd_evaluate(const RunConfig& cfg,
                                 const std::filesystem::path& run_dir);

// exit-code mapping: 0 ok, 2 parameter/format, 3 I/O, 4 numeric
int run_command(const std::string& command, const RunConfig& cfg,
                const std::filesystem::path& run_dir);

}  // namespace dyadgen::pipeline
