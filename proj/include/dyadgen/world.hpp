#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "dyadgen/tensor.hpp"

namespace dyadgen::world {

inline constexpr int kFps = 25;
inline constexpr int kImageSize = 64;
inline constexpr int kAudioDim = 24;
inline constexpr int kNumLandmarks = 32;
inline constexpr int kNumContour = 16;  // landmarks [0,16) are head boundary

enum class SpeechState : uint8_t {
  kSelfSpeak = 0,
  kOtherSpeak = 1,
  kBoth = 2,
  kNeither = 3,
};

struct ConversationScript {
  int fps = kFps;
  int n_frames = 0;
  std::vector<SpeechState> state;
  std::vector<double> energy_self;
  std::vector<double> energy_other;
  std::vector<int> phrase_boundaries_other;  // sorted frame indices

  bool self_speaking(int t) const {
    return state[t] == SpeechState::kSelfSpeak || state[t] == SpeechState::kBoth;
  }
  bool other_speaking(int t) const {
    return state[t] == SpeechState::kOtherSpeak || state[t] == SpeechState::kBoth;
  }
  bool single_sided() const;  // one constant state over all frames
  int count_state_changes() const;
};

struct Identity {
  double head_aspect = 1.0;   // [0.7, 1.3]
  double eye_spacing = 0.3;   // [0.2, 0.4]
  double hue = 0.0;           // [0, 1]
};

struct FaceParams {
  double yaw = 0, pitch = 0, roll = 0;        // radians, [-0.5, 0.5]
  double eye_open_l = 1, eye_open_r = 1;      // [0, 1]
  double mouth_open = 0;                      // [0, 1]
  double mouth_width = 0.5;                   // [0, 1]
  double brow_raise = 0;                      // [-1, 1]
  Identity identity;

  static constexpr int kNumPoseFields = 8;
  std::array<double, kNumPoseFields> pose_fields() const {
    return {yaw, pitch, roll, eye_open_l, eye_open_r, mouth_open, mouth_width, brow_raise};
  }
};

struct DyadicAudioFeatures {
  Tensor self_track;   // [n_frames, D_a]
  Tensor other_track;  // [n_frames, D_a]
};

struct RenderedFrame {
  Tensor pixels;  // [3, H, W], values in [0,1]
  std::vector<std::array<double, 2>> landmarks;  // normalized [0,1]^2
};

// ---- operations ----

ConversationScript gen_script(int n_frames, uint64_t seed, double turn_len_mean_s,
                              double overlap_prob, int fps = kFps);

DyadicAudioFeatures synth_audio_features(const ConversationScript& script,
                                         uint64_t seed, int audio_dim = kAudioDim);

std::vector<FaceParams> behavior_model(const ConversationScript& script, uint64_t seed);

RenderedFrame render_face(const FaceParams& params, int size = kImageSize);

// Landmarks alone, without rasterizing; identical to RenderedFrame.landmarks.
std::vector<std::array<double, 2>> face_landmarks(const FaceParams& params);

void validate_params(const FaceParams& params);

// ---- dataset ----

struct Clip {
  std::string id;
  uint64_t seed = 0;
  int identity_index = 0;  // clips of the same identity share this
  ConversationScript script;
  DyadicAudioFeatures audio;
  std::vector<FaceParams> params;

  bool single_sided() const { return script.single_sided(); }
};

struct Dataset {
  int fps = kFps;
  int image_size = kImageSize;
  int audio_dim = kAudioDim;
  std::vector<Clip> clips;
  nlohmann::json generator_params;  // free-form, echoed into the manifest
};

struct GenParams {
  int n_clips = 64;
  int n_frames = 250;
  int clips_per_identity = 4;
  double turn_len_mean_s = 2.0;
  double overlap_prob = 0.1;
  // each identity's first `single_sided_per_identity` clips use a one-state
  // script (warm-up pool for the diffusion stage)
  int single_sided_per_identity = 1;
};

Dataset generate_dataset(const GenParams& gen, uint64_t seed);

void write_dataset(const Dataset& ds, const std::filesystem::path& dir);
Dataset read_dataset(const std::filesystem::path& dir);

}  // namespace dyadgen::world
