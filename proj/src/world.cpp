#include "dyadgen/world.hpp"

#include <algorithm>
#include <cmath>

#include "dyadgen/container.hpp"
#include "dyadgen/rng.hpp"

namespace dyadgen::world {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr double kPi = 3.14159265358979323846;

// geometry constants (normalized coordinates, +y down)
constexpr double kYawShift = 0.18;
constexpr double kPitchShift = 0.15;
constexpr double kHeadAx = 0.22;  // scaled by identity.head_aspect
constexpr double kHeadAy = 0.30;
constexpr double kEyeDy = -0.10;
constexpr double kEyeHalfW = 0.045;
constexpr double kEyeHalfHMax = 0.035;
constexpr double kPupilR = 0.014;
constexpr double kBrowDy = -0.165;
constexpr double kBrowRaiseShift = -0.03;
constexpr double kBrowHalfLen = 0.05;
constexpr double kBrowHalfH = 0.009;
constexpr double kMouthDy = 0.16;
constexpr double kMouthHalfWBase = 0.035;
constexpr double kMouthHalfWGain = 0.055;
constexpr double kMouthHalfHGain = 0.05;

struct Vec2 {
  double x, y;
};

Vec2 rot(double roll, Vec2 v) {
  double c = std::cos(roll), s = std::sin(roll);
  return {c * v.x - s * v.y, s * v.x + c * v.y};
}

void check_range(double v, double lo, double hi, const char* field) {
  if (!(v >= lo - 1e-12 && v <= hi + 1e-12))
    throw ParamError(std::string("FaceParams.") + field + " out of range [" +
                     std::to_string(lo) + "," + std::to_string(hi) + "]: " +
                     std::to_string(v));
}

void hsv_to_rgb(double h, double s, double v, double* rgb) {
  h = h - std::floor(h);
  double c = v * s;
  double hp = h * 6.0;
  double x = c * (1.0 - std::fabs(std::fmod(hp, 2.0) - 1.0));
  double r = 0, g = 0, b = 0;
  if (hp < 1) { r = c; g = x; }
  else if (hp < 2) { r = x; g = c; }
  else if (hp < 3) { g = c; b = x; }
  else if (hp < 4) { g = x; b = c; }
  else if (hp < 5) { r = x; b = c; }
  else { r = c; b = x; }
  double m = v - c;
  rgb[0] = r + m;
  rgb[1] = g + m;
  rgb[2] = b + m;
}

int min_run_frames(int fps) { return (fps + 1) / 2; }

// Smooth per-frame energy envelopes, sampled per speaking state.
struct EnergyEnv {
  double freq, phase;
  double speaking(int t, int fps) const {
    return 0.3 + 0.7 * (0.5 + 0.5 * std::sin(2 * kPi * freq * t / fps + phase));
  }
  double silent(int t, int fps) const {
    return 0.02 + 0.02 * (0.5 + 0.5 * std::sin(2 * kPi * freq * t / fps + phase));
  }
};

}  // namespace

bool ConversationScript::single_sided() const {
  for (int t = 1; t < n_frames; ++t)
    if (state[t] != state[0]) return false;
  return n_frames > 0;
}

int ConversationScript::count_state_changes() const {
  int c = 0;
  for (int t = 1; t < n_frames; ++t)
    if (state[t] != state[t - 1]) ++c;
  return c;
}

ConversationScript gen_script(int n_frames, uint64_t seed, double turn_len_mean_s,
                              double overlap_prob, int fps) {
  if (fps <= 0) throw ParamError("gen_script: fps must be positive");
  if (n_frames < fps) throw ParamError("gen_script: n_frames must be >= fps");
  if (!(overlap_prob >= 0.0 && overlap_prob <= 0.3))
    throw ParamError("gen_script: overlap_prob must be in [0, 0.3]");
  if (!(turn_len_mean_s > 0.0)) throw ParamError("gen_script: turn_len_mean_s must be > 0");

  Rng rng(derive_seed(seed, 0x5c71u));
  const int min_run = min_run_frames(fps);

  std::vector<std::pair<SpeechState, int>> segments;
  bool self_turn = rng.bernoulli(0.5);
  int total = 0;
  while (total < n_frames) {
    int len = std::max(min_run,
                       static_cast<int>(std::lround(rng.exponential(turn_len_mean_s) * fps)));
    segments.push_back({self_turn ? SpeechState::kSelfSpeak : SpeechState::kOtherSpeak, len});
    total += len;
    if (total < n_frames) {
      if (rng.bernoulli(overlap_prob)) {
        int blen = min_run + rng.uniform_int(fps - min_run + 1);
        segments.push_back({SpeechState::kBoth, blen});
        total += blen;
      } else if (rng.bernoulli(0.25)) {
        int glen = min_run + rng.uniform_int(fps - min_run + 1);
        segments.push_back({SpeechState::kNeither, glen});
        total += glen;
      }
    }
    self_turn = !self_turn;
  }

  ConversationScript s;
  s.fps = fps;
  s.n_frames = n_frames;
  s.state.reserve(n_frames);
  for (const auto& [st, len] : segments) {
    for (int i = 0; i < len && static_cast<int>(s.state.size()) < n_frames; ++i)
      s.state.push_back(st);
    if (static_cast<int>(s.state.size()) >= n_frames) break;
  }
  // a truncated tail run shorter than min_run gets absorbed by its predecessor
  {
    int tail = 1;
    while (tail < n_frames && s.state[n_frames - 1 - tail] == s.state[n_frames - 1]) ++tail;
    if (tail < min_run && tail < n_frames)
      for (int i = n_frames - tail; i < n_frames; ++i) s.state[i] = s.state[n_frames - 1 - tail];
  }

  EnergyEnv env_self{rng.uniform(0.2, 0.5), rng.uniform(0, 2 * kPi)};
  EnergyEnv env_other{rng.uniform(0.2, 0.5), rng.uniform(0, 2 * kPi)};
  s.energy_self.resize(n_frames);
  s.energy_other.resize(n_frames);
  for (int t = 0; t < n_frames; ++t) {
    s.energy_self[t] = s.self_speaking(t) ? env_self.speaking(t, fps) : env_self.silent(t, fps);
    s.energy_other[t] =
        s.other_speaking(t) ? env_other.speaking(t, fps) : env_other.silent(t, fps);
  }

  // phrase boundaries: start of every other-speaking run plus marks every ~1.2s
  for (int t = 0; t < n_frames; ++t) {
    bool other_now = s.other_speaking(t);
    bool other_prev = t > 0 && s.other_speaking(t - 1);
    if (other_now && !other_prev) {
      s.phrase_boundaries_other.push_back(t);
      int next = t + 25 + rng.uniform_int(16);
      while (next < n_frames && s.other_speaking(next)) {
        s.phrase_boundaries_other.push_back(next);
        next += 25 + rng.uniform_int(16);
      }
    }
  }
  std::sort(s.phrase_boundaries_other.begin(), s.phrase_boundaries_other.end());
  s.phrase_boundaries_other.erase(
      std::unique(s.phrase_boundaries_other.begin(), s.phrase_boundaries_other.end()),
      s.phrase_boundaries_other.end());
  return s;
}

DyadicAudioFeatures synth_audio_features(const ConversationScript& script, uint64_t seed,
                                         int audio_dim) {
  if (audio_dim < 2) throw ParamError("synth_audio_features: audio_dim must be >= 2");
  int n = script.n_frames;
  DyadicAudioFeatures out;
  out.self_track = Tensor({n, audio_dim});
  out.other_track = Tensor({n, audio_dim});
  for (int track = 0; track < 2; ++track) {
    Rng rng(derive_seed(seed, 0xa0d10u + track));
    const std::vector<double>& energy = track == 0 ? script.energy_self : script.energy_other;
    Tensor& feat = track == 0 ? out.self_track : out.other_track;
    std::vector<double> freq(audio_dim), phase(audio_dim);
    for (int j = 1; j < audio_dim; ++j) {
      freq[j] = rng.uniform(1.0, 8.0);
      phase[j] = rng.uniform(0, 2 * kPi);
    }
    for (int t = 0; t < n; ++t) {
      feat.at2(t, 0) = energy[t];
      for (int j = 1; j < audio_dim; ++j)
        feat.at2(t, j) =
            0.9 * energy[t] * std::sin(2 * kPi * freq[j] * t / script.fps + phase[j]);
    }
  }
  return out;
}

namespace {

std::vector<FaceParams> behavior_model_impl(const ConversationScript& script,
                                            uint64_t motion_seed, Identity identity) {
  int n = script.n_frames;
  int fps = script.fps;
  Rng rng(derive_seed(motion_seed, 0xbe4au));

  double jitter_phase = rng.uniform(0, 2 * kPi);
  double width_phase = rng.uniform(0, 2 * kPi);
  double brow_phase = rng.uniform(0, 2 * kPi);
  double yaw_freq = rng.uniform(0.05, 0.15), yaw_phase = rng.uniform(0, 2 * kPi);
  double roll_freq = rng.uniform(0.05, 0.12), roll_phase = rng.uniform(0, 2 * kPi);
  double pitch_freq = rng.uniform(0.05, 0.12), pitch_phase = rng.uniform(0, 2 * kPi);
  double eye_phase = rng.uniform(0, 2 * kPi);

  // listener nods: seeded coin per phrase boundary, onset within 10 frames
  std::vector<double> nod(n, 0.0);
  for (int pb : script.phrase_boundaries_other) {
    bool fire = rng.bernoulli(0.5);
    int onset = pb + rng.uniform_int(10);
    if (!fire) continue;
    for (int t = onset; t < std::min(n, onset + 30); ++t) {
      double u = t - onset;
      nod[t] += 0.15 * std::exp(-u / 10.0) * std::sin(2 * kPi * u / 12.0);
    }
  }

  // blink schedule: per-frame Bernoulli approximating a 0.3/s Poisson process
  std::vector<bool> blink(n, false);
  for (int t = 0; t < n;) {
    if (rng.bernoulli(0.3 / fps)) {
      int len = 2 + (rng.bernoulli(0.5) ? 1 : 0);
      for (int k = 0; k < len && t + k < n; ++k) blink[t + k] = true;
      t += len;
    } else {
      ++t;
    }
  }

  std::vector<FaceParams> out(n);
  auto clamp01 = [](double v) { return std::clamp(v, 0.0, 1.0); };
  for (int t = 0; t < n; ++t) {
    FaceParams& p = out[t];
    p.identity = identity;
    double jitter = 0.1 * std::sin(2 * kPi * 0.9 * t / fps + jitter_phase);
    p.mouth_open = clamp01(0.8 * script.energy_self[t] + jitter);
    p.mouth_width = 0.5 + 0.1 * std::sin(2 * kPi * 0.25 * t / fps + width_phase);
    p.brow_raise = 0.5 * std::sin(2 * kPi * 0.15 * t / fps + brow_phase);
    p.yaw = 0.25 * std::sin(2 * kPi * yaw_freq * t / fps + yaw_phase);
    p.roll = 0.15 * std::sin(2 * kPi * roll_freq * t / fps + roll_phase);
    p.pitch = std::clamp(
        0.15 * std::sin(2 * kPi * pitch_freq * t / fps + pitch_phase) + nod[t], -0.5, 0.5);
    double eye_base = 0.7 + 0.3 * (0.5 + 0.5 * std::sin(2 * kPi * 0.1 * t / fps + eye_phase));
    p.eye_open_l = p.eye_open_r = blink[t] ? 0.0 : eye_base;
  }
  return out;
}

}  // namespace

std::vector<FaceParams> behavior_model(const ConversationScript& script, uint64_t seed) {
  Rng id_rng(derive_seed(seed, 0x1dau));
  Identity identity;
  identity.head_aspect = id_rng.uniform(0.7, 1.3);
  identity.eye_spacing = id_rng.uniform(0.2, 0.4);
  identity.hue = id_rng.uniform(0.0, 1.0);
  return behavior_model_impl(script, derive_seed(seed, 0x307du), identity);
}

void validate_params(const FaceParams& p) {
  check_range(p.yaw, -0.5, 0.5, "yaw");
  check_range(p.pitch, -0.5, 0.5, "pitch");
  check_range(p.roll, -0.5, 0.5, "roll");
  check_range(p.eye_open_l, 0, 1, "eye_open_l");
  check_range(p.eye_open_r, 0, 1, "eye_open_r");
  check_range(p.mouth_open, 0, 1, "mouth_open");
  check_range(p.mouth_width, 0, 1, "mouth_width");
  check_range(p.brow_raise, -1, 1, "brow_raise");
  check_range(p.identity.head_aspect, 0.7, 1.3, "identity.head_aspect");
  check_range(p.identity.eye_spacing, 0.2, 0.4, "identity.eye_spacing");
  check_range(p.identity.hue, 0, 1, "identity.hue");
}

std::vector<std::array<double, 2>> face_landmarks(const FaceParams& p) {
  std::vector<std::array<double, 2>> lm;
  lm.reserve(kNumLandmarks);
  Vec2 c{0.5 + kYawShift * p.yaw, 0.5 + kPitchShift * p.pitch};
  double ax = kHeadAx * p.identity.head_aspect;
  double ay = kHeadAy;
  auto place = [&](Vec2 offset) {
    Vec2 r = rot(p.roll, offset);
    lm.push_back({std::clamp(c.x + r.x, 0.0, 1.0), std::clamp(c.y + r.y, 0.0, 1.0)});
  };
  for (int i = 0; i < kNumContour; ++i) {
    double th = 2 * kPi * i / kNumContour;
    place({ax * std::cos(th), ay * std::sin(th)});
  }
  double ex = p.identity.eye_spacing / 2.0;
  place({-ex - kEyeHalfW, kEyeDy});  // 16 left eye outer
  place({-ex + kEyeHalfW, kEyeDy});  // 17 left eye inner
  place({ex - kEyeHalfW, kEyeDy});   // 18 right eye inner
  place({ex + kEyeHalfW, kEyeDy});   // 19 right eye outer
  double brow_y = kBrowDy + kBrowRaiseShift * p.brow_raise;
  place({-ex - kBrowHalfLen, brow_y});  // 20..23 brow ends
  place({-ex + kBrowHalfLen, brow_y});
  place({ex - kBrowHalfLen, brow_y});
  place({ex + kBrowHalfLen, brow_y});
  double mw = kMouthHalfWBase + kMouthHalfWGain * p.mouth_width;
  double mh = kMouthHalfHGain * p.mouth_open;
  place({-mw, kMouthDy});  // 24 mouth left
  place({mw, kMouthDy});   // 25 mouth right
  place({0, kMouthDy - mh});  // 26 mouth top
  place({0, kMouthDy + mh});  // 27 mouth bottom
  place({0, -0.02});  // 28 nose bridge
  place({0, 0.06});   // 29 nose tip
  place({0, 0.11});   // 30 philtrum
  place({0, kHeadAy * 0.97});  // 31 chin
  return lm;
}

RenderedFrame render_face(const FaceParams& p, int size) {
  validate_params(p);
  const int H = size, W = size;
  RenderedFrame frame;
  frame.pixels = Tensor({3, H, W});
  frame.landmarks = face_landmarks(p);

  Vec2 c{0.5 + kYawShift * p.yaw, 0.5 + kPitchShift * p.pitch};
  double ax = kHeadAx * p.identity.head_aspect;
  double ay = kHeadAy;
  double face_rgb[3];
  hsv_to_rgb(p.identity.hue, 0.5, 0.8, face_rgb);
  const double bg[3] = {0.08, 0.08, 0.10};
  const double sclera[3] = {0.95, 0.95, 0.95};
  const double pupil[3] = {0.05, 0.05, 0.05};
  const double brow_c[3] = {0.10, 0.08, 0.06};
  const double lip_c[3] = {0.55, 0.12, 0.12};

  double ex = p.identity.eye_spacing / 2.0;
  Vec2 eyeL = rot(p.roll, {-ex, kEyeDy});
  Vec2 eyeR = rot(p.roll, {ex, kEyeDy});
  double brow_y = kBrowDy + kBrowRaiseShift * p.brow_raise;
  Vec2 browL = rot(p.roll, {-ex, brow_y});
  Vec2 browR = rot(p.roll, {ex, brow_y});
  Vec2 mouth = rot(p.roll, {0, kMouthDy});
  double mw = kMouthHalfWBase + kMouthHalfWGain * p.mouth_width;
  double mh = std::max(kMouthHalfHGain * p.mouth_open, 0.004);  // closed mouth = 1px lip line
  double ehl = kEyeHalfHMax * p.eye_open_l;
  double ehr = kEyeHalfHMax * p.eye_open_r;

  auto in_ellipse = [](double x, double y, Vec2 ec, double a, double b) {
    if (a <= 0 || b <= 0) return false;
    double dx = (x - ec.x) / a, dy = (y - ec.y) / b;
    return dx * dx + dy * dy <= 1.0;
  };

  for (int iy = 0; iy < H; ++iy) {
    double y = static_cast<double>(iy) / (H - 1);
    for (int ix = 0; ix < W; ++ix) {
      double x = static_cast<double>(ix) / (W - 1);
      const double* col = bg;
      // head ellipse in the rolled frame
      Vec2 d = rot(-p.roll, {x - c.x, y - c.y});
      if ((d.x / ax) * (d.x / ax) + (d.y / ay) * (d.y / ay) <= 1.0) {
        col = face_rgb;
        Vec2 el{c.x + eyeL.x, c.y + eyeL.y}, er{c.x + eyeR.x, c.y + eyeR.y};
        Vec2 bl{c.x + browL.x, c.y + browL.y}, br{c.x + browR.x, c.y + browR.y};
        Vec2 mo{c.x + mouth.x, c.y + mouth.y};
        if (in_ellipse(x, y, el, kEyeHalfW, ehl) || in_ellipse(x, y, er, kEyeHalfW, ehr)) {
          col = sclera;
          if ((p.eye_open_l > 0.2 && in_ellipse(x, y, el, kPupilR, std::min(kPupilR, ehl))) ||
              (p.eye_open_r > 0.2 && in_ellipse(x, y, er, kPupilR, std::min(kPupilR, ehr))))
            col = pupil;
        } else if ((std::fabs(x - bl.x) <= kBrowHalfLen && std::fabs(y - bl.y) <= kBrowHalfH) ||
                   (std::fabs(x - br.x) <= kBrowHalfLen && std::fabs(y - br.y) <= kBrowHalfH)) {
          col = brow_c;
        } else if (in_ellipse(x, y, mo, mw, mh)) {
          col = lip_c;
        }
      }
      for (int ch = 0; ch < 3; ++ch) frame.pixels.at3(ch, iy, ix) = col[ch];
    }
  }
  return frame;
}

Dataset generate_dataset(const GenParams& gen, uint64_t seed) {
  if (gen.n_clips <= 0) throw ParamError("generate_dataset: n_clips must be positive");
  if (gen.n_frames < kFps) throw ParamError("generate_dataset: n_frames must be >= fps");
  Dataset ds;
  ds.generator_params = {{"n_clips", gen.n_clips},
                         {"n_frames", gen.n_frames},
                         {"clips_per_identity", gen.clips_per_identity},
                         {"turn_len_mean_s", gen.turn_len_mean_s},
                         {"overlap_prob", gen.overlap_prob},
                         {"single_sided_per_identity", gen.single_sided_per_identity},
                         {"seed", seed}};
  for (int i = 0; i < gen.n_clips; ++i) {
    Clip clip;
    char buf[32];
    std::snprintf(buf, sizeof(buf), "clip_%03d", i);
    clip.id = buf;
    clip.seed = derive_seed(seed, static_cast<uint64_t>(i));
    clip.identity_index = i / gen.clips_per_identity;

    int in_identity = i % gen.clips_per_identity;
    if (in_identity < gen.single_sided_per_identity) {
      // constant-state "simple case" clip; sides alternate per identity
      SpeechState st = (clip.identity_index + in_identity) % 2 == 0
                           ? SpeechState::kSelfSpeak
                           : SpeechState::kOtherSpeak;
      clip.script = gen_script(gen.n_frames, clip.seed, 1e6, 0.0);
      for (auto& s : clip.script.state) s = st;
      // regenerate energies for the forced state
      ConversationScript& sc = clip.script;
      ConversationScript tmp = gen_script(gen.n_frames, clip.seed, 1e6, 0.0);
      for (int t = 0; t < gen.n_frames; ++t) {
        bool selfspk = st == SpeechState::kSelfSpeak;
        sc.energy_self[t] = selfspk ? std::max(0.3, tmp.energy_self[t]) : std::min(0.05, tmp.energy_self[t]);
        sc.energy_other[t] = !selfspk ? std::max(0.3, tmp.energy_other[t]) : std::min(0.05, tmp.energy_other[t]);
      }
      sc.phrase_boundaries_other.clear();
      if (st == SpeechState::kOtherSpeak)
        for (int t = 0; t < gen.n_frames; t += 30) sc.phrase_boundaries_other.push_back(t);
    } else {
      clip.script = gen_script(gen.n_frames, clip.seed, gen.turn_len_mean_s, gen.overlap_prob);
    }
    clip.audio = synth_audio_features(clip.script, derive_seed(clip.seed, 1));

    Rng id_rng(derive_seed(seed, 0x1d000000ULL + static_cast<uint64_t>(clip.identity_index)));
    Identity identity;
    identity.head_aspect = id_rng.uniform(0.7, 1.3);
    identity.eye_spacing = id_rng.uniform(0.2, 0.4);
    identity.hue = id_rng.uniform(0.0, 1.0);
    clip.params = behavior_model_impl(clip.script, derive_seed(clip.seed, 2), identity);
    ds.clips.push_back(std::move(clip));
  }
  return ds;
}

void write_dataset(const Dataset& ds, const fs::path& dir) {
  if (ds.clips.empty()) throw ParamError("write_dataset: clip list is empty");
  fs::create_directories(dir);
  json m;
  m["version"] = io::kContainerVersion;
  m["kind"] = "dataset";
  m["fps"] = ds.fps;
  m["image_size"] = ds.image_size;
  m["audio_dim"] = ds.audio_dim;
  m["n_clips"] = ds.clips.size();
  m["state_enum"] = {{"SELF_SPEAK", 0}, {"OTHER_SPEAK", 1}, {"BOTH", 2}, {"NEITHER", 3}};
  m["generator_params"] = ds.generator_params;
  json clips = json::array();
  for (const auto& clip : ds.clips) {
    int n = clip.script.n_frames;
    json cj;
    cj["id"] = clip.id;
    cj["seed"] = clip.seed;
    cj["n_frames"] = n;
    cj["identity_index"] = clip.identity_index;
    cj["single_sided"] = clip.single_sided();
    cj["phrase_boundaries_other"] = clip.script.phrase_boundaries_other;

    auto vec_tensor = [&](const std::vector<double>& v) {
      Tensor t({static_cast<int>(v.size())});
      for (size_t i = 0; i < v.size(); ++i) t[i] = v[i];
      return t;
    };
    Tensor pose({n, FaceParams::kNumPoseFields});
    for (int t = 0; t < n; ++t) {
      auto f = clip.params[t].pose_fields();
      for (int j = 0; j < FaceParams::kNumPoseFields; ++j) pose.at2(t, j) = f[j];
    }
    Tensor identity({3});
    identity[0] = clip.params[0].identity.head_aspect;
    identity[1] = clip.params[0].identity.eye_spacing;
    identity[2] = clip.params[0].identity.hue;

    json arrays = json::array();
    auto put_f32 = [&](const std::string& field, const Tensor& t) {
      std::string file = clip.id + "." + field + ".f32";
      io::write_f32(dir / file, t);
      arrays.push_back({{"name", field},
                        {"dtype", "f32"},
                        {"shape", t.shape()},
                        {"file", file},
                        {"checksum", io::hex64(io::fnv1a_file(dir / file))}});
    };
    put_f32("audio_self", clip.audio.self_track);
    put_f32("audio_other", clip.audio.other_track);
    put_f32("energy_self", vec_tensor(clip.script.energy_self));
    put_f32("energy_other", vec_tensor(clip.script.energy_other));
    put_f32("pose", pose);
    put_f32("identity", identity);
    {
      std::vector<uint8_t> st(static_cast<size_t>(n));
      for (int t = 0; t < n; ++t) st[t] = static_cast<uint8_t>(clip.script.state[t]);
      std::string file = clip.id + ".state.u8";
      io::write_u8(dir / file, st);
      arrays.push_back({{"name", "state"},
                        {"dtype", "u8"},
                        {"shape", {n}},
                        {"file", file},
                        {"checksum", io::hex64(io::fnv1a_file(dir / file))}});
    }
    cj["arrays"] = arrays;
    clips.push_back(cj);
  }
  m["clips"] = clips;
  io::write_manifest(dir, m);
}

Dataset read_dataset(const fs::path& dir) {
  json m = io::read_manifest(dir);
  if (io::require(m, "version").get<int>() != io::kContainerVersion)
    throw FormatError("unsupported dataset version");
  if (io::require(m, "kind").get<std::string>() != "dataset")
    throw FormatError("manifest field \"kind\" is not \"dataset\"");
  Dataset ds;
  ds.fps = io::require(m, "fps").get<int>();
  ds.image_size = io::require(m, "image_size").get<int>();
  ds.audio_dim = io::require(m, "audio_dim").get<int>();
  ds.generator_params = io::require(m, "generator_params");
  size_t n_clips = io::require(m, "n_clips").get<size_t>();
  const json& clips = io::require(m, "clips");
  if (clips.size() != n_clips)
    throw FormatError("manifest n_clips=" + std::to_string(n_clips) +
                      " but clips list has " + std::to_string(clips.size()));
  for (const auto& cj : clips) {
    Clip clip;
    clip.id = io::require(cj, "id").get<std::string>();
    clip.seed = io::require(cj, "seed").get<uint64_t>();
    clip.identity_index = io::require(cj, "identity_index").get<int>();
    int n = io::require(cj, "n_frames").get<int>();
    clip.script.fps = ds.fps;
    clip.script.n_frames = n;
    clip.script.phrase_boundaries_other =
        io::require(cj, "phrase_boundaries_other").get<std::vector<int>>();

    std::map<std::string, std::pair<std::string, std::vector<int>>> entries;  // name -> (file, shape)
    std::map<std::string, std::string> dtypes;
    for (const auto& e : io::require(cj, "arrays")) {
      std::string name = io::require(e, "name").get<std::string>();
      entries[name] = {io::require(e, "file").get<std::string>(),
                       io::require(e, "shape").get<std::vector<int>>()};
      dtypes[name] = io::require(e, "dtype").get<std::string>();
    }
    auto get_f32 = [&](const std::string& name, int frame_dim) {
      auto it = entries.find(name);
      if (it == entries.end())
        throw FormatError("clip " + clip.id + ": missing array \"" + name + "\"");
      const auto& [file, shape] = it->second;
      if (frame_dim >= 0 && (shape.empty() || shape[0] != n))
        throw FormatError("clip " + clip.id + " array \"" + name +
                          "\": shape disagrees with n_frames=" + std::to_string(n));
      try {
        return io::read_f32(dir / file, shape);
      } catch (const FormatError& err) {
        throw FormatError("clip " + clip.id + " array \"" + name + "\" (n_frames=" +
                          std::to_string(n) + "): " + err.what());
      }
    };
    clip.audio.self_track = get_f32("audio_self", 0);
    clip.audio.other_track = get_f32("audio_other", 0);
    Tensor es = get_f32("energy_self", 0);
    Tensor eo = get_f32("energy_other", 0);
    Tensor pose = get_f32("pose", 0);
    Tensor identity = get_f32("identity", -1);
    std::vector<uint8_t> st;
    try {
      st = io::read_u8(dir / entries.at("state").first, static_cast<size_t>(n));
    } catch (const std::out_of_range&) {
      throw FormatError("clip " + clip.id + ": missing array \"state\"");
    } catch (const FormatError& err) {
      throw FormatError("clip " + clip.id + " array \"state\" (n_frames=" +
                        std::to_string(n) + "): " + err.what());
    }
    clip.script.state.resize(n);
    clip.script.energy_self.resize(n);
    clip.script.energy_other.resize(n);
    clip.params.resize(n);
    Identity ident{identity[0], identity[1], identity[2]};
    for (int t = 0; t < n; ++t) {
      if (st[t] > 3)
        throw FormatError("clip " + clip.id + ": invalid state value " + std::to_string(st[t]));
      clip.script.state[t] = static_cast<SpeechState>(st[t]);
      clip.script.energy_self[t] = es[t];
      clip.script.energy_other[t] = eo[t];
      FaceParams& p = clip.params[t];
      p.yaw = pose.at2(t, 0);
      p.pitch = pose.at2(t, 1);
      p.roll = pose.at2(t, 2);
      p.eye_open_l = pose.at2(t, 3);
      p.eye_open_r = pose.at2(t, 4);
      p.mouth_open = pose.at2(t, 5);
      p.mouth_width = pose.at2(t, 6);
      p.brow_raise = pose.at2(t, 7);
      p.identity = ident;
    }
    ds.clips.push_back(std::move(clip));
  }
  return ds;
}

}  // namespace dyadgen::world
