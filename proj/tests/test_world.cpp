#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "dyadgen/container.hpp"
#include "dyadgen/world.hpp"

using namespace dyadgen;
using namespace dyadgen::world;
namespace fs = std::filesystem;

namespace {

bool speaking_state(SpeechState s, bool self) {
  if (s == SpeechState::kBoth) return true;
  return self ? s == SpeechState::kSelfSpeak : s == SpeechState::kOtherSpeak;
}

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  double ma = 0, mb = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= a.size();
  mb /= b.size();
  double num = 0, va = 0, vb = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    num += (a[i] - ma) * (b[i] - mb);
    va += (a[i] - ma) * (a[i] - ma);
    vb += (b[i] - mb) * (b[i] - mb);
  }
  return num / std::sqrt(va * vb);
}

}  // namespace

TEST_CASE("gen_script examples") {
  ConversationScript s = gen_script(250, 7, 2.0, 0.1);
  CHECK(s.count_state_changes() >= 2);

  ConversationScript one = gen_script(25, 0, 100.0, 0.0);
  CHECK(one.single_sided());

  ConversationScript a = gen_script(250, 9, 2.0, 0.1), b = gen_script(250, 9, 2.0, 0.1);
  CHECK(a.state == b.state);
  CHECK(a.energy_self == b.energy_self);
  CHECK(a.phrase_boundaries_other == b.phrase_boundaries_other);

  CHECK_THROWS_AS(gen_script(10, 0, 2.0, 0.1), ParamError);   // shorter than fps
  CHECK_THROWS_AS(gen_script(250, 0, 2.0, 0.5), ParamError);  // overlap > 0.3
  CHECK_THROWS_AS(gen_script(250, 0, -1.0, 0.1), ParamError);
}

TEST_CASE("script invariants over 100 seeds") {
  for (uint64_t seed = 0; seed < 100; ++seed) {
    ConversationScript s = gen_script(250, seed, 1.5, 0.15);
    REQUIRE(static_cast<int>(s.state.size()) == 250);
    for (int t = 0; t < 250; ++t) {
      bool self = speaking_state(s.state[t], true);
      bool other = speaking_state(s.state[t], false);
      if (self) CHECK(s.energy_self[t] >= 0.3);
      else CHECK(s.energy_self[t] <= 0.05);
      if (other) CHECK(s.energy_other[t] >= 0.3);
      else CHECK(s.energy_other[t] <= 0.05);
      CHECK(s.energy_self[t] >= 0.0);
      CHECK(s.energy_self[t] <= 1.0);
    }
    // minimum run length of fps/2 frames
    int run = 1;
    for (int t = 1; t <= 250; ++t) {
      if (t < 250 && s.state[t] == s.state[t - 1]) {
        ++run;
      } else {
        CHECK(2 * run >= s.fps);
        run = 1;
      }
    }
    for (size_t i = 1; i < s.phrase_boundaries_other.size(); ++i)
      CHECK(s.phrase_boundaries_other[i] > s.phrase_boundaries_other[i - 1]);
  }
}

TEST_CASE("synth_audio_features contracts") {
  ConversationScript s = gen_script(250, 3, 1.5, 0.1);
  DyadicAudioFeatures f = synth_audio_features(s, 11);
  REQUIRE(f.self_track.dim(0) == 250);
  REQUIRE(f.self_track.dim(1) == kAudioDim);

  for (int t = 0; t < 250; ++t) {
    CHECK(f.self_track.at2(t, 0) == s.energy_self[t]);
    CHECK(f.other_track.at2(t, 0) == s.energy_other[t]);
    if (s.state[t] == SpeechState::kNeither)
      for (int c = 0; c < kAudioDim; ++c) {
        CHECK(std::fabs(f.self_track.at2(t, c)) <= 0.05);
        CHECK(std::fabs(f.other_track.at2(t, c)) <= 0.05);
      }
  }

  // different seeds: component 0 identical, higher components differ
  DyadicAudioFeatures g = synth_audio_features(s, 12);
  bool differ = false;
  for (int t = 0; t < 250; ++t) {
    CHECK(g.self_track.at2(t, 0) == f.self_track.at2(t, 0));
    for (int c = 1; c < kAudioDim; ++c)
      differ = differ || g.self_track.at2(t, c) != f.self_track.at2(t, c);
  }
  CHECK(differ);

  // zero energy everywhere -> component 0 is the zero sequence
  ConversationScript mute = s;
  for (int t = 0; t < 250; ++t) mute.energy_self[t] = 0.0;
  DyadicAudioFeatures m = synth_audio_features(mute, 11);
  for (int t = 0; t < 250; ++t) CHECK(m.self_track.at2(t, 0) == 0.0);

  CHECK_THROWS_AS(synth_audio_features(s, 11, 1), ParamError);
}

TEST_CASE("behavior_model examples") {
  // silent script: mouth stays near closed
  ConversationScript silent = gen_script(250, 100, 1e6, 0.0);
  for (int t = 0; t < 250; ++t) {
    silent.state[t] = SpeechState::kNeither;
    silent.energy_self[t] = 0.0;
    silent.energy_other[t] = 0.0;
  }
  std::vector<FaceParams> quiet = behavior_model(silent, 4);
  for (const auto& p : quiet) CHECK(p.mouth_open <= 0.1);

  // mouth/energy correlation on a long script
  ConversationScript talk = gen_script(1000, 21, 2.0, 0.1);
  std::vector<FaceParams> seq = behavior_model(talk, 5);
  std::vector<double> mouth(1000);
  for (int t = 0; t < 1000; ++t) mouth[t] = seq[t].mouth_open;
  CHECK(pearson(mouth, talk.energy_self) >= 0.85);

  // determinism and constant identity
  std::vector<FaceParams> seq2 = behavior_model(talk, 5);
  for (int t = 0; t < 1000; ++t) {
    CHECK(seq[t].mouth_open == seq2[t].mouth_open);
    CHECK(seq[t].pitch == seq2[t].pitch);
    CHECK(seq[t].identity.hue == seq[0].identity.hue);
    validate_params(seq[t]);
  }
}

TEST_CASE("render_face landmark geometry") {
  FaceParams p;
  p.mouth_open = 0.0;
  RenderedFrame f = render_face(p);
  REQUIRE(f.landmarks.size() == static_cast<size_t>(kNumLandmarks));
  // closed mouth: top/bottom mouth landmarks coincide (gap < 1 px)
  CHECK(std::fabs(f.landmarks[26][1] - f.landmarks[27][1]) < 1.0 / kImageSize);

  // neutral pose: head boundary symmetric about the vertical centerline
  FaceParams n;
  auto lm = face_landmarks(n);
  for (int i = 0; i < kNumContour; ++i) {
    int j = (kNumContour / 2 - i + kNumContour) % kNumContour;  // mirror across x
    CHECK(std::fabs((lm[i][0] - 0.5) + (lm[j][0] - 0.5)) < 1.0 / kImageSize);
    CHECK(std::fabs(lm[i][1] - lm[j][1]) < 1.0 / kImageSize);
  }

  // analyticity: rendered landmarks equal the standalone computation exactly
  FaceParams q;
  q.yaw = 0.2;
  q.pitch = -0.1;
  q.roll = 0.3;
  q.mouth_open = 0.7;
  q.brow_raise = -0.5;
  auto direct = face_landmarks(q);
  auto rendered = render_face(q).landmarks;
  for (int i = 0; i < kNumLandmarks; ++i) {
    CHECK(direct[i][0] == rendered[i][0]);
    CHECK(direct[i][1] == rendered[i][1]);
  }

  CHECK_THROWS_AS(render_face([] {
                    FaceParams bad;
                    bad.yaw = 0.9;
                    return bad;
                  }()),
                  ParamError);
}

TEST_CASE("identity changes pixels but not expression offsets") {
  Identity id_a{0.8, 0.25, 0.15}, id_b{1.2, 0.35, 0.7};
  FaceParams e1;
  e1.mouth_open = 0.1;
  e1.brow_raise = 0.2;
  FaceParams e2 = e1;
  e2.mouth_open = 0.9;
  e2.yaw = 0.3;
  e2.pitch = -0.2;
  e2.eye_open_l = e2.eye_open_r = 0.4;

  auto with_id = [](FaceParams p, const Identity& id) {
    p.identity = id;
    return p;
  };
  RenderedFrame a1 = render_face(with_id(e1, id_a));
  RenderedFrame b1 = render_face(with_id(e1, id_b));
  bool pixels_differ = false;
  for (long long i = 0; i < a1.pixels.numel(); ++i)
    pixels_differ = pixels_differ || a1.pixels[i] != b1.pixels[i];
  CHECK(pixels_differ);

  auto a2 = face_landmarks(with_id(e2, id_a));
  auto b2 = face_landmarks(with_id(e2, id_b));
  auto a1l = a1.landmarks, b1l = b1.landmarks;
  for (int i = 0; i < kNumLandmarks; ++i)
    for (int c = 0; c < 2; ++c) {
      double off_a = a2[i][c] - a1l[i][c];
      double off_b = b2[i][c] - b1l[i][c];
      CHECK(std::fabs(off_a - off_b) < 1.0 / kImageSize);
    }
}

TEST_CASE("dataset round trip") {
  GenParams gp;
  gp.n_clips = 3;
  gp.n_frames = 60;
  gp.clips_per_identity = 1;
  Dataset ds = generate_dataset(gp, 31);
  REQUIRE(ds.clips.size() == 3);

  fs::path dir = fs::temp_directory_path() / "dyadgen_world_ds";
  fs::remove_all(dir);
  write_dataset(ds, dir);
  Dataset rd = read_dataset(dir);
  REQUIRE(rd.clips.size() == 3);

  // storage is f32; a second round trip must be bit-exact
  fs::path dir2 = fs::temp_directory_path() / "dyadgen_world_ds2";
  fs::remove_all(dir2);
  write_dataset(rd, dir2);
  Dataset rd2 = read_dataset(dir2);
  for (size_t c = 0; c < rd.clips.size(); ++c) {
    const Clip &x = rd.clips[c], &y = rd2.clips[c];
    CHECK(x.id == y.id);
    CHECK(x.script.state == y.script.state);
    CHECK(x.script.energy_self == y.script.energy_self);
    CHECK(x.audio.self_track.vec() == y.audio.self_track.vec());
    CHECK(x.audio.other_track.vec() == y.audio.other_track.vec());
    for (int t = 0; t < x.script.n_frames; ++t) {
      CHECK(x.params[t].pose_fields() == y.params[t].pose_fields());
      CHECK(x.params[t].identity.hue == y.params[t].identity.hue);
    }
    // and the read data matches the generated data to f32 precision
    const Clip& g = ds.clips[c];
    for (long long i = 0; i < g.audio.self_track.numel(); ++i)
      CHECK(x.audio.self_track[i] ==
            doctest::Approx(g.audio.self_track[i]).epsilon(1e-6));
  }
  fs::remove_all(dir2);

  // manifest/array disagreement names n_frames
  {
    nlohmann::json m = io::read_manifest(dir);
    m["clips"][0]["n_frames"] = 61;
    io::write_manifest(dir, m);
    try {
      read_dataset(dir);
      CHECK(false);
    } catch (const FormatError& e) {
      CHECK(std::string(e.what()).find("n_frames") != std::string::npos);
    }
  }
  fs::remove_all(dir);

  CHECK_THROWS_AS(write_dataset(Dataset{}, fs::temp_directory_path() / "dyadgen_empty"),
                  ParamError);
}

TEST_CASE("generate_dataset determinism and warm-up pool") {
  GenParams gp;
  gp.n_clips = 8;
  gp.n_frames = 60;
  gp.clips_per_identity = 4;
  gp.single_sided_per_identity = 1;
  Dataset a = generate_dataset(gp, 5), b = generate_dataset(gp, 5);
  REQUIRE(a.clips.size() == 8);
  int single_sided = 0;
  for (size_t i = 0; i < a.clips.size(); ++i) {
    CHECK(a.clips[i].script.state == b.clips[i].script.state);
    CHECK(a.clips[i].audio.self_track.vec() == b.clips[i].audio.self_track.vec());
    if (a.clips[i].single_sided()) ++single_sided;
    // identity constant within clip, shared across clips of the same identity
    for (size_t j = 0; j < i; ++j)
      if (a.clips[j].identity_index == a.clips[i].identity_index)
        CHECK(a.clips[j].params[0].identity.hue == a.clips[i].params[0].identity.hue);
  }
  CHECK(single_sided >= 2);  // one per identity

  CHECK_THROWS_AS(generate_dataset([] {
                    GenParams bad;
                    bad.n_clips = 0;
                    return bad;
                  }(), 1),
                  ParamError);
}
