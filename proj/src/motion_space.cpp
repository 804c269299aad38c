#include "dyadgen/motion_space.hpp"

#include <algorithm>
#include <cmath>
#include <mutex>
#include <set>

#include "dyadgen/parallel.hpp"
#include "dyadgen/rng.hpp"

namespace dyadgen::motion {

using nn::LeafMap;
using nn::NodePtr;
using nn::P;
namespace ad = dyadgen::ad;

HybridMode hybrid_mode_from_string(const std::string& s) {
  if (s == "HYBRID") return HybridMode::kHybrid;
  if (s == "INTACT_IMAGE") return HybridMode::kIntactImage;
  if (s == "LANDMARKS_MAP") return HybridMode::kLandmarksMap;
  throw ParamError("unknown input mode: " + s);
}

std::string to_string(HybridMode m) {
  switch (m) {
    case HybridMode::kHybrid: return "HYBRID";
    case HybridMode::kIntactImage: return "INTACT_IMAGE";
    case HybridMode::kLandmarksMap: return "LANDMARKS_MAP";
  }
  return "?";
}

Tensor HybridRep::to_input() const {
  int h = masked_pixels.dim(1), w = masked_pixels.dim(2);
  Tensor out({4, h, w});
  std::copy(masked_pixels.data(), masked_pixels.data() + 3ll * h * w, out.data());
  std::copy(contour.data(), contour.data() + (long long)h * w, out.data() + 3ll * h * w);
  return out;
}

namespace {

struct Box {
  int x0, y0, x1, y1;  // inclusive
  bool valid() const { return x1 >= x0 && y1 >= y0; }
};

Box landmark_box(const std::vector<std::array<double, 2>>& lm, const std::vector<int>& idx,
                 int size, int dilate, bool* fallback) {
  double xmin = 1e9, xmax = -1e9, ymin = 1e9, ymax = -1e9;
  for (int i : idx) {
    xmin = std::min(xmin, lm[i][0]);
    xmax = std::max(xmax, lm[i][0]);
    ymin = std::min(ymin, lm[i][1]);
    ymax = std::max(ymax, lm[i][1]);
  }
  auto to_px = [&](double v) { return static_cast<int>(std::lround(v * (size - 1))); };
  Box b{to_px(xmin) - dilate, to_px(ymin) - dilate, to_px(xmax) + dilate, to_px(ymax) + dilate};
  b.x0 = std::clamp(b.x0, 0, size - 1);
  b.y0 = std::clamp(b.y0, 0, size - 1);
  b.x1 = std::clamp(b.x1, 0, size - 1);
  b.y1 = std::clamp(b.y1, 0, size - 1);
  if (!b.valid() || b.x1 == b.x0 || b.y1 == b.y0) {
    // degenerate: 8x8 box on the landmark centroid
    double cx = 0, cy = 0;
    for (int i : idx) {
      cx += lm[i][0];
      cy += lm[i][1];
    }
    cx /= idx.size();
    cy /= idx.size();
    int px = to_px(cx), py = to_px(cy);
    b = {std::clamp(px - 4, 0, size - 1), std::clamp(py - 4, 0, size - 1),
         std::clamp(px + 3, 0, size - 1), std::clamp(py + 3, 0, size - 1)};
    if (fallback) *fallback = true;
  }
  return b;
}

void stamp_point(Tensor& channel, double x, double y, int size) {
  int px = static_cast<int>(std::lround(x * (size - 1)));
  int py = static_cast<int>(std::lround(y * (size - 1)));
  for (int dy = -1; dy <= 1; ++dy)
    for (int dx = -1; dx <= 1; ++dx) {
      int ix = px + dx, iy = py + dy;
      if (ix >= 0 && ix < size && iy >= 0 && iy < size) channel.at2(iy, ix) = 1.0;
    }
}

}  // namespace

HybridRep build_hybrid_rep(const world::RenderedFrame& frame, HybridMode mode, int dilate_px) {
  if (frame.landmarks.size() != world::kNumLandmarks)
    throw ParamError("build_hybrid_rep: frame has no landmarks");
  int size = frame.pixels.dim(1);
  HybridRep rep;
  rep.masked_pixels = Tensor({3, size, size});
  rep.contour = Tensor({size, size});

  if (mode == HybridMode::kIntactImage) {
    rep.masked_pixels = frame.pixels;
    return rep;
  }
  if (mode == HybridMode::kLandmarksMap) {
    for (const auto& p : frame.landmarks) stamp_point(rep.contour, p[0], p[1], size);
    return rep;
  }

  Box eye_l = landmark_box(frame.landmarks, {16, 17}, size, dilate_px, &rep.fallback_boxes);
  Box eye_r = landmark_box(frame.landmarks, {18, 19}, size, dilate_px, &rep.fallback_boxes);
  Box lips = landmark_box(frame.landmarks, {24, 25, 26, 27}, size, dilate_px,
                          &rep.fallback_boxes);
  for (const Box& b : {eye_l, eye_r, lips})
    for (int y = b.y0; y <= b.y1; ++y)
      for (int x = b.x0; x <= b.x1; ++x)
        for (int c = 0; c < 3; ++c)
          rep.masked_pixels.at3(c, y, x) = frame.pixels.at3(c, y, x);
  for (int i = 0; i < world::kNumContour; ++i)
    stamp_point(rep.contour, frame.landmarks[i][0], frame.landmarks[i][1], size);
  return rep;
}

Stage1Model::Stage1Model(Stage1Config cfg, uint64_t init_seed)
    : cfg_(cfg), store_(init_seed) {
  using nn::Init;
  auto conv = [&](const std::string& name, int cout, int cin, int k, bool zero = false) {
    store_.add(name + ".w", {cout, cin, k, k}, zero ? Init::kZero : Init::kFanIn,
               cin * k * k);
    store_.add(name + ".b", {cout}, Init::kZero);
  };
  auto tconv = [&](const std::string& name, int cin, int cout, int k) {
    store_.add(name + ".w", {cin, cout, k, k}, Init::kFanIn, cin * k * k / 4);
    store_.add(name + ".b", {cout}, Init::kZero);
  };
  // motion encoder: 4 stride-2 conv stages, row-band pooling, linear head.
  // Pooling over width only keeps vertical extent (mouth/eye opening) as a
  // linear quantity, and the linear head preserves it into the code.
  conv("enc.conv0", 16, 4, 3);
  conv("enc.conv1", 32, 16, 3);
  conv("enc.conv2", 64, 32, 3);
  conv("enc.conv3", 64, 64, 3);
  int bands = 64 * (cfg_.image_size / 16);
  nn::register_mlp(store_, "enc.head", bands, {cfg_.motion_dim});
  // auxiliary band decoder; its reconstruction term keeps the code spanning
  // the high-variance band subspace instead of a random projection of it
  nn::register_mlp(store_, "enc.aux", cfg_.motion_dim, {bands});
  // auxiliary landmark-motion head: code differences must linearly explain
  // per-landmark displacements, articulation included
  nn::register_mlp(store_, "enc.lmk", cfg_.motion_dim, {2 * world::kNumLandmarks});
  // flow head: a single zero-initialized linear map of the code difference.
  // Keeping it linear ties voxel displacement directly to code deltas, so the
  // codes themselves stay linear in the underlying articulation.
  int flow_out = cfg_.vol_depth * cfg_.vol_hw * cfg_.vol_hw * 3;
  nn::register_mlp(store_, "flow", cfg_.motion_dim, {flow_out}, /*zero_last=*/true);
  // appearance encoder to a C x D x H' x W' volume
  conv("app.conv0", 32, 3, 3);
  conv("app.conv1", 64, 32, 3);
  conv("app.conv2", cfg_.vol_channels * cfg_.vol_depth, 64, 3);
  // decoder: depth folded into channels, upsample back to the image
  tconv("dec.tconv0", cfg_.vol_channels * cfg_.vol_depth, 32, 4);
  tconv("dec.tconv1", 32, 16, 4);
  conv("dec.out", 3, 16, 3, /*zero=*/true);
}

std::pair<NodePtr, NodePtr> Stage1Model::encode_motion_bands_node(const LeafMap& lv,
                                                                  NodePtr rep) const {
  if (rep->value.ndim() != 3 || rep->value.dim(0) != 4 ||
      rep->value.dim(1) != cfg_.image_size || rep->value.dim(2) != cfg_.image_size)
    throw ShapeError("encode_motion: expected [4," + std::to_string(cfg_.image_size) + "," +
                     std::to_string(cfg_.image_size) + "], got " +
                     Tensor::shape_str(rep->value.shape()));
  NodePtr x = rep;
  for (int i = 0; i < 4; ++i) {
    std::string name = "enc.conv" + std::to_string(i);
    x = ad::tanh_(ad::conv2d(x, P(lv, name + ".w"), P(lv, name + ".b"), 2, 1));
  }
  int grid = cfg_.image_size / 16;
  NodePtr bands = ad::mean_rows(ad::transpose(ad::reshape(x, {64 * grid, grid})));
  NodePtr pooled = ad::reshape(bands, {1, 64 * grid});
  return {nn::mlp_forward(lv, "enc.head", pooled, 1), pooled};
}

NodePtr Stage1Model::encode_motion_node(const LeafMap& lv, NodePtr rep) const {
  return encode_motion_bands_node(lv, rep).first;
}

NodePtr Stage1Model::estimate_flow_node(const LeafMap& lv, NodePtr m_src,
                                        NodePtr m_dri) const {
  auto as_row = [&](NodePtr m) {
    if (m->value.numel() != cfg_.motion_dim)
      throw ShapeError("estimate_flow: motion code must have dim " +
                       std::to_string(cfg_.motion_dim) + ", got " +
                       Tensor::shape_str(m->value.shape()));
    return m->value.ndim() == 2 ? m : ad::reshape(m, {1, cfg_.motion_dim});
  };
  NodePtr x = ad::sub(as_row(m_dri), as_row(m_src));
  x = nn::mlp_forward(lv, "flow", x, 1);
  x = ad::scale(ad::tanh_(x), cfg_.flow_clamp);
  return ad::reshape(x, {cfg_.vol_depth, cfg_.vol_hw, cfg_.vol_hw, 3});
}

NodePtr Stage1Model::encode_appearance_node(const LeafMap& lv, NodePtr img) const {
  if (img->value.ndim() != 3 || img->value.dim(0) != 3 ||
      img->value.dim(1) != cfg_.image_size || img->value.dim(2) != cfg_.image_size)
    throw ShapeError("encode_appearance: expected [3," + std::to_string(cfg_.image_size) +
                     "," + std::to_string(cfg_.image_size) + "], got " +
                     Tensor::shape_str(img->value.shape()));
  NodePtr x = ad::tanh_(ad::conv2d(img, P(lv, "app.conv0.w"), P(lv, "app.conv0.b"), 2, 1));
  x = ad::tanh_(ad::conv2d(x, P(lv, "app.conv1.w"), P(lv, "app.conv1.b"), 2, 1));
  x = ad::tanh_(ad::conv2d(x, P(lv, "app.conv2.w"), P(lv, "app.conv2.b"), 1, 1));
  return ad::reshape(x, {cfg_.vol_channels, cfg_.vol_depth, cfg_.vol_hw, cfg_.vol_hw});
}

NodePtr Stage1Model::decode_face_node(const LeafMap& lv, NodePtr vol) const {
  std::vector<int> want = {cfg_.vol_channels, cfg_.vol_depth, cfg_.vol_hw, cfg_.vol_hw};
  if (vol->value.shape() != want)
    throw ShapeError("decode_face: expected " + Tensor::shape_str(want) + ", got " +
                     Tensor::shape_str(vol->value.shape()));
  NodePtr x = ad::reshape(vol, {cfg_.vol_channels * cfg_.vol_depth, cfg_.vol_hw, cfg_.vol_hw});
  x = ad::tanh_(ad::conv_transpose2d(x, P(lv, "dec.tconv0.w"), P(lv, "dec.tconv0.b"), 2, 1));
  x = ad::tanh_(ad::conv_transpose2d(x, P(lv, "dec.tconv1.w"), P(lv, "dec.tconv1.b"), 2, 1));
  x = ad::conv2d(x, P(lv, "dec.out.w"), P(lv, "dec.out.b"), 1, 1);
  return ad::sigmoid_(x);
}

Tensor Stage1Model::encode_motion(const HybridRep& rep) const {
  LeafMap lv = store_.leaves();
  return encode_motion_node(lv, ad::constant(rep.to_input()))
      ->value.reshaped({cfg_.motion_dim});
}

Tensor Stage1Model::estimate_flow(const Tensor& m_src, const Tensor& m_dri) const {
  LeafMap lv = store_.leaves();
  return estimate_flow_node(lv, ad::constant(m_src), ad::constant(m_dri))->value;
}

Tensor Stage1Model::encode_appearance(const Tensor& pixels) const {
  LeafMap lv = store_.leaves();
  return encode_appearance_node(lv, ad::constant(pixels))->value;
}

Tensor Stage1Model::decode_face(const Tensor& vol) const {
  LeafMap lv = store_.leaves();
  return decode_face_node(lv, ad::constant(vol))->value;
}

std::vector<Tensor> Stage1Model::imitate(const world::RenderedFrame& self,
                                         const std::vector<world::RenderedFrame>& driving,
                                         HybridMode mode) const {
  LeafMap lv = store_.leaves();
  NodePtr m_self =
      encode_motion_node(lv, ad::constant(build_hybrid_rep(self, mode).to_input()));
  NodePtr vol = encode_appearance_node(lv, ad::constant(self.pixels));
  std::vector<Tensor> out(driving.size());
  parallel_for(static_cast<int>(driving.size()), [&](int i) {
    LeafMap lv_i = store_.leaves();
    NodePtr m_dri = encode_motion_node(
        lv_i, ad::constant(build_hybrid_rep(driving[static_cast<size_t>(i)], mode).to_input()));
    NodePtr flow = estimate_flow_node(lv_i, ad::constant(m_self->value), m_dri);
    NodePtr warped = ad::warp_trilinear(ad::constant(vol->value), flow);
    out[static_cast<size_t>(i)] = decode_face_node(lv_i, warped)->value;
  });
  return out;
}

std::vector<Tensor> Stage1Model::animate(const world::RenderedFrame& self,
                                         const Tensor& codes, HybridMode mode) const {
  if (codes.ndim() != 2 || codes.dim(1) != cfg_.motion_dim)
    throw ShapeError("animate: codes must be [N," + std::to_string(cfg_.motion_dim) + "]");
  Tensor m_self = encode_motion(build_hybrid_rep(self, mode));
  Tensor vol = encode_appearance(self.pixels);
  int n = codes.dim(0);
  std::vector<Tensor> out(static_cast<size_t>(n));
  parallel_for(n, [&](int i) {
    LeafMap lv = store_.leaves();
    Tensor m_dri({cfg_.motion_dim});
    for (int j = 0; j < cfg_.motion_dim; ++j) m_dri[j] = codes.at2(i, j);
    NodePtr flow = estimate_flow_node(lv, ad::constant(m_self), ad::constant(m_dri));
    NodePtr warped = ad::warp_trilinear(ad::constant(vol), flow);
    out[static_cast<size_t>(i)] = decode_face_node(lv, warped)->value;
  });
  return out;
}

Tensor Stage1Model::encode_clip_codes(const world::Clip& clip, HybridMode mode) const {
  int n = clip.script.n_frames;
  Tensor codes({n, cfg_.motion_dim});
  parallel_for(n, [&](int t) {
    world::RenderedFrame f = world::render_face(clip.params[static_cast<size_t>(t)],
                                                cfg_.image_size);
    Tensor m = encode_motion(build_hybrid_rep(f, mode));
    for (int j = 0; j < cfg_.motion_dim; ++j) codes.at2(t, j) = m[j];
  });
  return codes;
}

NodePtr stage1_loss_node(NodePtr pred, NodePtr target) {
  check_same_shape(pred->value, target->value, "stage1_loss");
  int c = pred->value.dim(0), h = pred->value.dim(1), w = pred->value.dim(2);
  NodePtr l1 = ad::l1_loss(pred, target);
  auto grads = [&](NodePtr x) {
    NodePtr gx = ad::reshape(ad::diff_x(x), {1, c * h * (w - 1)});
    NodePtr gy = ad::reshape(ad::diff_y(x), {1, c * (h - 1) * w});
    return ad::concat_cols(gx, gy);
  };
  NodePtr grad_term = ad::l1_loss(grads(pred), grads(target));
  return ad::add(l1, ad::scale(grad_term, 0.5));
}

double stage1_loss(const Tensor& pred, const Tensor& target) {
  return stage1_loss_node(ad::constant(pred), ad::constant(target))->value[0];
}

TrainTrace train_stage1(Stage1Model& model, const world::Dataset& dataset,
                        const Stage1TrainConfig& cfg, nn::AdamW* optimizer,
                        const std::function<void(int, const TrainTrace&)>& on_epoch) {
  if (dataset.clips.empty()) throw ParamError("train_stage1: empty dataset");
  {
    std::set<int> ids;
    for (const auto& c : dataset.clips) ids.insert(c.identity_index);
    if (ids.size() < 2) throw ParamError("train_stage1: dataset needs >= 2 identities");
  }
  nn::AdamWConfig ocfg;
  ocfg.lr = cfg.lr;
  ocfg.weight_decay = cfg.weight_decay;
  std::optional<nn::AdamW> local_opt;
  if (!optimizer) {
    local_opt.emplace(model.store(), ocfg);
    optimizer = &*local_opt;
  }

  TrainTrace trace;
  for (int epoch = cfg.start_epoch; epoch < cfg.epochs; ++epoch) {
    Rng rng(derive_seed(cfg.seed, 0x517a9e00ULL + static_cast<uint64_t>(epoch)));
    double epoch_loss = 0;
    for (int step = 0; step < cfg.steps_per_epoch; ++step) {
      struct Sample {
        int clip, src, dri;
      };
      std::vector<Sample> batch(static_cast<size_t>(cfg.batch));
      for (auto& s : batch) {
        s.clip = rng.uniform_int(static_cast<int>(dataset.clips.size()));
        int n = dataset.clips[static_cast<size_t>(s.clip)].script.n_frames;
        s.src = rng.uniform_int(n);
        s.dri = rng.uniform_int(n);
      }
      std::vector<nn::LeafMap> leaves(batch.size());
      std::vector<double> losses(batch.size());
      parallel_for(static_cast<int>(batch.size()), [&](int i) {
        const Sample& s = batch[static_cast<size_t>(i)];
        const world::Clip& clip = dataset.clips[static_cast<size_t>(s.clip)];
        world::RenderedFrame src =
            world::render_face(clip.params[static_cast<size_t>(s.src)], model.config().image_size);
        world::RenderedFrame dri =
            world::render_face(clip.params[static_cast<size_t>(s.dri)], model.config().image_size);
        nn::LeafMap lv = model.store().leaves();
        auto [m_src, b_src] = model.encode_motion_bands_node(
            lv, ad::constant(build_hybrid_rep(src, cfg.mode).to_input()));
        auto [m_dri, b_dri] = model.encode_motion_bands_node(
            lv, ad::constant(build_hybrid_rep(dri, cfg.mode).to_input()));
        NodePtr vol = model.encode_appearance_node(lv, ad::constant(src.pixels));
        NodePtr flow = model.estimate_flow_node(lv, m_src, m_dri);
        NodePtr pred = model.decode_face_node(lv, ad::warp_trilinear(vol, flow));
        NodePtr target = ad::constant(dri.pixels);
        NodePtr loss = stage1_loss_node(pred, target);
        // extra weight on pixels that move between the two frames; articulated
        // regions are small, so plain L1 underweights them badly
        Tensor wmask(dri.pixels.shape());
        double wsum = 0;
        for (long long px = 0; px < wmask.numel(); ++px) {
          wmask[px] = std::fabs(dri.pixels[px] - src.pixels[px]);
          wsum += wmask[px];
        }
        if (wsum > 0) {
          NodePtr werr =
              ad::mean_all(ad::mul(ad::abs_(ad::sub(pred, target)), ad::constant(wmask)));
          loss = ad::add(loss, ad::scale(werr, 2.0 * wmask.numel() / wsum));
        }
        // landmark-driven lip emphasis: extra L1 on the union of both frames'
        // mouth boxes. The mouth is a handful of pixels, so without this the
        // codes capture it too weakly for downstream audio-driven control.
        {
          int S = model.config().image_size;
          Tensor mmask(dri.pixels.shape());
          double msum = 0;
          auto mark = [&](const world::RenderedFrame& f) {
            double x0 = 1, x1 = 0, y0 = 1, y1 = 0;
            for (int l = 24; l <= 27; ++l) {
              x0 = std::min(x0, f.landmarks[static_cast<size_t>(l)][0]);
              x1 = std::max(x1, f.landmarks[static_cast<size_t>(l)][0]);
              y0 = std::min(y0, f.landmarks[static_cast<size_t>(l)][1]);
              y1 = std::max(y1, f.landmarks[static_cast<size_t>(l)][1]);
            }
            int px0 = std::max(0, static_cast<int>(x0 * S) - 3);
            int px1 = std::min(S - 1, static_cast<int>(x1 * S) + 3);
            int py0 = std::max(0, static_cast<int>(y0 * S) - 3);
            int py1 = std::min(S - 1, static_cast<int>(y1 * S) + 3);
            for (int ch = 0; ch < 3; ++ch)
              for (int y = py0; y <= py1; ++y)
                for (int x = px0; x <= px1; ++x) {
                  long long idx = (static_cast<long long>(ch) * S + y) * S + x;
                  if (mmask[idx] == 0) {
                    mmask[idx] = 1;
                    msum += 1;
                  }
                }
          };
          mark(src);
          mark(dri);
          if (msum > 0) {
            NodePtr merr = ad::mean_all(
                ad::mul(ad::abs_(ad::sub(pred, target)), ad::constant(mmask)));
            loss = ad::add(loss, ad::scale(merr, 4.0 * mmask.numel() / msum));
          }
        }
        // anchor the flow at landmark voxels to the observed landmark motion.
        // The warp samples source voxels at z + flow(z), so the flow at a
        // driving landmark should point back to the source landmark. This
        // shortcuts the weak through-warp gradient: the code difference must
        // linearly explain every landmark displacement, articulation included.
        {
          int vg = model.config().vol_hw;
          int vd = model.config().vol_depth;
          Tensor ftarget({vd, vg, vg, 3}), fmask({vd, vg, vg, 3});
          auto clampd = [](double v, double lim) {
            return v < -lim ? -lim : (v > lim ? lim : v);
          };
          for (size_t l = 0; l < src.landmarks.size(); ++l) {
            double dy = clampd((src.landmarks[l][1] - dri.landmarks[l][1]) * (vg - 1),
                               0.9 * model.config().flow_clamp);
            double dx = clampd((src.landmarks[l][0] - dri.landmarks[l][0]) * (vg - 1),
                               0.9 * model.config().flow_clamp);
            int vy = std::clamp(
                static_cast<int>(std::lround(dri.landmarks[l][1] * (vg - 1))), 0, vg - 1);
            int vx = std::clamp(
                static_cast<int>(std::lround(dri.landmarks[l][0] * (vg - 1))), 0, vg - 1);
            for (int zd = 0; zd < vd; ++zd) {
              long long base = ((static_cast<long long>(zd) * vg + vy) * vg + vx) * 3;
              ftarget[base + 1] = dy;
              ftarget[base + 2] = dx;
              fmask[base + 1] = 1;
              fmask[base + 2] = 1;
            }
          }
          double fsum = 0;
          for (long long px = 0; px < fmask.numel(); ++px) fsum += fmask[px];
          if (fsum > 0) {
            NodePtr fdiff =
                ad::mul(ad::sub(flow, ad::constant(ftarget)), ad::constant(fmask));
            NodePtr ferr = ad::mse_loss(fdiff, ad::constant(Tensor(fdiff->value.shape())));
            loss = ad::add(loss, ad::scale(ferr, 2.5 * fmask.numel() / fsum));
          }
        }
        // predict each landmark's displacement from the code difference.
        // Mouth points get extra weight: their motion is a few pixels, so an
        // unweighted fit spends the code's capacity on head pose alone.
        {
          int nl = static_cast<int>(src.landmarks.size());
          Tensor ltarget({1, 2 * nl}), lweight({1, 2 * nl});
          for (int l = 0; l < nl; ++l) {
            double w = (l >= 24 && l <= 27) ? 3.0 : 1.0;
            ltarget[2 * l] =
                10.0 * (dri.landmarks[static_cast<size_t>(l)][0] -
                        src.landmarks[static_cast<size_t>(l)][0]);
            ltarget[2 * l + 1] =
                10.0 * (dri.landmarks[static_cast<size_t>(l)][1] -
                        src.landmarks[static_cast<size_t>(l)][1]);
            lweight[2 * l] = w;
            lweight[2 * l + 1] = w;
          }
          NodePtr lpred =
              nn::mlp_forward(lv, "enc.lmk", ad::sub(m_dri, m_src), 1);
          NodePtr ldiff = ad::mul(ad::sub(lpred, ad::constant(ltarget)),
                                  ad::constant(lweight));
          NodePtr lerr = ad::mse_loss(ldiff, ad::constant(Tensor(ldiff->value.shape())));
          loss = ad::add(loss, lerr);
        }
        // reconstruct the within-pair band difference from the code difference.
        // Both frames share a clip, so identity cancels in the difference and
        // the target variance is pure motion; the code is pushed to span the
        // motion subspace of the band features without picking up appearance.
        // Normalized by the delta's own power so the pressure stays constant
        // while the features themselves grow during training. The target is
        // detached: letting gradient reach it rewards shrinking the deltas,
        // which collapses the features toward motion invariance.
        NodePtr dband = ad::sub(b_dri, b_src);
        double dpow = 0;
        for (long long px = 0; px < dband->value.numel(); ++px)
          dpow += dband->value[px] * dband->value[px];
        dpow = dpow / static_cast<double>(dband->value.numel()) + 1e-3;
        NodePtr aux = ad::mse_loss(
            nn::mlp_forward(lv, "enc.aux", ad::sub(m_dri, m_src), 1),
            ad::constant(dband->value));
        loss = ad::add(loss, ad::scale(aux, 1.0 / dpow));
        ad::backward(loss);
        losses[static_cast<size_t>(i)] = loss->value[0];
        leaves[static_cast<size_t>(i)] = std::move(lv);
      });
      double step_loss = 0;
      model.store().zero_grads();
      for (size_t i = 0; i < batch.size(); ++i) {
        if (!std::isfinite(losses[i]))
          throw NumericError("train_stage1: non-finite loss at epoch " +
                             std::to_string(epoch) + " step " + std::to_string(step) +
                             " sample " + std::to_string(i));
        step_loss += losses[i];
        model.store().accumulate(leaves[i]);
      }
      optimizer->step(static_cast<double>(cfg.batch));
      epoch_loss += step_loss / cfg.batch;
    }
    trace.epoch_loss.push_back(epoch_loss / cfg.steps_per_epoch);
    if (on_epoch) on_epoch(epoch, trace);
  }
  return trace;
}

}  // namespace dyadgen::motion
