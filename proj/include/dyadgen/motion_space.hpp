#pragma once

#include <cstdint>
#include <vector>

#include "dyadgen/nn.hpp"
#include "dyadgen/tensor.hpp"
#include "dyadgen/world.hpp"

namespace dyadgen::motion {

enum class HybridMode { kHybrid, kIntactImage, kLandmarksMap };

HybridMode hybrid_mode_from_string(const std::string& s);
std::string to_string(HybridMode m);

struct HybridRep {
  Tensor masked_pixels;  // [3, H, W]
  Tensor contour;        // [H, W], binary
  bool fallback_boxes = false;  // degenerate box replaced by 8x8 fallback

  Tensor to_input() const;  // [4, H, W]
};

HybridRep build_hybrid_rep(const world::RenderedFrame& frame, HybridMode mode,
                           int dilate_px = 4);

struct Stage1Config {
  int image_size = 64;
  int motion_dim = 32;
  int vol_channels = 16;
  int vol_depth = 4;
  int vol_hw = 16;
  double flow_clamp = 2.0;
};

// Stage 1: motion encoder, flow head, appearance encoder, face decoder.
// The flow head's last layer and the decoder's output conv start at zero, so
// the untrained pipeline is driving-independent.
class Stage1Model {
 public:
  Stage1Model(Stage1Config cfg, uint64_t init_seed);

  const Stage1Config& config() const { return cfg_; }
  nn::ParamStore& store() { return store_; }
  const nn::ParamStore& store() const { return store_; }

  // graph builders (differentiable)
  nn::NodePtr encode_motion_node(const nn::LeafMap& lv, nn::NodePtr rep) const;   // [4,H,W] -> [1,D_m]
  // code plus the pooled row-band features it is projected from
  std::pair<nn::NodePtr, nn::NodePtr> encode_motion_bands_node(const nn::LeafMap& lv,
                                                               nn::NodePtr rep) const;
  nn::NodePtr estimate_flow_node(const nn::LeafMap& lv, nn::NodePtr m_src,
                                 nn::NodePtr m_dri) const;                         // -> [D,H',W',3]
  nn::NodePtr encode_appearance_node(const nn::LeafMap& lv, nn::NodePtr img) const;  // [3,H,W] -> [C,D,H',W']
  nn::NodePtr decode_face_node(const nn::LeafMap& lv, nn::NodePtr vol) const;      // -> [3,H,W]

  // plain evaluation
  Tensor encode_motion(const HybridRep& rep) const;          // [D_m]
  Tensor estimate_flow(const Tensor& m_src, const Tensor& m_dri) const;
  Tensor encode_appearance(const Tensor& pixels) const;
  Tensor decode_face(const Tensor& vol) const;

  // full imitation pipeline; appearance of the source is encoded once
  std::vector<Tensor> imitate(const world::RenderedFrame& self,
                              const std::vector<world::RenderedFrame>& driving,
                              HybridMode mode) const;
  // animate a portrait directly from motion codes (stage-2 output path)
  std::vector<Tensor> animate(const world::RenderedFrame& self, const Tensor& codes,
                              HybridMode mode) const;  // codes [N, D_m]

  // motion codes for every frame of a clip, [N, D_m]; parallelized
  Tensor encode_clip_codes(const world::Clip& clip, HybridMode mode) const;

 private:
  Stage1Config cfg_;
  nn::ParamStore store_;
};

// L = L1(pred, target) + 0.5 * L1(grad(pred), grad(target)), forward differences
nn::NodePtr stage1_loss_node(nn::NodePtr pred, nn::NodePtr target);
double stage1_loss(const Tensor& pred, const Tensor& target);

struct Stage1TrainConfig {
  int epochs = 8;
  int steps_per_epoch = 100;
  int batch = 16;
  double lr = 1e-4;
  double weight_decay = 1e-2;
  uint64_t seed = 0;
  HybridMode mode = HybridMode::kHybrid;
  int start_epoch = 0;  // resume support
};

struct TrainTrace {
  std::vector<double> epoch_loss;
};

// Trains in place; per-epoch callback (may be null) receives the epoch index
// just finished, for checkpointing.
TrainTrace train_stage1(Stage1Model& model, const world::Dataset& dataset,
                        const Stage1TrainConfig& cfg, nn::AdamW* optimizer = nullptr,
                        const std::function<void(int, const TrainTrace&)>& on_epoch = nullptr);

}  // namespace dyadgen::motion
