#pragma once

#include <string>
#include <vector>

#include "lpgan/layers.hpp"

namespace lpgan::disc {

using nn::Ctx;
using nn::Tape;
using nn::Tensor;
using nn::Var;

// Geometry shared by the frame and video encoder stacks. Spatial extent
// halves per block until 4x4; channels start at base_channels after the
// 7-channel input and double per block.
struct DiscriminatorConfig {
  int frame_h = 64, frame_w = 64;
  int base_channels = 64;
  int feature_dim = 512;  // width of the encoded frame/video vectors
  int text_dim = 256;     // width of the sentence code the heads consume

  static DiscriminatorConfig dflt();
  static DiscriminatorConfig toy();  // 32x32 frames, base 32
  void validate() const;
  int block_count() const;      // halvings from frame_h down to 4
  int region_channels() const;  // channel count of the final 4x4 map
};

// Resolution-halving block: a linear skip (1x1 conv then average pool)
// summed with a nonlinear path (3x3 conv, leaky-relu, average pool,
// leaky-relu, 1x1 conv). No normalization layers.
struct DownBlock2d {
  nn::Conv2d skip, conv1, conv2;
  float slope = 0.2f;

  DownBlock2d() = default;
  DownBlock2d(nn::ParameterStore& ps, const std::string& name, int in_c,
              int out_c, Rng& rng, bool spectral = true);
  // [N,C,H,W] -> [N,C_out,H/2,W/2], even extents required
  Var forward(const Ctx& ctx, Var x) const;
};

// Same shape of block over clips; convolutions are 3D (1x1x1 skips, 3x3x3
// long path) and pooling stays spatial so short clips keep their length.
struct DownBlock3d {
  nn::Conv3d skip, conv1, conv2;
  float slope = 0.2f;

  DownBlock3d() = default;
  DownBlock3d(nn::ParameterStore& ps, const std::string& name, int in_c,
              int out_c, Rng& rng, bool spectral = true);
  // [B,C,T,H,W] -> [B,C_out,T,H/2,W/2]
  Var forward(const Ctx& ctx, Var x) const;
};

// Sentence-conditioned linear score over an encoded vector:
// score = w . (sigmoid(We e) * v). Both maps are bias-free.
struct CondHead {
  nn::Dense gate;     // text_dim -> feature_dim
  nn::Dense project;  // feature_dim -> 1

  CondHead() = default;
  CondHead(nn::ParameterStore& ps, const std::string& name, int text_dim,
           int feature_dim, Rng& rng, bool spectral = true);
  // v [N,feature_dim], es [N,text_dim] -> [N,1]
  Var score(const Ctx& ctx, Var v, Var es) const;
};

// Three-head critic over (video, sentence) pairs. Input frames are enriched
// with the batch-average frame and an edge-magnitude channel, then encoded
// twice: per frame by 2D blocks (global vector + 4x4 region map) and per
// clip by 3D blocks. Region scores never see the sentence.
class Discriminator {
 public:
  Discriminator(nn::ParameterStore& ps, Rng& rng, DiscriminatorConfig cfg,
                bool spectral = true);

  // [B,3,T,H,W] -> [B,7,T,H,W]: channels 3..5 hold the average over all
  // B*T frames (identical for every sample and frame), channel 6 the
  // per-frame edge magnitude (>= 0). Parameter-free.
  static Var enrich(Var videos);

  struct Frame2d {
    Var vecs;     // [B*T, feature_dim], row b*T+t is frame t of video b
    Var regions;  // [B*T, C_r, 4, 4]
  };
  // enriched [B,7,T,H,W]; frames are processed independently.
  Frame2d encode_frames(const Ctx& ctx, Var enriched) const;
  // enriched [B,7,T,H,W] -> [B, feature_dim]; needs T >= 2.
  Var encode_video(const Ctx& ctx, Var enriched) const;

  // 1x1 region conv then mean over all regions and frames, [B,1] per clip.
  Var region_mean(const Ctx& ctx, Var regions, int B, int T) const;

  struct Scores {
    Var d3d;  // [B,1] clip-level sentence relevance
    Var d2d;  // [B,1] frame-level sentence relevance, averaged over frames
    Var dr;   // [B,1] region realism, sentence-independent
    Var enriched;
    Frame2d frames;
  };
  // videos [B,T,3,H,W] as the generator emits them, es [B,text_dim].
  Scores score(const Ctx& ctx, Var videos, Var es) const;

  const DiscriminatorConfig& config() const { return cfg_; }

  std::vector<DownBlock2d> fblocks;
  nn::Dense frame_fc;
  nn::Conv2d region;  // 1x1, C_r -> 1
  CondHead frame_head;
  std::vector<DownBlock3d> vblocks;
  nn::Dense video_fc;
  CondHead video_head;

 private:
  DiscriminatorConfig cfg_;
};

}  // namespace lpgan::disc
