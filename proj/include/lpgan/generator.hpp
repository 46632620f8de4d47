#pragma once

#include <string>
#include <vector>

#include "lpgan/latent_path.hpp"

namespace lpgan::gen {

using nn::Ctx;
using nn::Tape;
using nn::Tensor;
using nn::Var;

// Decoder geometry. Output resolution is seed_h * 2^block_count square;
// channel_schedule lists each block's output channels.
struct GeneratorConfig {
  int seed_h = 4, seed_w = 4;
  int seed_channels = 2048;
  int block_count = 4;
  std::vector<int> channel_schedule;  // halving by default
  int noise_dim = 32;
  int latent_dim = 288;
  // 3 couples neighboring frames through the final 3D convolution; 1 keeps
  // frames independent at that stage.
  int rgb_kernel = 3;

  static GeneratorConfig dflt();  // 2048 seed channels, 4 blocks, 64x64
  static GeneratorConfig toy();   // 256 seed channels, 3 blocks, 32x32
  void validate() const;
  int out_h() const { return seed_h << block_count; }
  int out_w() const { return seed_w << block_count; }
};

// Resolution-doubling block: an always-linear skip (upsample then 1x1 conv)
// summed with a conditioned path (norm, leaky-relu, upsample, 3x3 conv,
// norm, leaky-relu, 3x3 conv).
struct UpBlock {
  nn::Conv2d skip, conv1, conv2;
  nn::CondBatchNorm cbn1, cbn2;
  float slope = 0.2f;

  UpBlock(nn::ParameterStore& ps, const std::string& name, int in_c, int out_c,
          int cond_dim, Rng& rng);
  // x [N,C_in,H,W], cond [N,cond_dim] -> [N,C_out,2H,2W]
  Var forward(const Ctx& ctx, Var x, Var cond) const;
};

// Latent rows to video clips. Frames are decoded independently by shared 2D
// blocks, then restacked per video for the final 3D convolution and tanh.
class Generator {
 public:
  Generator(nn::ParameterStore& ps, Rng& rng, GeneratorConfig cfg,
            int cond_dim);

  // zbar [B*T, latent_dim] -> [B*T, c1, seed_h, seed_w]
  Var to_seed(const Ctx& ctx, Var zbar) const;
  // zbar and cond rows are video-major; result [B, T, 3, H, W] in [-1,1].
  Var decode(const Ctx& ctx, Var zbar, Var cond_rows, int B, int T) const;

  struct Out {
    path::PathOut path;
    Var video;  // [B, T, 3, H, W]
  };
  // Full pipeline from sentence codes: build the latent path, then decode
  // it with the path's per-video condition driving every conditional norm.
  Out generate(const Ctx& ctx, Tape& t, const path::LatentPath& lp, Var es,
               int T, Rng& rng) const;

  const GeneratorConfig& config() const { return cfg_; }
  int cond_dim() const { return cond_dim_; }

  nn::Dense seed_fc;
  std::vector<UpBlock> blocks;
  nn::Conv3d rgb;

 private:
  GeneratorConfig cfg_;
  int cond_dim_;
};

}  // namespace lpgan::gen
