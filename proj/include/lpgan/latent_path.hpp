#pragma once

#include "lpgan/layers.hpp"

namespace lpgan::path {

using nn::Ctx;
using nn::Tape;
using nn::Tensor;
using nn::Var;

// Gaussian endpoint parameters regressed from a sentence code, one row per
// video. Sigmas pass through a sigmoid, so every entry is in (0,1).
struct Endpoints {
  Var mu_s, mu_e, sigma_s, sigma_e;  // each [B, code]
};

struct PathOut {
  int frame_count = 0;
  Endpoints dist;
  Var z_start, z_end;  // [B, code]
  // Row b*T + (i-1) is frame i of video b throughout.
  Var raw;          // [B*T, code]
  Var zcat;         // [B*T, code+noise], raw with the concat noise appended
  Var conditioned;  // [B*T, code+noise], after the conditional norm
  // One condition row per video, [B, code+noise]. Downstream conditional
  // norms reuse these rows so the whole decoder sees one condition per video.
  Var cond;
};

// Latent sequence builder: regress endpoint distributions from the sentence
// code, draw the two endpoints, interpolate between them, append noise, and
// batch-normalize conditioned on [code; noise].
class LatentPath {
 public:
  LatentPath(nn::ParameterStore& ps, Rng& init_rng, int code = 256,
             int noise_dim = 32, int hidden = 512);

  // es [B, code], fnoise [B, noise_dim].
  Endpoints predict(const Ctx& ctx, Var es, Var fnoise) const;

  // mu + sigma * eps; gradients reach mu and sigma.
  static Var sample(Var mu, Var sigma, Var eps);

  // Draw order per forward (all rows filled row-major): regressor noise
  // [B,noise], start eps [B,code], end eps [B,code], concat noise ([B,noise]
  // or [B*T,noise] in per-frame mode), condition noise [B,noise]. Fixed so
  // that a stored RNG state replays the path bit-exactly.
  PathOut forward(const Ctx& ctx, Tape& t, Var es, int T, Rng& rng) const;

  int code() const { return code_; }
  int noise_dim() const { return noise_dim_; }
  int cond_dim() const { return code_ + noise_dim_; }

  // Interpolation coefficients (T-i)/T and i/T reach the end exactly but
  // not the start; this switches to (T-i)/(T-1), which reaches both.
  bool exact_endpoints = false;
  // Redraw the appended noise for every frame instead of once per video.
  bool per_frame_concat_noise = false;

  nn::Dense f1, f2, f3;
  nn::CondBatchNorm cbn;
  float slope = 0.2f;

 private:
  int code_, noise_dim_;
};

}  // namespace lpgan::path
