#pragma once

#include <memory>
#include <string>
#include <vector>

#include "lpgan/autodiff.hpp"

namespace lpgan::nn {

// Per-forward switches. Training forwards advance spectral power iteration
// and use fresh batch statistics; frozen_stats replays the statistics
// captured on the previous batch pass (opt-in inference mode, not default).
struct Ctx {
  bool training = true;
  int sn_iters = 1;
  bool frozen_stats = false;

  int iters() const { return training ? sn_iters : 0; }
};

// Owns parameters with stable addresses. Registration order defines the
// optimizer slot order and the checkpoint entry order, so construction order
// is part of the persisted format.
class ParameterStore {
 public:
  Parameter& add(const std::string& name, std::vector<int> shape);
  const std::vector<std::unique_ptr<Parameter>>& all() const { return params_; }
  Parameter* find(const std::string& name);

 private:
  std::vector<std::unique_ptr<Parameter>> params_;
};

// Marks p spectral and seeds persistent power-iteration state: u random
// unit-norm over the first extent, then one iteration to make v (and the
// implied sigma > 0) consistent before any zero-iteration use.
void attach_spectral(Parameter& p, Rng& rng);

struct Dense {
  Parameter* W = nullptr;  // [in, out]
  Parameter* b = nullptr;  // optional
  Dense() = default;
  Dense(ParameterStore& ps, const std::string& name, int in, int out, Rng& rng,
        bool bias = true, bool spectral = true);
  Var forward(const Ctx& ctx, Var x) const;
};

struct Conv2d {
  Parameter* W = nullptr;  // [out_c, in_c, k, k]
  Parameter* b = nullptr;
  int stride = 1, pad = 0;
  Conv2d() = default;
  Conv2d(ParameterStore& ps, const std::string& name, int in_c, int out_c,
         int k, int stride, int pad, Rng& rng, bool bias = true,
         bool spectral = true);
  Var forward(const Ctx& ctx, Var x) const;
};

struct Conv3d {
  Parameter* W = nullptr;  // [out_c, in_c, kt, kh, kw]
  Parameter* b = nullptr;
  std::vector<int> stride{1, 1, 1}, pad{0, 0, 0};
  Conv3d() = default;
  Conv3d(ParameterStore& ps, const std::string& name, int in_c, int out_c,
         std::vector<int> kernel, std::vector<int> stride, std::vector<int> pad,
         Rng& rng, bool bias = true, bool spectral = true);
  Var forward(const Ctx& ctx, Var x) const;
};

// Plain batch normalization (no affine) with frozen-statistics capture.
// Rank 2 normalizes per column, higher ranks per channel.
struct BatchNorm {
  float eps = 1e-5f;
  mutable Tensor last_mean, last_istd;
  Var forward(const Ctx& ctx, Var x) const;
};

// Condition-driven batch normalization. gamma/beta are single bias-free
// dense layers over the condition (a bias would be erased by the mean shift
// anyway); their outputs are mean-shifted across the batch to 1 and 0 so the
// conditional affine cannot drift the batch statistics.
// Works on [N,F] (per feature) and [N,C,...] (per channel, stats over batch
// and trailing dims). cond must have one row per leading-extent entry of x;
// callers repeat per-video conditions to per-frame rows themselves.
struct CondBatchNorm {
  Dense gamma_fc, beta_fc;
  float eps = 1e-5f;
  // Captured on every fresh-statistics pass, replayed by frozen_stats.
  mutable Tensor last_mean, last_istd;

  CondBatchNorm() = default;
  CondBatchNorm(ParameterStore& ps, const std::string& name, int cond_dim,
                int channels, Rng& rng, bool spectral = true, float eps = 1e-5f);
  Var forward(const Ctx& ctx, Var x, Var cond) const;
};

}  // namespace lpgan::nn
