#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "lpgan/discriminator.hpp"
#include "lpgan/generator.hpp"
#include "lpgan/serialize.hpp"
#include "lpgan/text_encoder.hpp"

namespace lpgan::train {

using nn::Ctx;
using nn::Tape;
using nn::Tensor;
using nn::Var;

struct TrainConfig {
  float lr = 1e-4f;
  float beta1 = 0.0f;
  float beta2 = 0.9f;
  float adam_eps = 1e-8f;
  int batch_size = 8;
  int64_t total_steps = 2000;
  int frame_min = 5, frame_max = 9;  // per-step T drawn uniformly, inclusive
  int sn_iters = 1;
  uint64_t seed = 1;
  int64_t checkpoint_interval = 0;  // steps between automatic saves; 0 = off

  static TrainConfig dflt() { return {}; }
  // Fixed-length clips instead of a sampled range.
  static TrainConfig robot();
  void validate() const;
  nlohmann::json echo() const;
};

// Plain Adam with bias correction. Moment tensors live here and are part of
// the checkpoint; `t` counts completed steps.
class Adam {
 public:
  Adam(std::vector<nn::Parameter*> params, float lr, float beta1, float beta2,
       float eps);

  void zero_grad();
  // Consumes the gradients accumulated in each parameter.
  void step();

  const std::vector<nn::Parameter*>& params() const { return params_; }
  Tensor& m(size_t i) { return m_[i]; }
  Tensor& v(size_t i) { return v_[i]; }
  const Tensor& m(size_t i) const { return m_[i]; }
  const Tensor& v(size_t i) const { return v_[i]; }
  int64_t t() const { return t_; }
  void set_t(int64_t t) { t_ = t; }

 private:
  std::vector<nn::Parameter*> params_;
  std::vector<Tensor> m_, v_;
  float lr_, b1_, b2_, eps_;
  int64_t t_ = 0;
};

// Hinge objectives over per-sample head scores, each argument [B,1].
// Generator: mean of -(d3d + d2d + dr).
Var generator_loss(Var d3d_fake, Var d2d_fake, Var dr_fake);
// Discriminator: mean over samples of sum over heads of
// max(0, 1 - real) + max(0, 1 + fake). Nonnegative; zero exactly when every
// real score is >= 1 and every fake score is <= -1.
Var discriminator_loss(Var d3d_real, Var d2d_real, Var dr_real, Var d3d_fake,
                       Var d2d_fake, Var dr_fake);

struct Batch {
  Tensor clips;  // [B,T,3,H,W], values in [-1,1]
  std::vector<text::Sentence> sentences;
};
// Delivers one batch at the requested frame count, drawing randomness only
// from the supplied generator.
using BatchFn = std::function<Batch(int frames, Rng& rng)>;

struct StepRecord {
  int64_t step = 0;
  float l_d = 0, l_g = 0;
  float d3d_real = 0, d3d_fake = 0;
  float d2d_real = 0, d2d_fake = 0;
  float dr_real = 0, dr_fake = 0;
  int frames = 0;
  double wall_ms = 0;

  nlohmann::json to_json() const;
};

// Owns the full model (text head, latent path, generator, discriminator) and
// both optimizers, and runs alternating one-update-each training. All
// randomness flows through the internal Rng so checkpoints replay exactly.
class Trainer {
 public:
  Trainer(TrainConfig cfg, gen::GeneratorConfig gcfg,
          disc::DiscriminatorConfig dcfg,
          const text::EmbeddingProvider* provider = nullptr);

  // D update on the batch (fakes detached), then G update on fresh fakes.
  StepRecord train_step(const BatchFn& next_batch);
  // Runs steps until cfg.total_steps, appending JSON lines to the metrics
  // log when a path was set.
  void run(const BatchFn& next_batch);

  // Split out for tests; each builds its own tape and applies one optimizer
  // step. d_substep fills the real/fake score means, g_substep the G loss.
  void d_substep(const Batch& batch, int frames, StepRecord& rec);
  void g_substep(const Batch& batch, int frames, StepRecord& rec);

  void save_checkpoint(const std::string& dir) const;
  void load_checkpoint(const std::string& dir);

  void set_metrics_log(const std::string& path);
  void set_checkpoint_dir(const std::string& dir) { ckpt_dir_ = dir; }

  int64_t step() const { return step_; }
  Rng& rng() { return rng_; }
  const TrainConfig& config() const { return cfg_; }
  nn::ParameterStore& params() { return ps_; }
  const text::TextHead& text_head() const { return text_; }
  const path::LatentPath& latent_path() const { return path_; }
  const gen::Generator& generator() const { return gen_; }
  const disc::Discriminator& discriminator() const { return disc_; }
  const text::EmbeddingProvider& provider() const { return *provider_; }
  Adam& opt_d() { return opt_d_; }
  Adam& opt_g() { return opt_g_; }

  // Generates a batch of clips for the given sentences without touching
  // optimizer or power-iteration state.
  Tensor sample_videos(const std::vector<text::Sentence>& sentences, int frames,
                       Rng& rng) const;

 private:
  static std::vector<nn::Parameter*> select(
      const nn::ParameterStore& ps, const std::vector<std::string>& prefixes);
  static TrainConfig checked(TrainConfig cfg, const gen::GeneratorConfig& g,
                             const disc::DiscriminatorConfig& d);
  void append_log(const StepRecord& rec) const;

  // Member order is construction order: the provider fixes the text head's
  // input width, rng_ seeds every module, and the optimizers partition the
  // store once all modules have registered their parameters.
  TrainConfig cfg_;
  nn::ParameterStore ps_;
  std::unique_ptr<text::EmbeddingProvider> owned_provider_;
  const text::EmbeddingProvider* provider_;
  Rng rng_;
  text::TextHead text_;
  path::LatentPath path_;
  gen::Generator gen_;
  disc::Discriminator disc_;
  Adam opt_d_, opt_g_;
  int64_t step_ = 0;
  std::string log_path_, ckpt_dir_;
};

}  // namespace lpgan::train
