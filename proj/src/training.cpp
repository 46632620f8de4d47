#include "lpgan/training.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

namespace lpgan::train {

using nlohmann::json;

TrainConfig TrainConfig::robot() {
  TrainConfig c;
  c.frame_min = c.frame_max = 16;
  return c;
}

void TrainConfig::validate() const {
  if (!(lr > 0)) throw ConfigError("learning rate must be positive");
  if (!(adam_eps > 0)) throw ConfigError("adam eps must be positive");
  if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1)
    throw ConfigError("adam betas must lie in [0,1)");
  if (batch_size < 2)
    throw ConfigError("batch size must be at least 2 (batch statistics)");
  if (total_steps < 0) throw ConfigError("total steps must be nonnegative");
  if (frame_min < 2 || frame_max > 16 || frame_min > frame_max)
    throw ConfigError("frame count range must satisfy 2 <= min <= max <= 16");
  if (sn_iters < 0) throw ConfigError("power iteration count must be >= 0");
  if (checkpoint_interval < 0)
    throw ConfigError("checkpoint interval must be nonnegative");
}

json TrainConfig::echo() const {
  json j;
  j["lr"] = lr;
  j["beta1"] = beta1;
  j["beta2"] = beta2;
  j["adam_eps"] = adam_eps;
  j["batch_size"] = batch_size;
  j["total_steps"] = total_steps;
  j["frame_min"] = frame_min;
  j["frame_max"] = frame_max;
  j["sn_iters"] = sn_iters;
  j["seed"] = seed;
  j["checkpoint_interval"] = checkpoint_interval;
  return j;
}

Adam::Adam(std::vector<nn::Parameter*> params, float lr, float beta1,
           float beta2, float eps)
    : params_(std::move(params)), lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const nn::Parameter* p : params_) {
    m_.emplace_back(p->value.shape);
    v_.emplace_back(p->value.shape);
  }
}

void Adam::zero_grad() {
  for (nn::Parameter* p : params_)
    std::fill(p->grad.data.begin(), p->grad.data.end(), 0.0f);
}

void Adam::step() {
  t_ += 1;
  const float c1 = 1.0f - static_cast<float>(std::pow(
                              static_cast<double>(b1_), static_cast<double>(t_)));
  const float c2 = 1.0f - static_cast<float>(std::pow(
                              static_cast<double>(b2_), static_cast<double>(t_)));
  for (size_t i = 0; i < params_.size(); ++i) {
    nn::Parameter* p = params_[i];
    float* w = p->value.ptr();
    const float* g = p->grad.ptr();
    float* m = m_[i].ptr();
    float* v = v_[i].ptr();
    const int64_t n = p->value.size();
    for (int64_t j = 0; j < n; ++j) {
      m[j] = b1_ * m[j] + (1.0f - b1_) * g[j];
      v[j] = b2_ * v[j] + (1.0f - b2_) * g[j] * g[j];
      const float mhat = m[j] / c1;
      const float vhat = v[j] / c2;
      w[j] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
    }
  }
}

Var generator_loss(Var d3d_fake, Var d2d_fake, Var dr_fake) {
  Var s = nn::add(nn::add(d3d_fake, d2d_fake), dr_fake);
  return nn::scale(nn::mean_all(s), -1.0f);
}

namespace {

// max(0, x) as a graph op; leaky_relu with zero slope is exactly that.
Var hinge_pos(Var x) { return nn::leaky_relu(x, 0.0f); }

Var head_hinge(Var real, Var fake) {
  Var r = hinge_pos(nn::add_scalar(nn::scale(real, -1.0f), 1.0f));
  Var f = hinge_pos(nn::add_scalar(fake, 1.0f));
  return nn::add(r, f);
}

}  // namespace

Var discriminator_loss(Var d3d_real, Var d2d_real, Var dr_real, Var d3d_fake,
                       Var d2d_fake, Var dr_fake) {
  Var s = nn::add(nn::add(head_hinge(d3d_real, d3d_fake),
                          head_hinge(d2d_real, d2d_fake)),
                  head_hinge(dr_real, dr_fake));
  return nn::mean_all(s);
}

json StepRecord::to_json() const {
  json j;
  j["step"] = step;
  j["L_D"] = l_d;
  j["L_G"] = l_g;
  j["d3d_real"] = d3d_real;
  j["d3d_fake"] = d3d_fake;
  j["d2d_real"] = d2d_real;
  j["d2d_fake"] = d2d_fake;
  j["dr_real"] = dr_real;
  j["dr_fake"] = dr_fake;
  j["T"] = frames;
  j["wall_ms"] = wall_ms;
  return j;
}

namespace {

float mean_of(const nn::Tensor& t) {
  double s = 0.0;
  for (float v : t.data) s += static_cast<double>(v);
  return static_cast<float>(s / static_cast<double>(t.size()));
}

}  // namespace

TrainConfig Trainer::checked(TrainConfig cfg, const gen::GeneratorConfig& g,
                             const disc::DiscriminatorConfig& d) {
  cfg.validate();
  g.validate();
  d.validate();
  if (g.latent_dim != d.text_dim + g.noise_dim)
    throw ConfigError(
        "latent width must equal sentence code width plus noise width: " +
        std::to_string(g.latent_dim) + " vs " + std::to_string(d.text_dim) +
        "+" + std::to_string(g.noise_dim));
  if (g.out_h() != d.frame_h || g.out_w() != d.frame_w)
    throw ConfigError("generator resolution " + std::to_string(g.out_h()) +
                      " does not match discriminator frames " +
                      std::to_string(d.frame_h));
  return cfg;
}

std::vector<nn::Parameter*> Trainer::select(
    const nn::ParameterStore& ps, const std::vector<std::string>& prefixes) {
  std::vector<nn::Parameter*> out;
  for (const auto& p : ps.all())
    for (const std::string& pre : prefixes)
      if (p->name.rfind(pre, 0) == 0) {
        out.push_back(p.get());
        break;
      }
  return out;
}

Trainer::Trainer(TrainConfig cfg, gen::GeneratorConfig gcfg,
                 disc::DiscriminatorConfig dcfg,
                 const text::EmbeddingProvider* provider)
    : cfg_(checked(std::move(cfg), gcfg, dcfg)),
      owned_provider_(provider ? nullptr : new text::HashedProvider()),
      provider_(provider ? provider : owned_provider_.get()),
      rng_(cfg_.seed),
      text_(ps_, rng_, provider_->dim(), 512, dcfg.text_dim),
      path_(ps_, rng_, dcfg.text_dim, gcfg.noise_dim),
      gen_(ps_, rng_, gcfg, path_.cond_dim()),
      disc_(ps_, rng_, dcfg),
      opt_d_(select(ps_, {"disc.", "text."}), cfg_.lr, cfg_.beta1, cfg_.beta2,
             cfg_.adam_eps),
      opt_g_(select(ps_, {"gen.", "path.", "text."}), cfg_.lr, cfg_.beta1,
             cfg_.beta2, cfg_.adam_eps) {}

namespace {

void check_batch(const Batch& b, int frames) {
  const int B = static_cast<int>(b.sentences.size());
  if (B < 2) throw ConfigError("training batch needs at least 2 samples");
  if (b.clips.rank() != 5)
    throw ShapeError("batch clips must be [B,T,3,H,W], got " +
                         nn::shape_str(b.clips.shape));
  if (b.clips.dim(0) != B)
    throw ShapeError("batch has " + std::to_string(B) + " sentences but " +
                         std::to_string(b.clips.dim(0)) + " clips");
  if (b.clips.dim(1) != frames)
    throw ShapeError("batch clips carry " + std::to_string(b.clips.dim(1)) +
                         " frames, step wants " + std::to_string(frames));
}

}  // namespace

void Trainer::d_substep(const Batch& batch, int frames, StepRecord& rec) {
  check_batch(batch, frames);
  Tape t;
  Ctx ctx;
  ctx.sn_iters = cfg_.sn_iters;

  Var es = text::encode_batch(ctx, t, *provider_, batch.sentences, text_);
  gen::Generator::Out out = gen_.generate(ctx, t, path_, es, frames, rng_);
  // Detach: re-enter the fake video as a plain constant so no gradient can
  // reach the generator from the discriminator objective.
  Var fake = nn::constant(t, out.video.val());
  Var real = nn::constant(t, batch.clips);

  disc::Discriminator::Scores sr = disc_.score(ctx, real, es);
  disc::Discriminator::Scores sf = disc_.score(ctx, fake, es);
  Var loss = discriminator_loss(sr.d3d, sr.d2d, sr.dr, sf.d3d, sf.d2d, sf.dr);

  rec.l_d = loss.val()[0];
  rec.d3d_real = mean_of(sr.d3d.val());
  rec.d3d_fake = mean_of(sf.d3d.val());
  rec.d2d_real = mean_of(sr.d2d.val());
  rec.d2d_fake = mean_of(sf.d2d.val());
  rec.dr_real = mean_of(sr.dr.val());
  rec.dr_fake = mean_of(sf.dr.val());
  if (!std::isfinite(rec.l_d)) {
    std::ostringstream msg;
    msg << "discriminator loss is not finite at step " << step_ + 1
        << " (d3d " << rec.d3d_real << "/" << rec.d3d_fake << ", d2d "
        << rec.d2d_real << "/" << rec.d2d_fake << ", dr " << rec.dr_real << "/"
        << rec.dr_fake << ")";
    throw NumericError(msg.str());
  }

  opt_d_.zero_grad();
  nn::backward(loss);
  opt_d_.step();
}

void Trainer::g_substep(const Batch& batch, int frames, StepRecord& rec) {
  check_batch(batch, frames);
  Tape t;
  Ctx ctx;
  ctx.sn_iters = cfg_.sn_iters;

  Var es = text::encode_batch(ctx, t, *provider_, batch.sentences, text_);
  gen::Generator::Out out = gen_.generate(ctx, t, path_, es, frames, rng_);
  disc::Discriminator::Scores sf = disc_.score(ctx, out.video, es);
  Var loss = generator_loss(sf.d3d, sf.d2d, sf.dr);

  rec.l_g = loss.val()[0];
  if (!std::isfinite(rec.l_g))
    throw NumericError("generator loss is not finite at step " +
                       std::to_string(step_ + 1));

  opt_g_.zero_grad();
  nn::backward(loss);
  opt_g_.step();
}

StepRecord Trainer::train_step(const BatchFn& next_batch) {
  const auto t0 = std::chrono::steady_clock::now();
  const int frames = rng_.uniform_int(cfg_.frame_min, cfg_.frame_max);
  Batch batch = next_batch(frames, rng_);

  StepRecord rec;
  rec.step = step_ + 1;
  rec.frames = frames;
  d_substep(batch, frames, rec);
  g_substep(batch, frames, rec);
  step_ += 1;

  rec.wall_ms = std::chrono::duration<double, std::milli>(
                    std::chrono::steady_clock::now() - t0)
                    .count();
  if (!log_path_.empty()) append_log(rec);
  if (cfg_.checkpoint_interval > 0 && !ckpt_dir_.empty() &&
      step_ % cfg_.checkpoint_interval == 0) {
    char name[32];
    std::snprintf(name, sizeof name, "step_%08lld",
                  static_cast<long long>(step_));
    save_checkpoint(ckpt_dir_ + "/" + name);
  }
  return rec;
}

void Trainer::run(const BatchFn& next_batch) {
  while (step_ < cfg_.total_steps) train_step(next_batch);
}

void Trainer::set_metrics_log(const std::string& path) { log_path_ = path; }

void Trainer::append_log(const StepRecord& rec) const {
  std::ofstream out(log_path_, std::ios::app | std::ios::binary);
  if (!out) throw DataError("cannot append to metrics log " + log_path_);
  out << rec.to_json().dump() << "\n";
}

namespace {

void dump_opt(nta::Archive& a, const std::string& tag, const Adam& opt) {
  const auto& ps = opt.params();
  for (size_t i = 0; i < ps.size(); ++i) {
    a.tensors.emplace(tag + ".m." + ps[i]->name, opt.m(i));
    a.tensors.emplace(tag + ".v." + ps[i]->name, opt.v(i));
  }
  nn::Tensor t({1});
  t[0] = static_cast<float>(opt.t());
  a.tensors.emplace(tag + ".t", std::move(t));
}

void take_opt(const std::string& tag, Adam& opt,
              const std::function<void(const std::string&, nn::Tensor&)>& take) {
  const auto& ps = opt.params();
  for (size_t i = 0; i < ps.size(); ++i) {
    take(tag + ".m." + ps[i]->name, opt.m(i));
    take(tag + ".v." + ps[i]->name, opt.v(i));
  }
  nn::Tensor t({1});
  take(tag + ".t", t);
  opt.set_t(static_cast<int64_t>(t[0]));
}

}  // namespace

void Trainer::save_checkpoint(const std::string& dir) const {
  nta::Archive a;
  a.step = step_;
  a.rng_state = rng_.state_hex();
  a.config = cfg_.echo();
  for (const auto& p : ps_.all()) {
    a.tensors.emplace(p->name, p->value);
    if (p->spectral) {
      a.tensors.emplace(p->name + ".sn_u", p->sn_u);
      a.tensors.emplace(p->name + ".sn_v", p->sn_v);
    }
  }
  dump_opt(a, "opt_d", opt_d_);
  dump_opt(a, "opt_g", opt_g_);
  nta::save_archive(dir, a);
}

void Trainer::load_checkpoint(const std::string& dir) {
  nta::Archive a = nta::load_archive(dir);
  std::set<std::string> used;
  auto take = [&](const std::string& name, nn::Tensor& dst) {
    auto it = a.tensors.find(name);
    if (it == a.tensors.end())
      throw DataError("checkpoint is missing tensor " + name);
    if (it->second.shape != dst.shape)
      throw DataError("checkpoint tensor " + name + " has shape " +
                      nn::shape_str(it->second.shape) + ", model wants " +
                      nn::shape_str(dst.shape));
    dst = it->second;
    used.insert(name);
  };

  for (const auto& p : ps_.all()) {
    take(p->name, p->value);
    if (p->spectral) {
      take(p->name + ".sn_u", p->sn_u);
      take(p->name + ".sn_v", p->sn_v);
    }
  }
  take_opt("opt_d", opt_d_, take);
  take_opt("opt_g", opt_g_, take);

  if (used.size() != a.tensors.size())
    for (const auto& [name, t] : a.tensors)
      if (!used.count(name))
        throw DataError("checkpoint carries unexpected tensor " + name);

  step_ = a.step;
  if (a.rng_state.empty())
    throw DataError("checkpoint has no rng state, cannot resume");
  rng_.set_state_hex(a.rng_state);
  opt_d_.zero_grad();
  opt_g_.zero_grad();
}

nn::Tensor Trainer::sample_videos(const std::vector<text::Sentence>& sentences,
                                  int frames, Rng& rng) const {
  if (sentences.size() < 2)
    throw ConfigError("sampling needs at least 2 sentences (batch statistics)");
  Tape t;
  Ctx ctx;
  ctx.training = false;
  Var es = text::encode_batch(ctx, t, *provider_, sentences, text_);
  gen::Generator::Out out = gen_.generate(ctx, t, path_, es, frames, rng);
  return out.video.val();
}

}  // namespace lpgan::train
