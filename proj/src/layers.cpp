#include "lpgan/layers.hpp"

#include <cmath>

namespace lpgan::nn {

Parameter& ParameterStore::add(const std::string& name, std::vector<int> shape) {
  for (const auto& p : params_)
    if (p->name == name) throw Error("duplicate parameter name: " + name);
  params_.push_back(std::make_unique<Parameter>(name, std::move(shape)));
  return *params_.back();
}

Parameter* ParameterStore::find(const std::string& name) {
  for (const auto& p : params_)
    if (p->name == name) return p.get();
  return nullptr;
}

void attach_spectral(Parameter& p, Rng& rng) {
  p.spectral = true;
  const int r = p.value.dim(0);
  const int64_t c = p.value.size() / r;
  p.sn_u = Tensor({r});
  rng.fill_normal(p.sn_u);
  double n2 = 0.0;
  for (float v : p.sn_u.data) n2 += static_cast<double>(v) * v;
  const float inv = static_cast<float>(1.0 / std::max(std::sqrt(n2), 1e-12));
  for (auto& v : p.sn_u.data) v *= inv;
  p.sn_v = Tensor({static_cast<int>(c)});
  spectral_power_iterate(p, 1);
}

namespace {

Var effective_weight(const Ctx& ctx, Tape& t, Parameter& w) {
  return w.spectral ? spectral_normalize(t, w, ctx.iters()) : param(t, w);
}

}  // namespace

Dense::Dense(ParameterStore& ps, const std::string& name, int in, int out,
             Rng& rng, bool bias, bool spectral) {
  W = &ps.add(name + ".W", {in, out});
  orthogonal_init(W->value, rng);
  if (spectral) attach_spectral(*W, rng);
  if (bias) b = &ps.add(name + ".b", {out});
}

Var Dense::forward(const Ctx& ctx, Var x) const {
  Tape& t = *x.t;
  Var y = matmul(x, effective_weight(ctx, t, *W));
  if (b) y = add_rowvec(y, param(t, *b));
  return y;
}

Conv2d::Conv2d(ParameterStore& ps, const std::string& name, int in_c, int out_c,
               int k, int stride_, int pad_, Rng& rng, bool bias, bool spectral)
    : stride(stride_), pad(pad_) {
  W = &ps.add(name + ".W", {out_c, in_c, k, k});
  orthogonal_init(W->value, rng);
  if (spectral) attach_spectral(*W, rng);
  if (bias) b = &ps.add(name + ".b", {out_c});
}

Var Conv2d::forward(const Ctx& ctx, Var x) const {
  Tape& t = *x.t;
  Var w = effective_weight(ctx, t, *W);
  return b ? conv2d(x, w, param(t, *b), stride, pad)
           : conv2d_nobias(x, w, stride, pad);
}

Conv3d::Conv3d(ParameterStore& ps, const std::string& name, int in_c, int out_c,
               std::vector<int> kernel, std::vector<int> stride_,
               std::vector<int> pad_, Rng& rng, bool bias, bool spectral)
    : stride(std::move(stride_)), pad(std::move(pad_)) {
  if (kernel.size() != 3) throw ShapeError("Conv3d: kernel needs 3 extents");
  W = &ps.add(name + ".W", {out_c, in_c, kernel[0], kernel[1], kernel[2]});
  orthogonal_init(W->value, rng);
  if (spectral) attach_spectral(*W, rng);
  if (bias) b = &ps.add(name + ".b", {out_c});
}

Var Conv3d::forward(const Ctx& ctx, Var x) const {
  Tape& t = *x.t;
  Var w = effective_weight(ctx, t, *W);
  if (!b) throw Error("Conv3d without bias is not wired");
  return conv3d(x, w, param(t, *b), stride, pad);
}

Var BatchNorm::forward(const Ctx& ctx, Var x) const {
  const bool flat = x.val().rank() == 2;
  if (ctx.frozen_stats) {
    if (last_mean.empty())
      throw Error("batch_norm: frozen statistics requested before any batch pass");
    return flat ? normalize_cols_const(x, last_mean, last_istd)
                : normalize_chan_const(x, last_mean, last_istd);
  }
  return flat ? batch_norm_cols(x, eps, &last_mean, &last_istd)
              : batch_norm_chan(x, eps, &last_mean, &last_istd);
}

CondBatchNorm::CondBatchNorm(ParameterStore& ps, const std::string& name,
                             int cond_dim, int channels, Rng& rng, bool spectral,
                             float eps_)
    : gamma_fc(ps, name + ".gamma", cond_dim, channels, rng, false, spectral),
      beta_fc(ps, name + ".beta", cond_dim, channels, rng, false, spectral),
      eps(eps_) {}

Var CondBatchNorm::forward(const Ctx& ctx, Var x, Var cond) const {
  if (cond.val().rank() != 2 || cond.val().dim(0) != x.val().dim(0))
    throw ShapeError("cond_batch_norm: condition batch " +
                     shape_str(cond.val().shape) + " does not match input " +
                     shape_str(x.val().shape));
  Var g = add_scalar(row_mean_center(gamma_fc.forward(ctx, cond)), 1.0f);
  Var be = row_mean_center(beta_fc.forward(ctx, cond));
  const bool flat = x.val().rank() == 2;
  Var xh;
  if (ctx.frozen_stats) {
    if (last_mean.empty())
      throw Error("cond_batch_norm: frozen statistics requested before any batch pass");
    xh = flat ? normalize_cols_const(x, last_mean, last_istd)
              : normalize_chan_const(x, last_mean, last_istd);
  } else {
    xh = flat ? batch_norm_cols(x, eps, &last_mean, &last_istd)
              : batch_norm_chan(x, eps, &last_mean, &last_istd);
  }
  return flat ? add(mul(xh, g), be) : add_chan(mul_chan(xh, g), be);
}

}  // namespace lpgan::nn
