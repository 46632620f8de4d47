#include "lpgan/latent_path.hpp"

namespace lpgan::path {

using namespace lpgan::nn;

LatentPath::LatentPath(ParameterStore& ps, Rng& init_rng, int code,
                       int noise_dim, int hidden)
    : f1(ps, "path.f1", code + noise_dim, hidden, init_rng),
      f2(ps, "path.f2", hidden, hidden, init_rng),
      f3(ps, "path.f3", hidden, 4 * code, init_rng),
      cbn(ps, "path.cbn", code + noise_dim, code + noise_dim, init_rng),
      code_(code),
      noise_dim_(noise_dim) {}

Endpoints LatentPath::predict(const Ctx& ctx, Var es, Var fnoise) const {
  Var h = concat_cols(es, fnoise);
  h = leaky_relu(f1.forward(ctx, h), slope);
  h = leaky_relu(f2.forward(ctx, h), slope);
  Var out = f3.forward(ctx, h);  // [B, 4*code]
  Endpoints e;
  e.mu_s = slice_cols(out, 0, code_);
  e.mu_e = slice_cols(out, code_, code_);
  e.sigma_s = sigmoid(slice_cols(out, 2 * code_, code_));
  e.sigma_e = sigmoid(slice_cols(out, 3 * code_, code_));
  return e;
}

Var LatentPath::sample(Var mu, Var sigma, Var eps) {
  return add(mu, mul(sigma, eps));
}

PathOut LatentPath::forward(const Ctx& ctx, Tape& t, Var es, int T,
                            Rng& rng) const {
  if (T < 2) throw ConfigError("latent path: frame count must be at least 2");
  const int B = es.val().dim(0);
  auto draw = [&](std::vector<int> shape) {
    Tensor n(std::move(shape));
    rng.fill_normal(n);
    return constant(t, std::move(n));
  };

  PathOut out;
  out.frame_count = T;
  out.dist = predict(ctx, es, draw({B, noise_dim_}));
  out.z_start = sample(out.dist.mu_s, out.dist.sigma_s, draw({B, code_}));
  out.z_end = sample(out.dist.mu_e, out.dist.sigma_e, draw({B, code_}));
  out.raw = interp_rows(out.z_start, out.z_end, T, exact_endpoints);

  Var cat_noise = per_frame_concat_noise
                      ? draw({B * T, noise_dim_})
                      : repeat_rows(draw({B, noise_dim_}), T);
  out.zcat = concat_cols(out.raw, cat_noise);
  out.cond = concat_cols(es, draw({B, noise_dim_}));
  out.conditioned = cbn.forward(ctx, out.zcat, repeat_rows(out.cond, T));
  return out;
}

}  // namespace lpgan::path
