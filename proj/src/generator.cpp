#include "lpgan/generator.hpp"

namespace lpgan::gen {

using namespace lpgan::nn;

namespace {

std::vector<int> halving_schedule(int c1, int blocks) {
  std::vector<int> s;
  int c = c1;
  for (int i = 0; i < blocks; ++i) {
    c = std::max(c / 2, 1);
    s.push_back(c);
  }
  return s;
}

}  // namespace

GeneratorConfig GeneratorConfig::dflt() {
  GeneratorConfig c;
  c.channel_schedule = halving_schedule(c.seed_channels, c.block_count);
  return c;
}

GeneratorConfig GeneratorConfig::toy() {
  GeneratorConfig c;
  c.seed_channels = 256;
  c.block_count = 3;
  c.channel_schedule = halving_schedule(c.seed_channels, c.block_count);
  return c;
}

void GeneratorConfig::validate() const {
  if (seed_h < 1 || seed_w < 1 || seed_channels < 1 || block_count < 1 ||
      noise_dim < 1 || latent_dim < 1)
    throw ConfigError("generator config: extents must be positive");
  if (static_cast<int>(channel_schedule.size()) != block_count)
    throw ConfigError("generator config: channel schedule has " +
                      std::to_string(channel_schedule.size()) +
                      " entries for " + std::to_string(block_count) +
                      " blocks");
  for (int c : channel_schedule)
    if (c < 1) throw ConfigError("generator config: channel counts must be positive");
  if (rgb_kernel != 1 && rgb_kernel != 3)
    throw ConfigError("generator config: rgb kernel must be 1 or 3");
}

UpBlock::UpBlock(ParameterStore& ps, const std::string& name, int in_c,
                 int out_c, int cond_dim, Rng& rng)
    : skip(ps, name + ".skip", in_c, out_c, 1, 1, 0, rng),
      conv1(ps, name + ".conv1", in_c, out_c, 3, 1, 1, rng),
      conv2(ps, name + ".conv2", out_c, out_c, 3, 1, 1, rng),
      cbn1(ps, name + ".cbn1", cond_dim, in_c, rng),
      cbn2(ps, name + ".cbn2", cond_dim, out_c, rng) {}

Var UpBlock::forward(const Ctx& ctx, Var x, Var cond) const {
  Var s = skip.forward(ctx, upsample2x_nn(x));
  Var h = leaky_relu(cbn1.forward(ctx, x, cond), slope);
  h = conv1.forward(ctx, upsample2x_nn(h));
  h = leaky_relu(cbn2.forward(ctx, h, cond), slope);
  h = conv2.forward(ctx, h);
  return add(s, h);
}

Generator::Generator(ParameterStore& ps, Rng& rng, GeneratorConfig cfg,
                     int cond_dim)
    : cfg_(std::move(cfg)), cond_dim_(cond_dim) {
  cfg_.validate();
  seed_fc = Dense(ps, "gen.seed_fc", cfg_.latent_dim,
                  cfg_.seed_channels * cfg_.seed_h * cfg_.seed_w, rng);
  int in_c = cfg_.seed_channels;
  for (int i = 0; i < cfg_.block_count; ++i) {
    const int out_c = cfg_.channel_schedule[static_cast<size_t>(i)];
    blocks.emplace_back(ps, "gen.block" + std::to_string(i), in_c, out_c,
                        cond_dim_, rng);
    in_c = out_c;
  }
  const int k = cfg_.rgb_kernel;
  rgb = Conv3d(ps, "gen.rgb", in_c, 3, {k, k, k}, {1, 1, 1},
               {k / 2, k / 2, k / 2}, rng);
}

Var Generator::to_seed(const Ctx& ctx, Var zbar) const {
  const int n = zbar.val().dim(0);
  Var x = seed_fc.forward(ctx, zbar);
  return reshape(x, {n, cfg_.seed_channels, cfg_.seed_h, cfg_.seed_w});
}

Var Generator::decode(const Ctx& ctx, Var zbar, Var cond_rows, int B,
                      int T) const {
  if (zbar.val().dim(0) != B * T)
    throw ShapeError("generator decode: expected " + std::to_string(B * T) +
                     " latent rows, got " + std::to_string(zbar.val().dim(0)));
  Var x = to_seed(ctx, zbar);
  for (const UpBlock& blk : blocks) x = blk.forward(ctx, x, cond_rows);
  const int c = x.val().dim(1), h = x.val().dim(2), w = x.val().dim(3);
  // Per-frame maps to per-video stacks: [B*T,C,H,W] -> [B,C,T,H,W].
  x = permute(reshape(x, {B, T, c, h, w}), {0, 2, 1, 3, 4});
  x = tanh_act(rgb.forward(ctx, x));
  return permute(x, {0, 2, 1, 3, 4});  // [B,T,3,H,W]
}

Generator::Out Generator::generate(const Ctx& ctx, Tape& t,
                                   const path::LatentPath& lp, Var es, int T,
                                   Rng& rng) const {
  if (lp.cond_dim() != cond_dim_ || lp.cond_dim() != cfg_.latent_dim)
    throw ConfigError("generator/latent-path width mismatch: path " +
                      std::to_string(lp.cond_dim()) + ", generator " +
                      std::to_string(cfg_.latent_dim));
  Out out{lp.forward(ctx, t, es, T, rng), {}};
  Var cond_rows = repeat_rows(out.path.cond, T);
  out.video = decode(ctx, out.path.conditioned, cond_rows, es.val().dim(0), T);
  return out;
}

}  // namespace lpgan::gen
