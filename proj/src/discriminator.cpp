#include "lpgan/discriminator.hpp"

namespace lpgan::disc {

DiscriminatorConfig DiscriminatorConfig::dflt() { return {}; }

DiscriminatorConfig DiscriminatorConfig::toy() {
  DiscriminatorConfig c;
  c.frame_h = c.frame_w = 32;
  c.base_channels = 32;
  return c;
}

void DiscriminatorConfig::validate() const {
  if (frame_h != frame_w)
    throw ConfigError("discriminator wants square frames, got " +
                      std::to_string(frame_h) + "x" + std::to_string(frame_w));
  int h = frame_h;
  while (h > 4 && h % 2 == 0) h /= 2;
  if (h != 4)
    throw ConfigError("frame extent " + std::to_string(frame_h) +
                      " cannot be halved down to 4");
  if (base_channels < 1 || feature_dim < 1 || text_dim < 1)
    throw ConfigError("discriminator widths must be positive");
}

int DiscriminatorConfig::block_count() const {
  int h = frame_h, n = 0;
  while (h > 4) {
    h /= 2;
    ++n;
  }
  return n;
}

int DiscriminatorConfig::region_channels() const {
  return base_channels << (block_count() - 1);
}

DownBlock2d::DownBlock2d(nn::ParameterStore& ps, const std::string& name,
                         int in_c, int out_c, Rng& rng, bool spectral)
    : skip(ps, name + ".skip", in_c, out_c, 1, 1, 0, rng, true, spectral),
      conv1(ps, name + ".conv1", in_c, out_c, 3, 1, 1, rng, true, spectral),
      conv2(ps, name + ".conv2", out_c, out_c, 1, 1, 0, rng, true, spectral) {}

Var DownBlock2d::forward(const Ctx& ctx, Var x) const {
  Var s = avg_pool2x(skip.forward(ctx, x));
  Var l = leaky_relu(conv1.forward(ctx, x), slope);
  l = leaky_relu(avg_pool2x(l), slope);
  return add(s, conv2.forward(ctx, l));
}

DownBlock3d::DownBlock3d(nn::ParameterStore& ps, const std::string& name,
                         int in_c, int out_c, Rng& rng, bool spectral)
    : skip(ps, name + ".skip", in_c, out_c, {1, 1, 1}, {1, 1, 1}, {0, 0, 0},
           rng, true, spectral),
      conv1(ps, name + ".conv1", in_c, out_c, {3, 3, 3}, {1, 1, 1}, {1, 1, 1},
            rng, true, spectral),
      conv2(ps, name + ".conv2", out_c, out_c, {1, 1, 1}, {1, 1, 1}, {0, 0, 0},
            rng, true, spectral) {}

Var DownBlock3d::forward(const Ctx& ctx, Var x) const {
  Var s = avg_pool2x(skip.forward(ctx, x));
  Var l = leaky_relu(conv1.forward(ctx, x), slope);
  l = leaky_relu(avg_pool2x(l), slope);
  return add(s, conv2.forward(ctx, l));
}

CondHead::CondHead(nn::ParameterStore& ps, const std::string& name,
                   int text_dim, int feature_dim, Rng& rng, bool spectral)
    : gate(ps, name + ".gate", text_dim, feature_dim, rng, false, spectral),
      project(ps, name + ".w", feature_dim, 1, rng, false, spectral) {}

Var CondHead::score(const Ctx& ctx, Var v, Var es) const {
  if (v.val().dim(0) != es.val().dim(0))
    throw ShapeError("cond head: " + std::to_string(v.val().dim(0)) +
                     " vectors vs " + std::to_string(es.val().dim(0)) +
                     " sentences");
  return project.forward(ctx, mul(sigmoid(gate.forward(ctx, es)), v));
}

Discriminator::Discriminator(nn::ParameterStore& ps, Rng& rng,
                             DiscriminatorConfig cfg, bool spectral)
    : cfg_(cfg) {
  cfg_.validate();
  const int n = cfg_.block_count();
  auto width = [&](int i) { return cfg_.base_channels << i; };
  for (int i = 0; i < n; ++i)
    fblocks.emplace_back(ps, "disc.frame" + std::to_string(i),
                         i == 0 ? 7 : width(i - 1), width(i), rng, spectral);
  frame_fc = nn::Dense(ps, "disc.frame_fc", cfg_.region_channels(),
                       cfg_.feature_dim, rng, true, spectral);
  region = nn::Conv2d(ps, "disc.region", cfg_.region_channels(), 1, 1, 1, 0,
                      rng, true, spectral);
  frame_head =
      CondHead(ps, "disc.d2d", cfg_.text_dim, cfg_.feature_dim, rng, spectral);
  for (int i = 0; i < n; ++i)
    vblocks.emplace_back(ps, "disc.video" + std::to_string(i),
                         i == 0 ? 7 : width(i - 1), width(i), rng, spectral);
  video_fc = nn::Dense(ps, "disc.video_fc", cfg_.region_channels(),
                       cfg_.feature_dim, rng, true, spectral);
  video_head =
      CondHead(ps, "disc.d3d", cfg_.text_dim, cfg_.feature_dim, rng, spectral);
}

Var Discriminator::enrich(Var videos) {
  const Tensor& v = videos.val();
  if (v.rank() != 5 || v.dim(1) != 3)
    throw ShapeError("enrich wants [B,3,T,H,W]");
  const int B = v.dim(0), T = v.dim(2), H = v.dim(3), W = v.dim(4);
  Var avg = batch_time_mean_bcast(videos);
  Var frames = reshape(permute(videos, {0, 2, 1, 3, 4}), {B * T, 3, H, W});
  Var edges = reshape(sobel_edges(frames), {B, T, 1, H, W});
  return concat_chan(concat_chan(videos, avg),
                     permute(edges, {0, 2, 1, 3, 4}));
}

Discriminator::Frame2d Discriminator::encode_frames(const Ctx& ctx,
                                                    Var enriched) const {
  const Tensor& e = enriched.val();
  if (e.rank() != 5 || e.dim(1) != 7)
    throw ShapeError("encode_frames wants [B,7,T,H,W]");
  const int B = e.dim(0), T = e.dim(2), H = e.dim(3), W = e.dim(4);
  Var x = reshape(permute(enriched, {0, 2, 1, 3, 4}), {B * T, 7, H, W});
  for (const auto& blk : fblocks) x = blk.forward(ctx, x);
  return {frame_fc.forward(ctx, global_mean_tail(x)), x};
}

Var Discriminator::encode_video(const Ctx& ctx, Var enriched) const {
  const Tensor& e = enriched.val();
  if (e.rank() != 5 || e.dim(1) != 7)
    throw ShapeError("encode_video wants [B,7,T,H,W]");
  if (e.dim(2) < 2)
    throw ShapeError("encode_video wants at least 2 frames, got " +
                     std::to_string(e.dim(2)));
  Var x = enriched;
  for (const auto& blk : vblocks) x = blk.forward(ctx, x);
  return video_fc.forward(ctx, global_mean_tail(x));
}

Var Discriminator::region_mean(const Ctx& ctx, Var regions, int B,
                               int T) const {
  Var per = region.forward(ctx, regions);  // [B*T,1,4,4]
  const int cells = per.val().dim(2) * per.val().dim(3);
  return mean_cols(reshape(per, {B, T * cells}));
}

Discriminator::Scores Discriminator::score(const Ctx& ctx, Var videos,
                                           Var es) const {
  const Tensor& v = videos.val();
  if (v.rank() != 5 || v.dim(2) != 3)
    throw ShapeError("discriminator wants [B,T,3,H,W] clips");
  if (v.dim(3) != cfg_.frame_h || v.dim(4) != cfg_.frame_w)
    throw ShapeError("clip extent " + std::to_string(v.dim(3)) + "x" +
                     std::to_string(v.dim(4)) + ", configured for " +
                     std::to_string(cfg_.frame_h) + "x" +
                     std::to_string(cfg_.frame_w));
  const int B = v.dim(0), T = v.dim(1);
  if (es.val().rank() != 2 || es.val().dim(0) != B ||
      es.val().dim(1) != cfg_.text_dim)
    throw ShapeError("sentence batch does not match clip batch");

  Var enriched = enrich(permute(videos, {0, 2, 1, 3, 4}));
  Frame2d f = encode_frames(ctx, enriched);
  Var vvec = encode_video(ctx, enriched);

  Scores out;
  out.enriched = enriched;
  out.frames = f;
  out.d3d = video_head.score(ctx, vvec, es);
  Var per_frame = frame_head.score(ctx, f.vecs, repeat_rows(es, T));
  out.d2d = mean_cols(reshape(per_frame, {B, T}));
  out.dr = region_mean(ctx, f.regions, B, T);
  return out;
}

}  // namespace lpgan::disc
