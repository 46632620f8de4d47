#include "lpgan/toy_data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "json.hpp"
#include "lpgan/png_io.hpp"
#include "lpgan/serialize.hpp"

namespace lpgan::toy {

namespace fs = std::filesystem;
using nlohmann::json;

const char* word(Shape s) {
  switch (s) {
    case Shape::kCircle: return "circle";
    case Shape::kSquare: return "square";
    case Shape::kTriangle: return "triangle";
  }
  return "";
}

const char* word(Color c) {
  switch (c) {
    case Color::kRed: return "red";
    case Color::kGreen: return "green";
    case Color::kBlue: return "blue";
    case Color::kYellow: return "yellow";
  }
  return "";
}

const char* word(Motion m) {
  switch (m) {
    case Motion::kLeft: return "moving left";
    case Motion::kRight: return "moving right";
    case Motion::kUp: return "moving up";
    case Motion::kDown: return "moving down";
    case Motion::kGrow: return "growing";
    case Motion::kShrink: return "shrinking";
  }
  return "";
}

const char* word(Background b) {
  switch (b) {
    case Background::kBlack: return "black";
    case Background::kWhite: return "white";
    case Background::kGray: return "gray";
  }
  return "";
}

namespace {

void color_rgb(Color c, float out[3]) {
  switch (c) {
    case Color::kRed: out[0] = 1; out[1] = -1; out[2] = -1; break;
    case Color::kGreen: out[0] = -1; out[1] = 1; out[2] = -1; break;
    case Color::kBlue: out[0] = -1; out[1] = -1; out[2] = 1; break;
    case Color::kYellow: out[0] = 1; out[1] = 1; out[2] = -1; break;
  }
}

void background_rgb(Background b, float out[3]) {
  switch (b) {
    case Background::kBlack: out[0] = out[1] = out[2] = -1; break;
    case Background::kWhite: out[0] = out[1] = out[2] = 1; break;
    case Background::kGray: out[0] = out[1] = out[2] = 0; break;
  }
}

bool inside(Shape shape, float cx, float cy, float s, float x, float y) {
  const float dx = x - cx, dy = y - cy;
  switch (shape) {
    case Shape::kCircle:
      return dx * dx + dy * dy <= s * s;
    case Shape::kSquare:
      return std::fabs(dx) <= s && std::fabs(dy) <= s;
    case Shape::kTriangle:
      // Apex up at (cx, cy-s), base from (cx-s, cy+s) to (cx+s, cy+s).
      return dy >= -s && dy <= s && std::fabs(dx) <= (dy + s) * 0.5f;
  }
  return false;
}

}  // namespace

std::string SceneSpec::caption() const {
  std::string s = std::string("the ") + word(color) + " " + word(shape) +
                  " is " + word(motion);
  if (mention_background)
    s += std::string(" on a ") + word(background) + " background";
  return s;
}

void SceneSpec::at_frame(int t, float* cx_t, float* cy_t,
                         float* size_t_) const {
  const float d = speed * static_cast<float>(t);
  *cx_t = cx;
  *cy_t = cy;
  *size_t_ = size;
  switch (motion) {
    case Motion::kLeft: *cx_t = cx - d; break;
    case Motion::kRight: *cx_t = cx + d; break;
    case Motion::kUp: *cy_t = cy - d; break;
    case Motion::kDown: *cy_t = cy + d; break;
    case Motion::kGrow: *size_t_ = size + d; break;
    case Motion::kShrink: *size_t_ = size - d; break;
  }
}

void check_bounds(const SceneSpec& spec, int frames, int resolution) {
  if (frames < 1) throw ConfigError("clip needs at least one frame");
  if (resolution < 8) throw ConfigError("resolution below 8 is not renderable");
  const float lim = static_cast<float>(resolution) - 0.5f;
  for (int t = 0; t < frames; ++t) {
    float cx, cy, s;
    spec.at_frame(t, &cx, &cy, &s);
    if (s < 1.0f)
      throw ConfigError("scene \"" + spec.caption() + "\": shape shrinks below "
                        "1 px at frame " + std::to_string(t));
    if (cx - s < 0.5f || cx + s > lim || cy - s < 0.5f || cy + s > lim)
      throw ConfigError("scene \"" + spec.caption() +
                        "\": motion leaves the frame at frame " +
                        std::to_string(t));
  }
}

Clip synthesize_clip(const SceneSpec& spec, int frames, int resolution,
                     Rng& rng) {
  const float u = static_cast<float>(resolution) / 32.0f;
  SceneSpec s = spec;
  s.cx += rng.uniform_f(-1.0f, 1.0f) * u;
  s.cy += rng.uniform_f(-1.0f, 1.0f) * u;
  s.size += rng.uniform_f(-0.5f, 0.5f) * u;
  s.speed *= rng.uniform_f(0.9f, 1.1f);
  check_bounds(s, frames, resolution);

  float fg[3] = {0, 0, 0}, bg[3] = {0, 0, 0};
  color_rgb(s.color, fg);
  background_rgb(s.background, bg);

  Clip clip;
  clip.caption = s.caption();
  clip.frames = nn::Tensor({frames, 3, resolution, resolution});
  float* data = clip.frames.ptr();
  const int64_t plane = static_cast<int64_t>(resolution) * resolution;

  for (int t = 0; t < frames; ++t) {
    float cx, cy, sz;
    s.at_frame(t, &cx, &cy, &sz);
    float* frame = data + static_cast<int64_t>(t) * 3 * plane;
    for (int c = 0; c < 3; ++c)
      std::fill(frame + c * plane, frame + (c + 1) * plane, bg[c]);

    // Pixels outside the bounding box keep the exact background constant;
    // inside it, coverage comes from a 4x4 subsample grid.
    const int x0 = std::max(0, static_cast<int>(std::floor(cx - sz - 1)));
    const int x1 = std::min(resolution - 1,
                            static_cast<int>(std::ceil(cx + sz + 1)));
    const int y0 = std::max(0, static_cast<int>(std::floor(cy - sz - 1)));
    const int y1 = std::min(resolution - 1,
                            static_cast<int>(std::ceil(cy + sz + 1)));
    for (int py = y0; py <= y1; ++py)
      for (int px = x0; px <= x1; ++px) {
        int hits = 0;
        for (int sy = 0; sy < 4; ++sy)
          for (int sx = 0; sx < 4; ++sx) {
            const float x = static_cast<float>(px) + (sx + 0.5f) / 4.0f;
            const float y = static_cast<float>(py) + (sy + 0.5f) / 4.0f;
            hits += inside(s.shape, cx, cy, sz, x, y) ? 1 : 0;
          }
        if (hits == 0) continue;
        const float cov = static_cast<float>(hits) / 16.0f;
        for (int c = 0; c < 3; ++c)
          frame[c * plane + py * resolution + px] =
              bg[c] + cov * (fg[c] - bg[c]);
      }
  }
  return clip;
}

SceneSpec class_scene(const ClassSpec& cls, int resolution, int frames) {
  const float u = static_cast<float>(resolution) / 32.0f;
  const float mid = static_cast<float>(resolution) / 2.0f;
  SceneSpec s;
  s.shape = cls.shape;
  s.color = cls.color;
  s.motion = cls.motion;
  s.background = cls.background;
  s.cx = s.cy = mid;

  const float steps = static_cast<float>(frames - 1);
  switch (cls.motion) {
    case Motion::kLeft:
    case Motion::kRight:
    case Motion::kUp:
    case Motion::kDown: {
      s.size = 4.5f * u;
      s.speed = 0.9f * u;
      // Center the travel so either direction has equal slack.
      const float half = s.speed * steps / 2.0f;
      if (cls.motion == Motion::kLeft) s.cx = mid + half;
      if (cls.motion == Motion::kRight) s.cx = mid - half;
      if (cls.motion == Motion::kUp) s.cy = mid + half;
      if (cls.motion == Motion::kDown) s.cy = mid - half;
      break;
    }
    case Motion::kGrow:
      s.size = 3.0f * u;
      s.speed = 0.3f * u;
      break;
    case Motion::kShrink:
      s.size = 7.5f * u;
      s.speed = 0.3f * u;
      break;
  }
  return s;
}

DatasetConfig DatasetConfig::toy3() {
  DatasetConfig c;
  c.classes = {
      {Shape::kCircle, Color::kRed, Motion::kLeft, Background::kBlack},
      {Shape::kSquare, Color::kGreen, Motion::kRight, Background::kBlack},
      {Shape::kTriangle, Color::kBlue, Motion::kGrow, Background::kBlack},
  };
  return c;
}

void DatasetConfig::validate() const {
  if (classes.empty()) throw ConfigError("dataset wants at least one class");
  if (clips_per_class < 1)
    throw ConfigError("clips per class must be positive");
  if (stored_frames < 2)
    throw ConfigError("stored clips need at least 2 frames");
  if (resolution < 8) throw ConfigError("resolution below 8 is not renderable");
}

namespace {

std::string clip_id(int class_idx, int clip_idx) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "class%d_%04d", class_idx, clip_idx);
  return buf;
}

json manifest_to_json(const Manifest& m) {
  json j;
  j["resolution"] = m.resolution;
  j["stored_frames"] = m.stored_frames;
  j["seed"] = m.seed;
  j["class_captions"] = m.class_captions;
  json clips = json::array();
  for (const ClipEntry& e : m.clips) {
    json c;
    c["id"] = e.id;
    c["caption"] = e.caption;
    c["class"] = e.class_id;
    c["frame_count"] = e.frame_count;
    c["file"] = e.file;
    clips.push_back(std::move(c));
  }
  j["clips"] = std::move(clips);
  return j;
}

Manifest manifest_from_json(const json& j) {
  Manifest m;
  try {
    m.resolution = j.at("resolution").get<int>();
    m.stored_frames = j.at("stored_frames").get<int>();
    m.seed = j.at("seed").get<uint64_t>();
    m.class_captions =
        j.at("class_captions").get<std::vector<std::string>>();
    for (const json& c : j.at("clips")) {
      ClipEntry e;
      e.id = c.at("id").get<std::string>();
      e.caption = c.at("caption").get<std::string>();
      e.class_id = c.at("class").get<int>();
      e.frame_count = c.at("frame_count").get<int>();
      e.file = c.at("file").get<std::string>();
      m.clips.push_back(std::move(e));
    }
  } catch (const json::exception& e) {
    throw DataError(std::string("dataset manifest: ") + e.what());
  }
  return m;
}

}  // namespace

Manifest build_dataset(const DatasetConfig& cfg, const std::string& out_dir) {
  cfg.validate();
  fs::create_directories(out_dir);

  Manifest m;
  m.resolution = cfg.resolution;
  m.stored_frames = cfg.stored_frames;
  m.seed = cfg.seed;

  for (size_t k = 0; k < cfg.classes.size(); ++k) {
    SceneSpec base =
        class_scene(cfg.classes[k], cfg.resolution, cfg.stored_frames);
    base.mention_background = cfg.mention_background;
    m.class_captions.push_back(base.caption());
    for (int i = 0; i < cfg.clips_per_class; ++i) {
      Rng rng(Rng::derive(cfg.seed, k, static_cast<uint64_t>(i)));
      Clip clip =
          synthesize_clip(base, cfg.stored_frames, cfg.resolution, rng);
      clip.class_id = static_cast<int>(k);
      const std::string id = clip_id(static_cast<int>(k), i);
      save_clip(clip, (fs::path(out_dir) / id).string());
      m.clips.push_back(
          {id, clip.caption, static_cast<int>(k), cfg.stored_frames, id});
    }
  }

  std::ofstream out(fs::path(out_dir) / "manifest.json", std::ios::binary);
  if (!out) throw DataError("cannot write dataset manifest in " + out_dir);
  out << manifest_to_json(m).dump(2) << "\n";
  return m;
}

void save_clip(const Clip& clip, const std::string& path) {
  if (clip.frames.rank() != 4 || clip.frames.dim(1) != 3)
    throw ShapeError("clip frames must be [T,3,H,W], got " +
                     nn::shape_str(clip.frames.shape));
  nta::Archive a;
  a.config = json{{"caption", clip.caption}, {"class", clip.class_id}};
  a.tensors.emplace("frames", clip.frames);
  nta::save_archive(path, a);
}

Clip load_clip(const std::string& path) {
  nta::Archive a = nta::load_archive(path);
  auto it = a.tensors.find("frames");
  if (it == a.tensors.end())
    throw DataError("clip archive " + path + " has no frames tensor");
  Clip c;
  c.frames = std::move(it->second);
  if (c.frames.rank() != 4 || c.frames.dim(1) != 3)
    throw DataError("clip archive " + path + " has frames of shape " +
                    nn::shape_str(c.frames.shape));
  if (!a.config.is_object() || !a.config.contains("caption"))
    throw DataError("clip archive " + path + " carries no caption");
  c.caption = a.config["caption"].get<std::string>();
  c.class_id = a.config.value("class", -1);
  return c;
}

Dataset load_dataset(const std::string& dir) {
  std::ifstream in(fs::path(dir) / "manifest.json", std::ios::binary);
  if (!in) throw DataError("no dataset manifest.json in " + dir);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw DataError("dataset manifest in " + dir + " is not valid JSON: " +
                    e.what());
  }

  Dataset ds;
  ds.manifest = manifest_from_json(j);

  std::vector<std::string> ids;
  for (const ClipEntry& e : ds.manifest.clips) ids.push_back(e.id);
  std::sort(ids.begin(), ids.end());
  if (std::adjacent_find(ids.begin(), ids.end()) != ids.end())
    throw DataError("dataset manifest repeats a clip id");

  for (const ClipEntry& e : ds.manifest.clips) {
    Clip c = load_clip((fs::path(dir) / e.file).string());
    if (c.frames.dim(0) != e.frame_count ||
        c.frames.dim(2) != ds.manifest.resolution ||
        c.frames.dim(3) != ds.manifest.resolution)
      throw DataError("clip " + e.id + " disagrees with the manifest: " +
                      nn::shape_str(c.frames.shape));
    if (c.caption != e.caption)
      throw DataError("clip " + e.id + " caption disagrees with the manifest");
    c.class_id = e.class_id;
    ds.clips.push_back(std::move(c));
  }
  return ds;
}

Sampled sample_batch_at(const Dataset& ds, int batch_size, int frames,
                        Rng& rng) {
  if (batch_size < 1) throw ConfigError("batch size must be positive");
  if (ds.clips.empty()) throw DataError("dataset has no clips");
  bool any_fits = false;
  for (const Clip& c : ds.clips)
    any_fits = any_fits || c.frames.dim(0) >= frames;
  if (!any_fits)
    throw DataError("no stored clip has " + std::to_string(frames) +
                    " frames");

  const int res_h = ds.clips[0].frames.dim(2);
  const int res_w = ds.clips[0].frames.dim(3);
  Sampled out;
  out.clips = nn::Tensor({batch_size, frames, 3, res_h, res_w});
  const int64_t row = static_cast<int64_t>(frames) * 3 * res_h * res_w;
  const int64_t frame_sz = static_cast<int64_t>(3) * res_h * res_w;

  for (int b = 0; b < batch_size; ++b) {
    int idx = rng.uniform_int(0, static_cast<int>(ds.clips.size()) - 1);
    while (ds.clips[static_cast<size_t>(idx)].frames.dim(0) < frames)
      idx = rng.uniform_int(0, static_cast<int>(ds.clips.size()) - 1);
    const Clip& c = ds.clips[static_cast<size_t>(idx)];
    const int start = rng.uniform_int(0, c.frames.dim(0) - frames);
    std::copy_n(c.frames.ptr() + start * frame_sz, row,
                out.clips.ptr() + b * row);
    out.sentences.push_back(text::Sentence::parse(c.caption));
    out.class_ids.push_back(c.class_id);
  }
  return out;
}

Sampled sample_batch(const Dataset& ds, int batch_size, int frame_min,
                     int frame_max, Rng& rng) {
  if (frame_min < 1 || frame_min > frame_max)
    throw ConfigError("frame count range is empty");
  const int frames = rng.uniform_int(frame_min, frame_max);
  return sample_batch_at(ds, batch_size, frames, rng);
}

void export_frames_png(const Clip& clip, const std::string& dir) {
  fs::create_directories(dir);
  const int T = clip.frames.dim(0);
  const int h = clip.frames.dim(2), w = clip.frames.dim(3);
  const int64_t plane = static_cast<int64_t>(h) * w;
  for (int t = 0; t < T; ++t) {
    png::Image img;
    img.width = w;
    img.height = h;
    img.rgb.resize(static_cast<size_t>(plane) * 3);
    const float* f = clip.frames.ptr() + static_cast<int64_t>(t) * 3 * plane;
    for (int64_t p = 0; p < plane; ++p)
      for (int c = 0; c < 3; ++c) {
        const float v = (f[c * plane + p] + 1.0f) * 0.5f * 255.0f;
        const long q = std::lround(static_cast<double>(v));
        img.rgb[static_cast<size_t>(p) * 3 + static_cast<size_t>(c)] =
            static_cast<uint8_t>(std::clamp(q, 0L, 255L));
      }
    char name[32];
    std::snprintf(name, sizeof name, "frame_%04d.png", t);
    png::write_rgb8((fs::path(dir) / name).string(), img);
  }
}

}  // namespace lpgan::toy
