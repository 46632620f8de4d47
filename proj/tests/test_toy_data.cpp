#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "json.hpp"
#include "lpgan/png_io.hpp"
#include "lpgan/toy_data.hpp"

using namespace lpgan;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& leaf) {
  fs::path p = fs::temp_directory_path() / "lpgan_toy_tests" / leaf;
  fs::remove_all(p);
  fs::create_directories(p.parent_path());
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Coverage-weighted center of mass. Rendering mixes the two colors
// linearly, so per-pixel coverage can be read off the channel where
// foreground and background are furthest apart; mass is then the covered
// area in pixels, which moves continuously with the shape.
struct Centroid {
  double x = 0, y = 0;
  double mass = 0;
};

constexpr float kRedC[3] = {1, -1, -1};
constexpr float kGreenC[3] = {-1, 1, -1};
constexpr float kBlueC[3] = {-1, -1, 1};
constexpr float kYellowC[3] = {1, 1, -1};
constexpr float kBlackC[3] = {-1, -1, -1};
constexpr float kGrayC[3] = {0, 0, 0};

Centroid frame_centroid(const nn::Tensor& frames, int t, const float fg[3],
                        const float bg[3]) {
  int ch = 0;
  float span = 0;
  for (int i = 0; i < 3; ++i) {
    const float d = std::fabs(fg[i] - bg[i]);
    if (d > span) {
      span = d;
      ch = i;
    }
  }
  const int h = frames.dim(2), w = frames.dim(3);
  const int64_t plane = static_cast<int64_t>(h) * w;
  const float* f =
      frames.ptr() + (static_cast<int64_t>(t) * 3 + ch) * plane;
  Centroid c;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double cov = std::fabs(f[y * w + x] - bg[ch]) / span;
      c.x += cov * x;
      c.y += cov * y;
      c.mass += cov;
    }
  if (c.mass > 0) {
    c.x /= c.mass;
    c.y /= c.mass;
  }
  return c;
}

toy::SceneSpec centered(toy::Shape sh, toy::Color co, toy::Motion mo) {
  toy::ClassSpec cls;
  cls.shape = sh;
  cls.color = co;
  cls.motion = mo;
  return toy::class_scene(cls, 32, 16);
}

}  // namespace

TEST_CASE("captions follow the template") {
  toy::SceneSpec s;
  s.shape = toy::Shape::kCircle;
  s.color = toy::Color::kRed;
  s.motion = toy::Motion::kLeft;
  CHECK(s.caption() == "the red circle is moving left");

  s.shape = toy::Shape::kTriangle;
  s.color = toy::Color::kYellow;
  s.motion = toy::Motion::kGrow;
  CHECK(s.caption() == "the yellow triangle is growing");

  s.mention_background = true;
  s.background = toy::Background::kWhite;
  CHECK(s.caption() == "the yellow triangle is growing on a white background");

  // Every caption parses into a usable sentence.
  CHECK(text::Sentence::parse(s.caption()).tokens.size() == 9);
}

TEST_CASE("rendered motions match their captions") {
  Rng rng(5);
  const int T = 16;

  SUBCASE("moving left: centroid x strictly decreases") {
    toy::Clip c = toy::synthesize_clip(
        centered(toy::Shape::kCircle, toy::Color::kRed, toy::Motion::kLeft), T,
        32, rng);
    double prev = 1e9;
    for (int t = 0; t < T; ++t) {
      const Centroid ct = frame_centroid(c.frames, t, kRedC, kBlackC);
      CHECK(ct.mass > 0);
      CHECK(ct.x < prev);
      prev = ct.x;
    }
  }
  SUBCASE("moving right and down: centroid coordinates strictly increase") {
    toy::Clip c = toy::synthesize_clip(
        centered(toy::Shape::kSquare, toy::Color::kGreen, toy::Motion::kRight),
        T, 32, rng);
    toy::Clip d = toy::synthesize_clip(
        centered(toy::Shape::kSquare, toy::Color::kBlue, toy::Motion::kDown), T,
        32, rng);
    double px = -1e9, py = -1e9;
    for (int t = 0; t < T; ++t) {
      const double x = frame_centroid(c.frames, t, kGreenC, kBlackC).x;
      const double y = frame_centroid(d.frames, t, kBlueC, kBlackC).y;
      CHECK(x > px);
      CHECK(y > py);
      px = x;
      py = y;
    }
  }
  SUBCASE("moving up: centroid y strictly decreases") {
    toy::Clip c = toy::synthesize_clip(
        centered(toy::Shape::kTriangle, toy::Color::kYellow, toy::Motion::kUp),
        T, 32, rng);
    double prev = 1e9;
    for (int t = 0; t < T; ++t) {
      const double y = frame_centroid(c.frames, t, kYellowC, kBlackC).y;
      CHECK(y < prev);
      prev = y;
    }
  }
  SUBCASE("growing and shrinking: pixel count strictly monotone") {
    toy::Clip g = toy::synthesize_clip(
        centered(toy::Shape::kCircle, toy::Color::kBlue, toy::Motion::kGrow), T,
        32, rng);
    toy::Clip s = toy::synthesize_clip(
        centered(toy::Shape::kSquare, toy::Color::kRed, toy::Motion::kShrink),
        T, 32, rng);
    double pg = 0, ps = 1e18;
    for (int t = 0; t < T; ++t) {
      const double cg = frame_centroid(g.frames, t, kBlueC, kBlackC).mass;
      const double cs = frame_centroid(s.frames, t, kRedC, kBlackC).mass;
      CHECK(cg > pg);
      CHECK(cs < ps);
      pg = cg;
      ps = cs;
    }
  }
  SUBCASE("values stay in [-1,1]") {
    toy::Clip c = toy::synthesize_clip(
        centered(toy::Shape::kTriangle, toy::Color::kGreen, toy::Motion::kGrow),
        T, 32, rng);
    for (float v : c.frames.data) {
      CHECK(v >= -1.0f);
      CHECK(v <= 1.0f);
    }
  }
}

TEST_CASE("background pixels carry the exact background constant") {
  Rng rng(9);
  toy::SceneSpec base =
      centered(toy::Shape::kCircle, toy::Color::kRed, toy::Motion::kLeft);
  base.background = toy::Background::kGray;
  toy::Clip c = toy::synthesize_clip(base, 8, 32, rng);

  // Reconstruct the jittered trajectory from the rendered frames themselves:
  // any pixel further than size+2 from every frame's centroid must be
  // untouched background. Gray maps to exactly 0 in every channel.
  const int64_t plane = 32 * 32;
  int checked = 0;
  for (int t = 0; t < 8; ++t) {
    const Centroid ct = frame_centroid(c.frames, t, kRedC, kGrayC);
    const float* f = c.frames.ptr() + t * 3 * plane;
    for (int y = 0; y < 32; ++y)
      for (int x = 0; x < 32; ++x) {
        const double d = std::hypot(x - ct.x, y - ct.y);
        if (d < 9.0) continue;  // size <= 5 plus jitter and AA slack
        for (int ch = 0; ch < 3; ++ch)
          CHECK(f[ch * plane + y * 32 + x] == 0.0f);
        ++checked;
      }
  }
  CHECK(checked > 3000);

  // A pixel at the centroid is fully covered: exact foreground color.
  const Centroid c0 = frame_centroid(c.frames, 0, kRedC, kGrayC);
  const float* f0 = c.frames.ptr();
  const int cx = static_cast<int>(std::lround(c0.x));
  const int cy = static_cast<int>(std::lround(c0.y));
  CHECK(f0[0 * plane + cy * 32 + cx] == 1.0f);
  CHECK(f0[1 * plane + cy * 32 + cx] == -1.0f);
  CHECK(f0[2 * plane + cy * 32 + cx] == -1.0f);
}

TEST_CASE("motions that leave the frame are rejected") {
  Rng rng(3);
  toy::SceneSpec s =
      centered(toy::Shape::kCircle, toy::Color::kRed, toy::Motion::kLeft);
  s.speed = 3.0f;  // 45 px of travel cannot fit a 32 px frame
  CHECK_THROWS_AS(toy::synthesize_clip(s, 16, 32, rng), ConfigError);

  toy::SceneSpec sh =
      centered(toy::Shape::kSquare, toy::Color::kBlue, toy::Motion::kShrink);
  sh.speed = 0.6f;  // shrinks through zero
  CHECK_THROWS_AS(toy::synthesize_clip(sh, 16, 32, rng), ConfigError);
}

TEST_CASE("dataset build is deterministic and correctly counted") {
  toy::DatasetConfig cfg;
  cfg.resolution = 16;
  cfg.clips_per_class = 3;
  cfg.stored_frames = 6;
  cfg.seed = 77;
  cfg.classes = toy::DatasetConfig::toy3().classes;
  cfg.classes.pop_back();  // two classes keep the test quick

  const fs::path d1 = fresh_dir("det_a");
  const fs::path d2 = fresh_dir("det_b");
  const toy::Manifest m1 = toy::build_dataset(cfg, d1.string());
  const toy::Manifest m2 = toy::build_dataset(cfg, d2.string());

  std::map<int, int> counts;
  for (const auto& e : m1.clips) counts[e.class_id] += 1;
  REQUIRE(counts.size() == 2);
  CHECK(counts[0] == 3);
  CHECK(counts[1] == 3);
  CHECK(m1.class_captions.size() == 2);
  CHECK(m1.class_captions[0] == "the red circle is moving left");
  CHECK(m1.class_captions[1] == "the green square is moving right");

  // Byte-identical trees: manifest plus every payload file.
  CHECK(slurp(d1 / "manifest.json") == slurp(d2 / "manifest.json"));
  int files = 0;
  for (const auto& e : fs::recursive_directory_iterator(d1))
    if (e.is_regular_file()) {
      const fs::path rel = fs::relative(e.path(), d1);
      CHECK(slurp(e.path()) == slurp(d2 / rel));
      ++files;
    }
  CHECK(files >= 13);  // 6 archives x (manifest + payload) + manifest

  // The acceptance preset is 3 classes x 100 clips at 32x32.
  const toy::DatasetConfig preset = toy::DatasetConfig::toy3();
  CHECK(preset.classes.size() == 3);
  CHECK(preset.clips_per_class == 100);
  CHECK(preset.resolution == 32);
  CHECK(preset.stored_frames == 16);
}

TEST_CASE("clip save and load round trip") {
  Rng rng(21);
  toy::Clip c = toy::synthesize_clip(
      centered(toy::Shape::kSquare, toy::Color::kYellow, toy::Motion::kDown),
      5, 32, rng);
  c.class_id = 2;
  const fs::path dir = fresh_dir("clip_rt");
  toy::save_clip(c, dir.string());
  const toy::Clip d = toy::load_clip(dir.string());

  CHECK(d.caption == c.caption);
  CHECK(d.class_id == 2);
  REQUIRE(d.frames.shape == c.frames.shape);
  for (int64_t i = 0; i < c.frames.size(); ++i)
    CHECK(d.frames[i] == c.frames[i]);
  for (float v : d.frames.data) {
    CHECK(v >= -1.0f);
    CHECK(v <= 1.0f);
  }

  // Corrupting the payload must surface as an integrity failure.
  std::fstream f(dir / "frames.bin",
                 std::ios::in | std::ios::out | std::ios::binary);
  REQUIRE(f.good());
  f.seekp(40);
  const char zero = 0x13;
  f.write(&zero, 1);
  f.close();
  CHECK_THROWS_AS(toy::load_clip(dir.string()), IntegrityError);
}

TEST_CASE("png codec round trips bytes and bounds quantization error") {
  Rng rng(31);

  SUBCASE("codec is lossless on bytes") {
    png::Image img;
    img.width = 13;
    img.height = 7;
    img.rgb.resize(13 * 7 * 3);
    for (auto& b : img.rgb)
      b = static_cast<uint8_t>(rng.uniform_int(0, 255));
    const fs::path p = fresh_dir("png") / "noise.png";
    fs::create_directories(p.parent_path());
    png::write_rgb8(p.string(), img);
    const png::Image back = png::read_rgb8(p.string());
    REQUIRE(back.width == 13);
    REQUIRE(back.height == 7);
    CHECK(back.rgb == img.rgb);
  }

  SUBCASE("frame export stays within the 8-bit quantization bound") {
    toy::Clip c = toy::synthesize_clip(
        centered(toy::Shape::kCircle, toy::Color::kBlue, toy::Motion::kGrow), 4,
        32, rng);
    // Add non-quantized values so the bound is actually exercised.
    for (int64_t i = 0; i < c.frames.size(); i += 7)
      c.frames[i] = std::clamp(c.frames[i] + 0.003f, -1.0f, 1.0f);
    const fs::path dir = fresh_dir("png_frames");
    toy::export_frames_png(c, dir.string());

    const int64_t plane = 32 * 32;
    for (int t = 0; t < 4; ++t) {
      char name[32];
      std::snprintf(name, sizeof name, "frame_%04d.png", t);
      const png::Image img = png::read_rgb8((dir / name).string());
      REQUIRE(img.width == 32);
      REQUIRE(img.height == 32);
      const float* f = c.frames.ptr() + t * 3 * plane;
      for (int64_t p = 0; p < plane; ++p)
        for (int ch = 0; ch < 3; ++ch) {
          const float v = img.rgb[p * 3 + ch] / 255.0f * 2.0f - 1.0f;
          CHECK(std::fabs(v - f[ch * plane + p]) <= 2.0f / 255.0f);
        }
    }
  }

  SUBCASE("garbage is rejected") {
    const fs::path p = fresh_dir("png_bad") / "bad.png";
    fs::create_directories(p.parent_path());
    std::ofstream(p, std::ios::binary) << "not a png at all";
    CHECK_THROWS_AS(png::read_rgb8(p.string()), DataError);
  }
}

TEST_CASE("dataset loading verifies ids and integrity") {
  toy::DatasetConfig cfg;
  cfg.resolution = 16;
  cfg.clips_per_class = 2;
  cfg.stored_frames = 5;
  cfg.seed = 5;
  cfg.classes = {{toy::Shape::kCircle, toy::Color::kRed, toy::Motion::kLeft,
                  toy::Background::kBlack}};

  SUBCASE("clean load") {
    const fs::path dir = fresh_dir("load_ok");
    toy::build_dataset(cfg, dir.string());
    const toy::Dataset ds = toy::load_dataset(dir.string());
    REQUIRE(ds.clips.size() == 2);
    CHECK(ds.manifest.resolution == 16);
    CHECK(ds.clips[0].frames.dim(0) == 5);
    CHECK(ds.clips[0].class_id == 0);
  }
  SUBCASE("duplicate id") {
    const fs::path dir = fresh_dir("load_dup");
    toy::build_dataset(cfg, dir.string());
    nlohmann::json j;
    std::ifstream(dir / "manifest.json") >> j;
    j["clips"][1]["id"] = j["clips"][0]["id"];
    std::ofstream(dir / "manifest.json") << j.dump(2);
    CHECK_THROWS_AS(toy::load_dataset(dir.string()), DataError);
  }
  SUBCASE("corrupt payload") {
    const fs::path dir = fresh_dir("load_corrupt");
    toy::build_dataset(cfg, dir.string());
    std::fstream f(dir / "class0_0001" / "frames.bin",
                   std::ios::in | std::ios::out | std::ios::binary);
    REQUIRE(f.good());
    f.seekp(11);
    const char junk = 0x55;
    f.write(&junk, 1);
    f.close();
    CHECK_THROWS_AS(toy::load_dataset(dir.string()), IntegrityError);
  }
  SUBCASE("missing clip directory") {
    const fs::path dir = fresh_dir("load_missing");
    toy::build_dataset(cfg, dir.string());
    fs::remove_all(dir / "class0_0001");
    CHECK_THROWS_AS(toy::load_dataset(dir.string()), DataError);
  }
}

TEST_CASE("batch sampling windows are contiguous source frames") {
  toy::DatasetConfig cfg;
  cfg.resolution = 16;
  cfg.clips_per_class = 3;
  cfg.stored_frames = 8;
  cfg.seed = 13;
  cfg.classes = toy::DatasetConfig::toy3().classes;
  const fs::path dir = fresh_dir("sampling");
  toy::build_dataset(cfg, dir.string());
  const toy::Dataset ds = toy::load_dataset(dir.string());

  Rng rng(99);

  SUBCASE("fixed frame count") {
    const toy::Sampled s = toy::sample_batch_at(ds, 4, 5, rng);
    REQUIRE(s.clips.shape == std::vector<int>({4, 5, 3, 16, 16}));
    REQUIRE(s.sentences.size() == 4);
    REQUIRE(s.class_ids.size() == 4);

    const int64_t frame_sz = 3 * 16 * 16;
    const int64_t row = 5 * frame_sz;
    for (int b = 0; b < 4; ++b) {
      bool found = false;
      for (size_t ci = 0; ci < ds.clips.size() && !found; ++ci) {
        const toy::Clip& c = ds.clips[ci];
        for (int st = 0; st + 5 <= c.frames.dim(0) && !found; ++st) {
          bool eq = true;
          for (int64_t i = 0; i < row && eq; ++i)
            eq = s.clips[b * row + i] == c.frames[st * frame_sz + i];
          if (eq && s.sentences[b].text == c.caption &&
              s.class_ids[b] == c.class_id)
            found = true;
        }
      }
      CHECK(found);
    }
  }
  SUBCASE("ranged frame count stays in range and varies") {
    std::set<int> seen;
    for (int i = 0; i < 40; ++i) {
      const toy::Sampled s = toy::sample_batch(ds, 2, 5, 7, rng);
      const int t = s.clips.dim(1);
      CHECK(t >= 5);
      CHECK(t <= 7);
      seen.insert(t);
    }
    CHECK(seen.size() == 3);
  }
  SUBCASE("window longer than any stored clip") {
    CHECK_THROWS_AS(toy::sample_batch_at(ds, 2, 9, rng), DataError);
  }
}
