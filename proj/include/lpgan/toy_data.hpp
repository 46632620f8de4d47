#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lpgan/rng.hpp"
#include "lpgan/tensor.hpp"
#include "lpgan/text_encoder.hpp"

namespace lpgan::toy {

enum class Shape { kCircle, kSquare, kTriangle };
enum class Color { kRed, kGreen, kBlue, kYellow };
enum class Motion { kLeft, kRight, kUp, kDown, kGrow, kShrink };
enum class Background { kBlack, kWhite, kGray };

const char* word(Shape s);
const char* word(Color c);       // "red", ...
const char* word(Motion m);      // "moving left", "growing", ...
const char* word(Background b);  // "black", ...

// One rendered scene: a colored shape on a flat background following a
// single motion. Units are pixels; speed is pixels per frame for the four
// translations and size change per frame for grow/shrink.
struct SceneSpec {
  Shape shape = Shape::kCircle;
  Color color = Color::kRed;
  Motion motion = Motion::kLeft;
  Background background = Background::kBlack;
  float cx = 16.0f, cy = 16.0f;
  float size = 5.0f;  // circle radius, square half-side, triangle half-height
  float speed = 1.0f;
  bool mention_background = false;

  std::string caption() const;
  // Center and size at frame t under the motion.
  void at_frame(int t, float* cx_t, float* cy_t, float* size_t_) const;
};

// The shape's bounding box must stay half a pixel inside the frame for every
// rendered frame; violations raise ConfigError.
void check_bounds(const SceneSpec& spec, int frames, int resolution);

struct Clip {
  nn::Tensor frames;  // [T,3,H,W], values in [-1,1]
  std::string caption;
  int class_id = -1;
};

// Applies small start jitter (position, size, speed) from rng, validates the
// jittered motion, and renders with 4x4 supersampling per pixel.
Clip synthesize_clip(const SceneSpec& spec, int frames, int resolution,
                     Rng& rng);

// A dataset class fixes the discrete scene attributes; per-clip variation
// comes only from synthesis jitter.
struct ClassSpec {
  Shape shape = Shape::kCircle;
  Color color = Color::kRed;
  Motion motion = Motion::kLeft;
  Background background = Background::kBlack;
};

// Base scene for a class: geometry chosen so the motion (plus jitter slack)
// fits the frame for the stored clip length at any resolution.
SceneSpec class_scene(const ClassSpec& cls, int resolution, int frames);

struct DatasetConfig {
  int resolution = 32;
  int clips_per_class = 100;
  int stored_frames = 16;
  uint64_t seed = 1;
  bool mention_background = false;
  std::vector<ClassSpec> classes;

  static DatasetConfig toy3();  // 3 classes x 100 clips, 32x32
  void validate() const;
};

struct ClipEntry {
  std::string id;
  std::string caption;
  int class_id = 0;
  int frame_count = 0;
  std::string file;  // archive directory, relative to the dataset root
};

struct Manifest {
  int resolution = 0;
  int stored_frames = 0;
  uint64_t seed = 0;
  std::vector<std::string> class_captions;
  std::vector<ClipEntry> clips;
};

// Renders every clip (deterministic per-clip rng streams derived from the
// seed), writes the archives and manifest.json under out_dir.
Manifest build_dataset(const DatasetConfig& cfg, const std::string& out_dir);

void save_clip(const Clip& clip, const std::string& path);
Clip load_clip(const std::string& path);

struct Dataset {
  Manifest manifest;
  std::vector<Clip> clips;  // same order as manifest.clips
};

// Loads the manifest and every clip, verifying ids, payload integrity, and
// that stored shapes match the manifest.
Dataset load_dataset(const std::string& dir);

struct Sampled {
  nn::Tensor clips;  // [B,T,3,H,W]
  std::vector<text::Sentence> sentences;
  std::vector<int> class_ids;
};

// One clip draw per row, then a random contiguous window of `frames` frames
// (per-row draw order: clip index, then window start). Clips shorter than
// the window are redrawn; if none fits, DataError.
Sampled sample_batch_at(const Dataset& ds, int batch_size, int frames,
                        Rng& rng);
// Draws one frame count uniformly from [frame_min, frame_max] for the whole
// batch, then samples as above.
Sampled sample_batch(const Dataset& ds, int batch_size, int frame_min,
                     int frame_max, Rng& rng);

// Writes frame_<i>.png (zero-padded to 4 digits) for human inspection.
// Quantization to 8 bits moves values by at most 1/255.
void export_frames_png(const Clip& clip, const std::string& dir);

}  // namespace lpgan::toy
