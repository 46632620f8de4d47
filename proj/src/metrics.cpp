#include "lpgan/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <iostream>
#include <limits>
#include <memory>
#include <numeric>
#include <set>
#include <sstream>

#include "lpgan/serialize.hpp"

namespace lpgan::eval {
namespace {

constexpr double kCovReg = 1e-6;

// Negative eigenvalues far outside fp noise mean the input was not a
// covariance; small dips are clamped.
Eigen::VectorXd checked_eigs(const Eigen::VectorXd& raw, const char* who) {
  const double span = std::max(1.0, raw.cwiseAbs().maxCoeff());
  Eigen::VectorXd out = raw;
  for (int i = 0; i < out.size(); ++i) {
    if (out(i) < -1e-6 * span)
      throw NumericError(std::string(who) + ": eigenvalue " +
                         std::to_string(out(i)) + " is negative");
    if (out(i) < 0) out(i) = 0;
  }
  return out;
}

void check_cov(const eval::GaussianStats& s, const char* who) {
  const int d = static_cast<int>(s.mean.size());
  if (d == 0 || s.cov.rows() != d || s.cov.cols() != d)
    throw ConfigError(std::string(who) + ": stats dimensions inconsistent");
  if ((s.cov - s.cov.transpose()).cwiseAbs().maxCoeff() > 1e-9)
    throw ConfigError(std::string(who) + ": covariance not symmetric");
}

int halvings_to_4(int extent, const char* who) {
  int n = 0, e = extent;
  while (e > 4 && e % 2 == 0) {
    e /= 2;
    ++n;
  }
  if (e != 4)
    throw ConfigError(std::string(who) + ": frame extent " +
                      std::to_string(extent) + " cannot halve down to 4");
  return n;
}

void require_clips(const Tensor& clips, int h, int w, const char* who) {
  if (clips.rank() != 5 || clips.dim(2) != 3 || clips.dim(3) != h ||
      clips.dim(4) != w)
    throw ShapeError(std::string(who) + ": want clips [B,T,3," +
                     std::to_string(h) + "," + std::to_string(w) + "], got " +
                     nn::shape_str(clips.shape));
}

// Row softmax in double precision.
Tensor softmax_rows(const Tensor& logits) {
  const int n = logits.dim(0), k = logits.dim(1);
  Tensor out({n, k});
  for (int i = 0; i < n; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (int j = 0; j < k; ++j) mx = std::max(mx, double(logits[i * k + j]));
    double z = 0;
    std::vector<double> e(static_cast<size_t>(k));
    for (int j = 0; j < k; ++j) {
      e[j] = std::exp(double(logits[i * k + j]) - mx);
      z += e[j];
    }
    for (int j = 0; j < k; ++j)
      out[i * k + j] = static_cast<float>(e[j] / z);
  }
  return out;
}

std::string join_tokens(const std::vector<std::string>& tokens) {
  std::string s;
  for (size_t i = 0; i < tokens.size(); ++i) {
    if (i) s += ' ';
    s += tokens[i];
  }
  return s;
}

void copy_params_from(nn::ParameterStore& ps, const nta::Archive& a) {
  for (const auto& p : ps.all()) {
    const auto it = a.tensors.find(p->name);
    if (it == a.tensors.end())
      throw DataError("checkpoint is missing tensor " + p->name);
    if (it->second.shape != p->value.shape)
      throw DataError("checkpoint tensor " + p->name + " has shape " +
                      nn::shape_str(it->second.shape) + ", want " +
                      nn::shape_str(p->value.shape));
    p->value = it->second;
  }
  if (a.tensors.size() != ps.all().size())
    throw DataError("checkpoint holds " + std::to_string(a.tensors.size()) +
                    " tensors, model has " + std::to_string(ps.all().size()));
}

std::vector<nn::Parameter*> raw_params(nn::ParameterStore& ps) {
  std::vector<nn::Parameter*> out;
  for (const auto& p : ps.all()) out.push_back(p.get());
  return out;
}

int json_int(const nlohmann::json& j, const char* key) {
  if (!j.contains(key) || !j[key].is_number())
    throw DataError(std::string("checkpoint config lacks ") + key);
  return j[key].get<int>();
}

float json_float(const nlohmann::json& j, const char* key) {
  if (!j.contains(key) || !j[key].is_number())
    throw DataError(std::string("checkpoint config lacks ") + key);
  return j[key].get<float>();
}

nlohmann::json num_or_null(double v) {
  if (std::isfinite(v)) return v;
  return nullptr;
}

}  // namespace

// ---- Gaussian statistics and Frechet distance ----

GaussianStats gaussian_stats(const Tensor& features) {
  if (features.rank() != 2)
    throw ConfigError("gaussian_stats: want [N,d], got " +
                      nn::shape_str(features.shape));
  const int n = features.dim(0), d = features.dim(1);
  if (n < 2) throw ConfigError("gaussian_stats: need at least 2 rows");

  Eigen::MatrixXd X(n, d);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) X(i, j) = features[int64_t(i) * d + j];

  GaussianStats s;
  s.count = n;
  s.mean = X.colwise().mean();
  const Eigen::MatrixXd C = X.rowwise() - s.mean.transpose();
  s.cov = C.transpose() * C / double(n - 1);
  s.cov = 0.5 * (s.cov + s.cov.transpose()).eval();
  s.cov.diagonal().array() += kCovReg;
  return s;
}

double frechet_distance(const GaussianStats& a, const GaussianStats& b) {
  check_cov(a, "frechet_distance");
  check_cov(b, "frechet_distance");
  if (a.mean.size() != b.mean.size())
    throw ConfigError("frechet_distance: dimension mismatch " +
                      std::to_string(a.mean.size()) + " vs " +
                      std::to_string(b.mean.size()));

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es1(a.cov);
  if (es1.info() != Eigen::Success)
    throw NumericError("frechet_distance: eigendecomposition failed");
  const Eigen::VectorXd l1 = checked_eigs(es1.eigenvalues(), "frechet_distance");
  const Eigen::MatrixXd S = es1.eigenvectors() *
                            l1.cwiseSqrt().asDiagonal() *
                            es1.eigenvectors().transpose();

  Eigen::MatrixXd M = S * b.cov * S;
  M = 0.5 * (M + M.transpose()).eval();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es2(M);
  if (es2.info() != Eigen::Success)
    throw NumericError("frechet_distance: eigendecomposition failed");
  const Eigen::VectorXd l2 = checked_eigs(es2.eigenvalues(), "frechet_distance");

  const double fid = (a.mean - b.mean).squaredNorm() + a.cov.trace() +
                     b.cov.trace() - 2.0 * l2.cwiseSqrt().sum();
  return std::max(0.0, fid);
}

IntraFid intra_class_fid(const std::map<int, Tensor>& real,
                         const std::map<int, Tensor>& fake) {
  std::set<int> classes;
  for (const auto& [c, t] : real) classes.insert(c);
  for (const auto& [c, t] : fake) classes.insert(c);

  IntraFid out;
  double sum = 0;
  for (int c : classes) {
    const auto r = real.find(c);
    const auto f = fake.find(c);
    if (r == real.end() || f == fake.end() || r->second.dim(0) < 2 ||
        f->second.dim(0) < 2) {
      std::cerr << "intra_class_fid: class " << c
                << " lacks samples on one side, skipping\n";
      continue;
    }
    const double d =
        frechet_distance(gaussian_stats(r->second), gaussian_stats(f->second));
    out.per_class[c] = d;
    sum += d;
  }
  if (out.per_class.empty())
    throw ConfigError("intra_class_fid: no class has enough samples");
  out.mean = sum / double(out.per_class.size());
  return out;
}

// ---- inception score ----

IsResult inception_score(const Tensor& probs, int splits) {
  if (probs.rank() != 2)
    throw ConfigError("inception_score: want [N,K], got " +
                      nn::shape_str(probs.shape));
  const int n = probs.dim(0), k = probs.dim(1);
  if (splits < 1) throw ConfigError("inception_score: splits must be >= 1");
  for (int s = 0; s < splits; ++s) {
    const int lo = s * n / splits, hi = (s + 1) * n / splits;
    if (hi - lo < 2)
      throw ConfigError("inception_score: split of " +
                        std::to_string(hi - lo) + " rows, need at least 2");
  }
  for (int i = 0; i < n; ++i) {
    double sum = 0;
    for (int j = 0; j < k; ++j) {
      const double p = probs[int64_t(i) * k + j];
      if (p < -1e-6)
        throw ConfigError("inception_score: negative probability");
      sum += p;
    }
    if (std::fabs(sum - 1.0) > 1e-3)
      throw ConfigError("inception_score: row " + std::to_string(i) +
                        " sums to " + std::to_string(sum));
  }

  std::vector<double> parts;
  for (int s = 0; s < splits; ++s) {
    const int lo = s * n / splits, hi = (s + 1) * n / splits;
    std::vector<double> marg(static_cast<size_t>(k), 0.0);
    for (int i = lo; i < hi; ++i)
      for (int j = 0; j < k; ++j) marg[j] += probs[int64_t(i) * k + j];
    for (int j = 0; j < k; ++j) marg[j] /= double(hi - lo);
    double kl = 0;
    for (int i = lo; i < hi; ++i)
      for (int j = 0; j < k; ++j) {
        const double p = probs[int64_t(i) * k + j];
        if (p > 0) kl += p * std::log(p / marg[j]);
      }
    parts.push_back(std::exp(kl / double(hi - lo)));
  }

  IsResult r;
  for (double v : parts) r.mean += v;
  r.mean /= double(parts.size());
  double var = 0;
  for (double v : parts) var += (v - r.mean) * (v - r.mean);
  r.std_dev = std::sqrt(var / double(parts.size()));
  return r;
}

// ---- eval classifier ----

void ClassifierConfig::validate() const {
  if (frame_h != frame_w)
    throw ConfigError("classifier: frames must be square");
  halvings_to_4(frame_h, "classifier");
  if (base_channels < 1 || feature_dim < 1)
    throw ConfigError("classifier: widths must be positive");
  if (num_classes < 2) throw ConfigError("classifier: need >= 2 classes");
  if (batch_size < 2) throw ConfigError("classifier: batch size must be >= 2");
  if (frame_min < 2 || frame_max < frame_min)
    throw ConfigError("classifier: bad frame range");
  if (epochs < 0) throw ConfigError("classifier: epochs must be >= 0");
  if (!(lr > 0)) throw ConfigError("classifier: lr must be positive");
  if (!(target_accuracy > 0) || target_accuracy > 1)
    throw ConfigError("classifier: target accuracy must be in (0,1]");
}

nlohmann::json ClassifierConfig::echo() const {
  return {{"frame_h", frame_h},
          {"frame_w", frame_w},
          {"base_channels", base_channels},
          {"feature_dim", feature_dim},
          {"num_classes", num_classes},
          {"epochs", epochs},
          {"batch_size", batch_size},
          {"frame_min", frame_min},
          {"frame_max", frame_max},
          {"lr", lr},
          {"target_accuracy", target_accuracy},
          {"seed", seed}};
}

namespace {

ClassifierConfig classifier_cfg_from_json(const nlohmann::json& j) {
  ClassifierConfig c;
  c.frame_h = json_int(j, "frame_h");
  c.frame_w = json_int(j, "frame_w");
  c.base_channels = json_int(j, "base_channels");
  c.feature_dim = json_int(j, "feature_dim");
  c.num_classes = json_int(j, "num_classes");
  c.epochs = json_int(j, "epochs");
  c.batch_size = json_int(j, "batch_size");
  c.frame_min = json_int(j, "frame_min");
  c.frame_max = json_int(j, "frame_max");
  c.lr = json_float(j, "lr");
  c.target_accuracy = json_float(j, "target_accuracy");
  c.seed = j.value("seed", uint64_t{1});
  return c;
}

}  // namespace

EvalClassifier::EvalClassifier(ClassifierConfig cfg) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(Rng::derive(cfg_.seed, 0xC1A55));
  const int n = halvings_to_4(cfg_.frame_h, "classifier");
  int in_c = 3;
  for (int i = 0; i < n; ++i) {
    const int out_c = cfg_.base_channels << i;
    blocks_.emplace_back(ps_, "cls.block" + std::to_string(i), in_c, out_c,
                         rng, false);
    in_c = out_c;
  }
  feat_fc_ = nn::Dense(ps_, "cls.feat", in_c, cfg_.feature_dim, rng, true,
                       false);
  cls_fc_ = nn::Dense(ps_, "cls.logits", cfg_.feature_dim, cfg_.num_classes,
                      rng, true, false);
}

Var EvalClassifier::forward(const Ctx& ctx, Tape& t, Var clips,
                            Var* feats_out) const {
  require_clips(clips.val(), cfg_.frame_h, cfg_.frame_w, "classifier");
  Var x = nn::permute(clips, {0, 2, 1, 3, 4});  // [B,3,T,H,W]
  for (const auto& b : blocks_) x = b.forward(ctx, x);
  Var v = nn::global_mean_tail(x);
  Var f = nn::leaky_relu(feat_fc_.forward(ctx, v), 0.2f);
  if (feats_out) *feats_out = f;
  (void)t;
  return cls_fc_.forward(ctx, f);
}

Tensor EvalClassifier::logits(const Tensor& clips) const {
  Tape t(false);
  Ctx ctx;
  ctx.training = false;
  Var out = forward(ctx, t, nn::constant(t, clips), nullptr);
  return out.val();
}

Tensor EvalClassifier::probs(const Tensor& clips) const {
  return softmax_rows(logits(clips));
}

Tensor EvalClassifier::features(const Tensor& clips) const {
  Tape t(false);
  Ctx ctx;
  ctx.training = false;
  Var f{};
  forward(ctx, t, nn::constant(t, clips), &f);
  return f.val();
}

std::vector<int> EvalClassifier::predict(const Tensor& clips) const {
  const Tensor lg = logits(clips);
  const int n = lg.dim(0), k = lg.dim(1);
  std::vector<int> out(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    int arg = 0;
    for (int j = 1; j < k; ++j)
      if (lg[i * k + j] > lg[i * k + arg]) arg = j;
    out[static_cast<size_t>(i)] = arg;
  }
  return out;
}

namespace {

// Accuracy over fixed-start windows of each clip; start < 0 means the full
// stored length.
double window_accuracy(const EvalClassifier& cls, const toy::Dataset& ds,
                       int T, int start) {
  const int n = static_cast<int>(ds.clips.size());
  if (n == 0) throw DataError("classifier accuracy: empty dataset");
  const int h = cls.config().frame_h, w = cls.config().frame_w;
  const int64_t frame = int64_t(3) * h * w;
  int correct = 0;
  for (int lo = 0; lo < n; lo += 16) {
    const int b = std::min(16, n - lo);
    Tensor clips({b, T, 3, h, w});
    for (int i = 0; i < b; ++i)
      std::copy_n(ds.clips[static_cast<size_t>(lo + i)].frames.ptr() +
                      int64_t(std::max(0, start)) * frame,
                  frame * T, clips.ptr() + int64_t(i) * frame * T);
    const std::vector<int> pred = cls.predict(clips);
    for (int i = 0; i < b; ++i)
      if (pred[static_cast<size_t>(i)] ==
          ds.clips[static_cast<size_t>(lo + i)].class_id)
        ++correct;
  }
  return double(correct) / double(n);
}

}  // namespace

double EvalClassifier::accuracy_on(const toy::Dataset& ds) const {
  return window_accuracy(*this, ds, ds.manifest.stored_frames, -1);
}

EvalClassifier train_eval_classifier(const toy::Dataset& ds,
                                     ClassifierConfig cfg) {
  cfg.validate();
  if (ds.clips.empty()) throw DataError("classifier training: empty dataset");
  for (const auto& c : ds.clips)
    if (c.class_id < 0 || c.class_id >= cfg.num_classes)
      throw ConfigError("classifier training: clip class " +
                        std::to_string(c.class_id) + " outside [0," +
                        std::to_string(cfg.num_classes) + ")");
  if (ds.manifest.resolution != cfg.frame_h)
    throw ConfigError("classifier training: dataset resolution " +
                      std::to_string(ds.manifest.resolution) +
                      " != configured " + std::to_string(cfg.frame_h));

  EvalClassifier c(cfg);
  Rng rng(Rng::derive(cfg.seed, 0xC15E));
  train::Adam opt(raw_params(c.ps_), cfg.lr, 0.9f, 0.999f, 1e-8f);
  const int steps_per_epoch = std::max<int>(
      1, (static_cast<int>(ds.clips.size()) + cfg.batch_size - 1) /
             cfg.batch_size);

  double acc = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (int s = 0; s < steps_per_epoch; ++s) {
      const toy::Sampled smp = toy::sample_batch(ds, cfg.batch_size,
                                                 cfg.frame_min, cfg.frame_max,
                                                 rng);
      Tape t;
      Ctx ctx;
      opt.zero_grad();
      Var logits = c.forward(ctx, t, nn::constant(t, smp.clips), nullptr);
      Var loss = nn::softmax_cross_entropy(logits, smp.class_ids);
      t.backward(loss.id);
      opt.step();
    }
    acc = c.accuracy_on(ds);
    if (acc < cfg.target_accuracy) continue;
    // The classifier judges clips as short as frame_min, so the stop rule
    // also demands the target on the shortest windows (both clip ends).
    const int stored = ds.manifest.stored_frames;
    if (window_accuracy(c, ds, cfg.frame_min, 0) >= cfg.target_accuracy &&
        window_accuracy(c, ds, cfg.frame_min, stored - cfg.frame_min) >=
            cfg.target_accuracy)
      break;
  }
  c.train_acc_ = acc;

  const double chance_bar = 2.0 / double(cfg.num_classes);
  if (acc <= chance_bar)
    throw EvalUnreliableError(
        "classifier stuck at accuracy " + std::to_string(acc) +
        " (bar " + std::to_string(chance_bar) + ")");
  return c;
}

void save_classifier(const EvalClassifier& c, const std::string& dir) {
  nta::Archive a;
  a.config = c.config().echo();
  a.config["train_accuracy"] = c.train_accuracy();
  a.config["kind"] = "classifier";
  for (const auto& p : c.params().all()) a.tensors[p->name] = p->value;
  nta::save_archive(dir, a);
}

EvalClassifier load_classifier(const std::string& dir) {
  const nta::Archive a = nta::load_archive(dir);
  if (!a.config.is_object() || a.config.value("kind", "") != "classifier")
    throw DataError("not a classifier checkpoint: " + dir);
  EvalClassifier c(classifier_cfg_from_json(a.config));
  copy_params_from(c.ps_, a);
  c.train_acc_ = a.config.value("train_accuracy", 0.0);
  return c;
}

// ---- retrieval network ----

void RetrievalConfig::validate() const {
  if (frame_h != frame_w) throw ConfigError("retrieval: frames must be square");
  halvings_to_4(frame_h, "retrieval");
  if (base_channels < 1 || embed_dim < 1 || sent_hidden < 1)
    throw ConfigError("retrieval: widths must be positive");
  if (frame_min < 2 || frame_max < frame_min)
    throw ConfigError("retrieval: bad frame range");
  if (!(margin > 0)) throw ConfigError("retrieval: margin must be positive");
  if (batch_size < 2) throw ConfigError("retrieval: batch size must be >= 2");
  if (epochs < 0) throw ConfigError("retrieval: epochs must be >= 0");
  if (!(lr > 0)) throw ConfigError("retrieval: lr must be positive");
  if (!(target_top1 > 0) || target_top1 > 1)
    throw ConfigError("retrieval: target top-1 must be in (0,1]");
}

nlohmann::json RetrievalConfig::echo() const {
  return {{"frame_h", frame_h},
          {"frame_w", frame_w},
          {"base_channels", base_channels},
          {"embed_dim", embed_dim},
          {"sent_hidden", sent_hidden},
          {"frame_min", frame_min},
          {"frame_max", frame_max},
          {"margin", margin},
          {"epochs", epochs},
          {"batch_size", batch_size},
          {"lr", lr},
          {"target_top1", target_top1},
          {"seed", seed}};
}

namespace {

RetrievalConfig retrieval_cfg_from_json(const nlohmann::json& j) {
  RetrievalConfig c;
  c.frame_h = json_int(j, "frame_h");
  c.frame_w = json_int(j, "frame_w");
  c.base_channels = json_int(j, "base_channels");
  c.embed_dim = json_int(j, "embed_dim");
  c.sent_hidden = json_int(j, "sent_hidden");
  c.frame_min = json_int(j, "frame_min");
  c.frame_max = json_int(j, "frame_max");
  c.margin = json_float(j, "margin");
  c.epochs = json_int(j, "epochs");
  c.batch_size = json_int(j, "batch_size");
  c.lr = json_float(j, "lr");
  c.target_top1 = json_float(j, "target_top1");
  c.seed = j.value("seed", uint64_t{1});
  return c;
}

}  // namespace

RetrievalNet::RetrievalNet(RetrievalConfig cfg, int d_raw)
    : cfg_(cfg), d_raw_(d_raw) {
  cfg_.validate();
  if (d_raw_ < 1) throw ConfigError("retrieval: raw embedding dim must be >= 1");
  Rng rng(Rng::derive(cfg_.seed, 0x8E78));
  const int n = halvings_to_4(cfg_.frame_h, "retrieval");
  int in_c = 3;
  for (int i = 0; i < n; ++i) {
    const int out_c = cfg_.base_channels << i;
    vblocks_.emplace_back(ps_, "ret.block" + std::to_string(i), in_c, out_c,
                          rng, false);
    in_c = out_c;
  }
  video_fc_ = nn::Dense(ps_, "ret.video", in_c, cfg_.embed_dim, rng, true,
                        false);
  sent_fc1_ = nn::Dense(ps_, "ret.sent1", d_raw_, cfg_.sent_hidden, rng, true,
                        false);
  sent_fc2_ = nn::Dense(ps_, "ret.sent2", cfg_.sent_hidden, cfg_.embed_dim,
                        rng, true, false);
}

Var RetrievalNet::video_tower(const Ctx& ctx, Tape& t, Var clips) const {
  require_clips(clips.val(), cfg_.frame_h, cfg_.frame_w, "retrieval");
  Var x = nn::permute(clips, {0, 2, 1, 3, 4});
  for (const auto& b : vblocks_) x = b.forward(ctx, x);
  Var v = nn::global_mean_tail(x);
  (void)t;
  return nn::l2_normalize_rows(video_fc_.forward(ctx, v));
}

Var RetrievalNet::sentence_tower(const Ctx& ctx, Tape& t, Var raw) const {
  (void)t;
  Var h = nn::leaky_relu(sent_fc1_.forward(ctx, raw), 0.2f);
  return nn::l2_normalize_rows(sent_fc2_.forward(ctx, h));
}

Tensor RetrievalNet::encode_videos(const Tensor& clips) const {
  Tape t(false);
  Ctx ctx;
  ctx.training = false;
  return video_tower(ctx, t, nn::constant(t, clips)).val();
}

Tensor RetrievalNet::encode_sentences(
    const std::vector<text::Sentence>& sentences,
    const text::EmbeddingProvider& provider) const {
  if (sentences.empty()) throw ConfigError("retrieval: no sentences");
  if (provider.dim() != d_raw_)
    throw ConfigError("retrieval: provider width " +
                      std::to_string(provider.dim()) + " != network width " +
                      std::to_string(d_raw_));
  Tensor raw({static_cast<int>(sentences.size()), d_raw_});
  for (size_t i = 0; i < sentences.size(); ++i) {
    const Tensor e = provider.embed(sentences[i]);
    std::copy_n(e.ptr(), d_raw_, raw.ptr() + int64_t(i) * d_raw_);
  }
  Tape t(false);
  Ctx ctx;
  ctx.training = false;
  return sentence_tower(ctx, t, nn::constant(t, std::move(raw))).val();
}

double RetrievalNet::top1_on(const toy::Dataset& ds,
                             const text::EmbeddingProvider& provider) const {
  std::vector<text::Sentence> caps;
  for (const auto& c : ds.manifest.class_captions)
    caps.push_back(text::Sentence::parse(c));
  const Tensor se = encode_sentences(caps, provider);
  const int k = se.dim(0), d = se.dim(1);

  const int n = static_cast<int>(ds.clips.size());
  if (n == 0) throw DataError("retrieval top-1: empty dataset");
  const int T = ds.manifest.stored_frames;
  const int64_t row = int64_t(T) * 3 * cfg_.frame_h * cfg_.frame_w;
  int correct = 0;
  for (int lo = 0; lo < n; lo += 16) {
    const int b = std::min(16, n - lo);
    Tensor clips({b, T, 3, cfg_.frame_h, cfg_.frame_w});
    for (int i = 0; i < b; ++i)
      std::copy_n(ds.clips[static_cast<size_t>(lo + i)].frames.ptr(), row,
                  clips.ptr() + int64_t(i) * row);
    const Tensor ve = encode_videos(clips);
    for (int i = 0; i < b; ++i) {
      int arg = 0;
      double best = -2;
      for (int c = 0; c < k; ++c) {
        double dot = 0;
        for (int j = 0; j < d; ++j) dot += ve[i * d + j] * se[c * d + j];
        if (dot > best) {
          best = dot;
          arg = c;
        }
      }
      if (arg == ds.clips[static_cast<size_t>(lo + i)].class_id) ++correct;
    }
  }
  return double(correct) / double(n);
}

Var retrieval_hinge_loss(Var video_embs, Var sent_embs, float margin,
                         const Tensor& valid) {
  const Tensor& v = video_embs.val();
  const Tensor& s = sent_embs.val();
  if (v.rank() != 2 || s.rank() != 2 || v.shape != s.shape)
    throw ShapeError("hinge loss: want matching [B,d] embeddings");
  const int B = v.dim(0);
  if (valid.shape != std::vector<int>({B, B}))
    throw ShapeError("hinge loss: valid mask must be [B,B]");
  double count = 0;
  for (int i = 0; i < B; ++i) {
    if (valid[i * B + i] != 0.0f)
      throw ConfigError("hinge loss: diagonal must be masked out");
    for (int j = 0; j < B; ++j) count += valid[i * B + j];
  }
  if (count <= 0) throw ConfigError("hinge loss: no valid pairs");

  Tape& t = *video_embs.t;
  Var sim = nn::matmul(video_embs, nn::permute(sent_embs, {1, 0}));  // [B,B]
  Var delta = nn::row_diag_sub(sim);                 // sim_ij - sim_ii
  Var hinge = nn::relu(nn::add_scalar(delta, margin));
  Var masked = nn::mul(hinge, nn::constant(t, valid));
  return nn::scale(nn::mean_all(masked),
                   float(double(B) * double(B) / count));
}

RetrievalNet train_retrieval_net(const toy::Dataset& ds,
                                 const text::EmbeddingProvider& provider,
                                 RetrievalConfig cfg) {
  cfg.validate();
  if (ds.clips.empty()) throw DataError("retrieval training: empty dataset");
  if (ds.manifest.resolution != cfg.frame_h)
    throw ConfigError("retrieval training: dataset resolution " +
                      std::to_string(ds.manifest.resolution) +
                      " != configured " + std::to_string(cfg.frame_h));

  RetrievalNet net(cfg, provider.dim());
  Rng rng(Rng::derive(cfg.seed, 0x8E7E));
  train::Adam opt(raw_params(net.ps_), cfg.lr, 0.9f, 0.999f, 1e-8f);
  const int steps_per_epoch = std::max<int>(
      1, (static_cast<int>(ds.clips.size()) + cfg.batch_size - 1) /
             cfg.batch_size);

  double top1 = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (int s = 0; s < steps_per_epoch; ++s) {
      const toy::Sampled smp = toy::sample_batch(ds, cfg.batch_size,
                                                 cfg.frame_min, cfg.frame_max,
                                                 rng);
      const int B = cfg.batch_size;
      Tensor valid({B, B});
      double pairs = 0;
      for (int i = 0; i < B; ++i)
        for (int j = 0; j < B; ++j) {
          const bool distinct =
              i != j && smp.sentences[static_cast<size_t>(i)].key() !=
                            smp.sentences[static_cast<size_t>(j)].key();
          valid[i * B + j] = distinct ? 1.0f : 0.0f;
          pairs += distinct;
        }
      if (pairs <= 0) continue;  // a single-caption batch carries no signal

      Tensor raw({B, net.d_raw_});
      for (int i = 0; i < B; ++i) {
        const Tensor e = provider.embed(smp.sentences[static_cast<size_t>(i)]);
        std::copy_n(e.ptr(), net.d_raw_, raw.ptr() + int64_t(i) * net.d_raw_);
      }

      Tape t;
      Ctx ctx;
      opt.zero_grad();
      Var ve = net.video_tower(ctx, t, nn::constant(t, smp.clips));
      Var se = net.sentence_tower(ctx, t, nn::constant(t, std::move(raw)));
      Var loss = retrieval_hinge_loss(ve, se, cfg.margin, valid);
      t.backward(loss.id);
      opt.step();
    }
    top1 = net.top1_on(ds, provider);
    if (top1 >= cfg.target_top1) break;
  }
  net.train_top1_ = top1;
  return net;
}

void save_retrieval(const RetrievalNet& r, const std::string& dir) {
  nta::Archive a;
  a.config = r.config().echo();
  a.config["d_raw"] = r.raw_dim();
  a.config["train_top1"] = r.train_top1();
  a.config["kind"] = "retrieval";
  for (const auto& p : r.params().all()) a.tensors[p->name] = p->value;
  nta::save_archive(dir, a);
}

RetrievalNet load_retrieval(const std::string& dir) {
  const nta::Archive a = nta::load_archive(dir);
  if (!a.config.is_object() || a.config.value("kind", "") != "retrieval")
    throw DataError("not a retrieval checkpoint: " + dir);
  RetrievalNet net(retrieval_cfg_from_json(a.config),
                   json_int(a.config, "d_raw"));
  copy_params_from(net.ps_, a);
  net.train_top1_ = a.config.value("train_top1", 0.0);
  return net;
}

// ---- sentence perturbation and R-precision ----

std::vector<std::string> caption_vocab(const toy::Dataset& ds) {
  std::set<std::string> words;
  for (const auto& c : ds.manifest.class_captions)
    for (const auto& w : text::Sentence::parse(c).tokens) words.insert(w);
  for (const auto& e : ds.manifest.clips)
    for (const auto& w : text::Sentence::parse(e.caption).tokens)
      words.insert(w);
  return {words.begin(), words.end()};
}

std::vector<text::Sentence> perturb_sentence(
    const text::Sentence& s, const std::vector<std::string>& vocab, int count,
    Rng& rng) {
  if (count < 1) throw ConfigError("perturb: count must be >= 1");
  if (vocab.empty()) throw ConfigError("perturb: empty vocabulary");
  const int n = static_cast<int>(s.tokens.size());
  std::set<std::string> seen{s.key()};
  std::vector<text::Sentence> out;
  const int max_attempts = count * 50 + 200;
  for (int attempt = 0;
       attempt < max_attempts && static_cast<int>(out.size()) < count;
       ++attempt) {
    std::vector<std::string> tokens = s.tokens;
    const bool drop = n > 1 && rng.uniform() < 0.5;
    if (drop) {
      tokens.erase(tokens.begin() + rng.uniform_int(1, n - 1));
    } else {
      const int pos = rng.uniform_int(0, n - 1);
      const std::string& w =
          vocab[static_cast<size_t>(rng.uniform_int(
              0, static_cast<int>(vocab.size()) - 1))];
      if (w == tokens[static_cast<size_t>(pos)]) continue;
      tokens[static_cast<size_t>(pos)] = w;
    }
    text::Sentence v = text::Sentence::parse(join_tokens(tokens));
    if (seen.insert(v.key()).second) out.push_back(std::move(v));
  }
  return out;
}

Pool build_pool(const text::Sentence& query,
                const std::vector<text::Sentence>& other_captions,
                const std::vector<std::string>& vocab, const PoolConfig& cfg,
                Rng& rng) {
  if (cfg.size < 2 || cfg.related_min < 2 ||
      cfg.related_max < cfg.related_min || cfg.related_max >= cfg.size)
    throw ConfigError("pool: inconsistent size configuration");
  if (other_captions.empty())
    throw ConfigError("pool: need at least one distractor caption");

  const int want_related = rng.uniform_int(cfg.related_min, cfg.related_max);
  std::vector<text::Sentence> related_set{query};
  for (auto& v : perturb_sentence(query, vocab, want_related - 1, rng))
    related_set.push_back(std::move(v));
  if (static_cast<int>(related_set.size()) < cfg.related_min)
    throw ConfigError("pool: vocabulary too small to build " +
                      std::to_string(cfg.related_min) + " related sentences");

  Pool pool;
  std::set<std::string> keys;
  for (auto& v : related_set) {
    keys.insert(v.key());
    pool.sentences.push_back(std::move(v));
    pool.related.push_back(1);
  }
  pool.related_count = static_cast<int>(pool.sentences.size());

  auto add = [&](text::Sentence v) {
    if (static_cast<int>(pool.sentences.size()) >= cfg.size) return;
    if (!keys.insert(v.key()).second) return;
    pool.sentences.push_back(std::move(v));
    pool.related.push_back(0);
  };
  for (const auto& c : other_captions) add(c);
  for (int round = 0;
       round < 50 && static_cast<int>(pool.sentences.size()) < cfg.size;
       ++round)
    for (const auto& c : other_captions)
      for (auto& v : perturb_sentence(c, vocab, 8, rng)) add(std::move(v));

  if (static_cast<int>(pool.sentences.size()) != cfg.size)
    throw ConfigError("pool: could only assemble " +
                      std::to_string(pool.sentences.size()) + " of " +
                      std::to_string(cfg.size) + " distinct sentences");
  return pool;
}

double r_precision_from_scores(const std::vector<double>& scores,
                               const std::vector<char>& related) {
  if (scores.size() != related.size())
    throw ConfigError("r-precision: scores and flags differ in length");
  const int n = static_cast<int>(scores.size());
  int R = 0;
  for (char c : related) R += c != 0;
  if (R < 1 || R > n) throw ConfigError("r-precision: bad related count");

  std::vector<int> idx(static_cast<size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
    return scores[static_cast<size_t>(a)] > scores[static_cast<size_t>(b)];
  });
  int r = 0;
  for (int i = 0; i < R; ++i) r += related[static_cast<size_t>(idx[i])] != 0;
  return double(r) / double(R);
}

RPrecision r_precision(const GenerateFn& generate, const RetrievalNet& net,
                       const text::EmbeddingProvider& provider,
                       const std::vector<text::Sentence>& queries,
                       const std::vector<text::Sentence>& all_captions,
                       const std::vector<std::string>& vocab,
                       const PoolConfig& cfg, int frames, Rng& rng) {
  if (cfg.size != 100)
    throw ConfigError("r-precision: the protocol pins the pool at 100, got " +
                      std::to_string(cfg.size));
  if (queries.empty()) throw ConfigError("r-precision: no queries");

  RPrecision out;
  const int d = net.config().embed_dim;
  for (const auto& q : queries) {
    std::vector<text::Sentence> others;
    for (const auto& c : all_captions)
      if (c.key() != q.key()) others.push_back(c);
    const Pool pool = build_pool(q, others, vocab, cfg, rng);

    // Generators expect >= 2 rows (batch statistics); the duplicate row is
    // discarded.
    const Tensor clips = generate({q, q}, frames, rng);
    const int64_t row = clips.size() / clips.dim(0);
    Tensor one({1, clips.dim(1), clips.dim(2), clips.dim(3), clips.dim(4)});
    std::copy_n(clips.ptr(), row, one.ptr());
    const Tensor ve = net.encode_videos(one);
    const Tensor se = net.encode_sentences(pool.sentences, provider);

    std::vector<double> scores(pool.sentences.size());
    for (size_t i = 0; i < pool.sentences.size(); ++i) {
      double dot = 0;
      for (int j = 0; j < d; ++j) dot += ve[j] * se[int64_t(i) * d + j];
      scores[i] = dot;
    }
    out.per_query.push_back(r_precision_from_scores(scores, pool.related));
  }
  for (double v : out.per_query) out.mean += v;
  out.mean /= double(out.per_query.size());
  return out;
}

Baseline mc_random_baseline(const std::vector<int>& related_counts,
                            int pool_size, int trials, Rng& rng) {
  if (related_counts.empty())
    throw ConfigError("baseline: no related counts");
  if (trials < 2) throw ConfigError("baseline: need at least 2 trials");
  for (int r : related_counts)
    if (r < 1 || r > pool_size)
      throw ConfigError("baseline: related count out of range");

  std::vector<int> arr(static_cast<size_t>(pool_size));
  std::vector<double> means;
  means.reserve(static_cast<size_t>(trials));
  for (int trial = 0; trial < trials; ++trial) {
    double acc = 0;
    for (int R : related_counts) {
      // Partial Fisher-Yates; the first R slots are a uniform R-subset.
      // Treating indices < R as the related ones loses no generality.
      std::iota(arr.begin(), arr.end(), 0);
      int hits = 0;
      for (int i = 0; i < R; ++i) {
        const int j = rng.uniform_int(i, pool_size - 1);
        std::swap(arr[static_cast<size_t>(i)], arr[static_cast<size_t>(j)]);
        if (arr[static_cast<size_t>(i)] < R) ++hits;
      }
      acc += double(hits) / double(R);
    }
    means.push_back(acc / double(related_counts.size()));
  }

  Baseline b;
  for (double v : means) b.mean += v;
  b.mean /= double(means.size());
  double var = 0;
  for (double v : means) var += (v - b.mean) * (v - b.mean);
  b.std_dev = std::sqrt(var / double(means.size()));
  return b;
}

// ---- command accuracy ----

double command_accuracy(const GenerateFn& generate, const EvalClassifier& cls,
                        const std::vector<text::Sentence>& class_captions,
                        int per_class, int frame_min, int frame_max, Rng& rng) {
  if (class_captions.size() < 2)
    throw ConfigError("command accuracy: need >= 2 class captions");
  if (per_class < 1)
    throw ConfigError("command accuracy: per_class must be >= 1");
  if (frame_min < 2 || frame_max < frame_min)
    throw ConfigError("command accuracy: bad frame range");

  int correct = 0, total = 0;
  for (size_t k = 0; k < class_captions.size(); ++k) {
    int remaining = per_class;
    while (remaining > 0) {
      const int chunk = std::min(remaining, 8);
      const int gen_rows = std::max(2, chunk);
      const int frames = rng.uniform_int(frame_min, frame_max);
      const Tensor clips =
          generate(std::vector<text::Sentence>(static_cast<size_t>(gen_rows),
                                               class_captions[k]),
                   frames, rng);
      const std::vector<int> pred = cls.predict(clips);
      for (int i = 0; i < chunk; ++i) {
        if (pred[static_cast<size_t>(i)] == static_cast<int>(k)) ++correct;
        ++total;
      }
      remaining -= chunk;
    }
  }
  return double(correct) / double(total);
}

// ---- smooth transition ----

std::vector<Tensor> smooth_transition(const train::Trainer& trainer,
                                      const text::Sentence& a,
                                      const text::Sentence& b, int steps,
                                      int frames, uint64_t seed) {
  if (steps < 2) throw ConfigError("transition: need at least 2 steps");
  Ctx ctx;
  ctx.training = false;

  // Codes are taken from a duplicated two-row batch so they match what
  // single-sentence sampling computes (the text head normalizes over the
  // batch it sees).
  const auto code_of = [&](const text::Sentence& s) {
    Tape t;
    Var es = text::encode_batch(ctx, t, trainer.provider(), {s, s},
                                trainer.text_head());
    const Tensor& v = es.val();
    return std::vector<float>(v.ptr(), v.ptr() + v.dim(1));
  };
  const std::vector<float> ea = code_of(a);
  const std::vector<float> eb = code_of(b);
  const int d = static_cast<int>(ea.size());
  const int H = trainer.generator().config().out_h();
  const int W = trainer.generator().config().out_w();

  std::vector<Tensor> out;
  for (int i = 0; i < steps; ++i) {
    std::vector<float> code(static_cast<size_t>(d));
    if (i == 0) {
      code = ea;
    } else if (i == steps - 1) {
      code = eb;
    } else {
      const float wa = 1.0f - float(i) / float(steps - 1);
      for (int j = 0; j < d; ++j)
        code[static_cast<size_t>(j)] = wa * ea[static_cast<size_t>(j)] +
                                       (1.0f - wa) * eb[static_cast<size_t>(j)];
    }
    Tensor es({2, d});
    std::copy_n(code.data(), d, es.ptr());
    std::copy_n(code.data(), d, es.ptr() + d);

    Tape t;
    Rng rng(seed);  // same noise at every blend step
    const gen::Generator::Out g = trainer.generator().generate(
        ctx, t, trainer.latent_path(), nn::constant(t, std::move(es)), frames,
        rng);
    const Tensor& video = g.video.val();  // [2,T,3,H,W]
    Tensor clip({frames, 3, H, W});
    std::copy_n(video.ptr(), clip.size(), clip.ptr());
    out.push_back(std::move(clip));
  }
  return out;
}

// ---- full evaluation ----

void EvalConfig::validate() const {
  classifier.validate();
  retrieval.validate();
  if (pool.size < 2) throw ConfigError("eval: bad pool size");
  if (fid_samples < 2) throw ConfigError("eval: need >= 2 samples per side");
  if (is_splits < 1) throw ConfigError("eval: splits must be >= 1");
  if (queries_per_class < 1)
    throw ConfigError("eval: queries per class must be >= 1");
  if (frame_min < 2 || frame_max < frame_min)
    throw ConfigError("eval: bad frame range");
  if (gen_batch < 2) throw ConfigError("eval: generation batch must be >= 2");
}

nlohmann::json EvalConfig::echo() const {
  return {{"classifier", classifier.echo()},
          {"retrieval", retrieval.echo()},
          {"pool",
           {{"size", pool.size},
            {"related_min", pool.related_min},
            {"related_max", pool.related_max}}},
          {"fid_samples", fid_samples},
          {"is_splits", is_splits},
          {"queries_per_class", queries_per_class},
          {"frame_min", frame_min},
          {"frame_max", frame_max},
          {"gen_batch", gen_batch},
          {"seed", seed}};
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json j;
  j["is_mean"] = num_or_null(is_mean);
  j["is_std"] = num_or_null(is_std);
  j["fid_all"] = num_or_null(fid_all);
  if (unreliable) {
    j["fid_intra"] = nullptr;
    j["fid_intra_mean"] = nullptr;
  } else {
    nlohmann::json intra = nlohmann::json::object();
    for (const auto& [c, v] : fid_intra) intra[std::to_string(c)] = v;
    j["fid_intra"] = intra;
    j["fid_intra_mean"] = num_or_null(fid_intra_mean);
  }
  j["r_precision"] = num_or_null(r_precision);
  j["accuracy"] = num_or_null(accuracy);
  j["unreliable"] = unreliable;
  j["unreliable_reason"] = unreliable_reason;
  j["config"] = config_echo;
  j["seed"] = seed;
  return j;
}

EvalReport run_evaluation(const train::Trainer& trainer,
                          const toy::Dataset& ds, EvalConfig cfg,
                          const EvalClassifier* classifier,
                          const RetrievalNet* retrieval) {
  const int K = static_cast<int>(ds.manifest.class_captions.size());
  if (K < 2) throw DataError("evaluation: dataset has fewer than 2 classes");
  cfg.classifier.num_classes = K;
  cfg.validate();
  const int res = ds.manifest.resolution;
  if (trainer.generator().config().out_h() != res ||
      trainer.generator().config().out_w() != res)
    throw ConfigError("evaluation: generator emits " +
                      std::to_string(trainer.generator().config().out_h()) +
                      "-pixel frames, dataset stores " + std::to_string(res));
  if (ds.manifest.stored_frames < cfg.frame_max)
    throw ConfigError("evaluation: stored clips shorter than frame_max");

  const double nan = std::numeric_limits<double>::quiet_NaN();
  EvalReport rep;
  rep.seed = cfg.seed;
  rep.config_echo = cfg.echo();

  // Evaluation networks: reuse what was passed in, train the rest.
  std::unique_ptr<EvalClassifier> owned_cls;
  if (classifier) {
    if (classifier->config().frame_h != res ||
        classifier->config().num_classes != K)
      throw ConfigError("evaluation: classifier does not match the dataset");
  } else {
    try {
      owned_cls = std::make_unique<EvalClassifier>(
          train_eval_classifier(ds, cfg.classifier));
      classifier = owned_cls.get();
    } catch (const EvalUnreliableError& e) {
      rep.unreliable = true;
      rep.unreliable_reason = e.what();
    }
  }
  std::unique_ptr<RetrievalNet> owned_ret;
  if (retrieval) {
    if (retrieval->config().frame_h != res)
      throw ConfigError("evaluation: retrieval net does not match the dataset");
  } else {
    owned_ret = std::make_unique<RetrievalNet>(
        train_retrieval_net(ds, trainer.provider(), cfg.retrieval));
    retrieval = owned_ret.get();
  }

  std::vector<text::Sentence> caps;
  for (const auto& c : ds.manifest.class_captions)
    caps.push_back(text::Sentence::parse(c));

  const GenerateFn gen = [&trainer](const std::vector<text::Sentence>& ss,
                                    int frames, Rng& rng) {
    return trainer.sample_videos(ss, frames, rng);
  };

  if (!rep.unreliable) {
    const int fd = classifier->config().feature_dim;
    const int N = cfg.fid_samples;

    // Generated side: class-balanced prompts in gen_batch chunks, each chunk
    // at one clip length. Features, posteriors and predictions all come from
    // the same clips.
    Rng rng_gen(Rng::derive(cfg.seed, 0xFA7E));
    Tensor fake_feats({N, fd});
    Tensor fake_probs({N, K});
    std::map<int, std::vector<int>> fake_rows, real_rows;
    int match = 0;
    for (int lo = 0; lo < N; lo += cfg.gen_batch) {
      const int chunk = std::min(cfg.gen_batch, N - lo);
      const int rows = std::max(2, chunk);
      const int T = rng_gen.uniform_int(cfg.frame_min, cfg.frame_max);
      std::vector<text::Sentence> prompts;
      std::vector<int> want;
      for (int i = 0; i < rows; ++i) {
        const int cls = (lo + std::min(i, chunk - 1)) % K;
        prompts.push_back(caps[static_cast<size_t>(cls)]);
        want.push_back(cls);
      }
      const Tensor clips = gen(prompts, T, rng_gen);
      const Tensor feats = classifier->features(clips);
      const Tensor probs = classifier->probs(clips);
      const std::vector<int> pred = classifier->predict(clips);
      for (int i = 0; i < chunk; ++i) {
        std::copy_n(feats.ptr() + int64_t(i) * fd, fd,
                    fake_feats.ptr() + int64_t(lo + i) * fd);
        std::copy_n(probs.ptr() + int64_t(i) * K, K,
                    fake_probs.ptr() + int64_t(lo + i) * K);
        fake_rows[want[static_cast<size_t>(i)]].push_back(lo + i);
        if (pred[static_cast<size_t>(i)] == want[static_cast<size_t>(i)])
          ++match;
      }
    }

    // Real side: class-balanced random windows at the same length
    // distribution.
    Rng rng_real(Rng::derive(cfg.seed, 0x8EA1));
    std::map<int, std::vector<int>> by_class;
    for (size_t i = 0; i < ds.clips.size(); ++i)
      by_class[ds.clips[i].class_id].push_back(static_cast<int>(i));
    for (int c = 0; c < K; ++c)
      if (by_class[c].empty())
        throw DataError("evaluation: class " + std::to_string(c) +
                        " has no clips");
    Tensor real_feats({N, fd});
    for (int lo = 0; lo < N; lo += cfg.gen_batch) {
      const int chunk = std::min(cfg.gen_batch, N - lo);
      const int T = rng_real.uniform_int(cfg.frame_min, cfg.frame_max);
      Tensor clips({chunk, T, 3, res, res});
      const int64_t frame = int64_t(3) * res * res;
      for (int i = 0; i < chunk; ++i) {
        const int cls = (lo + i) % K;
        const std::vector<int>& pool = by_class[cls];
        const int pick = pool[static_cast<size_t>(
            rng_real.uniform_int(0, static_cast<int>(pool.size()) - 1))];
        const toy::Clip& clip = ds.clips[static_cast<size_t>(pick)];
        const int start =
            rng_real.uniform_int(0, ds.manifest.stored_frames - T);
        std::copy_n(clip.frames.ptr() + int64_t(start) * frame, frame * T,
                    clips.ptr() + int64_t(i) * frame * T);
        real_rows[cls].push_back(lo + i);
      }
      const Tensor feats = classifier->features(clips);
      for (int i = 0; i < chunk; ++i)
        std::copy_n(feats.ptr() + int64_t(i) * fd, fd,
                    real_feats.ptr() + int64_t(lo + i) * fd);
    }

    rep.fid_all = frechet_distance(gaussian_stats(real_feats),
                                   gaussian_stats(fake_feats));
    const auto gather = [&](const Tensor& all,
                            const std::vector<int>& rows) {
      Tensor t({static_cast<int>(rows.size()), fd});
      for (size_t i = 0; i < rows.size(); ++i)
        std::copy_n(all.ptr() + int64_t(rows[i]) * fd, fd,
                    t.ptr() + int64_t(i) * fd);
      return t;
    };
    std::map<int, Tensor> real_by, fake_by;
    for (int c = 0; c < K; ++c) {
      real_by[c] = gather(real_feats, real_rows[c]);
      fake_by[c] = gather(fake_feats, fake_rows[c]);
    }
    const IntraFid intra = intra_class_fid(real_by, fake_by);
    rep.fid_intra = intra.per_class;
    rep.fid_intra_mean = intra.mean;

    const IsResult is = inception_score(fake_probs, cfg.is_splits);
    rep.is_mean = is.mean;
    rep.is_std = is.std_dev;
    rep.accuracy = double(match) / double(N);
  } else {
    rep.fid_all = nan;
    rep.fid_intra_mean = nan;
    rep.is_mean = nan;
    rep.is_std = nan;
    rep.accuracy = nan;
  }

  if (retrieval) {
    Rng rng_rp(Rng::derive(cfg.seed, 0x8975));
    const std::vector<std::string> vocab = caption_vocab(ds);
    std::vector<text::Sentence> queries;
    for (int rep_i = 0; rep_i < cfg.queries_per_class; ++rep_i)
      for (const auto& c : caps) queries.push_back(c);
    const int T = rng_rp.uniform_int(cfg.frame_min, cfg.frame_max);
    rep.r_precision = r_precision(gen, *retrieval, trainer.provider(), queries,
                                  caps, vocab, cfg.pool, T, rng_rp)
                          .mean;
  } else {
    rep.r_precision = nan;
  }
  return rep;
}

}  // namespace lpgan::eval
