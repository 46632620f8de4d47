#pragma once

#include <Eigen/Dense>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "lpgan/discriminator.hpp"
#include "lpgan/text_encoder.hpp"
#include "lpgan/toy_data.hpp"
#include "lpgan/training.hpp"

namespace lpgan::eval {

using nn::Ctx;
using nn::Tape;
using nn::Tensor;
using nn::Var;

// Produces clips [B,T,3,H,W] for a batch of sentences. Bound to
// Trainer::sample_videos in production; tests substitute stubs.
using GenerateFn =
    std::function<Tensor(const std::vector<text::Sentence>&, int frames, Rng&)>;

// ---- Gaussian feature statistics and Frechet distance ----

// Mean and covariance of a feature set, double precision. The covariance is
// the unbiased sample estimate, explicitly symmetrized, with 1e-6 added to
// the diagonal so downstream square roots stay stable.
struct GaussianStats {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
  int64_t count = 0;
};

// features [N,d], N >= 2.
GaussianStats gaussian_stats(const Tensor& features);

// ||mu_a - mu_b||^2 + tr(Ca + Cb - 2(Ca^1/2 Cb Ca^1/2)^1/2), computed from
// eigendecompositions of symmetric matrices. Eigenvalues below -1e-6 raise
// NumericError; smaller negatives are clamped to zero. Asymmetric
// covariances are a caller bug and raise ConfigError.
double frechet_distance(const GaussianStats& a, const GaussianStats& b);

struct IntraFid {
  std::map<int, double> per_class;
  double mean = 0;
};

// Per-class Frechet distance on class-restricted feature sets, plus the
// unweighted mean. A class missing from either side, or with fewer than 2
// samples on either side, is skipped with a stderr warning and excluded
// from the mean.
IntraFid intra_class_fid(const std::map<int, Tensor>& real,
                         const std::map<int, Tensor>& fake);

// ---- Inception score ----

struct IsResult {
  double mean = 0;
  double std_dev = 0;
};

// probs [N,K], rows on the simplex. exp(E KL(p(y|x) || p(y))) per split;
// mean and std over splits. Needs at least 2 rows per split.
IsResult inception_score(const Tensor& probs, int splits = 1);

// ---- eval classifier ----

struct ClassifierConfig {
  int frame_h = 32, frame_w = 32;
  int base_channels = 16;
  int feature_dim = 256;
  int num_classes = 3;
  int epochs = 40;  // cap; training stops early at target_accuracy
  int batch_size = 16;
  int frame_min = 5, frame_max = 9;  // training window lengths
  float lr = 1e-3f;
  float target_accuracy = 0.95f;
  uint64_t seed = 1;

  void validate() const;
  nlohmann::json echo() const;
};

// Small 3D-CNN video classifier standing in for a pretrained backbone.
// Halving blocks down to 4x4, global mean, a feature layer of
// feature_dim units, then class logits. Frozen after training; every
// public evaluation runs in eval mode and is bitwise deterministic.
class EvalClassifier {
 public:
  explicit EvalClassifier(ClassifierConfig cfg);

  Tensor logits(const Tensor& clips) const;    // [B,K]
  Tensor probs(const Tensor& clips) const;     // softmax rows
  Tensor features(const Tensor& clips) const;  // [B,feature_dim]
  std::vector<int> predict(const Tensor& clips) const;

  // Fraction of clips (full stored length) predicted correctly.
  double accuracy_on(const toy::Dataset& ds) const;

  const ClassifierConfig& config() const { return cfg_; }
  nn::ParameterStore& params() { return ps_; }
  const nn::ParameterStore& params() const { return ps_; }
  double train_accuracy() const { return train_acc_; }

  // clips [B,T,3,H,W] on the tape; logits out, features via out param.
  Var forward(const Ctx& ctx, Tape& t, Var clips, Var* feats_out) const;

 private:
  friend EvalClassifier train_eval_classifier(const toy::Dataset&,
                                              ClassifierConfig);
  friend EvalClassifier load_classifier(const std::string&);
  ClassifierConfig cfg_;
  nn::ParameterStore ps_;
  std::vector<disc::DownBlock3d> blocks_;
  nn::Dense feat_fc_, cls_fc_;
  double train_acc_ = 0;
};

// Cross-entropy training on random clip windows until training accuracy
// reaches the target or the epoch cap. Final accuracy at or below twice
// chance raises EvalUnreliableError: metrics computed with such a
// classifier would be noise.
EvalClassifier train_eval_classifier(const toy::Dataset& ds,
                                     ClassifierConfig cfg);

void save_classifier(const EvalClassifier& c, const std::string& dir);
EvalClassifier load_classifier(const std::string& dir);

// ---- retrieval network ----

struct RetrievalConfig {
  int frame_h = 32, frame_w = 32;
  int base_channels = 16;
  int embed_dim = 128;    // shared video/sentence space
  int sent_hidden = 256;  // hidden width of the sentence head
  int frame_min = 5, frame_max = 9;
  float margin = 0.2f;
  int epochs = 40;
  int batch_size = 16;
  float lr = 1e-3f;
  float target_top1 = 0.60f;
  uint64_t seed = 1;

  void validate() const;
  nlohmann::json echo() const;
};

// Video and sentence encoders into one embedding space; similarity is the
// dot product of L2-normalized outputs.
class RetrievalNet {
 public:
  RetrievalNet(RetrievalConfig cfg, int d_raw);

  Tensor encode_videos(const Tensor& clips) const;  // [B,embed_dim], unit rows
  Tensor encode_sentences(const std::vector<text::Sentence>& sentences,
                          const text::EmbeddingProvider& provider) const;

  // Top-1 accuracy of matching each clip to its own class caption.
  double top1_on(const toy::Dataset& ds,
                 const text::EmbeddingProvider& provider) const;

  const RetrievalConfig& config() const { return cfg_; }
  int raw_dim() const { return d_raw_; }
  nn::ParameterStore& params() { return ps_; }
  const nn::ParameterStore& params() const { return ps_; }
  double train_top1() const { return train_top1_; }

  Var video_tower(const Ctx& ctx, Tape& t, Var clips) const;
  Var sentence_tower(const Ctx& ctx, Tape& t, Var raw) const;

 private:
  friend RetrievalNet train_retrieval_net(const toy::Dataset&,
                                          const text::EmbeddingProvider&,
                                          RetrievalConfig);
  friend RetrievalNet load_retrieval(const std::string&);
  RetrievalConfig cfg_;
  int d_raw_;
  nn::ParameterStore ps_;
  std::vector<disc::DownBlock3d> vblocks_;
  nn::Dense video_fc_, sent_fc1_, sent_fc2_;
  double train_top1_ = 0;
};

// Triplet hinge over an in-batch similarity matrix: for every ordered pair
// (i, j) with different captions, [margin - sim_ii + sim_ij]+, averaged.
// `valid` is 1 for pairs that count, 0 for the diagonal and same-caption
// pairs (identical sentences make gradient-free constant terms).
Var retrieval_hinge_loss(Var video_embs, Var sent_embs, float margin,
                         const Tensor& valid);

// Hinge-ranking training with in-batch negatives until top-1 retrieval
// against the class captions reaches the target or the epoch cap.
RetrievalNet train_retrieval_net(const toy::Dataset& ds,
                                 const text::EmbeddingProvider& provider,
                                 RetrievalConfig cfg);

void save_retrieval(const RetrievalNet& r, const std::string& dir);
RetrievalNet load_retrieval(const std::string& dir);

// ---- sentence perturbation and R-precision ----

// Sorted unique tokens over all captions in the dataset.
std::vector<std::string> caption_vocab(const toy::Dataset& ds);

// Up to `count` distinct variants of s, each either dropping one random
// non-first token or replacing one token with a different vocabulary word.
// Never returns the input itself; at least one variant as long as the
// vocabulary allows any replacement.
std::vector<text::Sentence> perturb_sentence(const text::Sentence& s,
                                             const std::vector<std::string>& vocab,
                                             int count, Rng& rng);

struct Pool {
  std::vector<text::Sentence> sentences;
  std::vector<char> related;  // parallel to sentences
  int related_count = 0;
};

struct PoolConfig {
  int size = 100;
  int related_min = 6, related_max = 12;  // related includes the query
};

// The query plus its perturbations form the related set; distractors are
// other captions and their perturbations. Exactly cfg.size sentences, all
// distinct by normalized key.
Pool build_pool(const text::Sentence& query,
                const std::vector<text::Sentence>& other_captions,
                const std::vector<std::string>& vocab, const PoolConfig& cfg,
                Rng& rng);

// scores[i] ranks pool entry i (higher = closer); r/R over the top R.
double r_precision_from_scores(const std::vector<double>& scores,
                               const std::vector<char>& related);

struct RPrecision {
  double mean = 0;
  std::vector<double> per_query;
};

// For each query: build a pool, generate one clip from the query sentence,
// rank the pool by cosine against the clip embedding, score r/R.
RPrecision r_precision(const GenerateFn& generate, const RetrievalNet& net,
                       const text::EmbeddingProvider& provider,
                       const std::vector<text::Sentence>& queries,
                       const std::vector<text::Sentence>& all_captions,
                       const std::vector<std::string>& vocab,
                       const PoolConfig& cfg, int frames, Rng& rng);

struct Baseline {
  double mean = 0;
  double std_dev = 0;
};

// Monte-Carlo distribution of the mean R-precision a random scorer earns
// on pools of this size with these per-query related counts.
Baseline mc_random_baseline(const std::vector<int>& related_counts,
                            int pool_size, int trials, Rng& rng);

// ---- command accuracy ----

// Generates `per_class` clips from each class caption and reports the
// fraction the classifier assigns back to the prompted class.
double command_accuracy(const GenerateFn& generate, const EvalClassifier& cls,
                        const std::vector<text::Sentence>& class_captions,
                        int per_class, int frame_min, int frame_max, Rng& rng);

// ---- smooth transition ----

// Clips generated from evenly spaced convex combinations of the two
// sentence codes, fixed noise: index 0 is sentence a, the last index is
// sentence b. Each entry is one clip [T,3,H,W].
std::vector<Tensor> smooth_transition(const train::Trainer& trainer,
                                      const text::Sentence& a,
                                      const text::Sentence& b, int steps,
                                      int frames, uint64_t seed);

// ---- full evaluation ----

struct EvalConfig {
  ClassifierConfig classifier;
  RetrievalConfig retrieval;
  PoolConfig pool;
  int fid_samples = 100;  // per side
  int is_splits = 1;
  int queries_per_class = 10;
  int frame_min = 5, frame_max = 9;
  int gen_batch = 10;
  uint64_t seed = 1;

  void validate() const;
  nlohmann::json echo() const;
};

struct EvalReport {
  double is_mean = 0, is_std = 0;
  double fid_all = 0;
  std::map<int, double> fid_intra;
  double fid_intra_mean = 0;
  double r_precision = 0;
  double accuracy = 0;
  bool unreliable = false;
  std::string unreliable_reason;
  nlohmann::json config_echo;
  uint64_t seed = 0;

  nlohmann::json to_json() const;
};

// Trains (or reuses) the eval networks, draws balanced real and generated
// feature sets, and computes every reported metric. A classifier that
// fails its sanity bar yields a flagged report with the classifier-based
// metrics omitted instead of an exception.
EvalReport run_evaluation(const train::Trainer& trainer,
                          const toy::Dataset& ds, EvalConfig cfg,
                          const EvalClassifier* classifier = nullptr,
                          const RetrievalNet* retrieval = nullptr);

}  // namespace lpgan::eval
