#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "json.hpp"
#include "lpgan/metrics.hpp"

using namespace lpgan;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& leaf) {
  fs::path p = fs::temp_directory_path() / "lpgan_metric_tests" / leaf;
  fs::remove_all(p);
  fs::create_directories(p.parent_path());
  return p;
}

// ---- independent eigen route for the Frechet dual check ----
// Cyclic Jacobi sweeps with accumulated rotations; no shared code with the
// production solver.
void jacobi(std::vector<double>& A, std::vector<double>& V, int n) {
  for (int i = 0; i < n * n; ++i) V[i] = 0;
  for (int i = 0; i < n; ++i) V[i * n + i] = 1;
  for (int sweep = 0; sweep < 200; ++sweep) {
    double off = 0;
    for (int p = 0; p < n; ++p)
      for (int q = p + 1; q < n; ++q) off += A[p * n + q] * A[p * n + q];
    if (off < 1e-26) break;
    for (int p = 0; p < n; ++p)
      for (int q = p + 1; q < n; ++q) {
        const double apq = A[p * n + q];
        if (std::fabs(apq) < 1e-300) continue;
        const double theta = (A[q * n + q] - A[p * n + p]) / (2 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) /
                         (std::fabs(theta) + std::sqrt(1 + theta * theta));
        const double c = 1 / std::sqrt(1 + t * t), s = t * c;
        for (int k = 0; k < n; ++k) {
          const double akp = A[k * n + p], akq = A[k * n + q];
          A[k * n + p] = c * akp - s * akq;
          A[k * n + q] = s * akp + c * akq;
        }
        for (int k = 0; k < n; ++k) {
          const double apk = A[p * n + k], aqk = A[q * n + k];
          A[p * n + k] = c * apk - s * aqk;
          A[q * n + k] = s * apk + c * aqk;
        }
        for (int k = 0; k < n; ++k) {
          const double vkp = V[k * n + p], vkq = V[k * n + q];
          V[k * n + p] = c * vkp - s * vkq;
          V[k * n + q] = s * vkp + c * vkq;
        }
      }
  }
}

std::vector<double> sym_sqrt(const std::vector<double>& C, int n) {
  std::vector<double> A = C, V(n * n);
  jacobi(A, V, n);
  std::vector<double> S(n * n, 0.0);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      double s = 0;
      for (int k = 0; k < n; ++k)
        s += V[i * n + k] * std::sqrt(std::max(0.0, A[k * n + k])) *
             V[j * n + k];
      S[i * n + j] = s;
    }
  return S;
}

double fid_oracle(const eval::GaussianStats& a, const eval::GaussianStats& b) {
  const int n = static_cast<int>(a.mean.size());
  std::vector<double> C1(n * n), C2(n * n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      C1[i * n + j] = a.cov(i, j);
      C2[i * n + j] = b.cov(i, j);
    }
  const std::vector<double> S = sym_sqrt(C1, n);
  std::vector<double> M(n * n, 0.0);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      double s = 0;
      for (int k = 0; k < n; ++k)
        for (int l = 0; l < n; ++l)
          s += S[i * n + k] * C2[k * n + l] * S[l * n + j];
      M[i * n + j] = s;
    }
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) {
      const double m = 0.5 * (M[i * n + j] + M[j * n + i]);
      M[i * n + j] = M[j * n + i] = m;
    }
  std::vector<double> V(n * n);
  jacobi(M, V, n);
  double tr_sqrt = 0, tr1 = 0, tr2 = 0, mu = 0;
  for (int i = 0; i < n; ++i) {
    tr_sqrt += std::sqrt(std::max(0.0, M[i * n + i]));
    tr1 += C1[i * n + i];
    tr2 += C2[i * n + i];
    const double d = a.mean(i) - b.mean(i);
    mu += d * d;
  }
  return mu + tr1 + tr2 - 2 * tr_sqrt;
}

nn::Tensor rand_feats(int n, int d, Rng& rng, float scale = 1.0f) {
  nn::Tensor t({n, d});
  for (auto& v : t.data) v = rng.normal_f() * scale;
  return t;
}

eval::GaussianStats psd_stats(int d, Rng& rng) {
  eval::GaussianStats s;
  s.mean = Eigen::VectorXd(d);
  for (int i = 0; i < d; ++i) s.mean(i) = rng.normal_f();
  Eigen::MatrixXd G(d, d);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) G(i, j) = rng.normal_f();
  s.cov = G * G.transpose() / d + 0.1 * Eigen::MatrixXd::Identity(d, d);
  s.count = 32;
  return s;
}

// Dataset shared by the network-training cases; built once.
const std::string& tiny_dataset_dir() {
  static std::string dir = [] {
    toy::DatasetConfig cfg;
    cfg.resolution = 16;
    cfg.clips_per_class = 8;
    cfg.stored_frames = 10;
    cfg.seed = 3;
    cfg.classes = toy::DatasetConfig::toy3().classes;
    const fs::path p = fresh_dir("tiny_ds");
    toy::build_dataset(cfg, p.string());
    return p.string();
  }();
  return dir;
}

const toy::Dataset& tiny_dataset() {
  static toy::Dataset ds = toy::load_dataset(tiny_dataset_dir());
  return ds;
}

eval::ClassifierConfig tiny_cls_cfg() {
  eval::ClassifierConfig c;
  c.frame_h = c.frame_w = 16;
  c.base_channels = 8;
  c.feature_dim = 32;
  c.num_classes = 3;
  c.epochs = 60;
  c.batch_size = 12;
  c.frame_min = 3;
  c.frame_max = 5;
  c.seed = 11;
  return c;
}

eval::RetrievalConfig tiny_ret_cfg() {
  eval::RetrievalConfig c;
  c.frame_h = c.frame_w = 16;
  c.base_channels = 8;
  c.embed_dim = 24;
  c.sent_hidden = 64;
  c.frame_min = 3;
  c.frame_max = 5;
  c.epochs = 60;
  c.batch_size = 12;
  c.seed = 13;
  return c;
}

const eval::EvalClassifier& tiny_classifier() {
  static eval::EvalClassifier c =
      eval::train_eval_classifier(tiny_dataset(), tiny_cls_cfg());
  return c;
}

const eval::RetrievalNet& tiny_retrieval() {
  static eval::RetrievalNet r = eval::train_retrieval_net(
      tiny_dataset(), text::HashedProvider(), tiny_ret_cfg());
  return r;
}

// Mirrors the micro model used by the training tests: 16x16 frames so the
// tiny dataset can feed it.
train::Trainer micro_trainer() {
  gen::GeneratorConfig g;
  g.seed_channels = 8;
  g.block_count = 2;
  g.channel_schedule = {8, 8};
  g.noise_dim = 4;
  g.latent_dim = 12;
  disc::DiscriminatorConfig d;
  d.frame_h = d.frame_w = 16;
  d.base_channels = 4;
  d.feature_dim = 8;
  d.text_dim = 8;
  train::TrainConfig t = train::TrainConfig::dflt();
  t.batch_size = 2;
  t.frame_min = 2;
  t.frame_max = 3;
  t.seed = 7;
  return train::Trainer(t, g, d);
}

std::vector<text::Sentence> class_sentences(const toy::Dataset& ds) {
  std::vector<text::Sentence> out;
  for (const auto& c : ds.manifest.class_captions)
    out.push_back(text::Sentence::parse(c));
  return out;
}

}  // namespace

TEST_CASE("gaussian stats hand case") {
  nn::Tensor x({3, 2});
  x.data = {1, 2, 3, 4, 5, 12};
  const eval::GaussianStats s = eval::gaussian_stats(x);
  CHECK(s.count == 3);
  CHECK(s.mean(0) == doctest::Approx(3.0).epsilon(1e-12));
  CHECK(s.mean(1) == doctest::Approx(6.0).epsilon(1e-12));
  // Unbiased covariance of the centered rows plus the 1e-6 diagonal bump.
  CHECK(s.cov(0, 0) == doctest::Approx(4.0 + 1e-6).epsilon(1e-9));
  CHECK(s.cov(0, 1) == doctest::Approx(10.0).epsilon(1e-9));
  CHECK(s.cov(1, 0) == doctest::Approx(10.0).epsilon(1e-9));
  CHECK(s.cov(1, 1) == doctest::Approx(28.0 + 1e-6).epsilon(1e-9));

  nn::Tensor one({1, 2});
  CHECK_THROWS_AS(eval::gaussian_stats(one), ConfigError);

  // Row order must not matter beyond rounding.
  Rng rng(4);
  nn::Tensor big = rand_feats(40, 5, rng);
  nn::Tensor shuf = big;
  for (int i = 39; i > 0; --i) {
    const int j = static_cast<int>(rng.uniform_int(0, i));
    for (int k = 0; k < 5; ++k) std::swap(shuf[i * 5 + k], shuf[j * 5 + k]);
  }
  const eval::GaussianStats sa = eval::gaussian_stats(big);
  const eval::GaussianStats sb = eval::gaussian_stats(shuf);
  CHECK((sa.mean - sb.mean).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((sa.cov - sb.cov).cwiseAbs().maxCoeff() < 1e-10);
  CHECK((sa.cov - sa.cov.transpose()).cwiseAbs().maxCoeff() < 1e-8);
}

TEST_CASE("frechet distance closed forms") {
  Rng rng(7);

  SUBCASE("identical stats give zero") {
    const eval::GaussianStats s = eval::gaussian_stats(rand_feats(40, 6, rng));
    const double f = eval::frechet_distance(s, s);
    CHECK(f >= 0.0);
    CHECK(f <= 1e-3);
  }
  SUBCASE("unit mean shift with equal covariance gives one") {
    eval::GaussianStats a = psd_stats(5, rng);
    eval::GaussianStats b = a;
    b.mean(2) += 1.0;
    CHECK(eval::frechet_distance(a, b) == doctest::Approx(1.0).epsilon(1e-3));
  }
  SUBCASE("isotropic pair with known trace term") {
    eval::GaussianStats a, b;
    a.mean = Eigen::VectorXd::Zero(2);
    b.mean = Eigen::VectorXd::Zero(2);
    a.cov = Eigen::MatrixXd::Identity(2, 2);
    b.cov = 4.0 * Eigen::MatrixXd::Identity(2, 2);
    a.count = b.count = 8;
    CHECK(eval::frechet_distance(a, b) == doctest::Approx(2.0).epsilon(1e-3));
  }
  SUBCASE("symmetric in its arguments") {
    for (int i = 0; i < 20; ++i) {
      const int d = 2 + static_cast<int>(rng.uniform_int(0, 6));
      const eval::GaussianStats a = psd_stats(d, rng);
      const eval::GaussianStats b = psd_stats(d, rng);
      const double ab = eval::frechet_distance(a, b);
      const double ba = eval::frechet_distance(b, a);
      CHECK(ab >= 0.0);
      CHECK(std::fabs(ab - ba) <= 1e-6);
    }
  }
}

TEST_CASE("frechet distance matches an independent eigen route") {
  Rng rng(21);
  for (int i = 0; i < 20; ++i) {
    const int d = 2 + static_cast<int>(rng.uniform_int(0, 14));
    const eval::GaussianStats a = psd_stats(d, rng);
    const eval::GaussianStats b = psd_stats(d, rng);
    const double got = eval::frechet_distance(a, b);
    const double want = fid_oracle(a, b);
    CHECK(std::fabs(got - want) <= 1e-4 * std::max(1.0, std::fabs(want)));
  }
}

TEST_CASE("frechet distance input validation") {
  Rng rng(3);
  eval::GaussianStats a = psd_stats(3, rng);

  eval::GaussianStats bad = a;
  bad.cov(0, 1) += 1e-3;  // asymmetric
  CHECK_THROWS_AS(eval::frechet_distance(bad, a), ConfigError);
  CHECK_THROWS_AS(eval::frechet_distance(a, bad), ConfigError);

  eval::GaussianStats neg = a;
  neg.cov = Eigen::MatrixXd::Identity(3, 3);
  neg.cov(0, 0) = -1.0;  // eigenvalue far below the clamp window
  CHECK_THROWS_AS(eval::frechet_distance(neg, a), NumericError);

  eval::GaussianStats other = psd_stats(4, rng);
  CHECK_THROWS_AS(eval::frechet_distance(a, other), ConfigError);
}

TEST_CASE("inception score identities") {
  SUBCASE("uniform posteriors give one") {
    nn::Tensor p({10, 4});
    for (auto& v : p.data) v = 0.25f;
    const eval::IsResult r = eval::inception_score(p);
    CHECK(r.mean == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(r.std_dev == 0.0);
  }
  SUBCASE("perfect balanced one-hot gives the class count") {
    nn::Tensor p({12, 3});
    for (int i = 0; i < 12; ++i) p[i * 3 + i % 3] = 1.0f;
    const eval::IsResult r = eval::inception_score(p);
    CHECK(r.mean == doctest::Approx(3.0).epsilon(1e-6));
  }
  SUBCASE("always within [1, K]") {
    Rng rng(9);
    for (int rep = 0; rep < 20; ++rep) {
      const int n = 4 + static_cast<int>(rng.uniform_int(0, 20));
      const int k = 2 + static_cast<int>(rng.uniform_int(0, 4));
      nn::Tensor p({n, k});
      for (int i = 0; i < n; ++i) {
        float s = 0;
        for (int j = 0; j < k; ++j) {
          p[i * k + j] = rng.uniform_f(0.01f, 1.0f);
          s += p[i * k + j];
        }
        for (int j = 0; j < k; ++j) p[i * k + j] /= s;
      }
      const eval::IsResult r = eval::inception_score(p);
      CHECK(r.mean >= 1.0 - 1e-9);
      CHECK(r.mean <= k + 1e-9);
    }
  }
  SUBCASE("splits match a straight recomputation") {
    Rng rng(17);
    const int n = 13, k = 3, splits = 3;
    nn::Tensor p({n, k});
    for (int i = 0; i < n; ++i) {
      float s = 0;
      for (int j = 0; j < k; ++j) {
        p[i * k + j] = rng.uniform_f(0.05f, 1.0f);
        s += p[i * k + j];
      }
      for (int j = 0; j < k; ++j) p[i * k + j] /= s;
    }
    const eval::IsResult r = eval::inception_score(p, splits);
    std::vector<double> parts;
    for (int s = 0; s < splits; ++s) {
      const int lo = s * n / splits, hi = (s + 1) * n / splits;
      std::vector<double> marg(k, 0.0);
      for (int i = lo; i < hi; ++i)
        for (int j = 0; j < k; ++j) marg[j] += p[i * k + j];
      for (int j = 0; j < k; ++j) marg[j] /= (hi - lo);
      double kl = 0;
      for (int i = lo; i < hi; ++i)
        for (int j = 0; j < k; ++j) {
          const double pij = p[i * k + j];
          if (pij > 0) kl += pij * std::log(pij / marg[j]);
        }
      parts.push_back(std::exp(kl / (hi - lo)));
    }
    double m = 0;
    for (double v : parts) m += v;
    m /= parts.size();
    double var = 0;
    for (double v : parts) var += (v - m) * (v - m);
    const double sd = std::sqrt(var / parts.size());
    CHECK(r.mean == doctest::Approx(m).epsilon(1e-9));
    CHECK(r.std_dev == doctest::Approx(sd).epsilon(1e-9));
  }
  SUBCASE("too few rows rejected") {
    const nn::Tensor p = nn::Tensor::full({1, 3}, 1.0f / 3);
    CHECK_THROWS_AS(eval::inception_score(p), ConfigError);
    const nn::Tensor q = nn::Tensor::full({4, 3}, 1.0f / 3);
    CHECK_THROWS_AS(eval::inception_score(q, 3), ConfigError);
  }
}

TEST_CASE("intra class fid") {
  Rng rng(31);

  SUBCASE("fake equal to real collapses to zero") {
    std::map<int, nn::Tensor> real, fake;
    for (int c = 0; c < 3; ++c) {
      real[c] = rand_feats(20, 4, rng);
      fake[c] = real[c];
    }
    const eval::IntraFid f = eval::intra_class_fid(real, fake);
    REQUIRE(f.per_class.size() == 3);
    for (const auto& [c, v] : f.per_class) CHECK(v <= 1e-3);
    CHECK(f.mean <= 1e-3);
  }
  SUBCASE("mean is the plain average of per-class distances") {
    std::map<int, nn::Tensor> real, fake;
    real[0] = rand_feats(16, 3, rng);
    real[1] = rand_feats(16, 3, rng);
    fake[0] = rand_feats(16, 3, rng, 2.0f);
    fake[1] = rand_feats(16, 3, rng, 0.5f);
    const eval::IntraFid f = eval::intra_class_fid(real, fake);
    const double d0 = eval::frechet_distance(eval::gaussian_stats(real[0]),
                                             eval::gaussian_stats(fake[0]));
    const double d1 = eval::frechet_distance(eval::gaussian_stats(real[1]),
                                             eval::gaussian_stats(fake[1]));
    CHECK(f.per_class.at(0) == doctest::Approx(d0).epsilon(1e-12));
    CHECK(f.per_class.at(1) == doctest::Approx(d1).epsilon(1e-12));
    CHECK(f.mean == doctest::Approx(0.5 * (d0 + d1)).epsilon(1e-12));
  }
  SUBCASE("underpopulated classes are excluded") {
    std::map<int, nn::Tensor> real, fake;
    real[0] = rand_feats(16, 3, rng);
    fake[0] = rand_feats(16, 3, rng);
    real[1] = rand_feats(16, 3, rng);
    fake[1] = rand_feats(1, 3, rng);  // one fake sample only
    real[2] = rand_feats(16, 3, rng); // missing on the fake side entirely
    const eval::IntraFid f = eval::intra_class_fid(real, fake);
    REQUIRE(f.per_class.size() == 1);
    CHECK(f.per_class.count(0) == 1);
    CHECK(f.mean == doctest::Approx(f.per_class.at(0)).epsilon(1e-12));
  }
}

TEST_CASE("classifier shapes and determinism") {
  eval::ClassifierConfig cfg = tiny_cls_cfg();
  eval::EvalClassifier cls(cfg);  // untrained is fine for shape checks
  Rng rng(5);
  nn::Tensor clips({5, 4, 3, 16, 16});
  for (auto& v : clips.data) v = rng.uniform_f(-1.0f, 1.0f);

  const nn::Tensor lg = cls.logits(clips);
  REQUIRE(lg.shape == std::vector<int>({5, 3}));
  const nn::Tensor ft = cls.features(clips);
  REQUIRE(ft.shape == std::vector<int>({5, 32}));

  const nn::Tensor pb = cls.probs(clips);
  REQUIRE(pb.shape == std::vector<int>({5, 3}));
  for (int i = 0; i < 5; ++i) {
    double s = 0;
    for (int j = 0; j < 3; ++j) {
      CHECK(pb[i * 3 + j] >= 0.0f);
      s += pb[i * 3 + j];
    }
    CHECK(std::fabs(s - 1.0) <= 1e-5);
  }

  const std::vector<int> pred = cls.predict(clips);
  REQUIRE(pred.size() == 5);
  for (int i = 0; i < 5; ++i) {
    int arg = 0;
    for (int j = 1; j < 3; ++j)
      if (pb[i * 3 + j] > pb[i * 3 + arg]) arg = j;
    CHECK(pred[i] == arg);
  }

  const nn::Tensor lg2 = cls.logits(clips);
  for (int64_t i = 0; i < lg.size(); ++i) CHECK(lg[i] == lg2[i]);
}

TEST_CASE("classifier training reaches its accuracy bar") {
  const eval::EvalClassifier& cls = tiny_classifier();
  CHECK(cls.train_accuracy() >= 0.95);
  CHECK(cls.accuracy_on(tiny_dataset()) ==
        doctest::Approx(cls.train_accuracy()).epsilon(1e-12));

  // No training at all leaves the net at chance, which must be refused.
  eval::ClassifierConfig c0 = tiny_cls_cfg();
  c0.epochs = 0;
  CHECK_THROWS_AS(eval::train_eval_classifier(tiny_dataset(), c0),
                  EvalUnreliableError);
}

TEST_CASE("classifier save and load round trip") {
  const eval::EvalClassifier& cls = tiny_classifier();
  const fs::path dir = fresh_dir("cls_ckpt");
  eval::save_classifier(cls, dir.string());
  const eval::EvalClassifier back = eval::load_classifier(dir.string());

  CHECK(back.config().feature_dim == cls.config().feature_dim);
  CHECK(back.config().num_classes == cls.config().num_classes);

  Rng rng(8);
  nn::Tensor clips({3, 5, 3, 16, 16});
  for (auto& v : clips.data) v = rng.uniform_f(-1.0f, 1.0f);
  const nn::Tensor a = cls.logits(clips);
  const nn::Tensor b = back.logits(clips);
  for (int64_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);

  std::fstream f(dir / "manifest.json",
                 std::ios::in | std::ios::out | std::ios::binary);
  REQUIRE(f.good());
  f.seekp(0);
  f.write("X", 1);
  f.close();
  CHECK_THROWS_AS(eval::load_classifier(dir.string()), DataError);
}

TEST_CASE("retrieval hinge loss oracle") {
  SUBCASE("perfectly aligned pairs saturate to zero") {
    nn::Tape t;
    nn::Tensor v({2, 2});
    v.data = {1, 0, 0, 1};
    nn::Tensor valid({2, 2});
    valid.data = {0, 1, 1, 0};
    nn::Var loss = eval::retrieval_hinge_loss(nn::constant(t, v),
                                          nn::constant(t, v), 0.2f, valid);
    CHECK(loss.val()[0] == doctest::Approx(0.0).epsilon(1e-7));
  }
  SUBCASE("random case matches a straight recomputation") {
    Rng rng(23);
    const int B = 5, D = 4;
    nn::Tensor v({B, D}), s({B, D});
    for (auto& x : v.data) x = rng.normal_f();
    for (auto& x : s.data) x = rng.normal_f();
    for (int i = 0; i < B; ++i) {  // unit rows, as the towers emit
      double nv = 0, ns = 0;
      for (int j = 0; j < D; ++j) {
        nv += v[i * D + j] * v[i * D + j];
        ns += s[i * D + j] * s[i * D + j];
      }
      for (int j = 0; j < D; ++j) {
        v[i * D + j] /= std::sqrt(nv);
        s[i * D + j] /= std::sqrt(ns);
      }
    }
    nn::Tensor valid({B, B});
    for (int i = 0; i < B; ++i)
      for (int j = 0; j < B; ++j) valid[i * B + j] = i == j ? 0.0f : 1.0f;
    valid[0 * B + 3] = 0.0f;  // pretend rows 0 and 3 share a caption

    const float margin = 0.2f;
    double want = 0;
    int terms = 0;
    for (int i = 0; i < B; ++i) {
      double cii = 0;
      for (int k = 0; k < D; ++k) cii += v[i * D + k] * s[i * D + k];
      for (int j = 0; j < B; ++j) {
        if (valid[i * B + j] == 0.0f) continue;
        double cij = 0;
        for (int k = 0; k < D; ++k) cij += v[i * D + k] * s[j * D + k];
        want += std::max(0.0, margin - cii + cij);
        ++terms;
      }
    }
    want /= terms;

    nn::Tape t;
    nn::Var loss = eval::retrieval_hinge_loss(nn::constant(t, v),
                                          nn::constant(t, s), margin, valid);
    CHECK(loss.val()[0] == doctest::Approx(want).epsilon(1e-5));
  }
}

TEST_CASE("retrieval net normalizes and trains to its bar") {
  const text::HashedProvider provider;

  SUBCASE("unit outputs before any training") {
    eval::RetrievalNet net(tiny_ret_cfg(), provider.dim());
    Rng rng(6);
    nn::Tensor clips({4, 3, 3, 16, 16});
    for (auto& v : clips.data) v = rng.uniform_f(-1.0f, 1.0f);
    const nn::Tensor ve = net.encode_videos(clips);
    REQUIRE(ve.shape == std::vector<int>({4, 24}));
    for (int i = 0; i < 4; ++i) {
      double n = 0;
      for (int j = 0; j < 24; ++j) n += ve[i * 24 + j] * ve[i * 24 + j];
      CHECK(std::fabs(std::sqrt(n) - 1.0) <= 1e-5);
    }
    const nn::Tensor se =
        net.encode_sentences(class_sentences(tiny_dataset()), provider);
    REQUIRE(se.shape == std::vector<int>({3, 24}));
    for (int i = 0; i < 3; ++i) {
      double n = 0;
      for (int j = 0; j < 24; ++j) n += se[i * 24 + j] * se[i * 24 + j];
      CHECK(std::fabs(std::sqrt(n) - 1.0) <= 1e-5);
    }
  }
  SUBCASE("training reaches the top-1 bar") {
    const eval::RetrievalNet& net = tiny_retrieval();
    CHECK(net.train_top1() >= 0.60);
    CHECK(net.top1_on(tiny_dataset(), provider) ==
          doctest::Approx(net.train_top1()).epsilon(1e-12));
  }
  SUBCASE("save and load round trip") {
    const eval::RetrievalNet& net = tiny_retrieval();
    const fs::path dir = fresh_dir("ret_ckpt");
    eval::save_retrieval(net, dir.string());
    const eval::RetrievalNet back = eval::load_retrieval(dir.string());
    CHECK(back.raw_dim() == net.raw_dim());
    const nn::Tensor a =
        net.encode_sentences(class_sentences(tiny_dataset()), provider);
    const nn::Tensor b =
        back.encode_sentences(class_sentences(tiny_dataset()), provider);
    for (int64_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
  }
}

TEST_CASE("sentence perturbations") {
  const std::vector<std::string> vocab = eval::caption_vocab(tiny_dataset());
  CHECK(vocab.size() >= 10);
  CHECK(std::is_sorted(vocab.begin(), vocab.end()));

  const text::Sentence s = text::Sentence::parse("the red circle is moving left");
  Rng rng(41);
  const std::vector<text::Sentence> vars =
      eval::perturb_sentence(s, vocab, 20, rng);
  CHECK(vars.size() >= 10);
  CHECK(vars.size() <= 20);

  std::set<std::string> seen;
  for (const auto& v : vars) {
    CHECK(v.key() != s.key());
    CHECK(seen.insert(v.key()).second);
    if (v.tokens.size() == s.tokens.size() - 1) {
      // One token dropped, never the first one.
      CHECK(v.tokens[0] == "the");
      std::multiset<std::string> a(s.tokens.begin(), s.tokens.end());
      std::multiset<std::string> b(v.tokens.begin(), v.tokens.end());
      std::vector<std::string> diff;
      std::set_difference(a.begin(), a.end(), b.begin(), b.end(),
                          std::back_inserter(diff));
      CHECK(diff.size() == 1);
    } else {
      // One token replaced by a different vocabulary word.
      REQUIRE(v.tokens.size() == s.tokens.size());
      int changed = 0;
      for (size_t i = 0; i < v.tokens.size(); ++i)
        if (v.tokens[i] != s.tokens[i]) {
          ++changed;
          CHECK(std::binary_search(vocab.begin(), vocab.end(), v.tokens[i]));
        }
      CHECK(changed == 1);
    }
  }

  const text::Sentence one = text::Sentence::parse("left");
  const std::vector<text::Sentence> rep =
      eval::perturb_sentence(one, vocab, 6, rng);
  CHECK(rep.size() >= 1);
  for (const auto& v : rep) {
    CHECK(v.tokens.size() == 1);
    CHECK(v.tokens[0] != "left");
  }
}

TEST_CASE("pool composition") {
  const std::vector<std::string> vocab = eval::caption_vocab(tiny_dataset());
  std::vector<text::Sentence> caps = class_sentences(tiny_dataset());
  const text::Sentence query = caps[0];
  std::vector<text::Sentence> others(caps.begin() + 1, caps.end());

  eval::PoolConfig cfg;
  Rng rng(55);
  const eval::Pool pool = eval::build_pool(query, others, vocab, cfg, rng);

  REQUIRE(pool.sentences.size() == 100);
  REQUIRE(pool.related.size() == 100);
  int rel = 0;
  std::set<std::string> keys;
  bool query_related = false;
  for (size_t i = 0; i < pool.sentences.size(); ++i) {
    CHECK(keys.insert(pool.sentences[i].key()).second);
    if (pool.related[i]) {
      ++rel;
      if (pool.sentences[i].key() == query.key()) query_related = true;
    }
  }
  CHECK(rel == pool.related_count);
  CHECK(rel >= 6);
  CHECK(rel <= 12);
  CHECK(query_related);

  // Same seed, same pool.
  Rng rng2(55);
  const eval::Pool again = eval::build_pool(query, others, vocab, cfg, rng2);
  REQUIRE(again.sentences.size() == pool.sentences.size());
  for (size_t i = 0; i < pool.sentences.size(); ++i)
    CHECK(again.sentences[i].text == pool.sentences[i].text);
}

TEST_CASE("r precision scoring") {
  SUBCASE("single related sentence ranked first") {
    std::vector<double> scores = {0.9, 0.1, 0.2, 0.3};
    std::vector<char> related = {1, 0, 0, 0};
    CHECK(eval::r_precision_from_scores(scores, related) == 1.0);
  }
  SUBCASE("half the related set retrieved") {
    // R = 4; two related land in the top four.
    std::vector<double> scores(12);
    std::vector<char> related(12, 0);
    for (int i = 0; i < 12; ++i) scores[i] = 1.0 - 0.01 * i;
    related[0] = related[1] = 1;   // in the top 4
    related[8] = related[11] = 1;  // outside
    CHECK(eval::r_precision_from_scores(scores, related) == 0.5);
  }
  SUBCASE("mismatched extents rejected") {
    std::vector<double> scores = {1.0};
    std::vector<char> related = {1, 0};
    CHECK_THROWS_AS(eval::r_precision_from_scores(scores, related),
                    ConfigError);
  }
}

TEST_CASE("random scorer baseline matches the hypergeric expectation") {
  Rng rng(77);
  std::vector<int> rs = {6, 8, 10, 12, 7, 9};
  const eval::Baseline b = eval::mc_random_baseline(rs, 100, 4000, rng);
  double want = 0;
  for (int r : rs) want += static_cast<double>(r) / 100.0;
  want /= rs.size();
  CHECK(std::fabs(b.mean - want) <= 0.01);
  CHECK(b.std_dev > 0.0);
  CHECK(b.std_dev < 0.1);

  Rng rng2(77);
  const eval::Baseline b2 = eval::mc_random_baseline(rs, 100, 4000, rng2);
  CHECK(b2.mean == b.mean);
  CHECK(b2.std_dev == b.std_dev);
}

TEST_CASE("r precision end to end stays in range") {
  const toy::Dataset& ds = tiny_dataset();
  const text::HashedProvider provider;
  const eval::RetrievalNet& net = tiny_retrieval();
  const std::vector<std::string> vocab = eval::caption_vocab(ds);
  const std::vector<text::Sentence> caps = class_sentences(ds);

  // Generator stub: a real clip of the class whose caption was asked for,
  // so retrieval quality carries over.
  eval::GenerateFn gen = [&ds, &caps](const std::vector<text::Sentence>& ss,
                                      int frames, Rng& rng) {
    nn::Tensor out({static_cast<int>(ss.size()), frames, 3, 16, 16});
    const int64_t row = static_cast<int64_t>(frames) * 3 * 16 * 16;
    for (size_t b = 0; b < ss.size(); ++b) {
      int cls_id = 0;
      for (size_t k = 0; k < caps.size(); ++k)
        if (caps[k].key() == ss[b].key()) cls_id = static_cast<int>(k);
      std::vector<const toy::Clip*> mine;
      for (const auto& c : ds.clips)
        if (c.class_id == cls_id) mine.push_back(&c);
      const toy::Clip& c = *mine[static_cast<size_t>(
          rng.uniform_int(0, static_cast<int>(mine.size()) - 1))];
      std::copy_n(c.frames.ptr(), row, out.ptr() + b * row);
    }
    return out;
  };

  eval::PoolConfig pool;
  Rng rng(91);
  const eval::RPrecision rp = eval::r_precision(
      gen, net, provider, caps, caps, vocab, pool, 4, rng);
  REQUIRE(rp.per_query.size() == 3);
  CHECK(rp.mean >= 0.0);
  CHECK(rp.mean <= 1.0);
  for (double v : rp.per_query) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }

  eval::PoolConfig bad;
  bad.size = 50;
  Rng rng2(91);
  CHECK_THROWS_AS(
      eval::r_precision(gen, net, provider, caps, caps, vocab, bad, 4, rng2),
      ConfigError);
}

TEST_CASE("command accuracy follows the classifier") {
  const toy::Dataset& ds = tiny_dataset();
  const eval::EvalClassifier& cls = tiny_classifier();
  const std::vector<text::Sentence> caps = class_sentences(ds);

  // Echo generator: returns stored clips of the prompted class.
  eval::GenerateFn echo = [&ds, &caps](const std::vector<text::Sentence>& ss,
                                       int frames, Rng& rng) {
    nn::Tensor out({static_cast<int>(ss.size()), frames, 3, 16, 16});
    const int64_t row = static_cast<int64_t>(frames) * 3 * 16 * 16;
    for (size_t b = 0; b < ss.size(); ++b) {
      int cls_id = 0;
      for (size_t k = 0; k < caps.size(); ++k)
        if (caps[k].key() == ss[b].key()) cls_id = static_cast<int>(k);
      std::vector<const toy::Clip*> mine;
      for (const auto& c : ds.clips)
        if (c.class_id == cls_id) mine.push_back(&c);
      const toy::Clip& c = *mine[static_cast<size_t>(
          rng.uniform_int(0, static_cast<int>(mine.size()) - 1))];
      std::copy_n(c.frames.ptr(), row, out.ptr() + b * row);
    }
    return out;
  };
  Rng rng(14);
  const double acc = eval::command_accuracy(echo, cls, caps, 6, 3, 5, rng);
  CHECK(acc >= 0.8);  // real clips of the right class, trained classifier

  // Constant generator: always class 0 clips, so only class-0 prompts match.
  eval::GenerateFn constant = [&ds](const std::vector<text::Sentence>& ss,
                                    int frames, Rng&) {
    nn::Tensor out({static_cast<int>(ss.size()), frames, 3, 16, 16});
    const int64_t row = static_cast<int64_t>(frames) * 3 * 16 * 16;
    for (size_t b = 0; b < ss.size(); ++b)
      std::copy_n(ds.clips[0].frames.ptr(), row, out.ptr() + b * row);
    return out;
  };
  Rng rng2(14);
  const double low = eval::command_accuracy(constant, cls, caps, 6, 3, 5, rng2);
  CHECK(low <= 0.5);
}

TEST_CASE("smooth transition endpoints are exact") {
  train::Trainer tr = micro_trainer();
  const text::Sentence a = text::Sentence::parse("the red circle is moving left");
  const text::Sentence b = text::Sentence::parse("the blue triangle is growing");

  const int steps = 5, T = 3;
  const uint64_t seed = 99;
  const std::vector<nn::Tensor> path =
      eval::smooth_transition(tr, a, b, steps, T, seed);
  REQUIRE(path.size() == 5);
  for (const auto& clip : path)
    REQUIRE(clip.shape == std::vector<int>({T, 3, 16, 16}));

  Rng ra(seed);
  const nn::Tensor va = tr.sample_videos({a, a}, T, ra);
  const int64_t row = static_cast<int64_t>(T) * 3 * 16 * 16;
  for (int64_t i = 0; i < row; ++i) CHECK(path.front()[i] == va[i]);

  Rng rb(seed);
  const nn::Tensor vb = tr.sample_videos({b, b}, T, rb);
  for (int64_t i = 0; i < row; ++i) CHECK(path.back()[i] == vb[i]);

  const std::vector<nn::Tensor> again =
      eval::smooth_transition(tr, a, b, steps, T, seed);
  for (int s = 0; s < steps; ++s)
    for (int64_t i = 0; i < row; ++i) CHECK(again[s][i] == path[s][i]);
}

TEST_CASE("evaluation report") {
  const toy::Dataset& ds = tiny_dataset();
  train::Trainer tr = micro_trainer();

  eval::EvalConfig cfg;
  cfg.classifier = tiny_cls_cfg();
  cfg.retrieval = tiny_ret_cfg();
  cfg.fid_samples = 12;
  cfg.queries_per_class = 1;
  cfg.frame_min = 3;
  cfg.frame_max = 4;
  cfg.gen_batch = 4;
  cfg.seed = 5;

  const eval::EvalReport rep = eval::run_evaluation(
      tr, ds, cfg, &tiny_classifier(), &tiny_retrieval());

  CHECK(!rep.unreliable);
  CHECK(std::isfinite(rep.fid_all));
  CHECK(rep.fid_all >= 0.0);
  CHECK(rep.is_mean >= 1.0 - 1e-9);
  CHECK(rep.is_mean <= 3.0 + 1e-9);
  CHECK(rep.accuracy >= 0.0);
  CHECK(rep.accuracy <= 1.0);
  CHECK(rep.r_precision >= 0.0);
  CHECK(rep.r_precision <= 1.0);
  CHECK(rep.fid_intra.size() <= 3);
  CHECK(std::isfinite(rep.fid_intra_mean));
  CHECK(rep.seed == 5);

  const nlohmann::json j = rep.to_json();
  for (const char* key :
       {"is_mean", "is_std", "fid_all", "fid_intra", "fid_intra_mean",
        "r_precision", "accuracy", "unreliable", "config", "seed"})
    CHECK(j.contains(key));

  // Frozen nets, same seed: the whole report replays.
  const eval::EvalReport rep2 = eval::run_evaluation(
      tr, ds, cfg, &tiny_classifier(), &tiny_retrieval());
  CHECK(rep2.to_json().dump() == j.dump());
}

TEST_CASE("evaluation flags an unreliable classifier") {
  const toy::Dataset& ds = tiny_dataset();
  train::Trainer tr = micro_trainer();

  eval::EvalConfig cfg;
  cfg.classifier = tiny_cls_cfg();
  cfg.classifier.epochs = 0;  // stays at chance
  cfg.retrieval = tiny_ret_cfg();
  cfg.fid_samples = 8;
  cfg.queries_per_class = 1;
  cfg.frame_min = 3;
  cfg.frame_max = 4;
  cfg.gen_batch = 4;
  cfg.seed = 6;

  const eval::EvalReport rep =
      eval::run_evaluation(tr, ds, cfg, nullptr, &tiny_retrieval());
  CHECK(rep.unreliable);
  CHECK(!rep.unreliable_reason.empty());
  const nlohmann::json j = rep.to_json();
  CHECK(j["unreliable"].get<bool>());
  CHECK(j["fid_all"].is_null());
  CHECK(j["is_mean"].is_null());
  CHECK(j["accuracy"].is_null());
  // Retrieval does not depend on the classifier and still reports.
  CHECK(j["r_precision"].is_number());
}
