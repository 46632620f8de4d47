#pragma once

#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "lpgan/rng.hpp"
#include "lpgan/tensor.hpp"

namespace lpgan::nn {

// Trainable tensor. grad accumulates across a backward pass and is cleared by
// the optimizer. Spectrally-normalized parameters carry persistent power
// iteration state (u over the first extent, v over the rest).
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  bool spectral = false;
  Tensor sn_u;
  Tensor sn_v;

  Parameter(std::string n, std::vector<int> shape)
      : name(std::move(n)), value(shape), grad(std::move(shape)) {}
};

// Reverse-mode trace. Ops append nodes; backward() walks the trace in reverse.
// One tape per forward pass; parameters may appear in many tapes but get one
// leaf per tape (cached), so their gradient contributions sum correctly.
class Tape {
 public:
  explicit Tape(bool recording = true) : recording_(recording) {}

  bool recording() const { return recording_; }

  const Tensor& val(int id) const { return nodes_[static_cast<size_t>(id)].value; }
  bool needs_grad(int id) const { return nodes_[static_cast<size_t>(id)].needs; }

  // Gradient buffer, allocated as zeros on first touch.
  Tensor& grad_buf(int id);
  // Null if the node never received gradient.
  const Tensor* grad_if_any(int id) const;

  int push(Tensor value, bool needs, std::function<void()> back);

  void backward(int loss_id);

  int param_leaf(Parameter& p);
  int spectral_cached(const Parameter& p) const;
  void spectral_remember(const Parameter& p, int id) { sn_cache_[&p] = id; }

  size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool needs = false;
    std::function<void()> back;
  };
  bool recording_;
  std::vector<Node> nodes_;
  std::unordered_map<const Parameter*, int> param_leaf_;
  std::unordered_map<const Parameter*, int> sn_cache_;
};

struct Var {
  Tape* t = nullptr;
  int id = -1;
  const Tensor& val() const { return t->val(id); }
};

// ---- leaves ----
Var constant(Tape& t, Tensor v);
Var param(Tape& t, Parameter& p);

// ---- elementwise ----
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, float s);
Var add_scalar(Var a, float s);
Var leaky_relu(Var a, float slope);
inline Var relu(Var a) { return leaky_relu(a, 0.0f); }
Var tanh_act(Var a);
Var sigmoid(Var a);

// ---- linear algebra ----
Var matmul(Var a, Var b);                    // [M,K]x[K,N]
Var add_rowvec(Var m, Var v);                // [R,C] + [C]
Var mul_rowvec(Var m, Var v);                // [R,C] * [C]

// ---- convolution (cross-correlation); x [N,C,H,W], w [F,C,kh,kw] ----
Var conv2d(Var x, Var w, Var b, int stride, int pad);
Var conv2d_nobias(Var x, Var w, int stride, int pad);
// x [N,C,T,H,W], w [F,C,kt,kh,kw]; strides/pads per axis (t,h,w)
Var conv3d(Var x, Var w, Var b, const std::vector<int>& stride,
           const std::vector<int>& pad);

// ---- normalization ----
// [R,C]: per column over rows, population variance, no affine. Training
// statistics need >= 2 rows. The computed statistics come back through the
// optional out params (shape [C]) so callers can freeze them later.
Var batch_norm_cols(Var x, float eps, Tensor* mean_out = nullptr,
                    Tensor* istd_out = nullptr);
// [N,C,...]: per channel over everything but axis 1.
Var batch_norm_chan(Var x, float eps, Tensor* mean_out = nullptr,
                    Tensor* istd_out = nullptr);
// Normalize with fixed statistics (no grad into them).
Var normalize_cols_const(Var x, Tensor mean, Tensor istd);
Var normalize_chan_const(Var x, Tensor mean, Tensor istd);
// x - per-column mean over rows. CBN's mean-shift building block.
Var row_mean_center(Var x);
// s [N,C] broadcast over trailing spatial dims of x [N,C,...].
Var mul_chan(Var x, Var s);
Var add_chan(Var x, Var s);

// ---- resampling (last two axes) ----
Var upsample2x_nn(Var x);
Var avg_pool2x(Var x);  // even extents required

// ---- shape plumbing ----
Var reshape(Var x, std::vector<int> shape);
Var permute(Var x, const std::vector<int>& axes);
Var concat_cols(Var a, Var b);               // rank 2
Var concat_chan(Var a, Var b);               // along axis 1, any rank
Var slice_cols(Var x, int start, int len);   // rank 2
Var repeat_rows(Var x, int times);  // [B,d] -> [B*times,d], row b copied to rows b*times..b*times+times-1

// ---- reductions ----
Var mean_all(Var x);                         // -> [1]
Var mean_cols(Var x);                        // [R,C] -> [R,1]
Var global_mean_tail(Var x);                 // [N,C,...] -> [N,C]
// [B,C,T,H,W] -> same shape, each (c,h,w) cell replaced by its mean over (B,T)
Var batch_time_mean_bcast(Var x);

// ---- task-specific ----
// Linear path between two endpoint rows. Row b*T+i-1 (i in 1..T) is
// a_i*z1[b] + c_i*zT[b]; verbatim: a=(T-i)/T, c=i/T; exact: a=(T-i)/(T-1).
Var interp_rows(Var z1, Var zT, int T, bool exact_endpoints);
// frames [N,3,H,W] -> gradient-magnitude edges [N,1,H,W] (luminance Sobel,
// replicate padding).
Var sobel_edges(Var frames);
// y_r = x_r / max(||x_r||, eps)
Var l2_normalize_rows(Var x);
// square [B,B]: out_ij = s_ij - s_ii
Var row_diag_sub(Var s);
// mean over batch of -log softmax(logits)[label]
Var softmax_cross_entropy(Var logits, const std::vector<int>& labels);

// ---- spectral normalization ----
// Runs `iters` power iterations on p.value (updating p.sn_u / p.sn_v), then
// emits p.value / sigma_hat with sigma_hat = u^T W v clamped at eps. Cached per
// tape. Gradient treats u, v as constants but keeps the sigma(W) quotient term.
Var spectral_normalize(Tape& t, Parameter& p, int iters, float eps = 1e-12f);
// Power iteration only (no tape); exposed for tests and init.
float spectral_power_iterate(Parameter& p, int iters, float eps = 1e-12f);

// ---- init ----
void orthogonal_init(Tensor& w, Rng& rng);

// Backward entry point used everywhere: loss must be a single element.
void backward(Var loss);

}  // namespace lpgan::nn
