#include "lpgan/autodiff.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <utility>

namespace lpgan::nn {

namespace {

using RowMat =
    Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<RowMat>;
using MapC = Eigen::Map<const RowMat>;

void axpy(float a, const Tensor& x, Tensor& y) {
  const int64_t n = x.size();
  const float* xp = x.ptr();
  float* yp = y.ptr();
  for (int64_t i = 0; i < n; ++i) yp[i] += a * xp[i];
}

int64_t tail_product(const std::vector<int>& s, size_t from) {
  int64_t p = 1;
  for (size_t i = from; i < s.size(); ++i) p *= s[i];
  return p;
}

void check_same(const Var& a, const Var& b, const char* who) {
  if (!a.val().same_shape(b.val()))
    throw ShapeError(std::string(who) + ": shape mismatch " +
                     shape_str(a.val().shape) + " vs " + shape_str(b.val().shape));
}

Tensor permute_tensor(const Tensor& x, const std::vector<int>& axes) {
  const int r = x.rank();
  if (static_cast<int>(axes.size()) != r)
    throw ShapeError("permute: axes rank mismatch");
  std::vector<char> seen(static_cast<size_t>(r), 0);
  std::vector<int> oshape(static_cast<size_t>(r));
  for (int i = 0; i < r; ++i) {
    int a = axes[static_cast<size_t>(i)];
    if (a < 0 || a >= r || seen[static_cast<size_t>(a)])
      throw ShapeError("permute: bad axes");
    seen[static_cast<size_t>(a)] = 1;
    oshape[static_cast<size_t>(i)] = x.dim(a);
  }
  std::vector<int64_t> istride(static_cast<size_t>(r), 1);
  for (int i = r - 2; i >= 0; --i)
    istride[static_cast<size_t>(i)] =
        istride[static_cast<size_t>(i + 1)] * x.dim(i + 1);
  Tensor out(oshape);
  std::vector<int> coord(static_cast<size_t>(r), 0);
  const float* xp = x.ptr();
  float* op = out.ptr();
  const int64_t n = out.size();
  for (int64_t idx = 0; idx < n; ++idx) {
    int64_t src = 0;
    for (int i = 0; i < r; ++i)
      src += coord[static_cast<size_t>(i)] *
             istride[static_cast<size_t>(axes[static_cast<size_t>(i)])];
    op[idx] = xp[src];
    for (int i = r - 1; i >= 0; --i) {
      if (++coord[static_cast<size_t>(i)] < oshape[static_cast<size_t>(i)]) break;
      coord[static_cast<size_t>(i)] = 0;
    }
  }
  return out;
}

std::vector<int> inverse_axes(const std::vector<int>& axes) {
  std::vector<int> inv(axes.size());
  for (size_t i = 0; i < axes.size(); ++i)
    inv[static_cast<size_t>(axes[i])] = static_cast<int>(i);
  return inv;
}

// ---- conv lowering ----

struct Conv2Geom {
  int N, C, H, W, F, kh, kw, stride, pad, Ho, Wo;
  int64_t ckk() const { return static_cast<int64_t>(C) * kh * kw; }
};

Conv2Geom conv2_geom(const Tensor& x, const Tensor& w, int stride, int pad) {
  if (x.rank() != 4 || w.rank() != 4)
    throw ShapeError("conv2d: input must be [N,C,H,W], weight [F,C,kh,kw]");
  Conv2Geom g;
  g.N = x.dim(0); g.C = x.dim(1); g.H = x.dim(2); g.W = x.dim(3);
  g.F = w.dim(0); g.kh = w.dim(2); g.kw = w.dim(3);
  g.stride = stride; g.pad = pad;
  if (w.dim(1) != g.C)
    throw ShapeError("conv2d: weight channels " + std::to_string(w.dim(1)) +
                     " do not match input channels " + std::to_string(g.C));
  if (stride < 1) throw ShapeError("conv2d: stride must be >= 1");
  int hp = g.H + 2 * pad, wp = g.W + 2 * pad;
  if (hp < g.kh || wp < g.kw)
    throw ShapeError("conv2d: kernel larger than padded input");
  g.Ho = (hp - g.kh) / stride + 1;
  g.Wo = (wp - g.kw) / stride + 1;
  return g;
}

void im2col2(const float* x, const Conv2Geom& g, float* col) {
  const int64_t ckk = g.ckk();
  for (int n = 0; n < g.N; ++n) {
    const float* xn = x + static_cast<int64_t>(n) * g.C * g.H * g.W;
    for (int i = 0; i < g.Ho; ++i) {
      for (int j = 0; j < g.Wo; ++j) {
        float* cp = col + ((static_cast<int64_t>(n) * g.Ho + i) * g.Wo + j) * ckk;
        for (int c = 0; c < g.C; ++c) {
          const float* xc = xn + static_cast<int64_t>(c) * g.H * g.W;
          for (int u = 0; u < g.kh; ++u) {
            int hi = i * g.stride + u - g.pad;
            for (int v = 0; v < g.kw; ++v) {
              int wj = j * g.stride + v - g.pad;
              *cp++ = (hi >= 0 && hi < g.H && wj >= 0 && wj < g.W)
                          ? xc[static_cast<int64_t>(hi) * g.W + wj]
                          : 0.0f;
            }
          }
        }
      }
    }
  }
}

void col2im2(const float* col, const Conv2Geom& g, float* dx) {
  const int64_t ckk = g.ckk();
  for (int n = 0; n < g.N; ++n) {
    float* xn = dx + static_cast<int64_t>(n) * g.C * g.H * g.W;
    for (int i = 0; i < g.Ho; ++i) {
      for (int j = 0; j < g.Wo; ++j) {
        const float* cp =
            col + ((static_cast<int64_t>(n) * g.Ho + i) * g.Wo + j) * ckk;
        for (int c = 0; c < g.C; ++c) {
          float* xc = xn + static_cast<int64_t>(c) * g.H * g.W;
          for (int u = 0; u < g.kh; ++u) {
            int hi = i * g.stride + u - g.pad;
            for (int v = 0; v < g.kw; ++v) {
              int wj = j * g.stride + v - g.pad;
              float val = *cp++;
              if (hi >= 0 && hi < g.H && wj >= 0 && wj < g.W)
                xc[static_cast<int64_t>(hi) * g.W + wj] += val;
            }
          }
        }
      }
    }
  }
}

struct Conv3Geom {
  int N, C, T, H, W, F, kt, kh, kw, st, sh, sw, pt, ph, pw, To, Ho, Wo;
  int64_t ckk() const { return static_cast<int64_t>(C) * kt * kh * kw; }
};

Conv3Geom conv3_geom(const Tensor& x, const Tensor& w,
                     const std::vector<int>& stride, const std::vector<int>& pad) {
  if (x.rank() != 5 || w.rank() != 5)
    throw ShapeError("conv3d: input must be [N,C,T,H,W], weight [F,C,kt,kh,kw]");
  if (stride.size() != 3 || pad.size() != 3)
    throw ShapeError("conv3d: stride/pad need 3 entries");
  Conv3Geom g;
  g.N = x.dim(0); g.C = x.dim(1); g.T = x.dim(2); g.H = x.dim(3); g.W = x.dim(4);
  g.F = w.dim(0); g.kt = w.dim(2); g.kh = w.dim(3); g.kw = w.dim(4);
  g.st = stride[0]; g.sh = stride[1]; g.sw = stride[2];
  g.pt = pad[0]; g.ph = pad[1]; g.pw = pad[2];
  if (w.dim(1) != g.C) throw ShapeError("conv3d: channel mismatch");
  if (g.st < 1 || g.sh < 1 || g.sw < 1) throw ShapeError("conv3d: bad stride");
  int tp = g.T + 2 * g.pt, hp = g.H + 2 * g.ph, wp = g.W + 2 * g.pw;
  if (tp < g.kt || hp < g.kh || wp < g.kw)
    throw ShapeError("conv3d: kernel larger than padded input");
  g.To = (tp - g.kt) / g.st + 1;
  g.Ho = (hp - g.kh) / g.sh + 1;
  g.Wo = (wp - g.kw) / g.sw + 1;
  return g;
}

void im2col3(const float* x, const Conv3Geom& g, float* col) {
  const int64_t ckk = g.ckk();
  const int64_t chw = static_cast<int64_t>(g.T) * g.H * g.W;
  for (int n = 0; n < g.N; ++n) {
    const float* xn = x + static_cast<int64_t>(n) * g.C * chw;
    for (int a = 0; a < g.To; ++a)
      for (int i = 0; i < g.Ho; ++i)
        for (int j = 0; j < g.Wo; ++j) {
          float* cp = col + (((static_cast<int64_t>(n) * g.To + a) * g.Ho + i) *
                                 g.Wo + j) * ckk;
          for (int c = 0; c < g.C; ++c) {
            const float* xc = xn + static_cast<int64_t>(c) * chw;
            for (int q = 0; q < g.kt; ++q) {
              int ti = a * g.st + q - g.pt;
              for (int u = 0; u < g.kh; ++u) {
                int hi = i * g.sh + u - g.ph;
                for (int v = 0; v < g.kw; ++v) {
                  int wj = j * g.sw + v - g.pw;
                  *cp++ = (ti >= 0 && ti < g.T && hi >= 0 && hi < g.H &&
                           wj >= 0 && wj < g.W)
                              ? xc[(static_cast<int64_t>(ti) * g.H + hi) * g.W + wj]
                              : 0.0f;
                }
              }
            }
          }
        }
  }
}

void col2im3(const float* col, const Conv3Geom& g, float* dx) {
  const int64_t ckk = g.ckk();
  const int64_t chw = static_cast<int64_t>(g.T) * g.H * g.W;
  for (int n = 0; n < g.N; ++n) {
    float* xn = dx + static_cast<int64_t>(n) * g.C * chw;
    for (int a = 0; a < g.To; ++a)
      for (int i = 0; i < g.Ho; ++i)
        for (int j = 0; j < g.Wo; ++j) {
          const float* cp = col + (((static_cast<int64_t>(n) * g.To + a) * g.Ho + i) *
                                       g.Wo + j) * ckk;
          for (int c = 0; c < g.C; ++c) {
            float* xc = xn + static_cast<int64_t>(c) * chw;
            for (int q = 0; q < g.kt; ++q) {
              int ti = a * g.st + q - g.pt;
              for (int u = 0; u < g.kh; ++u) {
                int hi = i * g.sh + u - g.ph;
                for (int v = 0; v < g.kw; ++v) {
                  int wj = j * g.sw + v - g.pw;
                  float val = *cp++;
                  if (ti >= 0 && ti < g.T && hi >= 0 && hi < g.H && wj >= 0 &&
                      wj < g.W)
                    xc[(static_cast<int64_t>(ti) * g.H + hi) * g.W + wj] += val;
                }
              }
            }
          }
        }
  }
}

// Per-channel moments over layout [N, C, S]; population variance, double
// accumulation, two passes.
void chan_stats(const float* x, int N, int C, int64_t S, float eps,
                std::vector<float>& mean, std::vector<float>& istd) {
  mean.assign(static_cast<size_t>(C), 0.0f);
  istd.assign(static_cast<size_t>(C), 0.0f);
  const double cnt = static_cast<double>(N) * static_cast<double>(S);
  for (int c = 0; c < C; ++c) {
    double s = 0.0;
    for (int n = 0; n < N; ++n) {
      const float* p = x + (static_cast<int64_t>(n) * C + c) * S;
      for (int64_t i = 0; i < S; ++i) s += p[i];
    }
    double m = s / cnt;
    double s2 = 0.0;
    for (int n = 0; n < N; ++n) {
      const float* p = x + (static_cast<int64_t>(n) * C + c) * S;
      for (int64_t i = 0; i < S; ++i) {
        double d = p[i] - m;
        s2 += d * d;
      }
    }
    mean[static_cast<size_t>(c)] = static_cast<float>(m);
    istd[static_cast<size_t>(c)] =
        static_cast<float>(1.0 / std::sqrt(s2 / cnt + static_cast<double>(eps)));
  }
}

// Shared normalization backward for the [N, C, S] layout.
void chan_norm_backward(Tape& t, int xid, int oid, int N, int C, int64_t S,
                        const std::vector<float>& mean,
                        const std::vector<float>& istd) {
  const Tensor* gp = t.grad_if_any(oid);
  if (!gp || !t.needs_grad(xid)) return;
  const Tensor& x = t.val(xid);
  Tensor& dx = t.grad_buf(xid);
  const double cnt = static_cast<double>(N) * static_cast<double>(S);
  for (int c = 0; c < C; ++c) {
    const double m = mean[static_cast<size_t>(c)];
    const double is = istd[static_cast<size_t>(c)];
    double sg = 0.0, sgx = 0.0;
    for (int n = 0; n < N; ++n) {
      const int64_t base = (static_cast<int64_t>(n) * C + c) * S;
      for (int64_t i = 0; i < S; ++i) {
        double gv = gp->data[static_cast<size_t>(base + i)];
        double xh = (x.data[static_cast<size_t>(base + i)] - m) * is;
        sg += gv;
        sgx += gv * xh;
      }
    }
    sg /= cnt;
    sgx /= cnt;
    for (int n = 0; n < N; ++n) {
      const int64_t base = (static_cast<int64_t>(n) * C + c) * S;
      for (int64_t i = 0; i < S; ++i) {
        double gv = gp->data[static_cast<size_t>(base + i)];
        double xh = (x.data[static_cast<size_t>(base + i)] - m) * is;
        dx.data[static_cast<size_t>(base + i)] +=
            static_cast<float>(is * (gv - sg - xh * sgx));
      }
    }
  }
}

constexpr float kSobelX[9] = {-1, 0, 1, -2, 0, 2, -1, 0, 1};
constexpr float kSobelY[9] = {-1, -2, -1, 0, 0, 0, 1, 2, 1};
constexpr float kLumR = 0.299f, kLumG = 0.587f, kLumB = 0.114f;

}  // namespace

// ---- Tape ----

Tensor& Tape::grad_buf(int id) {
  Node& n = nodes_[static_cast<size_t>(id)];
  if (n.grad.empty()) n.grad = Tensor(n.value.shape);
  return n.grad;
}

const Tensor* Tape::grad_if_any(int id) const {
  const Node& n = nodes_[static_cast<size_t>(id)];
  return n.grad.empty() ? nullptr : &n.grad;
}

int Tape::push(Tensor value, bool needs, std::function<void()> back) {
  Node n;
  n.value = std::move(value);
  n.needs = recording_ && needs;
  if (n.needs) n.back = std::move(back);
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size()) - 1;
}

void Tape::backward(int loss_id) {
  if (!recording_) throw Error("backward on a non-recording tape");
  if (val(loss_id).size() != 1) throw ShapeError("backward: loss must be scalar");
  grad_buf(loss_id).data[0] = 1.0f;
  for (int i = loss_id; i >= 0; --i) {
    Node& n = nodes_[static_cast<size_t>(i)];
    if (n.needs && n.back && !n.grad.empty()) n.back();
  }
}

int Tape::param_leaf(Parameter& p) {
  auto it = param_leaf_.find(&p);
  if (it != param_leaf_.end()) return it->second;
  int id = static_cast<int>(nodes_.size());
  Tape* t = this;
  push(p.value, true, [t, id, pp = &p] {
    const Tensor* g = t->grad_if_any(id);
    if (g) axpy(1.0f, *g, pp->grad);
  });
  param_leaf_[&p] = id;
  return id;
}

int Tape::spectral_cached(const Parameter& p) const {
  auto it = sn_cache_.find(&p);
  return it == sn_cache_.end() ? -1 : it->second;
}

void backward(Var loss) { loss.t->backward(loss.id); }

// ---- leaves ----

Var constant(Tape& t, Tensor v) {
  return {&t, t.push(std::move(v), false, {})};
}

Var param(Tape& t, Parameter& p) { return {&t, t.param_leaf(p)}; }

// ---- elementwise ----

Var add(Var a, Var b) {
  check_same(a, b, "add");
  Tape& t = *a.t;
  Tensor out = a.val();
  axpy(1.0f, b.val(), out);
  int oid = static_cast<int>(t.node_count());
  bool needs = t.needs_grad(a.id) || t.needs_grad(b.id);
  t.push(std::move(out), needs, [&t, oid, ia = a.id, ib = b.id] {
    const Tensor* g = t.grad_if_any(oid);
    if (!g) return;
    if (t.needs_grad(ia)) axpy(1.0f, *g, t.grad_buf(ia));
    if (t.needs_grad(ib)) axpy(1.0f, *g, t.grad_buf(ib));
  });
  return {&t, oid};
}

Var sub(Var a, Var b) {
  check_same(a, b, "sub");
  Tape& t = *a.t;
  Tensor out = a.val();
  axpy(-1.0f, b.val(), out);
  int oid = static_cast<int>(t.node_count());
  bool needs = t.needs_grad(a.id) || t.needs_grad(b.id);
  t.push(std::move(out), needs, [&t, oid, ia = a.id, ib = b.id] {
    const Tensor* g = t.grad_if_any(oid);
    if (!g) return;
    if (t.needs_grad(ia)) axpy(1.0f, *g, t.grad_buf(ia));
    if (t.needs_grad(ib)) axpy(-1.0f, *g, t.grad_buf(ib));
  });
  return {&t, oid};
}

Var mul(Var a, Var b) {
  check_same(a, b, "mul");
  Tape& t = *a.t;
  Tensor out = a.val();
  {
    const float* bp = b.val().ptr();
    for (int64_t i = 0; i < out.size(); ++i) out.data[static_cast<size_t>(i)] *= bp[i];
  }
  int oid = static_cast<int>(t.node_count());
  bool needs = t.needs_grad(a.id) || t.needs_grad(b.id);
  t.push(std::move(out), needs, [&t, oid, ia = a.id, ib = b.id] {
    const Tensor* g = t.grad_if_any(oid);
    if (!g) return;
    const int64_t n = g->size();
    if (t.needs_grad(ia)) {
      const float* bp = t.val(ib).ptr();
      float* da = t.grad_buf(ia).ptr();
      const float* gp = g->ptr();
      for (int64_t i = 0; i < n; ++i) da[i] += gp[i] * bp[i];
    }
    if (t.needs_grad(ib)) {
      const float* ap = t.val(ia).ptr();
      float* db = t.grad_buf(ib).ptr();
      const float* gp = g->ptr();
      for (int64_t i = 0; i < n; ++i) db[i] += gp[i] * ap[i];
    }
  });
  return {&t, oid};
}

Var scale(Var a, float s) {
  Tape& t = *a.t;
  Tensor out = a.val();
  for (auto& v : out.data) v *= s;
  int oid = static_cast<int>(t.node_count());
  t.push(std::move(out), t.needs_grad(a.id), [&t, oid, ia = a.id, s] {
    const Tensor* g = t.grad_if_any(oid);
    if (g && t.needs_grad(ia)) axpy(s, *g, t.grad_buf(ia));
  });
  return {&t, oid};
}

Var add_scalar(Var a, float s) {
  Tape& t = *a.t;
  Tensor out = a.val();
  for (auto& v : out.data) v += s;
  int oid = static_cast<int>(t.node_count());
  t.push(std::move(out), t.needs_grad(a.id), [&t, oid, ia = a.id] {
    const Tensor* g = t.grad_if_any(oid);
    if (g && t.needs_grad(ia)) axpy(1.0f, *g, t.grad_buf(ia));
  });
  return {&t, oid};
}

Var leaky_relu(Var a, float slope) {
  Tape& t = *a.t;
  Tensor out = a.val();
  for (auto& v : out.data) v = v > 0.0f ? v : slope * v;
  int oid = static_cast<int>(t.node_count());
  t.push(std::move(out), t.needs_grad(a.id), [&t, oid, ia = a.id, slope] {
    const Tensor* g = t.grad_if_any(oid);
    if (!g || !t.needs_grad(ia)) return;
    const float* xp = t.val(ia).ptr();
    const float* gp = g->ptr();
    float* da = t.grad_buf(ia).ptr();
    for (int64_t i = 0; i < g->size(); ++i)
      da[i] += gp[i] * (xp[i] > 0.0f ? 1.0f : slope);
  });
  return {&t, oid};
}

Var tanh_act(Var a) {
  Tape& t = *a.t;
  Tensor out = a.val();
  for (auto& v : out.data) v = std::tanh(v);
  int oid = static_cast<int>(t.node_count());
  t.push(std::move(out), t.needs_grad(a.id), [&t, oid, ia = a.id] {
    const Tensor* g = t.grad_if_any(oid);
    if (!g || !t.needs_grad(ia)) return;
    const float* yp = t.val(oid).ptr();
    const float* gp = g->ptr();
    float* da = t.grad_buf(ia).ptr();
    for (int64_t i = 0; i < g->size(); ++i)
      da[i] += gp[i] * (1.0f - yp[i] * yp[i]);
  });
  return {&t, oid};
}

Var sigmoid(Var a) {
  Tape& t = *a.t;
  Tensor out = a.val();
  for (auto& v : out.data) v = 1.0f / (1.0f + std::exp(-v));
  int oid = static_cast<int>(t.node_count());
  t.push(std::move(out), t.needs_grad(a.id), [&t, oid, ia = a.id] {
    const Tensor* g = t.grad_if_any(oid);
    if (!g || !t.needs_grad(ia)) return;
    const float* yp = t.val(oid).ptr();
    const float* gp = g->ptr();
    float* da = t.grad_buf(ia).ptr();
    for (int64_t i = 0; i < g->size(); ++i)
      da[i] += gp[i] * yp[i] * (1.0f - yp[i]);
  });
  return {&t, oid};
}

// ---- linear algebra ----

Var matmul(Var a, Var b) {
  const Tensor& av = a.val();
  const Tensor& bv = b.val();
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0))
    throw ShapeError("matmul: incompatible shapes " + shape_str(av.shape) +
                     " x " + shape_str(bv.shape));
  Tape& t = *a.t;
  const int M = av.dim(0), K = av.dim(1), N = bv.dim(1);
  Tensor out({M, N});
  MapM(out.ptr(), M, N).noalias() =
      MapC(av.ptr(), M, K) * MapC(bv.ptr(), K, N);
  int oid = static_cast<int>(t.node_count());
  bool needs = t.needs_grad(a.id) || t.needs_grad(b.id);
  t.push(std::move(out), needs, [&t, oid, ia = a.id, ib = b.id, M, K, N] {
    const Tensor* g = t.grad_if_any(oid);
    if (!g) return;
    MapC gm(g->ptr(), M, N);
    if (t.needs_grad(ia)) {
      MapM da(t.grad_buf(ia).ptr(), M, K);
      da.noalias() += gm * MapC(t.val(ib).ptr(), K, N).transpose();
    }
    if (t.needs_grad(ib)) {
      MapM db(t.grad_buf(ib).ptr(), K, N);
      db.noalias() += MapC(t.val(ia).ptr(), M, K).transpose() * gm;
    }
  });
  return {&t, oid};
}

Var add_rowvec(Var m, Var v) {
  const Tensor& mv = m.val();
  const Tensor& vv = v.val();
  if (mv.rank() != 2 || vv.rank() != 1 || vv.dim(0) != mv.dim(1))
    throw ShapeError("add_rowvec: want [R,C] + [C]");
  Tape& t = *m.t;
  const int R = mv.dim(0), C = mv.dim(1);
  Tensor out = mv;
  for (int r = 0; r < R; ++r)
    for (int c = 0; c < C; ++c)
      out.data[static_cast<size_t>(r) * C + c] += vv.data[static_cast<size_t>(c)];
  int oid = static_cast<int>(t.node_count());
  bool needs = t.needs_grad(m.id) || t.needs_grad(v.id);
  t.push(std::move(out), needs, [&t, oid, im = m.id, iv = v.id, R, C] {
    const Tensor* g = t.grad_if_any(oid);
    if (!g) return;
    if (t.needs_grad(im)) axpy(1.0f, *g, t.grad_buf(im));
    if (t.needs_grad(iv)) {
      float* dv = t.grad_buf(iv).ptr();
      const float* gp = g->ptr();
      for (int c = 0; c < C; ++c) {
        double s = 0.0;
        for (int r = 0; r < R; ++r) s += gp[static_cast<int64_t>(r) * C + c];
        dv[c] += static_cast<float>(s);
      }
    }
  });
  return {&t, oid};
}

Var mul_rowvec(Var m, Var v) {
  const Tensor& mv = m.val();
  const Tensor& vv = v.val();
  if (mv.rank() != 2 || vv.rank() != 1 || vv.dim(0) != mv.dim(1))
    throw ShapeError("mul_rowvec: want [R,C] * [C]");
  Tape& t = *m.t;
  const int R = mv.dim(0), C = mv.dim(1);
  Tensor out = mv;
  for (int r = 0; r < R; ++r)
    for (int c = 0; c < C; ++c)
      out.data[static_cast<size_t>(r) * C + c] *= vv.data[static_cast<size_t>(c)];
  int oid = static_cast<int>(t.node_count());
  bool needs = t.needs_grad(m.id) || t.needs_grad(v.id);
  t.push(std::move(out), needs, [&t, oid, im = m.id, iv = v.id, R, C] {
    const Tensor* g = t.grad_if_any(oid);
    if (!g) return;
    const float* gp = g->ptr();
    if (t.needs_grad(im)) {
      const float* vp = t.val(iv).ptr();
      float* dm = t.grad_buf(im).ptr();
      for (int r = 0; r < R; ++r)
        for (int c = 0; c < C; ++c)
          dm[static_cast<int64_t>(r) * C + c] += gp[static_cast<int64_t>(r) * C + c] * vp[c];
    }
    if (t.needs_grad(iv)) {
      const float* mp = t.val(im).ptr();
      float* dv = t.grad_buf(iv).ptr();
      for (int c = 0; c < C; ++c) {
        double s = 0.0;
        for (int r = 0; r < R; ++r)
          s += static_cast<double>(gp[static_cast<int64_t>(r) * C + c]) *
               mp[static_cast<int64_t>(r) * C + c];
        dv[c] += static_cast<float>(s);
      }
    }
  });
  return {&t, oid};
}

// ---- convolution ----

namespace {

Var conv2d_impl(Var x, Var w, const Var* bias, int stride, int pad) {
  Tape& t = *x.t;
  const Tensor& xv = x.val();
  const Tensor& wv = w.val();
  Conv2Geom g = conv2_geom(xv, wv, stride, pad);
  if (bias) {
    const Tensor& bv = bias->val();
    if (bv.rank() != 1 || bv.dim(0) != g.F)
      throw ShapeError("conv2d: bias must be [F]");
  }
  const int64_t ckk = g.ckk();
  const int64_t rows = static_cast<int64_t>(g.N) * g.Ho * g.Wo;
  Tensor col({static_cast<int>(rows), static_cast<int>(ckk)});
  im2col2(xv.ptr(), g, col.ptr());
  Tensor outmat({static_cast<int>(rows), g.F});
  MapM(outmat.ptr(), rows, g.F).noalias() =
      MapC(col.ptr(), rows, ckk) * MapC(wv.ptr(), g.F, ckk).transpose();
  Tensor out({g.N, g.F, g.Ho, g.Wo});
  const int64_t hw = static_cast<int64_t>(g.Ho) * g.Wo;
  for (int n = 0; n < g.N; ++n) {
    const float* src = outmat.ptr() + static_cast<int64_t>(n) * hw * g.F;
    float* dst = out.ptr() + static_cast<int64_t>(n) * g.F * hw;
    for (int64_t p = 0; p < hw; ++p)
      for (int f = 0; f < g.F; ++f)
        dst[static_cast<int64_t>(f) * hw + p] = src[p * g.F + f];
  }
  if (bias) {
    const float* bp = bias->val().ptr();
    for (int n = 0; n < g.N; ++n)
      for (int f = 0; f < g.F; ++f) {
        float* dst = out.ptr() + (static_cast<int64_t>(n) * g.F + f) * hw;
        for (int64_t p = 0; p < hw; ++p) dst[p] += bp[f];
      }
  }
  int oid = static_cast<int>(t.node_count());
  bool needs = t.needs_grad(x.id) || t.needs_grad(w.id) ||
               (bias && t.needs_grad(bias->id));
  int bid = bias ? bias->id : -1;
  t.push(std::move(out), needs, [&t, oid, ix = x.id, iw = w.id, bid, g] {
    const Tensor* gp = t.grad_if_any(oid);
    if (!gp) return;
    const int64_t ckk = g.ckk();
    const int64_t rows = static_cast<int64_t>(g.N) * g.Ho * g.Wo;
    const int64_t hw = static_cast<int64_t>(g.Ho) * g.Wo;
    // Gather dY into [rows, F] layout.
    Tensor dymat({static_cast<int>(rows), g.F});
    for (int n = 0; n < g.N; ++n) {
      const float* src = gp->ptr() + static_cast<int64_t>(n) * g.F * hw;
      float* dst = dymat.ptr() + static_cast<int64_t>(n) * hw * g.F;
      for (int f = 0; f < g.F; ++f)
        for (int64_t p = 0; p < hw; ++p)
          dst[p * g.F + f] = src[static_cast<int64_t>(f) * hw + p];
    }
    if (bid >= 0 && t.needs_grad(bid)) {
      float* db = t.grad_buf(bid).ptr();
      const float* dp = dymat.ptr();
      for (int f = 0; f < g.F; ++f) {
        double s = 0.0;
        for (int64_t r = 0; r < rows; ++r) s += dp[r * g.F + f];
        db[f] += static_cast<float>(s);
      }
    }
    if (t.needs_grad(iw)) {
      Tensor col({static_cast<int>(rows), static_cast<int>(ckk)});
      im2col2(t.val(ix).ptr(), g, col.ptr());
      MapM dw(t.grad_buf(iw).ptr(), g.F, ckk);
      dw.noalias() += MapC(dymat.ptr(), rows, g.F).transpose() *
                      MapC(col.ptr(), rows, ckk);
    }
    if (t.needs_grad(ix)) {
      Tensor dcol({static_cast<int>(rows), static_cast<int>(ckk)});
      MapM(dcol.ptr(), rows, ckk).noalias() =
          MapC(dymat.ptr(), rows, g.F) * MapC(t.val(iw).ptr(), g.F, ckk);
      col2im2(dcol.ptr(), g, t.grad_buf(ix).ptr());
    }
  });
  return {&t, oid};
}

}  // namespace

Var conv2d(Var x, Var w, Var b, int stride, int pad) {
  return conv2d_impl(x, w, &b, stride, pad);
}

Var conv2d_nobias(Var x, Var w, int stride, int pad) {
  return conv2d_impl(x, w, nullptr, stride, pad);
}

Var conv3d(Var x, Var w, Var b, const std::vector<int>& stride,
           const std::vector<int>& pad) {
  Tape& t = *x.t;
  const Tensor& xv = x.val();
  const Tensor& wv = w.val();
  Conv3Geom g = conv3_geom(xv, wv, stride, pad);
  const Tensor& bv = b.val();
  if (bv.rank() != 1 || bv.dim(0) != g.F)
    throw ShapeError("conv3d: bias must be [F]");
  const int64_t ckk = g.ckk();
  const int64_t rows = static_cast<int64_t>(g.N) * g.To * g.Ho * g.Wo;
  Tensor col({static_cast<int>(rows), static_cast<int>(ckk)});
  im2col3(xv.ptr(), g, col.ptr());
  Tensor outmat({static_cast<int>(rows), g.F});
  MapM(outmat.ptr(), rows, g.F).noalias() =
      MapC(col.ptr(), rows, ckk) * MapC(wv.ptr(), g.F, ckk).transpose();
  Tensor out({g.N, g.F, g.To, g.Ho, g.Wo});
  const int64_t thw = static_cast<int64_t>(g.To) * g.Ho * g.Wo;
  const float* bp = bv.ptr();
  for (int n = 0; n < g.N; ++n) {
    const float* src = outmat.ptr() + static_cast<int64_t>(n) * thw * g.F;
    float* dst = out.ptr() + static_cast<int64_t>(n) * g.F * thw;
    for (int64_t p = 0; p < thw; ++p)
      for (int f = 0; f < g.F; ++f)
        dst[static_cast<int64_t>(f) * thw + p] = src[p * g.F + f] + bp[f];
  }
  int oid = static_cast<int>(t.node_count());
  bool needs = t.needs_grad(x.id) || t.needs_grad(w.id) || t.needs_grad(b.id);
  t.push(std::move(out), needs, [&t, oid, ix = x.id, iw = w.id, ib = b.id, g] {
    const Tensor* gp = t.grad_if_any(oid);
    if (!gp) return;
    const int64_t ckk = g.ckk();
    const int64_t rows = static_cast<int64_t>(g.N) * g.To * g.Ho * g.Wo;
    const int64_t thw = static_cast<int64_t>(g.To) * g.Ho * g.Wo;
    Tensor dymat({static_cast<int>(rows), g.F});
    for (int n = 0; n < g.N; ++n) {
      const float* src = gp->ptr() + static_cast<int64_t>(n) * g.F * thw;
      float* dst = dymat.ptr() + static_cast<int64_t>(n) * thw * g.F;
      for (int f = 0; f < g.F; ++f)
        for (int64_t p = 0; p < thw; ++p)
          dst[p * g.F + f] = src[static_cast<int64_t>(f) * thw + p];
    }
    if (t.needs_grad(ib)) {
      float* db = t.grad_buf(ib).ptr();
      const float* dp = dymat.ptr();
      for (int f = 0; f < g.F; ++f) {
        double s = 0.0;
        for (int64_t r = 0; r < rows; ++r) s += dp[r * g.F + f];
        db[f] += static_cast<float>(s);
      }
    }
    if (t.needs_grad(iw)) {
      Tensor col({static_cast<int>(rows), static_cast<int>(ckk)});
      im2col3(t.val(ix).ptr(), g, col.ptr());
      MapM dw(t.grad_buf(iw).ptr(), g.F, ckk);
      dw.noalias() += MapC(dymat.ptr(), rows, g.F).transpose() *
                      MapC(col.ptr(), rows, ckk);
    }
    if (t.needs_grad(ix)) {
      Tensor dcol({static_cast<int>(rows), static_cast<int>(ckk)});
      MapM(dcol.ptr(), rows, ckk).noalias() =
          MapC(dymat.ptr(), rows, g.F) * MapC(t.val(iw).ptr(), g.F, ckk);
      col2im3(dcol.ptr(), g, t.grad_buf(ix).ptr());
    }
  });
  return {&t, oid};
}

// ---- normalization ----

namespace {

void export_stats(const std::vector<float>& mean, const std::vector<float>& istd,
                  int C, Tensor* mean_out, Tensor* istd_out) {
  if (mean_out) *mean_out = Tensor::from({C}, mean);
  if (istd_out) *istd_out = Tensor::from({C}, istd);
}

}  // namespace

Var batch_norm_cols(Var x, float eps, Tensor* mean_out, Tensor* istd_out) {
  const Tensor& xv = x.val();
  if (xv.rank() != 2) throw ShapeError("batch_norm_cols: want rank 2");
  const int R = xv.dim(0), C = xv.dim(1);
  if (R < 2)
    throw ShapeError("batch_norm_cols: batch of " + std::to_string(R) +
                     " rows has no usable statistics");
  Tape& t = *x.t;
  std::vector<float> mean, istd;
  chan_stats(xv.ptr(), R, C, 1, eps, mean, istd);
  export_stats(mean, istd, C, mean_out, istd_out);
  // Stats are per column; the [N,C,S] worker wants channel = column, so view
  // rows as N with S=1.
  Tensor out({R, C});
  for (int r = 0; r < R; ++r)
    for (int c = 0; c < C; ++c)
      out.data[static_cast<size_t>(r) * C + c] =
          (xv.data[static_cast<size_t>(r) * C + c] - mean[static_cast<size_t>(c)]) *
          istd[static_cast<size_t>(c)];
  int oid = static_cast<int>(t.node_count());
  t.push(std::move(out), t.needs_grad(x.id),
         [&t, oid, ix = x.id, R, C, mean = std::move(mean), istd = std::move(istd)] {
           chan_norm_backward(t, ix, oid, R, C, 1, mean, istd);
         });
  return {&t, oid};
}

Var batch_norm_chan(Var x, float eps, Tensor* mean_out, Tensor* istd_out) {
  const Tensor& xv = x.val();
  if (xv.rank() < 3) throw ShapeError("batch_norm_chan: want rank >= 3");
  const int N = xv.dim(0), C = xv.dim(1);
  const int64_t S = tail_product(xv.shape, 2);
  if (N < 2)
    throw ShapeError("batch_norm_chan: batch of " + std::to_string(N) +
                     " has no usable statistics");
  Tape& t = *x.t;
  std::vector<float> mean, istd;
  chan_stats(xv.ptr(), N, C, S, eps, mean, istd);
  export_stats(mean, istd, C, mean_out, istd_out);
  Tensor out(xv.shape);
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const int64_t base = (static_cast<int64_t>(n) * C + c) * S;
      for (int64_t i = 0; i < S; ++i)
        out.data[static_cast<size_t>(base + i)] =
            (xv.data[static_cast<size_t>(base + i)] - mean[static_cast<size_t>(c)]) *
            istd[static_cast<size_t>(c)];
    }
  int oid = static_cast<int>(t.node_count());
  t.push(std::move(out), t.needs_grad(x.id),
         [&t, oid, ix = x.id, N, C, S, mean = std::move(mean), istd = std::move(istd)] {
           chan_norm_backward(t, ix, oid, N, C, S, mean, istd);
         });
  return {&t, oid};
}

Var normalize_cols_const(Var x, Tensor mean, Tensor istd) {
  const Tensor& xv = x.val();
  if (xv.rank() != 2) throw ShapeError("normalize_cols_const: want rank 2");
  const int R = xv.dim(0), C = xv.dim(1);
  require_shape(mean, {C}, "normalize_cols_const mean");
  require_shape(istd, {C}, "normalize_cols_const istd");
  Tape& t = *x.t;
  Tensor out({R, C});
  for (int r = 0; r < R; ++r)
    for (int c = 0; c < C; ++c)
      out.data[static_cast<size_t>(r) * C + c] =
          (xv.data[static_cast<size_t>(r) * C + c] - mean.data[static_cast<size_t>(c)]) *
          istd.data[static_cast<size_t>(c)];
  int oid = static_cast<int>(t.node_count());
  t.push(std::move(out), t.needs_grad(x.id),
         [&t, oid, ix = x.id, R, C, istd = std::move(istd)] {
           const Tensor* g = t.grad_if_any(oid);
           if (!g || !t.needs_grad(ix)) return;
           float* dx = t.grad_buf(ix).ptr();
           const float* gp = g->ptr();
           for (int r = 0; r < R; ++r)
             for (int c = 0; c < C; ++c)
               dx[static_cast<int64_t>(r) * C + c] +=
                   gp[static_cast<int64_t>(r) * C + c] * istd.data[static_cast<size_t>(c)];
         });
  return {&t, oid};
}

Var normalize_chan_const(Var x, Tensor mean, Tensor istd) {
  const Tensor& xv = x.val();
  if (xv.rank() < 3) throw ShapeError("normalize_chan_const: want rank >= 3");
  const int N = xv.dim(0), C = xv.dim(1);
  const int64_t S = tail_product(xv.shape, 2);
  require_shape(mean, {C}, "normalize_chan_const mean");
  require_shape(istd, {C}, "normalize_chan_const istd");
  Tape& t = *x.t;
  Tensor out(xv.shape);
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const int64_t base = (static_cast<int64_t>(n) * C + c) * S;
      for (int64_t i = 0; i < S; ++i)
        out.data[static_cast<size_t>(base + i)] =
            (xv.data[static_cast<size_t>(base + i)] - mean.data[static_cast<size_t>(c)]) *
            istd.data[static_cast<size_t>(c)];
    }
  int oid = static_cast<int>(t.node_count());
  t.push(std::move(out), t.needs_grad(x.id),
         [&t, oid, ix = x.id, N, C, S, istd = std::move(istd)] {
           const Tensor* g = t.grad_if_any(oid);
           if (!g || !t.needs_grad(ix)) return;
           float* dx = t.grad_buf(ix).ptr();
           const float* gp = g->ptr();
           for (int n = 0; n < N; ++n)
             for (int c = 0; c < C; ++c) {
               const int64_t base = (static_cast<int64_t>(n) * C + c) * S;
               for (int64_t i = 0; i < S; ++i)
                 dx[base + i] += gp[base + i] * istd.data[static_cast<size_t>(c)];
             }
         });
  return {&t, oid};
}

Var row_mean_center(Var x) {
  const Tensor& xv = x.val();
  if (xv.rank() != 2) throw ShapeError("row_mean_center: want rank 2");
  const int R = xv.dim(0), C = xv.dim(1);
  Tape& t = *x.t;
  Tensor out({R, C});
  for (int c = 0; c < C; ++c) {
    double s = 0.0;
    for (int r = 0; r < R; ++r) s += xv.data[static_cast<size_t>(r) * C + c];
    float m = static_cast<float>(s / R);
    for (int r = 0; r < R; ++r)
      out.data[static_cast<size_t>(r) * C + c] =
          xv.data[static_cast<size_t>(r) * C + c] - m;
  }
  int oid = static_cast<int>(t.node_count());
  t.push(std::move(out), t.needs_grad(x.id), [&t, oid, ix = x.id, R, C] {
    const Tensor* g = t.grad_if_any(oid);
    if (!g || !t.needs_grad(ix)) return;
    float* dx = t.grad_buf(ix).ptr();
    const float* gp = g->ptr();
    for (int c = 0; c < C; ++c) {
      double s = 0.0;
      for (int r = 0; r < R; ++r) s += gp[static_cast<int64_t>(r) * C + c];
      float m = static_cast<float>(s / R);
      for (int r = 0; r < R; ++r)
        dx[static_cast<int64_t>(r) * C + c] += gp[static_cast<int64_t>(r) * C + c] - m;
    }
  });
  return {&t, oid};
}

Var mul_chan(Var x, Var s) {
  const Tensor& xv = x.val();
  const Tensor& sv = s.val();
  if (xv.rank() < 3 || sv.rank() != 2 || sv.dim(0) != xv.dim(0) ||
      sv.dim(1) != xv.dim(1))
    throw ShapeError("mul_chan: want x[N,C,...] * s[N,C]");
  const int N = xv.dim(0), C = xv.dim(1);
  const int64_t S = tail_product(xv.shape, 2);
  Tape& t = *x.t;
  Tensor out(xv.shape);
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const float sc = sv.data[static_cast<size_t>(n) * C + c];
      const int64_t base = (static_cast<int64_t>(n) * C + c) * S;
      for (int64_t i = 0; i < S; ++i)
        out.data[static_cast<size_t>(base + i)] =
            xv.data[static_cast<size_t>(base + i)] * sc;
    }
  int oid = static_cast<int>(t.node_count());
  bool needs = t.needs_grad(x.id) || t.needs_grad(s.id);
  t.push(std::move(out), needs, [&t, oid, ix = x.id, is = s.id, N, C, S] {
    const Tensor* g = t.grad_if_any(oid);
    if (!g) return;
    const float* gp = g->ptr();
    if (t.needs_grad(ix)) {
      const float* sp = t.val(is).ptr();
      float* dx = t.grad_buf(ix).ptr();
      for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
          const float sc = sp[static_cast<int64_t>(n) * C + c];
          const int64_t base = (static_cast<int64_t>(n) * C + c) * S;
          for (int64_t i = 0; i < S; ++i) dx[base + i] += gp[base + i] * sc;
        }
    }
    if (t.needs_grad(is)) {
      const float* xp = t.val(ix).ptr();
      float* ds = t.grad_buf(is).ptr();
      for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
          const int64_t base = (static_cast<int64_t>(n) * C + c) * S;
          double acc = 0.0;
          for (int64_t i = 0; i < S; ++i)
            acc += static_cast<double>(gp[base + i]) * xp[base + i];
          ds[static_cast<int64_t>(n) * C + c] += static_cast<float>(acc);
        }
    }
  });
  return {&t, oid};
}

Var add_chan(Var x, Var s) {
  const Tensor& xv = x.val();
  const Tensor& sv = s.val();
  if (xv.rank() < 3 || sv.rank() != 2 || sv.dim(0) != xv.dim(0) ||
      sv.dim(1) != xv.dim(1))
    throw ShapeError("add_chan: want x[N,C,...] + s[N,C]");
  const int N = xv.dim(0), C = xv.dim(1);
  const int64_t S = tail_product(xv.shape, 2);
  Tape& t = *x.t;
  Tensor out(xv.shape);
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const float sc = sv.data[static_cast<size_t>(n) * C + c];
      const int64_t base = (static_cast<int64_t>(n) * C + c) * S;
      for (int64_t i = 0; i < S; ++i)
        out.data[static_cast<size_t>(base + i)] =
            xv.data[static_cast<size_t>(base + i)] + sc;
    }
  int oid = static_cast<int>(t.node_count());
  bool needs = t.needs_grad(x.id) || t.needs_grad(s.id);
  t.push(std::move(out), needs, [&t, oid, ix = x.id, is = s.id, N, C, S] {
    const Tensor* g = t.grad_if_any(oid);
    if (!g) return;
    const float* gp = g->ptr();
    if (t.needs_grad(ix)) axpy(1.0f, *g, t.grad_buf(ix));
    if (t.needs_grad(is)) {
      float* ds = t.grad_buf(is).ptr();
      for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
          const int64_t base = (static_cast<int64_t>(n) * C + c) * S;
          double acc = 0.0;
          for (int64_t i = 0; i < S; ++i) acc += gp[base + i];
          ds[static_cast<int64_t>(n) * C + c] += static_cast<float>(acc);
        }
    }
  });
  return {&t, oid};
}

// ---- resampling ----

Var upsample2x_nn(Var x) {
  const Tensor& xv = x.val();
  if (xv.rank() < 3) throw ShapeError("upsample2x_nn: want rank >= 3");
  const int r = xv.rank();
  const int H = xv.dim(r - 2), W = xv.dim(r - 1);
  const int64_t M = xv.size() / (static_cast<int64_t>(H) * W);
  std::vector<int> oshape = xv.shape;
  oshape[static_cast<size_t>(r - 2)] = 2 * H;
  oshape[static_cast<size_t>(r - 1)] = 2 * W;
  Tape& t = *x.t;
  Tensor out(oshape);
  const float* xp = xv.ptr();
  float* op = out.ptr();
  for (int64_t m = 0; m < M; ++m) {
    const float* xm = xp + m * H * W;
    float* om = op + m * 4 * H * W;
    for (int i = 0; i < H; ++i)
      for (int j = 0; j < W; ++j) {
        float v = xm[static_cast<int64_t>(i) * W + j];
        float* o0 = om + (static_cast<int64_t>(2 * i) * 2 * W + 2 * j);
        o0[0] = v;
        o0[1] = v;
        o0[2 * W] = v;
        o0[2 * W + 1] = v;
      }
  }
  int oid = static_cast<int>(t.node_count());
  t.push(std::move(out), t.needs_grad(x.id), [&t, oid, ix = x.id, M, H, W] {
    const Tensor* g = t.grad_if_any(oid);
    if (!g || !t.needs_grad(ix)) return;
    float* dx = t.grad_buf(ix).ptr();
    const float* gp = g->ptr();
    for (int64_t m = 0; m < M; ++m) {
      float* dm = dx + m * H * W;
      const float* gm = gp + m * 4 * H * W;
      for (int i = 0; i < H; ++i)
        for (int j = 0; j < W; ++j) {
          const float* g0 = gm + (static_cast<int64_t>(2 * i) * 2 * W + 2 * j);
          dm[static_cast<int64_t>(i) * W + j] +=
              g0[0] + g0[1] + g0[2 * W] + g0[2 * W + 1];
        }
    }
  });
  return {&t, oid};
}

Var avg_pool2x(Var x) {
  const Tensor& xv = x.val();
  if (xv.rank() < 3) throw ShapeError("avg_pool2x: want rank >= 3");
  const int r = xv.rank();
  const int H = xv.dim(r - 2), W = xv.dim(r - 1);
  if (H % 2 != 0 || W % 2 != 0)
    throw ShapeError("avg_pool2x: odd extent " + std::to_string(H) + "x" +
                     std::to_string(W));
  const int64_t M = xv.size() / (static_cast<int64_t>(H) * W);
  std::vector<int> oshape = xv.shape;
  oshape[static_cast<size_t>(r - 2)] = H / 2;
  oshape[static_cast<size_t>(r - 1)] = W / 2;
  Tape& t = *x.t;
  Tensor out(oshape);
  const float* xp = xv.ptr();
  float* op = out.ptr();
  const int Ho = H / 2, Wo = W / 2;
  for (int64_t m = 0; m < M; ++m) {
    const float* xm = xp + m * H * W;
    float* om = op + m * Ho * Wo;
    for (int i = 0; i < Ho; ++i)
      for (int j = 0; j < Wo; ++j) {
        const float* x0 = xm + (static_cast<int64_t>(2 * i) * W + 2 * j);
        om[static_cast<int64_t>(i) * Wo + j] =
            0.25f * (x0[0] + x0[1] + x0[W] + x0[W + 1]);
      }
  }
  int oid = static_cast<int>(t.node_count());
  t.push(std::move(out), t.needs_grad(x.id), [&t, oid, ix = x.id, M, H, W] {
    const Tensor* g = t.grad_if_any(oid);
    if (!g || !t.needs_grad(ix)) return;
    float* dx = t.grad_buf(ix).ptr();
    const float* gp = g->ptr();
    const int Ho = H / 2, Wo = W / 2;
    for (int64_t m = 0; m < M; ++m) {
      float* dm = dx + m * H * W;
      const float* gm = gp + m * Ho * Wo;
      for (int i = 0; i < Ho; ++i)
        for (int j = 0; j < Wo; ++j) {
          float v = 0.25f * gm[static_cast<int64_t>(i) * Wo + j];
          float* d0 = dm + (static_cast<int64_t>(2 * i) * W + 2 * j);
          d0[0] += v;
          d0[1] += v;
          d0[W] += v;
          d0[W + 1] += v;
        }
    }
  });
  return {&t, oid};
}

// ---- shape plumbing ----

Var reshape(Var x, std::vector<int> shape) {
  const Tensor& xv = x.val();
  if (Tensor::count(shape) != xv.size())
    throw ShapeError("reshape: element count mismatch " + shape_str(xv.shape) +
                     " -> " + shape_str(shape));
  Tape& t = *x.t;
  Tensor out;
  out.shape = std::move(shape);
  out.data = xv.data;
  int oid = static_cast<int>(t.node_count());
  t.push(std::move(out), t.needs_grad(x.id), [&t, oid, ix = x.id] {
    const Tensor* g = t.grad_if_any(oid);
    if (g && t.needs_grad(ix)) {
      Tensor& dx = t.grad_buf(ix);
      const float* gp = g->ptr();
      float* dp = dx.ptr();
      for (int64_t i = 0; i < g->size(); ++i) dp[i] += gp[i];
    }
  });
  return {&t, oid};
}

Var permute(Var x, const std::vector<int>& axes) {
  Tape& t = *x.t;
  Tensor out = permute_tensor(x.val(), axes);
  int oid = static_cast<int>(t.node_count());
  t.push(std::move(out), t.needs_grad(x.id), [&t, oid, ix = x.id, axes] {
    const Tensor* g = t.grad_if_any(oid);
    if (!g || !t.needs_grad(ix)) return;
    Tensor gperm = permute_tensor(*g, inverse_axes(axes));
    axpy(1.0f, gperm, t.grad_buf(ix));
  });
  return {&t, oid};
}

Var concat_cols(Var a, Var b) {
  const Tensor& av = a.val();
  const Tensor& bv = b.val();
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(0) != bv.dim(0))
    throw ShapeError("concat_cols: want [R,Ca] ++ [R,Cb]");
  const int R = av.dim(0), Ca = av.dim(1), Cb = bv.dim(1);
  Tape& t = *a.t;
  Tensor out({R, Ca + Cb});
  for (int r = 0; r < R; ++r) {
    std::memcpy(out.ptr() + static_cast<int64_t>(r) * (Ca + Cb),
                av.ptr() + static_cast<int64_t>(r) * Ca, sizeof(float) * Ca);
    std::memcpy(out.ptr() + static_cast<int64_t>(r) * (Ca + Cb) + Ca,
                bv.ptr() + static_cast<int64_t>(r) * Cb, sizeof(float) * Cb);
  }
  int oid = static_cast<int>(t.node_count());
  bool needs = t.needs_grad(a.id) || t.needs_grad(b.id);
  t.push(std::move(out), needs, [&t, oid, ia = a.id, ib = b.id, R, Ca, Cb] {
    const Tensor* g = t.grad_if_any(oid);
    if (!g) return;
    const float* gp = g->ptr();
    if (t.needs_grad(ia)) {
      float* da = t.grad_buf(ia).ptr();
      for (int r = 0; r < R; ++r)
        for (int c = 0; c < Ca; ++c)
          da[static_cast<int64_t>(r) * Ca + c] +=
              gp[static_cast<int64_t>(r) * (Ca + Cb) + c];
    }
    if (t.needs_grad(ib)) {
      float* db = t.grad_buf(ib).ptr();
      for (int r = 0; r < R; ++r)
        for (int c = 0; c < Cb; ++c)
          db[static_cast<int64_t>(r) * Cb + c] +=
              gp[static_cast<int64_t>(r) * (Ca + Cb) + Ca + c];
    }
  });
  return {&t, oid};
}

Var concat_chan(Var a, Var b) {
  const Tensor& av = a.val();
  const Tensor& bv = b.val();
  if (av.rank() < 2 || av.rank() != bv.rank())
    throw ShapeError("concat_chan: rank mismatch");
  for (int i = 0; i < av.rank(); ++i)
    if (i != 1 && av.dim(i) != bv.dim(i))
      throw ShapeError("concat_chan: non-channel extents differ");
  const int N = av.dim(0), Ca = av.dim(1), Cb = bv.dim(1);
  const int64_t S = tail_product(av.shape, 2);
  std::vector<int> oshape = av.shape;
  oshape[1] = Ca + Cb;
  Tape& t = *a.t;
  Tensor out(oshape);
  for (int n = 0; n < N; ++n) {
    std::memcpy(out.ptr() + static_cast<int64_t>(n) * (Ca + Cb) * S,
                av.ptr() + static_cast<int64_t>(n) * Ca * S,
                sizeof(float) * static_cast<size_t>(Ca * S));
    std::memcpy(out.ptr() + (static_cast<int64_t>(n) * (Ca + Cb) + Ca) * S,
                bv.ptr() + static_cast<int64_t>(n) * Cb * S,
                sizeof(float) * static_cast<size_t>(Cb * S));
  }
  int oid = static_cast<int>(t.node_count());
  bool needs = t.needs_grad(a.id) || t.needs_grad(b.id);
  t.push(std::move(out), needs, [&t, oid, ia = a.id, ib = b.id, N, Ca, Cb, S] {
    const Tensor* g = t.grad_if_any(oid);
    if (!g) return;
    const float* gp = g->ptr();
    if (t.needs_grad(ia)) {
      float* da = t.grad_buf(ia).ptr();
      for (int n = 0; n < N; ++n) {
        const float* gs = gp + static_cast<int64_t>(n) * (Ca + Cb) * S;
        float* ds = da + static_cast<int64_t>(n) * Ca * S;
        for (int64_t i = 0; i < static_cast<int64_t>(Ca) * S; ++i) ds[i] += gs[i];
      }
    }
    if (t.needs_grad(ib)) {
      float* db = t.grad_buf(ib).ptr();
      for (int n = 0; n < N; ++n) {
        const float* gs = gp + (static_cast<int64_t>(n) * (Ca + Cb) + Ca) * S;
        float* ds = db + static_cast<int64_t>(n) * Cb * S;
        for (int64_t i = 0; i < static_cast<int64_t>(Cb) * S; ++i) ds[i] += gs[i];
      }
    }
  });
  return {&t, oid};
}

Var slice_cols(Var x, int start, int len) {
  const Tensor& xv = x.val();
  if (xv.rank() != 2) throw ShapeError("slice_cols: want rank 2");
  const int R = xv.dim(0), C = xv.dim(1);
  if (start < 0 || len <= 0 || start + len > C)
    throw ShapeError("slice_cols: out of range");
  Tape& t = *x.t;
  Tensor out({R, len});
  for (int r = 0; r < R; ++r)
    std::memcpy(out.ptr() + static_cast<int64_t>(r) * len,
                xv.ptr() + static_cast<int64_t>(r) * C + start,
                sizeof(float) * static_cast<size_t>(len));
  int oid = static_cast<int>(t.node_count());
  t.push(std::move(out), t.needs_grad(x.id), [&t, oid, ix = x.id, R, C, start, len] {
    const Tensor* g = t.grad_if_any(oid);
    if (!g || !t.needs_grad(ix)) return;
    float* dx = t.grad_buf(ix).ptr();
    const float* gp = g->ptr();
    for (int r = 0; r < R; ++r)
      for (int c = 0; c < len; ++c)
        dx[static_cast<int64_t>(r) * C + start + c] +=
            gp[static_cast<int64_t>(r) * len + c];
  });
  return {&t, oid};
}

Var repeat_rows(Var x, int times) {
  const Tensor& xv = x.val();
  if (xv.rank() != 2 || times < 1) throw ShapeError("repeat_rows: want rank 2, times >= 1");
  const int B = xv.dim(0), D = xv.dim(1);
  Tape& t = *x.t;
  Tensor out({B * times, D});
  for (int b = 0; b < B; ++b)
    for (int k = 0; k < times; ++k)
      std::memcpy(out.ptr() + (static_cast<int64_t>(b) * times + k) * D,
                  xv.ptr() + static_cast<int64_t>(b) * D,
                  sizeof(float) * static_cast<size_t>(D));
  int oid = static_cast<int>(t.node_count());
  t.push(std::move(out), t.needs_grad(x.id), [&t, oid, ix = x.id, B, D, times] {
    const Tensor* g = t.grad_if_any(oid);
    if (!g || !t.needs_grad(ix)) return;
    float* dx = t.grad_buf(ix).ptr();
    const float* gp = g->ptr();
    for (int b = 0; b < B; ++b)
      for (int k = 0; k < times; ++k) {
        const float* gs = gp + (static_cast<int64_t>(b) * times + k) * D;
        float* ds = dx + static_cast<int64_t>(b) * D;
        for (int d = 0; d < D; ++d) ds[d] += gs[d];
      }
  });
  return {&t, oid};
}

// ---- reductions ----

Var mean_all(Var x) {
  const Tensor& xv = x.val();
  Tape& t = *x.t;
  double s = 0.0;
  for (float v : xv.data) s += v;
  const int64_t n = xv.size();
  Tensor out = Tensor::from({1}, {static_cast<float>(s / static_cast<double>(n))});
  int oid = static_cast<int>(t.node_count());
  t.push(std::move(out), t.needs_grad(x.id), [&t, oid, ix = x.id, n] {
    const Tensor* g = t.grad_if_any(oid);
    if (!g || !t.needs_grad(ix)) return;
    float v = g->data[0] / static_cast<float>(n);
    float* dx = t.grad_buf(ix).ptr();
    for (int64_t i = 0; i < n; ++i) dx[i] += v;
  });
  return {&t, oid};
}

Var mean_cols(Var x) {
  const Tensor& xv = x.val();
  if (xv.rank() != 2) throw ShapeError("mean_cols: want rank 2");
  const int R = xv.dim(0), C = xv.dim(1);
  Tape& t = *x.t;
  Tensor out({R, 1});
  for (int r = 0; r < R; ++r) {
    double s = 0.0;
    for (int c = 0; c < C; ++c) s += xv.data[static_cast<size_t>(r) * C + c];
    out.data[static_cast<size_t>(r)] = static_cast<float>(s / C);
  }
  int oid = static_cast<int>(t.node_count());
  t.push(std::move(out), t.needs_grad(x.id), [&t, oid, ix = x.id, R, C] {
    const Tensor* g = t.grad_if_any(oid);
    if (!g || !t.needs_grad(ix)) return;
    float* dx = t.grad_buf(ix).ptr();
    for (int r = 0; r < R; ++r) {
      float v = g->data[static_cast<size_t>(r)] / static_cast<float>(C);
      for (int c = 0; c < C; ++c) dx[static_cast<int64_t>(r) * C + c] += v;
    }
  });
  return {&t, oid};
}

Var global_mean_tail(Var x) {
  const Tensor& xv = x.val();
  if (xv.rank() < 3) throw ShapeError("global_mean_tail: want rank >= 3");
  const int N = xv.dim(0), C = xv.dim(1);
  const int64_t S = tail_product(xv.shape, 2);
  Tape& t = *x.t;
  Tensor out({N, C});
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const int64_t base = (static_cast<int64_t>(n) * C + c) * S;
      double s = 0.0;
      for (int64_t i = 0; i < S; ++i) s += xv.data[static_cast<size_t>(base + i)];
      out.data[static_cast<size_t>(n) * C + c] =
          static_cast<float>(s / static_cast<double>(S));
    }
  int oid = static_cast<int>(t.node_count());
  t.push(std::move(out), t.needs_grad(x.id), [&t, oid, ix = x.id, N, C, S] {
    const Tensor* g = t.grad_if_any(oid);
    if (!g || !t.needs_grad(ix)) return;
    float* dx = t.grad_buf(ix).ptr();
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c) {
        const int64_t base = (static_cast<int64_t>(n) * C + c) * S;
        float v = g->data[static_cast<size_t>(n) * C + c] / static_cast<float>(S);
        for (int64_t i = 0; i < S; ++i) dx[base + i] += v;
      }
  });
  return {&t, oid};
}

Var batch_time_mean_bcast(Var x) {
  const Tensor& xv = x.val();
  if (xv.rank() != 5) throw ShapeError("batch_time_mean_bcast: want [B,C,T,H,W]");
  const int B = xv.dim(0), C = xv.dim(1), T = xv.dim(2), H = xv.dim(3), W = xv.dim(4);
  const int64_t hw = static_cast<int64_t>(H) * W;
  Tape& t = *x.t;
  Tensor cell({C, H, W});
  for (int c = 0; c < C; ++c)
    for (int64_t p = 0; p < hw; ++p) {
      double s = 0.0;
      for (int b = 0; b < B; ++b)
        for (int a = 0; a < T; ++a)
          s += xv.data[static_cast<size_t>(
              (((static_cast<int64_t>(b) * C + c) * T + a) * hw) + p)];
      cell.data[static_cast<size_t>(c * hw + p)] =
          static_cast<float>(s / (static_cast<double>(B) * T));
    }
  Tensor out(xv.shape);
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c)
      for (int a = 0; a < T; ++a)
        std::memcpy(out.ptr() + ((static_cast<int64_t>(b) * C + c) * T + a) * hw,
                    cell.ptr() + static_cast<int64_t>(c) * hw,
                    sizeof(float) * static_cast<size_t>(hw));
  int oid = static_cast<int>(t.node_count());
  t.push(std::move(out), t.needs_grad(x.id), [&t, oid, ix = x.id, B, C, T, hw] {
    const Tensor* g = t.grad_if_any(oid);
    if (!g || !t.needs_grad(ix)) return;
    float* dx = t.grad_buf(ix).ptr();
    const float* gp = g->ptr();
    const float inv = 1.0f / (static_cast<float>(B) * static_cast<float>(T));
    for (int c = 0; c < C; ++c)
      for (int64_t p = 0; p < hw; ++p) {
        double s = 0.0;
        for (int b = 0; b < B; ++b)
          for (int a = 0; a < T; ++a)
            s += gp[(((static_cast<int64_t>(b) * C + c) * T + a) * hw) + p];
        float v = static_cast<float>(s) * inv;
        for (int b = 0; b < B; ++b)
          for (int a = 0; a < T; ++a)
            dx[(((static_cast<int64_t>(b) * C + c) * T + a) * hw) + p] += v;
      }
  });
  return {&t, oid};
}

// ---- task-specific ----

Var interp_rows(Var z1, Var zT, int T, bool exact_endpoints) {
  check_same(z1, zT, "interp_rows");
  const Tensor& av = z1.val();
  if (av.rank() != 2 || T < 1) throw ShapeError("interp_rows: want rank 2, T >= 1");
  const int B = av.dim(0), D = av.dim(1);
  Tape& t = *z1.t;
  std::vector<float> ca(static_cast<size_t>(T)), cb(static_cast<size_t>(T));
  for (int i = 1; i <= T; ++i) {
    float a, b;
    if (exact_endpoints) {
      if (T == 1) {
        a = 0.0f;
        b = 1.0f;
      } else {
        a = static_cast<float>(T - i) / static_cast<float>(T - 1);
        b = static_cast<float>(i - 1) / static_cast<float>(T - 1);
      }
    } else {
      a = static_cast<float>(T - i) / static_cast<float>(T);
      b = static_cast<float>(i) / static_cast<float>(T);
    }
    ca[static_cast<size_t>(i - 1)] = a;
    cb[static_cast<size_t>(i - 1)] = b;
  }
  Tensor out({B * T, D});
  const float* ap = av.ptr();
  const float* bp = zT.val().ptr();
  for (int b = 0; b < B; ++b)
    for (int i = 0; i < T; ++i) {
      float* op = out.ptr() + (static_cast<int64_t>(b) * T + i) * D;
      const float* za = ap + static_cast<int64_t>(b) * D;
      const float* zb = bp + static_cast<int64_t>(b) * D;
      const float wa = ca[static_cast<size_t>(i)], wb = cb[static_cast<size_t>(i)];
      for (int d = 0; d < D; ++d) op[d] = wa * za[d] + wb * zb[d];
    }
  int oid = static_cast<int>(t.node_count());
  bool needs = t.needs_grad(z1.id) || t.needs_grad(zT.id);
  t.push(std::move(out), needs,
         [&t, oid, ia = z1.id, ib = zT.id, B, D, T, ca = std::move(ca), cb = std::move(cb)] {
           const Tensor* g = t.grad_if_any(oid);
           if (!g) return;
           const float* gp = g->ptr();
           if (t.needs_grad(ia)) {
             float* da = t.grad_buf(ia).ptr();
             for (int b = 0; b < B; ++b)
               for (int i = 0; i < T; ++i) {
                 const float* gr = gp + (static_cast<int64_t>(b) * T + i) * D;
                 const float w = ca[static_cast<size_t>(i)];
                 float* dr = da + static_cast<int64_t>(b) * D;
                 for (int d = 0; d < D; ++d) dr[d] += w * gr[d];
               }
           }
           if (t.needs_grad(ib)) {
             float* db = t.grad_buf(ib).ptr();
             for (int b = 0; b < B; ++b)
               for (int i = 0; i < T; ++i) {
                 const float* gr = gp + (static_cast<int64_t>(b) * T + i) * D;
                 const float w = cb[static_cast<size_t>(i)];
                 float* dr = db + static_cast<int64_t>(b) * D;
                 for (int d = 0; d < D; ++d) dr[d] += w * gr[d];
               }
           }
         });
  return {&t, oid};
}

namespace {

inline int clampi(int v, int lo, int hi) { return v < lo ? lo : (v > hi ? hi : v); }

void sobel_lum(const float* frame, int H, int W, float* lum) {
  const int64_t hw = static_cast<int64_t>(H) * W;
  const float* r = frame;
  const float* g = frame + hw;
  const float* b = frame + 2 * hw;
  for (int64_t i = 0; i < hw; ++i) lum[i] = kLumR * r[i] + kLumG * g[i] + kLumB * b[i];
}

void sobel_grads(const float* lum, int H, int W, float* gx, float* gy) {
  for (int i = 0; i < H; ++i)
    for (int j = 0; j < W; ++j) {
      double ax = 0.0, ay = 0.0;
      for (int u = 0; u < 3; ++u)
        for (int v = 0; v < 3; ++v) {
          float s = lum[static_cast<int64_t>(clampi(i + u - 1, 0, H - 1)) * W +
                        clampi(j + v - 1, 0, W - 1)];
          ax += kSobelX[u * 3 + v] * s;
          ay += kSobelY[u * 3 + v] * s;
        }
      gx[static_cast<int64_t>(i) * W + j] = static_cast<float>(ax);
      gy[static_cast<int64_t>(i) * W + j] = static_cast<float>(ay);
    }
}

}  // namespace

Var sobel_edges(Var frames) {
  const Tensor& xv = frames.val();
  if (xv.rank() != 4 || xv.dim(1) != 3)
    throw ShapeError("sobel_edges: want [N,3,H,W]");
  const int N = xv.dim(0), H = xv.dim(2), W = xv.dim(3);
  const int64_t hw = static_cast<int64_t>(H) * W;
  Tape& t = *frames.t;
  Tensor out({N, 1, H, W});
  std::vector<float> lum(static_cast<size_t>(hw)), gx(static_cast<size_t>(hw)),
      gy(static_cast<size_t>(hw));
  for (int n = 0; n < N; ++n) {
    sobel_lum(xv.ptr() + static_cast<int64_t>(n) * 3 * hw, H, W, lum.data());
    sobel_grads(lum.data(), H, W, gx.data(), gy.data());
    float* op = out.ptr() + static_cast<int64_t>(n) * hw;
    for (int64_t i = 0; i < hw; ++i)
      op[i] = std::sqrt(gx[static_cast<size_t>(i)] * gx[static_cast<size_t>(i)] +
                        gy[static_cast<size_t>(i)] * gy[static_cast<size_t>(i)]);
  }
  int oid = static_cast<int>(t.node_count());
  t.push(std::move(out), t.needs_grad(frames.id), [&t, oid, ix = frames.id, N, H, W] {
    const Tensor* g = t.grad_if_any(oid);
    if (!g || !t.needs_grad(ix)) return;
    const int64_t hw = static_cast<int64_t>(H) * W;
    const Tensor& x = t.val(ix);
    Tensor& dx = t.grad_buf(ix);
    std::vector<float> lum(static_cast<size_t>(hw)), gx(static_cast<size_t>(hw)),
        gy(static_cast<size_t>(hw)), dlum(static_cast<size_t>(hw));
    for (int n = 0; n < N; ++n) {
      sobel_lum(x.ptr() + static_cast<int64_t>(n) * 3 * hw, H, W, lum.data());
      sobel_grads(lum.data(), H, W, gx.data(), gy.data());
      std::fill(dlum.begin(), dlum.end(), 0.0f);
      const float* gm = g->ptr() + static_cast<int64_t>(n) * hw;
      const float* mag = t.val(oid).ptr() + static_cast<int64_t>(n) * hw;
      // d|g|/dgx = gx/|g|; at the cone point both components are zero, take 0.
      for (int i = 0; i < H; ++i)
        for (int j = 0; j < W; ++j) {
          const int64_t p = static_cast<int64_t>(i) * W + j;
          float m = mag[p];
          if (m <= 0.0f) continue;
          float dgx = gm[p] * gx[static_cast<size_t>(p)] / m;
          float dgy = gm[p] * gy[static_cast<size_t>(p)] / m;
          for (int u = 0; u < 3; ++u)
            for (int v = 0; v < 3; ++v) {
              int si = clampi(i + u - 1, 0, H - 1);
              int sj = clampi(j + v - 1, 0, W - 1);
              dlum[static_cast<size_t>(si) * W + sj] +=
                  kSobelX[u * 3 + v] * dgx + kSobelY[u * 3 + v] * dgy;
            }
        }
      float* dr = dx.ptr() + static_cast<int64_t>(n) * 3 * hw;
      for (int64_t p = 0; p < hw; ++p) {
        dr[p] += kLumR * dlum[static_cast<size_t>(p)];
        dr[hw + p] += kLumG * dlum[static_cast<size_t>(p)];
        dr[2 * hw + p] += kLumB * dlum[static_cast<size_t>(p)];
      }
    }
  });
  return {&t, oid};
}

Var l2_normalize_rows(Var x) {
  const Tensor& xv = x.val();
  if (xv.rank() != 2) throw ShapeError("l2_normalize_rows: want rank 2");
  const int R = xv.dim(0), C = xv.dim(1);
  constexpr float kEps = 1e-12f;
  Tape& t = *x.t;
  Tensor out({R, C});
  std::vector<float> norms(static_cast<size_t>(R));
  for (int r = 0; r < R; ++r) {
    double s = 0.0;
    const float* xp = xv.ptr() + static_cast<int64_t>(r) * C;
    for (int c = 0; c < C; ++c) s += static_cast<double>(xp[c]) * xp[c];
    float n = std::max(static_cast<float>(std::sqrt(s)), kEps);
    norms[static_cast<size_t>(r)] = n;
    float* op = out.ptr() + static_cast<int64_t>(r) * C;
    for (int c = 0; c < C; ++c) op[c] = xp[c] / n;
  }
  int oid = static_cast<int>(t.node_count());
  t.push(std::move(out), t.needs_grad(x.id),
         [&t, oid, ix = x.id, R, C, norms = std::move(norms)] {
           const Tensor* g = t.grad_if_any(oid);
           if (!g || !t.needs_grad(ix)) return;
           const float* gp = g->ptr();
           const float* yp = t.val(oid).ptr();
           float* dx = t.grad_buf(ix).ptr();
           for (int r = 0; r < R; ++r) {
             const float* gr = gp + static_cast<int64_t>(r) * C;
             const float* yr = yp + static_cast<int64_t>(r) * C;
             double dot = 0.0;
             for (int c = 0; c < C; ++c) dot += static_cast<double>(yr[c]) * gr[c];
             const float n = norms[static_cast<size_t>(r)];
             float* dr = dx + static_cast<int64_t>(r) * C;
             for (int c = 0; c < C; ++c)
               dr[c] += (gr[c] - yr[c] * static_cast<float>(dot)) / n;
           }
         });
  return {&t, oid};
}

Var row_diag_sub(Var s) {
  const Tensor& sv = s.val();
  if (sv.rank() != 2 || sv.dim(0) != sv.dim(1))
    throw ShapeError("row_diag_sub: want square [B,B]");
  const int B = sv.dim(0);
  Tape& t = *s.t;
  Tensor out({B, B});
  for (int i = 0; i < B; ++i) {
    const float d = sv.data[static_cast<size_t>(i) * B + i];
    for (int j = 0; j < B; ++j)
      out.data[static_cast<size_t>(i) * B + j] =
          sv.data[static_cast<size_t>(i) * B + j] - d;
  }
  int oid = static_cast<int>(t.node_count());
  t.push(std::move(out), t.needs_grad(s.id), [&t, oid, is = s.id, B] {
    const Tensor* g = t.grad_if_any(oid);
    if (!g || !t.needs_grad(is)) return;
    float* ds = t.grad_buf(is).ptr();
    const float* gp = g->ptr();
    for (int i = 0; i < B; ++i) {
      double rowsum = 0.0;
      for (int j = 0; j < B; ++j) rowsum += gp[static_cast<int64_t>(i) * B + j];
      for (int j = 0; j < B; ++j)
        if (j != i) ds[static_cast<int64_t>(i) * B + j] += gp[static_cast<int64_t>(i) * B + j];
      ds[static_cast<int64_t>(i) * B + i] -=
          static_cast<float>(rowsum - gp[static_cast<int64_t>(i) * B + i]);
    }
  });
  return {&t, oid};
}

Var softmax_cross_entropy(Var logits, const std::vector<int>& labels) {
  const Tensor& lv = logits.val();
  if (lv.rank() != 2) throw ShapeError("softmax_cross_entropy: want [B,K]");
  const int B = lv.dim(0), K = lv.dim(1);
  if (static_cast<int>(labels.size()) != B)
    throw ShapeError("softmax_cross_entropy: label count mismatch");
  for (int y : labels)
    if (y < 0 || y >= K) throw ShapeError("softmax_cross_entropy: label out of range");
  Tape& t = *logits.t;
  double loss = 0.0;
  for (int b = 0; b < B; ++b) {
    const float* row = lv.ptr() + static_cast<int64_t>(b) * K;
    float m = row[0];
    for (int k = 1; k < K; ++k) m = std::max(m, row[k]);
    double se = 0.0;
    for (int k = 0; k < K; ++k) se += std::exp(static_cast<double>(row[k]) - m);
    loss += m + std::log(se) - row[labels[static_cast<size_t>(b)]];
  }
  Tensor out = Tensor::from({1}, {static_cast<float>(loss / B)});
  int oid = static_cast<int>(t.node_count());
  t.push(std::move(out), t.needs_grad(logits.id), [&t, oid, il = logits.id, B, K, labels] {
    const Tensor* g = t.grad_if_any(oid);
    if (!g || !t.needs_grad(il)) return;
    const float gs = g->data[0] / static_cast<float>(B);
    const Tensor& lv = t.val(il);
    float* dl = t.grad_buf(il).ptr();
    for (int b = 0; b < B; ++b) {
      const float* row = lv.ptr() + static_cast<int64_t>(b) * K;
      float m = row[0];
      for (int k = 1; k < K; ++k) m = std::max(m, row[k]);
      double se = 0.0;
      for (int k = 0; k < K; ++k) se += std::exp(static_cast<double>(row[k]) - m);
      for (int k = 0; k < K; ++k) {
        float p = static_cast<float>(std::exp(static_cast<double>(row[k]) - m) / se);
        dl[static_cast<int64_t>(b) * K + k] +=
            gs * (p - (k == labels[static_cast<size_t>(b)] ? 1.0f : 0.0f));
      }
    }
  });
  return {&t, oid};
}

// ---- spectral normalization ----

float spectral_power_iterate(Parameter& p, int iters, float eps) {
  const int r = p.value.dim(0);
  const int64_t c = p.value.size() / r;
  if (p.sn_u.size() != r || p.sn_v.size() != c)
    throw Error("spectral_power_iterate: " + p.name + " has no attached u/v state");
  MapC W(p.value.ptr(), r, c);
  Eigen::Map<Eigen::VectorXf> u(p.sn_u.ptr(), r);
  Eigen::Map<Eigen::VectorXf> v(p.sn_v.ptr(), c);
  for (int it = 0; it < iters; ++it) {
    v.noalias() = W.transpose() * u;
    float nv = v.norm();
    v /= std::max(nv, eps);
    u.noalias() = W * v;
    float nu = u.norm();
    u /= std::max(nu, eps);
  }
  return u.dot(W * v);
}

Var spectral_normalize(Tape& t, Parameter& p, int iters, float eps) {
  int cached = t.spectral_cached(p);
  if (cached >= 0) return {&t, cached};
  int leaf = t.param_leaf(p);
  float sigma = spectral_power_iterate(p, iters, eps);
  sigma = std::max(sigma, eps);
  Tensor out = p.value;
  for (auto& v : out.data) v /= sigma;
  Tensor u = p.sn_u, vv = p.sn_v;
  int oid = static_cast<int>(t.node_count());
  t.push(std::move(out), true,
         [&t, oid, leaf, sigma, u = std::move(u), vv = std::move(vv)] {
           const Tensor* g = t.grad_if_any(oid);
           if (!g) return;
           const Tensor& w = t.val(leaf);
           Tensor& dw = t.grad_buf(leaf);
           double gw = 0.0;
           for (int64_t i = 0; i < g->size(); ++i)
             gw += static_cast<double>(g->data[static_cast<size_t>(i)]) *
                   w.data[static_cast<size_t>(i)];
           const float coef = static_cast<float>(gw) / (sigma * sigma);
           const int r = static_cast<int>(u.size());
           const int64_t c = vv.size();
           for (int i = 0; i < r; ++i) {
             const float ui = u.data[static_cast<size_t>(i)];
             const float* gr = g->ptr() + static_cast<int64_t>(i) * c;
             float* dr = dw.ptr() + static_cast<int64_t>(i) * c;
             for (int64_t j = 0; j < c; ++j)
               dr[j] += gr[j] / sigma - coef * ui * vv.data[static_cast<size_t>(j)];
           }
         });
  t.spectral_remember(p, oid);
  return {&t, oid};
}

// ---- init ----

void orthogonal_init(Tensor& w, Rng& rng) {
  if (w.rank() < 2) throw ShapeError("orthogonal_init: want rank >= 2");
  const int r = w.dim(0);
  const int64_t c = w.size() / r;
  const bool rows_small = r <= c;
  const int nvec = rows_small ? r : static_cast<int>(c);
  const int64_t dim = rows_small ? c : r;
  // Gaussian draws in row-major parameter order so results do not depend on
  // which side gets orthonormalized.
  std::vector<double> a(static_cast<size_t>(w.size()));
  for (auto& v : a) v = static_cast<double>(rng.normal_f());
  // Vector i = row i (rows_small) or column i strided.
  auto at = [&](int i, int64_t j) -> double& {
    return rows_small ? a[static_cast<size_t>(i) * static_cast<size_t>(c) + static_cast<size_t>(j)]
                      : a[static_cast<size_t>(j) * static_cast<size_t>(c) + static_cast<size_t>(i)];
  };
  for (int i = 0; i < nvec; ++i) {
    for (int k = 0; k < i; ++k) {
      double dot = 0.0;
      for (int64_t j = 0; j < dim; ++j) dot += at(i, j) * at(k, j);
      for (int64_t j = 0; j < dim; ++j) at(i, j) -= dot * at(k, j);
    }
    double n2 = 0.0;
    for (int64_t j = 0; j < dim; ++j) n2 += at(i, j) * at(i, j);
    double inv = 1.0 / std::max(std::sqrt(n2), 1e-12);
    for (int64_t j = 0; j < dim; ++j) at(i, j) *= inv;
  }
  for (int64_t i = 0; i < w.size(); ++i)
    w.data[static_cast<size_t>(i)] = static_cast<float>(a[static_cast<size_t>(i)]);
}

}  // namespace lpgan::nn
