#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <unordered_map>
#include <vector>

#include "puredesk/tensor.hpp"
#include "puredesk/threading.hpp"

namespace puredesk::ad {

// Reverse-mode autodiff on an append-only tape. Operations compute eagerly;
// when an operand is attached to a Tape the result is recorded as a node so a
// single reverse sweep can later accumulate d(root)/d(leaf) for every leaf.
// Operands off the graph are promoted to constant nodes (their values are
// needed by some backward rules) but never receive gradients.
//
// A tape is confined to one thread. Tensors without a node are plain values.

enum class Op : std::uint8_t {
  Leaf,
  Const,
  Add,
  Sub,
  Mul,
  Scale,       // a * c
  AddScalar,   // a + c
  Exp,
  Sqrt,
  Tanh,
  Relu,
  Silu,
  Square,
  Sum,             // -> [1]
  Matmul,          // [m,k] x [k,n]
  AddBias,         // x[m,n] + b[n] per row
  Conv2d,          // x[N,C,H,W] * w[F,C,kh,kw]; i0 = stride, i1 = pad
  AddChannel,      // x[N,C,H,W] + v[C] per channel
  MulChannel,      // x[N,C,H,W] * v[C] per channel
  ConcatChannels,  // along C
  Upsample2x,      // nearest neighbour
  AvgPool2,        // 2x2, stride 2
};

struct Node {
  Op op = Op::Leaf;
  int a = -1, b = -1;
  double c = 0.0;
  int i0 = 0, i1 = 0;
  bool needs_grad = false;
  Shape shape;
  std::shared_ptr<const std::vector<double>> value;
};

namespace detail {

inline void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
}

// ---- dense kernels -------------------------------------------------------

// o[m,n] += a[m,k] * b[k,n]
inline void matmul_acc(const double* a, const double* b, double* o, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const double* ai = a + static_cast<std::int64_t>(i) * k;
    double* oi = o + static_cast<std::int64_t>(i) * n;
    for (int kk = 0; kk < k; ++kk) {
      const double f = ai[kk];
      const double* bk = b + static_cast<std::int64_t>(kk) * n;
      for (int j = 0; j < n; ++j) oi[j] += f * bk[j];
    }
  }
}

// o[m,k] += a[m,n] * b[k,n]^T  (dot of rows)
inline void matmul_nt_acc(const double* a, const double* b, double* o, int m, int n, int k) {
  for (int i = 0; i < m; ++i) {
    const double* ai = a + static_cast<std::int64_t>(i) * n;
    double* oi = o + static_cast<std::int64_t>(i) * k;
    for (int kk = 0; kk < k; ++kk) {
      const double* bk = b + static_cast<std::int64_t>(kk) * n;
      double acc = 0.0;
      for (int j = 0; j < n; ++j) acc += ai[j] * bk[j];
      oi[kk] += acc;
    }
  }
}

// o[k,n] += a[m,k]^T * b[m,n]
inline void matmul_tn_acc(const double* a, const double* b, double* o, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const double* ai = a + static_cast<std::int64_t>(i) * k;
    const double* bi = b + static_cast<std::int64_t>(i) * n;
    for (int kk = 0; kk < k; ++kk) {
      const double f = ai[kk];
      double* ok = o + static_cast<std::int64_t>(kk) * n;
      for (int j = 0; j < n; ++j) ok[j] += f * bi[j];
    }
  }
}

inline int conv_out_dim(int in, int kernel, int stride, int pad) {
  return (in + 2 * pad - kernel) / stride + 1;
}

// Patches of x[N,C,H,W] laid out as col[N*OH*OW][C*kh*kw], (c, ki, kj) order.
inline void im2col(const double* x, int N, int C, int H, int W, int kh, int kw, int stride,
                   int pad, int OH, int OW, double* col) {
  const int K = C * kh * kw;
  for (int n = 0; n < N; ++n) {
    const double* xn = x + static_cast<std::int64_t>(n) * C * H * W;
    double* cn = col + static_cast<std::int64_t>(n) * OH * OW * K;
    for (int oh = 0; oh < OH; ++oh) {
      for (int ow = 0; ow < OW; ++ow) {
        double* dst = cn + (static_cast<std::int64_t>(oh) * OW + ow) * K;
        const int ih0 = oh * stride - pad;
        const int iw0 = ow * stride - pad;
        for (int c = 0; c < C; ++c) {
          const double* xc = xn + static_cast<std::int64_t>(c) * H * W;
          for (int ki = 0; ki < kh; ++ki) {
            const int ih = ih0 + ki;
            if (ih < 0 || ih >= H) {
              for (int kj = 0; kj < kw; ++kj) *dst++ = 0.0;
              continue;
            }
            const double* row = xc + static_cast<std::int64_t>(ih) * W;
            for (int kj = 0; kj < kw; ++kj) {
              const int iw = iw0 + kj;
              *dst++ = (iw >= 0 && iw < W) ? row[iw] : 0.0;
            }
          }
        }
      }
    }
  }
}

// Scatter-add of one patch row back into dx; inverse of one im2col row.
inline void col2im_add_row(const double* dcol, int C, int H, int W, int kh, int kw, int stride,
                           int pad, int oh, int ow, double* dx) {
  const int ih0 = oh * stride - pad;
  const int iw0 = ow * stride - pad;
  const double* src = dcol;
  for (int c = 0; c < C; ++c) {
    double* xc = dx + static_cast<std::int64_t>(c) * H * W;
    for (int ki = 0; ki < kh; ++ki) {
      const int ih = ih0 + ki;
      if (ih < 0 || ih >= H) {
        src += kw;
        continue;
      }
      double* row = xc + static_cast<std::int64_t>(ih) * W;
      for (int kj = 0; kj < kw; ++kj) {
        const int iw = iw0 + kj;
        if (iw >= 0 && iw < W) row[iw] += src[kj];
      }
      src += kw;
    }
  }
}

// out[n][f][p] for p over OH*OW; wt is w transposed to [K][F]. Output pixels
// are independent, so the range may be split across worker threads.
inline void conv_gemm(const double* col, const double* wt, double* out, std::int64_t npix, int K,
                      int F, std::int64_t ohw) {
  parallel_chunks(npix, 2048, [&](std::int64_t qb, std::int64_t qe) {
    std::vector<double> acc(static_cast<std::size_t>(F));
    for (std::int64_t q = qb; q < qe; ++q) {
      const double* cq = col + q * K;
      std::fill(acc.begin(), acc.end(), 0.0);
      for (int k = 0; k < K; ++k) {
        const double cv = cq[k];
        const double* wk = wt + static_cast<std::int64_t>(k) * F;
        for (int f = 0; f < F; ++f) acc[f] += wk[f] * cv;
      }
      const std::int64_t n = q / ohw;
      const std::int64_t p = q % ohw;
      double* on = out + (n * F) * ohw + p;
      for (int f = 0; f < F; ++f) on[static_cast<std::int64_t>(f) * ohw] = acc[f];
    }
  });
}

}  // namespace detail

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Registers t as a differentiable leaf and returns the attached handle.
  Tensor leaf(const Tensor& t) {
    Tensor r = t.detached();
    attach(r, push(Node{Op::Leaf, -1, -1, 0.0, 0, 0, true, r.shape_, r.buf_}));
    return r;
  }

  std::size_t num_nodes() const { return nodes_.size(); }
  const Node& node_at(int id) const { return nodes_[static_cast<std::size_t>(id)]; }

  /// Accumulates d(root)/d(leaf) into every leaf's gradient slot. The graph is
  /// left untouched; calling backward twice doubles the accumulated gradients
  /// unless zero_grad() is called in between.
  void backward(const Tensor& root);

  /// Accumulated gradient of a leaf (zeros if backward never reached it).
  Tensor grad(const Tensor& leaf) const {
    if (leaf.tape() != this || leaf.node() < 0)
      throw std::invalid_argument("grad: tensor is not on this graph");
    if (nodes_[static_cast<std::size_t>(leaf.node())].op != Op::Leaf)
      throw std::invalid_argument("grad: tensor is not a leaf");
    auto it = leaf_grads_.find(leaf.node());
    if (it == leaf_grads_.end()) return Tensor::zeros(leaf.shape());
    return Tensor::from(leaf.shape(), it->second);
  }

  void zero_grad() { leaf_grads_.clear(); }

  // -- recording helpers used by the op functions --

  int ensure(const Tensor& t) {
    if (t.tape() == this) return t.node();
    if (t.tape() != nullptr)
      throw std::invalid_argument("operand belongs to a different compute graph");
    return push(Node{Op::Const, -1, -1, 0.0, 0, 0, false, t.shape(), t.buf_});
  }

  void record(Tensor& result, Op op, const Tensor* a, const Tensor* b, double c = 0.0, int i0 = 0,
              int i1 = 0) {
    const int ia = a ? ensure(*a) : -1;
    const int ib = b ? ensure(*b) : -1;
    const bool needs = (ia >= 0 && nodes_[static_cast<std::size_t>(ia)].needs_grad) ||
                       (ib >= 0 && nodes_[static_cast<std::size_t>(ib)].needs_grad);
    attach(result, push(Node{op, ia, ib, c, i0, i1, needs, result.shape_, result.buf_}));
  }

  static Tape* common(const Tensor& a) { return a.tape(); }
  static Tape* common(const Tensor& a, const Tensor& b) {
    if (a.tape() && b.tape() && a.tape() != b.tape())
      throw std::invalid_argument("operands belong to different compute graphs");
    return a.tape() ? a.tape() : b.tape();
  }

 private:
  int push(Node n) {
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
  }
  void attach(Tensor& t, int id) {
    t.tape_ = this;
    t.node_ = id;
  }

  std::vector<Node> nodes_;
  std::unordered_map<int, std::vector<double>> leaf_grads_;
};

namespace detail {

inline Tensor finish(Tape* tp, Shape shape, std::vector<double> out, Op op, const Tensor* a,
                     const Tensor* b, double c = 0.0, int i0 = 0, int i1 = 0) {
  Tensor r = Tensor::wrap(std::move(shape), std::make_shared<std::vector<double>>(std::move(out)));
  if (tp) tp->record(r, op, a, b, c, i0, i1);
  return r;
}

}  // namespace detail

// ---- elementwise ----------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::check_same_shape("add", a, b);
  std::vector<double> out(static_cast<std::size_t>(a.size()));
  const double *pa = a.data(), *pb = b.data();
  for (std::int64_t i = 0; i < a.size(); ++i) out[static_cast<std::size_t>(i)] = pa[i] + pb[i];
  return detail::finish(Tape::common(a, b), a.shape(), std::move(out), Op::Add, &a, &b);
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::check_same_shape("sub", a, b);
  std::vector<double> out(static_cast<std::size_t>(a.size()));
  const double *pa = a.data(), *pb = b.data();
  for (std::int64_t i = 0; i < a.size(); ++i) out[static_cast<std::size_t>(i)] = pa[i] - pb[i];
  return detail::finish(Tape::common(a, b), a.shape(), std::move(out), Op::Sub, &a, &b);
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::check_same_shape("mul", a, b);
  std::vector<double> out(static_cast<std::size_t>(a.size()));
  const double *pa = a.data(), *pb = b.data();
  for (std::int64_t i = 0; i < a.size(); ++i) out[static_cast<std::size_t>(i)] = pa[i] * pb[i];
  return detail::finish(Tape::common(a, b), a.shape(), std::move(out), Op::Mul, &a, &b);
}

inline Tensor scale(const Tensor& a, double c) {
  std::vector<double> out(static_cast<std::size_t>(a.size()));
  const double* pa = a.data();
  for (std::int64_t i = 0; i < a.size(); ++i) out[static_cast<std::size_t>(i)] = pa[i] * c;
  return detail::finish(Tape::common(a), a.shape(), std::move(out), Op::Scale, &a, nullptr, c);
}

inline Tensor add_scalar(const Tensor& a, double c) {
  std::vector<double> out(static_cast<std::size_t>(a.size()));
  const double* pa = a.data();
  for (std::int64_t i = 0; i < a.size(); ++i) out[static_cast<std::size_t>(i)] = pa[i] + c;
  return detail::finish(Tape::common(a), a.shape(), std::move(out), Op::AddScalar, &a, nullptr, c);
}

inline Tensor exp(const Tensor& a) {
  std::vector<double> out(static_cast<std::size_t>(a.size()));
  const double* pa = a.data();
  for (std::int64_t i = 0; i < a.size(); ++i) out[static_cast<std::size_t>(i)] = std::exp(pa[i]);
  return detail::finish(Tape::common(a), a.shape(), std::move(out), Op::Exp, &a, nullptr);
}

inline Tensor sqrt(const Tensor& a) {
  std::vector<double> out(static_cast<std::size_t>(a.size()));
  const double* pa = a.data();
  for (std::int64_t i = 0; i < a.size(); ++i) {
    if (pa[i] < 0.0) throw std::invalid_argument("sqrt: negative input");
    out[static_cast<std::size_t>(i)] = std::sqrt(pa[i]);
  }
  return detail::finish(Tape::common(a), a.shape(), std::move(out), Op::Sqrt, &a, nullptr);
}

inline Tensor tanh(const Tensor& a) {
  std::vector<double> out(static_cast<std::size_t>(a.size()));
  const double* pa = a.data();
  for (std::int64_t i = 0; i < a.size(); ++i) out[static_cast<std::size_t>(i)] = std::tanh(pa[i]);
  return detail::finish(Tape::common(a), a.shape(), std::move(out), Op::Tanh, &a, nullptr);
}

inline Tensor relu(const Tensor& a) {
  std::vector<double> out(static_cast<std::size_t>(a.size()));
  const double* pa = a.data();
  for (std::int64_t i = 0; i < a.size(); ++i)
    out[static_cast<std::size_t>(i)] = pa[i] > 0.0 ? pa[i] : 0.0;
  return detail::finish(Tape::common(a), a.shape(), std::move(out), Op::Relu, &a, nullptr);
}

inline Tensor silu(const Tensor& a) {
  std::vector<double> out(static_cast<std::size_t>(a.size()));
  const double* pa = a.data();
  for (std::int64_t i = 0; i < a.size(); ++i) {
    const double s = 1.0 / (1.0 + std::exp(-pa[i]));
    out[static_cast<std::size_t>(i)] = pa[i] * s;
  }
  return detail::finish(Tape::common(a), a.shape(), std::move(out), Op::Silu, &a, nullptr);
}

inline Tensor square(const Tensor& a) {
  std::vector<double> out(static_cast<std::size_t>(a.size()));
  const double* pa = a.data();
  for (std::int64_t i = 0; i < a.size(); ++i) out[static_cast<std::size_t>(i)] = pa[i] * pa[i];
  return detail::finish(Tape::common(a), a.shape(), std::move(out), Op::Square, &a, nullptr);
}

inline Tensor sum(const Tensor& a) {
  double acc = 0.0;
  const double* pa = a.data();
  for (std::int64_t i = 0; i < a.size(); ++i) acc += pa[i];
  return detail::finish(Tape::common(a), {1}, {acc}, Op::Sum, &a, nullptr);
}

// ---- linear algebra --------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0))
    throw std::invalid_argument("matmul: incompatible shapes " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(static_cast<std::size_t>(m) * n, 0.0);
  detail::matmul_acc(a.data(), b.data(), out.data(), m, k, n);
  return detail::finish(Tape::common(a, b), {m, n}, std::move(out), Op::Matmul, &a, &b);
}

inline Tensor add_bias(const Tensor& x, const Tensor& b) {
  if (x.ndim() != 2 || b.size() != x.dim(1))
    throw std::invalid_argument("add_bias: expected x[m,n] and b[n], got " +
                                shape_str(x.shape()) + " and " + shape_str(b.shape()));
  const int m = x.dim(0), n = x.dim(1);
  std::vector<double> out(static_cast<std::size_t>(m) * n);
  const double *px = x.data(), *pb = b.data();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      out[static_cast<std::size_t>(i) * n + j] = px[static_cast<std::int64_t>(i) * n + j] + pb[j];
  return detail::finish(Tape::common(x, b), x.shape(), std::move(out), Op::AddBias, &x, &b);
}

// ---- image ops -------------------------------------------------------------

inline void check_nchw(const char* op, const Tensor& x) {
  if (x.ndim() != 4) throw std::invalid_argument(std::string(op) + ": expected NCHW tensor, got " + shape_str(x.shape()));
}

inline Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int pad) {
  check_nchw("conv2d", x);
  if (w.ndim() != 4) throw std::invalid_argument("conv2d: weight must be [F,C,kh,kw]");
  if (stride < 1 || pad < 0) throw std::invalid_argument("conv2d: invalid stride/pad");
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int F = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  if (w.dim(1) != C)
    throw std::invalid_argument("conv2d: channel mismatch, input " + shape_str(x.shape()) +
                                " vs weight " + shape_str(w.shape()));
  if (kh > H + 2 * pad || kw > W + 2 * pad)
    throw std::invalid_argument("conv2d: kernel larger than padded input");
  const int OH = detail::conv_out_dim(H, kh, stride, pad);
  const int OW = detail::conv_out_dim(W, kw, stride, pad);
  const int K = C * kh * kw;
  const std::int64_t npix = static_cast<std::int64_t>(N) * OH * OW;

  std::vector<double> col(static_cast<std::size_t>(npix) * K);
  detail::im2col(x.data(), N, C, H, W, kh, kw, stride, pad, OH, OW, col.data());
  std::vector<double> wt(static_cast<std::size_t>(K) * F);
  for (int f = 0; f < F; ++f)
    for (int k = 0; k < K; ++k) wt[static_cast<std::size_t>(k) * F + f] = w.data()[static_cast<std::int64_t>(f) * K + k];

  std::vector<double> out(static_cast<std::size_t>(N) * F * OH * OW);
  detail::conv_gemm(col.data(), wt.data(), out.data(), npix, K, F, static_cast<std::int64_t>(OH) * OW);
  return detail::finish(Tape::common(x, w), {N, F, OH, OW}, std::move(out), Op::Conv2d, &x, &w,
                        0.0, stride, pad);
}

inline Tensor add_channel(const Tensor& x, const Tensor& v) {
  check_nchw("add_channel", x);
  const int N = x.dim(0), C = x.dim(1);
  const std::int64_t hw = static_cast<std::int64_t>(x.dim(2)) * x.dim(3);
  if (v.size() != C)
    throw std::invalid_argument("add_channel: expected per-channel vector of length " +
                                std::to_string(C) + ", got " + shape_str(v.shape()));
  std::vector<double> out(static_cast<std::size_t>(x.size()));
  const double *px = x.data(), *pv = v.data();
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const std::int64_t base = (static_cast<std::int64_t>(n) * C + c) * hw;
      const double b = pv[c];
      for (std::int64_t p = 0; p < hw; ++p) out[static_cast<std::size_t>(base + p)] = px[base + p] + b;
    }
  return detail::finish(Tape::common(x, v), x.shape(), std::move(out), Op::AddChannel, &x, &v);
}

inline Tensor mul_channel(const Tensor& x, const Tensor& v) {
  check_nchw("mul_channel", x);
  const int N = x.dim(0), C = x.dim(1);
  const std::int64_t hw = static_cast<std::int64_t>(x.dim(2)) * x.dim(3);
  if (v.size() != C)
    throw std::invalid_argument("mul_channel: expected per-channel vector of length " +
                                std::to_string(C) + ", got " + shape_str(v.shape()));
  std::vector<double> out(static_cast<std::size_t>(x.size()));
  const double *px = x.data(), *pv = v.data();
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const std::int64_t base = (static_cast<std::int64_t>(n) * C + c) * hw;
      const double g = pv[c];
      for (std::int64_t p = 0; p < hw; ++p) out[static_cast<std::size_t>(base + p)] = px[base + p] * g;
    }
  return detail::finish(Tape::common(x, v), x.shape(), std::move(out), Op::MulChannel, &x, &v);
}

inline Tensor concat_channels(const Tensor& a, const Tensor& b) {
  check_nchw("concat_channels", a);
  check_nchw("concat_channels", b);
  if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3))
    throw std::invalid_argument("concat_channels: shape mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
  const int N = a.dim(0), Ca = a.dim(1), Cb = b.dim(1);
  const std::int64_t hw = static_cast<std::int64_t>(a.dim(2)) * a.dim(3);
  std::vector<double> out(static_cast<std::size_t>(N) * (Ca + Cb) * hw);
  for (int n = 0; n < N; ++n) {
    std::copy(a.data() + static_cast<std::int64_t>(n) * Ca * hw,
              a.data() + static_cast<std::int64_t>(n + 1) * Ca * hw,
              out.begin() + static_cast<std::int64_t>(n) * (Ca + Cb) * hw);
    std::copy(b.data() + static_cast<std::int64_t>(n) * Cb * hw,
              b.data() + static_cast<std::int64_t>(n + 1) * Cb * hw,
              out.begin() + static_cast<std::int64_t>(n) * (Ca + Cb) * hw + Ca * hw);
  }
  return detail::finish(Tape::common(a, b), {N, Ca + Cb, a.dim(2), a.dim(3)}, std::move(out),
                        Op::ConcatChannels, &a, &b);
}

inline Tensor upsample2x(const Tensor& x) {
  check_nchw("upsample2x", x);
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  std::vector<double> out(static_cast<std::size_t>(x.size()) * 4);
  const double* px = x.data();
  for (int nc = 0; nc < N * C; ++nc) {
    const double* src = px + static_cast<std::int64_t>(nc) * H * W;
    double* dst = out.data() + static_cast<std::int64_t>(nc) * H * W * 4;
    for (int i = 0; i < H; ++i)
      for (int j = 0; j < W; ++j) {
        const double v = src[static_cast<std::int64_t>(i) * W + j];
        double* d = dst + (static_cast<std::int64_t>(2 * i) * 2 * W + 2 * j);
        d[0] = v;
        d[1] = v;
        d[2 * W] = v;
        d[2 * W + 1] = v;
      }
  }
  return detail::finish(Tape::common(x), {N, C, 2 * H, 2 * W}, std::move(out), Op::Upsample2x, &x,
                        nullptr);
}

inline Tensor avg_pool2(const Tensor& x) {
  check_nchw("avg_pool2", x);
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (H % 2 || W % 2) throw std::invalid_argument("avg_pool2: spatial dims must be even");
  const int OH = H / 2, OW = W / 2;
  std::vector<double> out(static_cast<std::size_t>(N) * C * OH * OW);
  const double* px = x.data();
  for (int nc = 0; nc < N * C; ++nc) {
    const double* src = px + static_cast<std::int64_t>(nc) * H * W;
    double* dst = out.data() + static_cast<std::int64_t>(nc) * OH * OW;
    for (int i = 0; i < OH; ++i)
      for (int j = 0; j < OW; ++j) {
        const double* s = src + (static_cast<std::int64_t>(2 * i) * W + 2 * j);
        dst[static_cast<std::int64_t>(i) * OW + j] = 0.25 * (s[0] + s[1] + s[W] + s[W + 1]);
      }
  }
  return detail::finish(Tape::common(x), {N, C, OH, OW}, std::move(out), Op::AvgPool2, &x,
                        nullptr);
}

// ---- reductions/utilities over plain tensors -------------------------------

inline double dot_flat(const Tensor& a, const Tensor& b) {
  if (a.size() != b.size()) throw std::invalid_argument("dot_flat: size mismatch");
  double acc = 0.0;
  for (std::int64_t i = 0; i < a.size(); ++i) acc += a.at(i) * b.at(i);
  return acc;
}

inline double norm2_sq(const Tensor& a) { return dot_flat(a, a); }

// ---- backward sweep --------------------------------------------------------

inline void Tape::backward(const Tensor& root) {
  if (root.tape() != this || root.node() < 0)
    throw std::invalid_argument("backward: root is not on this graph");
  if (root.size() != 1) throw std::invalid_argument("backward: root must be scalar-valued");

  const int R = root.node();
  std::vector<std::vector<double>> g(static_cast<std::size_t>(R) + 1);
  g[static_cast<std::size_t>(R)].assign(1, 1.0);

  auto gbuf = [&](int id) -> std::vector<double>& {
    auto& v = g[static_cast<std::size_t>(id)];
    if (v.empty()) v.assign(static_cast<std::size_t>(numel(nodes_[static_cast<std::size_t>(id)].shape)), 0.0);
    return v;
  };
  auto wants = [&](int id) {
    return id >= 0 && nodes_[static_cast<std::size_t>(id)].needs_grad;
  };

  for (int id = R; id >= 0; --id) {
    auto& gr = g[static_cast<std::size_t>(id)];
    if (gr.empty()) continue;
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.needs_grad) {
      gr.clear();
      gr.shrink_to_fit();
      continue;
    }
    const double* G = gr.data();
    const std::int64_t sz = static_cast<std::int64_t>(gr.size());

    switch (n.op) {
      case Op::Leaf:
      case Op::Const:
        continue;  // keep leaf grads until the final collection below
      case Op::Add: {
        if (wants(n.a)) {
          auto& ga = gbuf(n.a);
          for (std::int64_t i = 0; i < sz; ++i) ga[static_cast<std::size_t>(i)] += G[i];
        }
        if (wants(n.b)) {
          auto& gb = gbuf(n.b);
          for (std::int64_t i = 0; i < sz; ++i) gb[static_cast<std::size_t>(i)] += G[i];
        }
        break;
      }
      case Op::Sub: {
        if (wants(n.a)) {
          auto& ga = gbuf(n.a);
          for (std::int64_t i = 0; i < sz; ++i) ga[static_cast<std::size_t>(i)] += G[i];
        }
        if (wants(n.b)) {
          auto& gb = gbuf(n.b);
          for (std::int64_t i = 0; i < sz; ++i) gb[static_cast<std::size_t>(i)] -= G[i];
        }
        break;
      }
      case Op::Mul: {
        const auto& va = *nodes_[static_cast<std::size_t>(n.a)].value;
        const auto& vb = *nodes_[static_cast<std::size_t>(n.b)].value;
        if (wants(n.a)) {
          auto& ga = gbuf(n.a);
          for (std::int64_t i = 0; i < sz; ++i) ga[static_cast<std::size_t>(i)] += G[i] * vb[static_cast<std::size_t>(i)];
        }
        if (wants(n.b)) {
          auto& gb = gbuf(n.b);
          for (std::int64_t i = 0; i < sz; ++i) gb[static_cast<std::size_t>(i)] += G[i] * va[static_cast<std::size_t>(i)];
        }
        break;
      }
      case Op::Scale: {
        if (wants(n.a)) {
          auto& ga = gbuf(n.a);
          for (std::int64_t i = 0; i < sz; ++i) ga[static_cast<std::size_t>(i)] += n.c * G[i];
        }
        break;
      }
      case Op::AddScalar: {
        if (wants(n.a)) {
          auto& ga = gbuf(n.a);
          for (std::int64_t i = 0; i < sz; ++i) ga[static_cast<std::size_t>(i)] += G[i];
        }
        break;
      }
      case Op::Exp: {
        if (wants(n.a)) {
          const auto& out = *n.value;
          auto& ga = gbuf(n.a);
          for (std::int64_t i = 0; i < sz; ++i) ga[static_cast<std::size_t>(i)] += G[i] * out[static_cast<std::size_t>(i)];
        }
        break;
      }
      case Op::Sqrt: {
        if (wants(n.a)) {
          const auto& out = *n.value;
          auto& ga = gbuf(n.a);
          for (std::int64_t i = 0; i < sz; ++i) ga[static_cast<std::size_t>(i)] += G[i] * 0.5 / out[static_cast<std::size_t>(i)];
        }
        break;
      }
      case Op::Tanh: {
        if (wants(n.a)) {
          const auto& out = *n.value;
          auto& ga = gbuf(n.a);
          for (std::int64_t i = 0; i < sz; ++i) {
            const double y = out[static_cast<std::size_t>(i)];
            ga[static_cast<std::size_t>(i)] += G[i] * (1.0 - y * y);
          }
        }
        break;
      }
      case Op::Relu: {
        if (wants(n.a)) {
          const auto& va = *nodes_[static_cast<std::size_t>(n.a)].value;
          auto& ga = gbuf(n.a);
          for (std::int64_t i = 0; i < sz; ++i)
            if (va[static_cast<std::size_t>(i)] > 0.0) ga[static_cast<std::size_t>(i)] += G[i];
        }
        break;
      }
      case Op::Silu: {
        if (wants(n.a)) {
          const auto& va = *nodes_[static_cast<std::size_t>(n.a)].value;
          auto& ga = gbuf(n.a);
          for (std::int64_t i = 0; i < sz; ++i) {
            const double x = va[static_cast<std::size_t>(i)];
            const double s = 1.0 / (1.0 + std::exp(-x));
            ga[static_cast<std::size_t>(i)] += G[i] * (s * (1.0 + x * (1.0 - s)));
          }
        }
        break;
      }
      case Op::Square: {
        if (wants(n.a)) {
          const auto& va = *nodes_[static_cast<std::size_t>(n.a)].value;
          auto& ga = gbuf(n.a);
          for (std::int64_t i = 0; i < sz; ++i) ga[static_cast<std::size_t>(i)] += 2.0 * va[static_cast<std::size_t>(i)] * G[i];
        }
        break;
      }
      case Op::Sum: {
        if (wants(n.a)) {
          auto& ga = gbuf(n.a);
          const double g0 = G[0];
          for (auto& v : ga) v += g0;
        }
        break;
      }
      case Op::Matmul: {
        const Node& na = nodes_[static_cast<std::size_t>(n.a)];
        const Node& nb = nodes_[static_cast<std::size_t>(n.b)];
        const int m = na.shape[0], k = na.shape[1], nn = nb.shape[1];
        if (wants(n.a)) detail::matmul_nt_acc(G, nb.value->data(), gbuf(n.a).data(), m, nn, k);
        if (wants(n.b)) detail::matmul_tn_acc(na.value->data(), G, gbuf(n.b).data(), m, k, nn);
        break;
      }
      case Op::AddBias: {
        const Node& na = nodes_[static_cast<std::size_t>(n.a)];
        const int m = na.shape[0], nn = na.shape[1];
        if (wants(n.a)) {
          auto& ga = gbuf(n.a);
          for (std::int64_t i = 0; i < sz; ++i) ga[static_cast<std::size_t>(i)] += G[i];
        }
        if (wants(n.b)) {
          auto& gb = gbuf(n.b);
          for (int i = 0; i < m; ++i)
            for (int j = 0; j < nn; ++j) gb[static_cast<std::size_t>(j)] += G[static_cast<std::int64_t>(i) * nn + j];
        }
        break;
      }
      case Op::Conv2d: {
        const Node& nx = nodes_[static_cast<std::size_t>(n.a)];
        const Node& nw = nodes_[static_cast<std::size_t>(n.b)];
        const int N = nx.shape[0], C = nx.shape[1], H = nx.shape[2], W = nx.shape[3];
        const int F = nw.shape[0], kh = nw.shape[2], kw = nw.shape[3];
        const int stride = n.i0, pad = n.i1;
        const int OH = n.shape[2], OW = n.shape[3];
        const int K = C * kh * kw;
        const std::int64_t ohw = static_cast<std::int64_t>(OH) * OW;
        const std::int64_t npix = static_cast<std::int64_t>(N) * ohw;
        const double* wv = nw.value->data();

        if (wants(n.b)) {
          // dW[f][k] += sum_q G[n][f][p] * col[q][k]; col rebuilt on the fly.
          std::vector<double> col(static_cast<std::size_t>(npix) * K);
          detail::im2col(nx.value->data(), N, C, H, W, kh, kw, stride, pad, OH, OW, col.data());
          auto& gw = gbuf(n.b);
          for (std::int64_t q = 0; q < npix; ++q) {
            const std::int64_t bn = q / ohw, p = q % ohw;
            const double* cq = col.data() + q * K;
            for (int f = 0; f < F; ++f) {
              const double gv = G[(bn * F + f) * ohw + p];
              if (gv == 0.0) continue;
              double* dw = gw.data() + static_cast<std::int64_t>(f) * K;
              for (int k = 0; k < K; ++k) dw[k] += gv * cq[k];
            }
          }
        }
        if (wants(n.a)) {
          auto& gx = gbuf(n.a);
          std::vector<double> dcol(static_cast<std::size_t>(K));
          for (std::int64_t q = 0; q < npix; ++q) {
            const std::int64_t bn = q / ohw, p = q % ohw;
            std::fill(dcol.begin(), dcol.end(), 0.0);
            for (int f = 0; f < F; ++f) {
              const double gv = G[(bn * F + f) * ohw + p];
              if (gv == 0.0) continue;
              const double* wf = wv + static_cast<std::int64_t>(f) * K;
              for (int k = 0; k < K; ++k) dcol[static_cast<std::size_t>(k)] += gv * wf[k];
            }
            const int oh = static_cast<int>(p / OW), ow = static_cast<int>(p % OW);
            detail::col2im_add_row(dcol.data(), C, H, W, kh, kw, stride, pad, oh, ow,
                                   gx.data() + bn * C * H * W);
          }
        }
        break;
      }
      case Op::AddChannel: {
        const Node& nx = nodes_[static_cast<std::size_t>(n.a)];
        const int N = nx.shape[0], C = nx.shape[1];
        const std::int64_t hw = static_cast<std::int64_t>(nx.shape[2]) * nx.shape[3];
        if (wants(n.a)) {
          auto& gx = gbuf(n.a);
          for (std::int64_t i = 0; i < sz; ++i) gx[static_cast<std::size_t>(i)] += G[i];
        }
        if (wants(n.b)) {
          auto& gv = gbuf(n.b);
          for (int bn = 0; bn < N; ++bn)
            for (int c = 0; c < C; ++c) {
              const std::int64_t base = (static_cast<std::int64_t>(bn) * C + c) * hw;
              double acc = 0.0;
              for (std::int64_t p = 0; p < hw; ++p) acc += G[base + p];
              gv[static_cast<std::size_t>(c)] += acc;
            }
        }
        break;
      }
      case Op::MulChannel: {
        const Node& nx = nodes_[static_cast<std::size_t>(n.a)];
        const auto& xv = *nx.value;
        const auto& vv = *nodes_[static_cast<std::size_t>(n.b)].value;
        const int N = nx.shape[0], C = nx.shape[1];
        const std::int64_t hw = static_cast<std::int64_t>(nx.shape[2]) * nx.shape[3];
        if (wants(n.a)) {
          auto& gx = gbuf(n.a);
          for (int bn = 0; bn < N; ++bn)
            for (int c = 0; c < C; ++c) {
              const std::int64_t base = (static_cast<std::int64_t>(bn) * C + c) * hw;
              const double gm = vv[static_cast<std::size_t>(c)];
              for (std::int64_t p = 0; p < hw; ++p) gx[static_cast<std::size_t>(base + p)] += G[base + p] * gm;
            }
        }
        if (wants(n.b)) {
          auto& gv = gbuf(n.b);
          for (int bn = 0; bn < N; ++bn)
            for (int c = 0; c < C; ++c) {
              const std::int64_t base = (static_cast<std::int64_t>(bn) * C + c) * hw;
              double acc = 0.0;
              for (std::int64_t p = 0; p < hw; ++p) acc += G[base + p] * xv[static_cast<std::size_t>(base + p)];
              gv[static_cast<std::size_t>(c)] += acc;
            }
        }
        break;
      }
      case Op::ConcatChannels: {
        const Node& na = nodes_[static_cast<std::size_t>(n.a)];
        const Node& nb = nodes_[static_cast<std::size_t>(n.b)];
        const int N = na.shape[0], Ca = na.shape[1], Cb = nb.shape[1];
        const std::int64_t hw = static_cast<std::int64_t>(na.shape[2]) * na.shape[3];
        if (wants(n.a)) {
          auto& ga = gbuf(n.a);
          for (int bn = 0; bn < N; ++bn) {
            const double* src = G + static_cast<std::int64_t>(bn) * (Ca + Cb) * hw;
            double* dst = ga.data() + static_cast<std::int64_t>(bn) * Ca * hw;
            for (std::int64_t i = 0; i < static_cast<std::int64_t>(Ca) * hw; ++i) dst[i] += src[i];
          }
        }
        if (wants(n.b)) {
          auto& gb = gbuf(n.b);
          for (int bn = 0; bn < N; ++bn) {
            const double* src = G + static_cast<std::int64_t>(bn) * (Ca + Cb) * hw + Ca * hw;
            double* dst = gb.data() + static_cast<std::int64_t>(bn) * Cb * hw;
            for (std::int64_t i = 0; i < static_cast<std::int64_t>(Cb) * hw; ++i) dst[i] += src[i];
          }
        }
        break;
      }
      case Op::Upsample2x: {
        if (wants(n.a)) {
          const Node& na = nodes_[static_cast<std::size_t>(n.a)];
          const int NC = na.shape[0] * na.shape[1], H = na.shape[2], W = na.shape[3];
          auto& ga = gbuf(n.a);
          for (int nc = 0; nc < NC; ++nc) {
            const double* src = G + static_cast<std::int64_t>(nc) * H * W * 4;
            double* dst = ga.data() + static_cast<std::int64_t>(nc) * H * W;
            for (int i = 0; i < H; ++i)
              for (int j = 0; j < W; ++j) {
                const double* s = src + (static_cast<std::int64_t>(2 * i) * 2 * W + 2 * j);
                dst[static_cast<std::int64_t>(i) * W + j] += s[0] + s[1] + s[2 * W] + s[2 * W + 1];
              }
          }
        }
        break;
      }
      case Op::AvgPool2: {
        if (wants(n.a)) {
          const Node& na = nodes_[static_cast<std::size_t>(n.a)];
          const int NC = na.shape[0] * na.shape[1], H = na.shape[2], W = na.shape[3];
          const int OH = H / 2, OW = W / 2;
          auto& ga = gbuf(n.a);
          for (int nc = 0; nc < NC; ++nc) {
            const double* src = G + static_cast<std::int64_t>(nc) * OH * OW;
            double* dst = ga.data() + static_cast<std::int64_t>(nc) * H * W;
            for (int i = 0; i < OH; ++i)
              for (int j = 0; j < OW; ++j) {
                const double gq = 0.25 * src[static_cast<std::int64_t>(i) * OW + j];
                double* d = dst + (static_cast<std::int64_t>(2 * i) * W + 2 * j);
                d[0] += gq;
                d[1] += gq;
                d[W] += gq;
                d[W + 1] += gq;
              }
          }
        }
        break;
      }
    }
    gr.clear();
    gr.shrink_to_fit();
  }

  for (int id = 0; id <= R; ++id) {
    auto& gr = g[static_cast<std::size_t>(id)];
    if (gr.empty() || nodes_[static_cast<std::size_t>(id)].op != Op::Leaf) continue;
    auto& acc = leaf_grads_[id];
    if (acc.empty()) acc = std::move(gr);
    else
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += gr[i];
  }
}

}  // namespace puredesk::ad
