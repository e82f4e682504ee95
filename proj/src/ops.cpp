#include "xreg/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>

namespace xreg::ops {

namespace {
thread_local BranchPattern* active_pattern = nullptr;
}

BranchPattern::BranchPattern() : outer_(active_pattern) { active_pattern = this; }
BranchPattern::~BranchPattern() { active_pattern = outer_; }

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;

template <typename T>
bool tracked(Tape<T>* tape, std::initializer_list<const Tensor<T>*> inputs) {
  if (tape == nullptr) return false;
  for (const auto* t : inputs) {
    if (t->defined() && t->requires_grad()) return true;
  }
  return false;
}

template <typename T>
void require_finite(std::span<const T> values, const char* op) {
  for (const T v : values) {
    if (!std::isfinite(v)) throw NonFiniteError(std::string("non-finite value produced by ") + op);
  }
}

template <typename T>
Tensor<T> finish(const char* op, Shape shape, Buffer<T> values, bool grad) {
  require_finite(std::span<const T>(values), op);
  return Tensor<T>::make_result(std::move(shape), std::move(values), grad);
}

void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

template <typename T>
void require_rank(const Tensor<T>& t, std::size_t rank, const char* what) {
  require(t.defined(), std::string(what) + " is undefined");
  require(t.rank() == rank, std::string(what) + " must have rank " + std::to_string(rank) + ", got " +
                                shape_str(t.shape()));
}

std::size_t out_extent(std::size_t in, int k, int stride, int pad) {
  return (in + 2 * static_cast<std::size_t>(pad) - static_cast<std::size_t>(k)) / static_cast<std::size_t>(stride) + 1;
}

struct ConvGeom {
  std::size_t cin, d, h, w;
  std::size_t k;
  std::size_t od, oh, ow;
  int stride, pad;
  std::size_t rows() const { return cin * k * k * k; }
  std::size_t sites() const { return od * oh * ow; }
};

// Output positions [lo, hi) along one axis whose input index
// o*stride + kofs - pad falls inside [0, n).
inline std::pair<std::size_t, std::size_t> valid_range(std::size_t n, std::size_t out, std::size_t kofs, int stride,
                                                       int pad) {
  const long shift = static_cast<long>(kofs) - pad;
  const long s = stride;
  long lo = shift >= 0 ? 0 : (-shift + s - 1) / s;
  long hi = static_cast<long>(n) - shift <= 0 ? 0 : (static_cast<long>(n) - shift + s - 1) / s;
  hi = std::min(hi, static_cast<long>(out));
  lo = std::min(lo, hi);
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

// cols is [Cin*k^3, od*oh*ow], row-major.
template <typename T>
void im2col(const T* x, const ConvGeom& g, T* cols) {
  const auto S = g.sites();
  std::size_t r = 0;
  for (std::size_t ci = 0; ci < g.cin; ++ci) {
    const T* xc = x + ci * g.d * g.h * g.w;
    for (std::size_t kd = 0; kd < g.k; ++kd) {
      const auto [d0, d1] = valid_range(g.d, g.od, kd, g.stride, g.pad);
      for (std::size_t kh = 0; kh < g.k; ++kh) {
        const auto [h0, h1] = valid_range(g.h, g.oh, kh, g.stride, g.pad);
        for (std::size_t kw = 0; kw < g.k; ++kw, ++r) {
          const auto [w0, w1] = valid_range(g.w, g.ow, kw, g.stride, g.pad);
          T* row = cols + r * S;
          std::fill(row, row + S, T(0));
          for (std::size_t od = d0; od < d1; ++od) {
            const auto id = od * g.stride + kd - g.pad;
            for (std::size_t oh = h0; oh < h1; ++oh) {
              const auto ih = oh * g.stride + kh - g.pad;
              const T* xrow = xc + (id * g.h + ih) * g.w;
              T* dst = row + (od * g.oh + oh) * g.ow;
              if (w0 == w1) continue;
              if (g.stride == 1) {
                std::copy(xrow + (w0 + kw - g.pad), xrow + (w1 + kw - g.pad), dst + w0);
              } else {
                for (std::size_t ow = w0; ow < w1; ++ow) dst[ow] = xrow[ow * g.stride + kw - g.pad];
              }
            }
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* cols, const ConvGeom& g, T* dx) {
  const auto S = g.sites();
  std::size_t r = 0;
  for (std::size_t ci = 0; ci < g.cin; ++ci) {
    T* xc = dx + ci * g.d * g.h * g.w;
    for (std::size_t kd = 0; kd < g.k; ++kd) {
      const auto [d0, d1] = valid_range(g.d, g.od, kd, g.stride, g.pad);
      for (std::size_t kh = 0; kh < g.k; ++kh) {
        const auto [h0, h1] = valid_range(g.h, g.oh, kh, g.stride, g.pad);
        for (std::size_t kw = 0; kw < g.k; ++kw, ++r) {
          const auto [w0, w1] = valid_range(g.w, g.ow, kw, g.stride, g.pad);
          const T* row = cols + r * S;
          for (std::size_t od = d0; od < d1; ++od) {
            const auto id = od * g.stride + kd - g.pad;
            for (std::size_t oh = h0; oh < h1; ++oh) {
              const auto ih = oh * g.stride + kh - g.pad;
              T* xrow = xc + (id * g.h + ih) * g.w;
              const T* src = row + (od * g.oh + oh) * g.ow;
              for (std::size_t ow = w0; ow < w1; ++ow) xrow[ow * g.stride + kw - g.pad] += src[ow];
            }
          }
        }
      }
    }
  }
}

}  // namespace

template <typename T>
Tensor<T> conv3d(Tape<T>* tape, const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 int stride, int padding) {
  require_rank(input, 5, "conv3d input");
  require_rank(weight, 5, "conv3d weight");
  require(stride >= 1 && padding >= 0, "conv3d: stride must be >= 1 and padding >= 0");
  const auto N = input.dim(0);
  const auto cout = weight.dim(0);
  const auto k = weight.dim(2);
  require(weight.dim(1) == input.dim(1),
          "conv3d: input has " + std::to_string(input.dim(1)) + " channels, weight expects " +
              std::to_string(weight.dim(1)));
  require(weight.dim(3) == k && weight.dim(4) == k && k % 2 == 1, "conv3d: kernel must be cubic with odd extent");
  if (bias.defined()) require(bias.rank() == 1 && bias.dim(0) == cout, "conv3d: bias must have shape [Cout]");
  for (std::size_t a = 2; a < 5; ++a) {
    require(input.dim(a) + 2 * static_cast<std::size_t>(padding) >= k, "conv3d: padded input smaller than kernel");
  }

  ConvGeom g{input.dim(1), input.dim(2), input.dim(3), input.dim(4), k, 0, 0, 0, stride, padding};
  g.od = out_extent(g.d, static_cast<int>(k), stride, padding);
  g.oh = out_extent(g.h, static_cast<int>(k), stride, padding);
  g.ow = out_extent(g.w, static_cast<int>(k), stride, padding);
  const auto K = g.rows();
  const auto S = g.sites();
  const auto in_stride = g.cin * g.d * g.h * g.w;

  const bool grad = tracked(tape, {&input, &weight, &bias});
  auto saved_cols = std::make_shared<std::vector<Buffer<T>>>();
  Buffer<T> out(N * cout * S);
  ConstMapMat<T> W(weight.data().data(), static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(K));
  for (std::size_t n = 0; n < N; ++n) {
    Buffer<T> cols(K * S);
    im2col(input.data().data() + n * in_stride, g, cols.data());
    ConstMapMat<T> C(cols.data(), static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(S));
    MapMat<T> O(out.data() + n * cout * S, static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(S));
    O.noalias() = W * C;
    if (bias.defined()) {
      for (std::size_t c = 0; c < cout; ++c) O.row(static_cast<Eigen::Index>(c)).array() += bias.data()[c];
    }
    if (grad) saved_cols->push_back(std::move(cols));
  }

  auto result = finish("conv3d", Shape{N, cout, g.od, g.oh, g.ow}, std::move(out), grad);
  if (grad) {
    tape->record(result, [=]() mutable {
      const T* dout = result.grad().data();
      ConstMapMat<T> Wm(weight.data().data(), static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(K));
      for (std::size_t n = 0; n < N; ++n) {
        ConstMapMat<T> dO(dout + n * cout * S, static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(S));
        ConstMapMat<T> C((*saved_cols)[n].data(), static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(S));
        if (weight.requires_grad()) {
          MapMat<T> dW(weight.grad_buffer().data(), static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(K));
          dW.noalias() += dO * C.transpose();
        }
        if (bias.defined() && bias.requires_grad()) {
          auto db = bias.grad_buffer();
          for (std::size_t c = 0; c < cout; ++c) db[c] += dO.row(static_cast<Eigen::Index>(c)).sum();
        }
        if (input.requires_grad()) {
          RowMat<T> dC = Wm.transpose() * dO;
          col2im_add(dC.data(), g, input.grad_buffer().data() + n * in_stride);
        }
      }
    });
  }
  return result;
}

template <typename T>
Tensor<T> maxpool3d(Tape<T>* tape, const Tensor<T>& input, int window, int stride) {
  require_rank(input, 5, "maxpool3d input");
  require(window >= 1 && stride >= 1, "maxpool3d: window and stride must be positive");
  const auto N = input.dim(0), C = input.dim(1), D = input.dim(2), H = input.dim(3), W = input.dim(4);
  const auto ws = static_cast<std::size_t>(window);
  const auto ss = static_cast<std::size_t>(stride);
  require(D % ss == 0 && H % ss == 0 && W % ss == 0 && D >= ws && H >= ws && W >= ws,
          "maxpool3d: extents " + shape_str(input.shape()) + " not divisible by stride " + std::to_string(stride));
  const auto od = (D - ws) / ss + 1, oh = (H - ws) / ss + 1, ow = (W - ws) / ss + 1;
  const bool grad = tracked(tape, {&input});

  Buffer<T> out(N * C * od * oh * ow);
  auto argmax = std::make_shared<std::vector<std::size_t>>(grad ? out.size() : 0);
  const T* x = input.data().data();
  std::size_t o = 0;
  for (std::size_t nc = 0; nc < N * C; ++nc) {
    const std::size_t base = nc * D * H * W;
    for (std::size_t z = 0; z < od; ++z) {
      for (std::size_t y = 0; y < oh; ++y) {
        for (std::size_t xw = 0; xw < ow; ++xw, ++o) {
          std::size_t best_idx = base + ((z * ss) * H + y * ss) * W + xw * ss;
          T best = x[best_idx];
          for (std::size_t a = 0; a < ws; ++a) {
            for (std::size_t b = 0; b < ws; ++b) {
              for (std::size_t c = 0; c < ws; ++c) {
                const std::size_t idx = base + ((z * ss + a) * H + (y * ss + b)) * W + (xw * ss + c);
                if (x[idx] > best) {
                  best = x[idx];
                  best_idx = idx;
                }
              }
            }
          }
          out[o] = best;
          if (grad) (*argmax)[o] = best_idx;
          if (active_pattern) active_pattern->mix(best_idx);
        }
      }
    }
  }

  auto result = finish("maxpool3d", Shape{N, C, od, oh, ow}, std::move(out), grad);
  if (grad) {
    tape->record(result, [=]() mutable {
      auto dx = input.grad_buffer();
      const auto dy = result.grad();
      for (std::size_t i = 0; i < dy.size(); ++i) dx[(*argmax)[i]] += dy[i];
    });
  }
  return result;
}

template <typename T>
Tensor<T> linear(Tape<T>* tape, const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias) {
  require_rank(input, 2, "linear input");
  require_rank(weight, 2, "linear weight");
  const auto M = input.dim(0), din = input.dim(1), dout = weight.dim(1);
  require(weight.dim(0) == din, "linear: input width " + std::to_string(din) + " does not match weight rows " +
                                    std::to_string(weight.dim(0)));
  if (bias.defined()) require(bias.rank() == 1 && bias.dim(0) == dout, "linear: bias must have shape [dout]");
  const bool grad = tracked(tape, {&input, &weight, &bias});

  Buffer<T> out(M * dout);
  const auto m = static_cast<Eigen::Index>(M), di = static_cast<Eigen::Index>(din), dn = static_cast<Eigen::Index>(dout);
  ConstMapMat<T> X(input.data().data(), m, di);
  ConstMapMat<T> Wm(weight.data().data(), di, dn);
  MapMat<T> Y(out.data(), m, dn);
  Y.noalias() = X * Wm;
  if (bias.defined()) {
    Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> b(bias.data().data(), dn);
    Y.rowwise() += b;
  }

  auto result = finish("linear", Shape{M, dout}, std::move(out), grad);
  if (grad) {
    tape->record(result, [=]() mutable {
      ConstMapMat<T> dY(result.grad().data(), m, dn);
      if (input.requires_grad()) {
        ConstMapMat<T> Wb(weight.data().data(), di, dn);
        MapMat<T> dX(input.grad_buffer().data(), m, di);
        dX.noalias() += dY * Wb.transpose();
      }
      if (weight.requires_grad()) {
        ConstMapMat<T> Xb(input.data().data(), m, di);
        MapMat<T> dW(weight.grad_buffer().data(), di, dn);
        dW.noalias() += Xb.transpose() * dY;
      }
      if (bias.defined() && bias.requires_grad()) {
        Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> db(bias.grad_buffer().data(), dn);
        db += dY.colwise().sum();
      }
    });
  }
  return result;
}

template <typename T>
Tensor<T> relu(Tape<T>* tape, const Tensor<T>& x) {
  require(x.defined(), "relu: undefined input");
  const bool grad = tracked(tape, {&x});
  Buffer<T> out(x.data().begin(), x.data().end());
  for (auto& v : out) v = v > T(0) || std::isnan(v) ? v : T(0);
  if (active_pattern) {
    for (std::size_t i = 0; i < out.size(); ++i) active_pattern->mix(i << 1 | (out[i] > T(0) ? 1u : 0u));
  }
  auto result = finish("relu", x.shape(), std::move(out), grad);
  if (grad) {
    tape->record(result, [=]() mutable {
      auto dx = x.grad_buffer();
      const auto dy = result.grad();
      const auto xv = x.data();
      for (std::size_t i = 0; i < dy.size(); ++i) {
        if (xv[i] > T(0)) dx[i] += dy[i];
      }
    });
  }
  return result;
}

template <typename T>
Tensor<T> exp(Tape<T>* tape, const Tensor<T>& x) {
  require(x.defined(), "exp: undefined input");
  const bool grad = tracked(tape, {&x});
  Buffer<T> out(x.data().begin(), x.data().end());
  for (auto& v : out) v = std::exp(v);
  auto result = finish("exp", x.shape(), std::move(out), grad);
  if (grad) {
    tape->record(result, [=]() mutable {
      auto dx = x.grad_buffer();
      const auto dy = result.grad();
      const auto y = result.data();
      for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i] * y[i];
    });
  }
  return result;
}

template <typename T>
Tensor<T> add(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
  require(a.defined() && b.defined(), "add: undefined input");
  require(a.shape() == b.shape(), "add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const bool grad = tracked(tape, {&a, &b});
  Buffer<T> out(a.numel());
  const auto av = a.data(), bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  auto result = finish("add", a.shape(), std::move(out), grad);
  if (grad) {
    tape->record(result, [=]() mutable {
      const auto dy = result.grad();
      for (const Tensor<T>* t : {&a, &b}) {
        if (!t->requires_grad()) continue;
        auto dt = t->grad_buffer();
        for (std::size_t i = 0; i < dy.size(); ++i) dt[i] += dy[i];
      }
    });
  }
  return result;
}

template <typename T>
Tensor<T> mul(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
  require(a.defined() && b.defined(), "mul: undefined input");
  require(a.shape() == b.shape(), "mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const bool grad = tracked(tape, {&a, &b});
  Buffer<T> out(a.numel());
  const auto av = a.data(), bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  auto result = finish("mul", a.shape(), std::move(out), grad);
  if (grad) {
    tape->record(result, [=]() mutable {
      const auto dy = result.grad();
      if (a.requires_grad()) {
        auto da = a.grad_buffer();
        const auto bd = b.data();
        for (std::size_t i = 0; i < dy.size(); ++i) da[i] += dy[i] * bd[i];
      }
      if (b.requires_grad()) {
        auto db = b.grad_buffer();
        const auto ad = a.data();
        for (std::size_t i = 0; i < dy.size(); ++i) db[i] += dy[i] * ad[i];
      }
    });
  }
  return result;
}

template <typename T>
Tensor<T> scale(Tape<T>* tape, const Tensor<T>& x, T factor) {
  require(x.defined(), "scale: undefined input");
  const bool grad = tracked(tape, {&x});
  Buffer<T> out(x.data().begin(), x.data().end());
  for (auto& v : out) v *= factor;
  auto result = finish("scale", x.shape(), std::move(out), grad);
  if (grad) {
    tape->record(result, [=]() mutable {
      auto dx = x.grad_buffer();
      const auto dy = result.grad();
      for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i] * factor;
    });
  }
  return result;
}

template <typename T>
Tensor<T> softmax_rows(Tape<T>* tape, const Tensor<T>& logits) {
  require(logits.defined() && logits.rank() >= 2, "softmax_rows: input must have rank >= 2");
  require_finite(logits.data(), "softmax_rows input");
  const auto K = logits.shape().back();
  const auto rows = logits.numel() / K;
  const bool grad = tracked(tape, {&logits});
  Buffer<T> out(logits.numel());
  const T* x = logits.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x + r * K;
    T* yr = out.data() + r * K;
    const T mx = *std::max_element(xr, xr + K);
    T total = 0;
    for (std::size_t j = 0; j < K; ++j) {
      yr[j] = std::exp(xr[j] - mx);
      total += yr[j];
    }
    const T inv = T(1) / total;
    for (std::size_t j = 0; j < K; ++j) yr[j] *= inv;
  }
  auto result = finish("softmax_rows", logits.shape(), std::move(out), grad);
  if (grad) {
    tape->record(result, [=]() mutable {
      auto dx = logits.grad_buffer();
      const auto dy = result.grad();
      const auto y = result.data();
      for (std::size_t r = 0; r < rows; ++r) {
        T dot = 0;
        for (std::size_t j = 0; j < K; ++j) dot += dy[r * K + j] * y[r * K + j];
        for (std::size_t j = 0; j < K; ++j) dx[r * K + j] += y[r * K + j] * (dy[r * K + j] - dot);
      }
    });
  }
  return result;
}

namespace {
template <typename T>
Tensor<T> batched_product(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b, bool transpose_b) {
  require_rank(a, 3, "bmm lhs");
  require_rank(b, 3, "bmm rhs");
  const auto B = a.dim(0), M = a.dim(1), K = a.dim(2);
  const auto N = transpose_b ? b.dim(1) : b.dim(2);
  const auto bK = transpose_b ? b.dim(2) : b.dim(1);
  require(b.dim(0) == B && bK == K, "bmm: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  const bool grad = tracked(tape, {&a, &b});
  const auto m = static_cast<Eigen::Index>(M), k = static_cast<Eigen::Index>(K), n = static_cast<Eigen::Index>(N);
  const auto b_rows = transpose_b ? n : k, b_cols = transpose_b ? k : n;

  Buffer<T> out(B * M * N);
  for (std::size_t i = 0; i < B; ++i) {
    ConstMapMat<T> A(a.data().data() + i * M * K, m, k);
    ConstMapMat<T> Bm(b.data().data() + i * K * N, b_rows, b_cols);
    MapMat<T> C(out.data() + i * M * N, m, n);
    if (transpose_b) {
      C.noalias() = A * Bm.transpose();
    } else {
      C.noalias() = A * Bm;
    }
  }
  auto result = finish(transpose_b ? "bmm_nt" : "bmm", Shape{B, M, N}, std::move(out), grad);
  if (grad) {
    tape->record(result, [=]() mutable {
      for (std::size_t i = 0; i < B; ++i) {
        ConstMapMat<T> dC(result.grad().data() + i * M * N, m, n);
        ConstMapMat<T> A(a.data().data() + i * M * K, m, k);
        ConstMapMat<T> Bm(b.data().data() + i * K * N, b_rows, b_cols);
        if (a.requires_grad()) {
          MapMat<T> dA(a.grad_buffer().data() + i * M * K, m, k);
          if (transpose_b) {
            dA.noalias() += dC * Bm;
          } else {
            dA.noalias() += dC * Bm.transpose();
          }
        }
        if (b.requires_grad()) {
          MapMat<T> dB(b.grad_buffer().data() + i * K * N, b_rows, b_cols);
          if (transpose_b) {
            dB.noalias() += dC.transpose() * A;
          } else {
            dB.noalias() += A.transpose() * dC;
          }
        }
      }
    });
  }
  return result;
}
}  // namespace

template <typename T>
Tensor<T> bmm(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
  return batched_product(tape, a, b, false);
}

template <typename T>
Tensor<T> bmm_nt(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
  return batched_product(tape, a, b, true);
}

template <typename T>
Tensor<T> reshape(Tape<T>* tape, const Tensor<T>& x, Shape shape) {
  require(x.defined(), "reshape: undefined input");
  require(shape_numel(shape) == x.numel(),
          "reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  const bool grad = tracked(tape, {&x});
  auto result = Tensor<T>::make_result(std::move(shape), Buffer<T>(x.data().begin(), x.data().end()), grad);
  if (grad) {
    tape->record(result, [=]() mutable {
      auto dx = x.grad_buffer();
      const auto dy = result.grad();
      for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i];
    });
  }
  return result;
}

template <typename T>
Tensor<T> to_sites(Tape<T>* tape, const Tensor<T>& x) {
  require_rank(x, 5, "to_sites input");
  const auto N = x.dim(0), C = x.dim(1), S = x.dim(2) * x.dim(3) * x.dim(4);
  const bool grad = tracked(tape, {&x});
  Buffer<T> out(x.numel());
  const T* src = x.data().data();
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t c = 0; c < C; ++c) {
      for (std::size_t s = 0; s < S; ++s) out[(n * S + s) * C + c] = src[(n * C + c) * S + s];
    }
  }
  auto result = Tensor<T>::make_result(Shape{N, S, C}, std::move(out), grad);
  if (grad) {
    tape->record(result, [=]() mutable {
      auto dx = x.grad_buffer();
      const auto dy = result.grad();
      for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t c = 0; c < C; ++c) {
          for (std::size_t s = 0; s < S; ++s) dx[(n * C + c) * S + s] += dy[(n * S + s) * C + c];
        }
      }
    });
  }
  return result;
}

template <typename T>
Tensor<T> from_sites(Tape<T>* tape, const Tensor<T>& x, std::size_t d, std::size_t h, std::size_t w) {
  require_rank(x, 3, "from_sites input");
  const auto N = x.dim(0), S = x.dim(1), C = x.dim(2);
  require(S == d * h * w, "from_sites: site count " + std::to_string(S) + " does not match spatial extents");
  const bool grad = tracked(tape, {&x});
  Buffer<T> out(x.numel());
  const T* src = x.data().data();
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t s = 0; s < S; ++s) {
      for (std::size_t c = 0; c < C; ++c) out[(n * C + c) * S + s] = src[(n * S + s) * C + c];
    }
  }
  auto result = Tensor<T>::make_result(Shape{N, C, d, h, w}, std::move(out), grad);
  if (grad) {
    tape->record(result, [=]() mutable {
      auto dx = x.grad_buffer();
      const auto dy = result.grad();
      for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t s = 0; s < S; ++s) {
          for (std::size_t c = 0; c < C; ++c) dx[(n * S + s) * C + c] += dy[(n * C + c) * S + s];
        }
      }
    });
  }
  return result;
}

template <typename T>
Tensor<T> concat_channels(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
  require(a.defined() && b.defined() && a.rank() >= 2 && a.rank() == b.rank(), "concat_channels: rank mismatch");
  for (std::size_t i = 0; i < a.rank(); ++i) {
    if (i != 1) require(a.dim(i) == b.dim(i), "concat_channels: extent mismatch on axis " + std::to_string(i));
  }
  const auto N = a.dim(0);
  const auto a_block = a.numel() / N, b_block = b.numel() / N;
  Shape shape = a.shape();
  shape[1] = a.dim(1) + b.dim(1);
  const bool grad = tracked(tape, {&a, &b});
  Buffer<T> out;
  out.reserve(a.numel() + b.numel());
  for (std::size_t n = 0; n < N; ++n) {
    out.insert(out.end(), a.data().begin() + n * a_block, a.data().begin() + (n + 1) * a_block);
    out.insert(out.end(), b.data().begin() + n * b_block, b.data().begin() + (n + 1) * b_block);
  }
  auto result = Tensor<T>::make_result(std::move(shape), std::move(out), grad);
  if (grad) {
    tape->record(result, [=]() mutable {
      const auto dy = result.grad();
      for (std::size_t n = 0; n < N; ++n) {
        const auto base = n * (a_block + b_block);
        if (a.requires_grad()) {
          auto da = a.grad_buffer();
          for (std::size_t i = 0; i < a_block; ++i) da[n * a_block + i] += dy[base + i];
        }
        if (b.requires_grad()) {
          auto db = b.grad_buffer();
          for (std::size_t i = 0; i < b_block; ++i) db[n * b_block + i] += dy[base + a_block + i];
        }
      }
    });
  }
  return result;
}

template <typename T>
Tensor<T> sum(Tape<T>* tape, const Tensor<T>& x) {
  require(x.defined(), "sum: undefined input");
  const bool grad = tracked(tape, {&x});
  T total = 0;
  for (const T v : x.data()) total += v;
  auto result = finish("sum", Shape{1}, Buffer<T>{total}, grad);
  if (grad) {
    tape->record(result, [=]() mutable {
      auto dx = x.grad_buffer();
      const T g = result.grad()[0];
      for (auto& v : dx) v += g;
    });
  }
  return result;
}

template <typename T>
Tensor<T> mse_loss(Tape<T>* tape, const Tensor<T>& pred, const Tensor<T>& target) {
  require(pred.defined() && target.defined(), "mse_loss: undefined input");
  require(pred.shape() == target.shape(),
          "mse_loss: shape mismatch " + shape_str(pred.shape()) + " vs " + shape_str(target.shape()));
  const bool grad = tracked(tape, {&pred, &target});
  const auto n = pred.numel();
  T total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const T d = pred.data()[i] - target.data()[i];
    total += d * d;
  }
  auto result = finish("mse_loss", Shape{1}, Buffer<T>{total / static_cast<T>(n)}, grad);
  if (grad) {
    tape->record(result, [=]() mutable {
      const T g = result.grad()[0] * T(2) / static_cast<T>(n);
      for (const Tensor<T>* t : {&pred, &target}) {
        if (!t->requires_grad()) continue;
        auto dt = t->grad_buffer();
        const T sign = t == &pred ? T(1) : T(-1);
        for (std::size_t i = 0; i < n; ++i) dt[i] += sign * g * (pred.data()[i] - target.data()[i]);
      }
    });
  }
  return result;
}

#define XREG_INSTANTIATE_OPS(T)                                                                               \
  template Tensor<T> conv3d(Tape<T>*, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, int, int);        \
  template Tensor<T> maxpool3d(Tape<T>*, const Tensor<T>&, int, int);                                         \
  template Tensor<T> linear(Tape<T>*, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                 \
  template Tensor<T> relu(Tape<T>*, const Tensor<T>&);                                                        \
  template Tensor<T> exp(Tape<T>*, const Tensor<T>&);                                                         \
  template Tensor<T> add(Tape<T>*, const Tensor<T>&, const Tensor<T>&);                                       \
  template Tensor<T> mul(Tape<T>*, const Tensor<T>&, const Tensor<T>&);                                       \
  template Tensor<T> scale(Tape<T>*, const Tensor<T>&, T);                                                    \
  template Tensor<T> softmax_rows(Tape<T>*, const Tensor<T>&);                                                \
  template Tensor<T> bmm(Tape<T>*, const Tensor<T>&, const Tensor<T>&);                                       \
  template Tensor<T> bmm_nt(Tape<T>*, const Tensor<T>&, const Tensor<T>&);                                    \
  template Tensor<T> reshape(Tape<T>*, const Tensor<T>&, Shape);                                              \
  template Tensor<T> to_sites(Tape<T>*, const Tensor<T>&);                                                    \
  template Tensor<T> from_sites(Tape<T>*, const Tensor<T>&, std::size_t, std::size_t, std::size_t);           \
  template Tensor<T> concat_channels(Tape<T>*, const Tensor<T>&, const Tensor<T>&);                           \
  template Tensor<T> sum(Tape<T>*, const Tensor<T>&);                                                         \
  template Tensor<T> mse_loss(Tape<T>*, const Tensor<T>&, const Tensor<T>&);

XREG_INSTANTIATE_OPS(float)
XREG_INSTANTIATE_OPS(double)

#undef XREG_INSTANTIATE_OPS

}  // namespace xreg::ops
