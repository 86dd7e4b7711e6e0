#include "moemamba/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "kernels.hpp"
#include "moemamba/errors.hpp"

namespace moemamba {

namespace {

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

// Layout of a binary op whose smaller operand repeats over leading dims.
struct Broadcast {
  bool a_is_big;
  std::size_t inner;  // elements of the small operand
  Shape out_shape;
};

template <typename T>
Broadcast resolve_broadcast(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() == b.shape()) return {true, a.numel(), a.shape()};
  if (is_suffix(b.shape(), a.shape())) return {true, b.numel(), a.shape()};
  if (is_suffix(a.shape(), b.shape())) return {false, a.numel(), b.shape()};
  throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(a.shape()) + " with " +
                   shape_str(b.shape()) + " (only leading-dimension broadcast is supported)");
}

template <typename T>
void check_finite(std::span<const T> x, const char* op) {
  for (T v : x) {
    if (std::isnan(v)) throw NumericError(std::string(op) + ": NaN input");
  }
}

template <typename T>
T sigmoid_scalar(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

template <typename T>
T softplus_scalar(T x) {
  return std::max(x, T(0)) + std::log1p(std::exp(-std::abs(x)));
}

// Applies f elementwise; backward multiplies the incoming grad by
// dfdx(x, y) where y is the forward output.
template <typename T, typename F, typename D>
Tensor<T> unary(const char* name, const Tensor<T>& x, F f, D dfdx) {
  const auto in = x.data();
  std::vector<T> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = f(in[i]);
  return make_op_result<T>(name, x.shape(), std::move(out), {x},
                           [x, dfdx](std::span<const T> g, std::span<const T> y) {
                             if (!wants_grad(x)) return;
                             auto gx = x.grad_buffer();
                             const auto xv = x.data();
                             for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * dfdx(xv[i], y[i]);
                           });
}

}  // namespace

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  auto mismatch = [&]() {
    return ShapeError("matmul: incompatible shapes " + shape_str(as) + " and " + shape_str(bs));
  };
  if (as.size() < 2 || bs.size() < 2) throw mismatch();
  const std::size_t m = as[as.size() - 2];
  const std::size_t k = as.back();
  if (bs[bs.size() - 2] != k) throw mismatch();
  const std::size_t n = bs.back();

  std::size_t batch = 1;
  bool batched = false;
  if (bs.size() == 2) {
    batch = 1;
  } else {
    if (bs.size() != as.size() || !std::equal(as.begin(), as.end() - 2, bs.begin())) throw mismatch();
    batched = true;
    batch = shape_numel(Shape(as.begin(), as.end() - 2));
  }
  // Without batching, all leading rows of a share one b.
  const std::size_t rows = batched ? m : a.numel() / k;

  Shape out_shape(as.begin(), as.end() - 1);
  out_shape.push_back(n);
  std::vector<T> out(shape_numel(out_shape), T(0));
  const T* ap = a.data().data();
  const T* bp = b.data().data();
  for (std::size_t bi = 0; bi < batch; ++bi) {
    kernels::gemm_acc(ap + bi * rows * k, bp + (batched ? bi * k * n : 0), out.data() + bi * rows * n, rows,
                      k, n);
  }
  return make_op_result<T>("matmul", std::move(out_shape), std::move(out), {a, b},
                           [a, b, batch, batched, rows, k, n](std::span<const T> g, std::span<const T>) {
                             const T* ap = a.data().data();
                             const T* bp = b.data().data();
                             for (std::size_t bi = 0; bi < batch; ++bi) {
                               const T* gb = g.data() + bi * rows * n;
                               const T* bmat = bp + (batched ? bi * k * n : 0);
                               if (wants_grad(a)) {
                                 kernels::gemm_abt_acc(gb, bmat, a.grad_buffer().data() + bi * rows * k, rows, n,
                                                       k);
                               }
                               if (wants_grad(b)) {
                                 kernels::gemm_atb_acc(ap + bi * rows * k, gb,
                                                       b.grad_buffer().data() + (batched ? bi * k * n : 0), rows,
                                                       k, n);
                               }
                             }
                           });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  const Broadcast bc = resolve_broadcast(a, b, "add");
  const Tensor<T>& big = bc.a_is_big ? a : b;
  const Tensor<T>& small = bc.a_is_big ? b : a;
  const auto bv = big.data();
  const auto sv = small.data();
  std::vector<T> out(bv.size());
  const std::size_t inner = bc.inner;
  for (std::size_t o = 0; o < bv.size(); o += inner) {
    for (std::size_t j = 0; j < inner; ++j) out[o + j] = bv[o + j] + sv[j];
  }
  return make_op_result<T>("add", bc.out_shape, std::move(out), {a, b},
                           [big, small, inner](std::span<const T> g, std::span<const T>) {
                             if (wants_grad(big)) {
                               auto gb = big.grad_buffer();
                               for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
                             }
                             if (wants_grad(small)) {
                               auto gs = small.grad_buffer();
                               for (std::size_t o = 0; o < g.size(); o += inner) {
                                 for (std::size_t j = 0; j < inner; ++j) gs[j] += g[o + j];
                               }
                             }
                           });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  const Broadcast bc = resolve_broadcast(a, b, "mul");
  const Tensor<T>& big = bc.a_is_big ? a : b;
  const Tensor<T>& small = bc.a_is_big ? b : a;
  const auto bv = big.data();
  const auto sv = small.data();
  std::vector<T> out(bv.size());
  const std::size_t inner = bc.inner;
  for (std::size_t o = 0; o < bv.size(); o += inner) {
    for (std::size_t j = 0; j < inner; ++j) out[o + j] = bv[o + j] * sv[j];
  }
  return make_op_result<T>("mul", bc.out_shape, std::move(out), {a, b},
                           [big, small, inner](std::span<const T> g, std::span<const T>) {
                             const auto bv = big.data();
                             const auto sv = small.data();
                             if (wants_grad(big)) {
                               auto gb = big.grad_buffer();
                               for (std::size_t o = 0; o < g.size(); o += inner) {
                                 for (std::size_t j = 0; j < inner; ++j) gb[o + j] += g[o + j] * sv[j];
                               }
                             }
                             if (wants_grad(small)) {
                               auto gs = small.grad_buffer();
                               for (std::size_t o = 0; o < g.size(); o += inner) {
                                 for (std::size_t j = 0; j < inner; ++j) gs[j] += g[o + j] * bv[o + j];
                               }
                             }
                           });
}

template <typename T>
Tensor<T> negate(const Tensor<T>& x) {
  return scale(x, T(-1));
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  return unary<T>(
      "scale", x, [factor](T v) { return v * factor; }, [factor](T, T) { return factor; });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& x) {
  return unary<T>(
      "exp", x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> softplus(const Tensor<T>& x) {
  return unary<T>(
      "softplus", x, [](T v) { return softplus_scalar(v); }, [](T v, T) { return sigmoid_scalar(v); });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return unary<T>(
      "sigmoid", x, [](T v) { return sigmoid_scalar(v); }, [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> silu(const Tensor<T>& x) {
  return unary<T>(
      "silu", x, [](T v) { return v * sigmoid_scalar(v); },
      [](T v, T) {
        const T s = sigmoid_scalar(v);
        return s * (T(1) + v * (T(1) - s));
      });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T total = T(0);
  for (T v : x.data()) total += v;
  return make_op_result<T>("sum", Shape{1}, {total}, {x}, [x](std::span<const T> g, std::span<const T>) {
    if (!wants_grad(x)) return;
    for (T& gx : x.grad_buffer()) gx += g[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  const T inv = T(1) / static_cast<T>(x.numel());
  T total = T(0);
  for (T v : x.data()) total += v;
  return make_op_result<T>("mean", Shape{1}, {total * inv}, {x},
                           [x, inv](std::span<const T> g, std::span<const T>) {
                             if (!wants_grad(x)) return;
                             for (T& gx : x.grad_buffer()) gx += g[0] * inv;
                           });
}

template <typename T>
Tensor<T> mean_rows(const Tensor<T>& x) {
  if (x.dim() != 2) throw ShapeError("mean_rows: expected a 2-D tensor, got " + shape_str(x.shape()));
  const std::size_t rows = x.size(0);
  const std::size_t cols = x.size(1);
  const T inv = T(1) / static_cast<T>(rows);
  const auto xv = x.data();
  std::vector<T> out(cols, T(0));
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) out[c] += xv[r * cols + c];
  }
  for (T& v : out) v *= inv;
  return make_op_result<T>("mean_rows", Shape{cols}, std::move(out), {x},
                           [x, rows, cols, inv](std::span<const T> g, std::span<const T>) {
                             if (!wants_grad(x)) return;
                             auto gx = x.grad_buffer();
                             for (std::size_t r = 0; r < rows; ++r) {
                               for (std::size_t c = 0; c < cols; ++c) gx[r * cols + c] += g[c] * inv;
                             }
                           });
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis) {
  const Shape& s = x.shape();
  const int rank = static_cast<int>(s.size());
  const int ax = axis < 0 ? axis + rank : axis;
  if (ax < 0 || ax >= rank) {
    throw ShapeError("softmax: axis " + std::to_string(axis) + " out of range for shape " + shape_str(s));
  }
  check_finite(x.data(), "softmax");
  const std::size_t n = s[ax];
  std::size_t inner = 1;
  for (int i = ax + 1; i < rank; ++i) inner *= s[i];
  const std::size_t outer = x.numel() / (n * inner);

  const auto xv = x.data();
  std::vector<T> out(xv.size());
  std::vector<T> sorted(n);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t i = 0; i < n; ++i) mx = std::max(mx, xv[base + i * inner]);
      for (std::size_t i = 0; i < n; ++i) {
        out[base + i * inner] = std::exp(xv[base + i * inner] - mx);
        sorted[i] = out[base + i * inner];
      }
      std::sort(sorted.begin(), sorted.end());
      T denom = T(0);
      for (T v : sorted) denom += v;
      for (std::size_t i = 0; i < n; ++i) out[base + i * inner] /= denom;
    }
  }
  return make_op_result<T>("softmax", s, std::move(out), {x},
                           [x, n, inner, outer](std::span<const T> g, std::span<const T> y) {
                             if (!wants_grad(x)) return;
                             auto gx = x.grad_buffer();
                             for (std::size_t o = 0; o < outer; ++o) {
                               for (std::size_t in = 0; in < inner; ++in) {
                                 const std::size_t base = o * n * inner + in;
                                 T dot = T(0);
                                 for (std::size_t i = 0; i < n; ++i) dot += g[base + i * inner] * y[base + i * inner];
                                 for (std::size_t i = 0; i < n; ++i) {
                                   const std::size_t idx = base + i * inner;
                                   gx[idx] += y[idx] * (g[idx] - dot);
                                 }
                               }
                             }
                           });
}

template <typename T>
Tensor<T> rmsnorm(const Tensor<T>& x, const Tensor<T>& gain, T eps) {
  const std::size_t d = x.shape().back();
  if (gain.dim() != 1 || gain.size(0) != d) {
    throw ShapeError("rmsnorm: gain " + shape_str(gain.shape()) + " does not match input " + shape_str(x.shape()));
  }
  const std::size_t rows = x.numel() / d;
  const auto xv = x.data();
  const auto gv = gain.data();
  std::vector<T> out(xv.size());
  std::vector<T> inv_rms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = xv.data() + r * d;
    T ss = T(0);
    for (std::size_t j = 0; j < d; ++j) ss += xr[j] * xr[j];
    const T inv = T(1) / std::sqrt(ss / static_cast<T>(d) + eps);
    inv_rms[r] = inv;
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = xr[j] * inv * gv[j];
  }
  return make_op_result<T>(
      "rmsnorm", x.shape(), std::move(out), {x, gain},
      [x, gain, d, rows, inv_rms = std::move(inv_rms)](std::span<const T> g, std::span<const T>) {
        const auto xv = x.data();
        const auto gv = gain.data();
        if (wants_grad(x)) {
          auto gx = x.grad_buffer();
          for (std::size_t r = 0; r < rows; ++r) {
            const T* xr = xv.data() + r * d;
            const T* gr = g.data() + r * d;
            const T inv = inv_rms[r];
            T dot = T(0);
            for (std::size_t j = 0; j < d; ++j) dot += xr[j] * gv[j] * gr[j];
            const T coef = inv * inv * inv * dot / static_cast<T>(d);
            for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += inv * gv[j] * gr[j] - coef * xr[j];
          }
        }
        if (wants_grad(gain)) {
          auto gg = gain.grad_buffer();
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t j = 0; j < d; ++j) gg[j] += g[r * d + j] * xv[r * d + j] * inv_rms[r];
          }
        }
      });
}

template <typename T>
Tensor<T> conv1d_depthwise_causal(const Tensor<T>& x, const Tensor<T>& kernel, const Tensor<T>& bias) {
  if (x.dim() != 3) throw ShapeError("conv1d: expected x as [B, L, C], got " + shape_str(x.shape()));
  const std::size_t batch = x.size(0);
  const std::size_t len = x.size(1);
  const std::size_t ch = x.size(2);
  if (kernel.dim() != 2 || kernel.size(0) != ch || bias.dim() != 1 || bias.size(0) != ch) {
    throw ShapeError("conv1d: channel mismatch, x " + shape_str(x.shape()) + ", kernel " +
                     shape_str(kernel.shape()) + ", bias " + shape_str(bias.shape()));
  }
  const std::size_t k = kernel.size(1);
  const auto xv = x.data();
  const auto kv = kernel.data();
  const auto bv = bias.data();
  std::vector<T> out(xv.size());
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t t = 0; t < len; ++t) {
      T* yrow = out.data() + (b * len + t) * ch;
      for (std::size_t c = 0; c < ch; ++c) yrow[c] = bv[c];
      for (std::size_t j = 0; j < k && j <= t; ++j) {
        const T* xrow = xv.data() + (b * len + t - j) * ch;
        for (std::size_t c = 0; c < ch; ++c) yrow[c] += kv[c * k + j] * xrow[c];
      }
    }
  }
  return make_op_result<T>(
      "conv1d_depthwise_causal", x.shape(), std::move(out), {x, kernel, bias},
      [x, kernel, bias, batch, len, ch, k](std::span<const T> g, std::span<const T>) {
        const auto xv = x.data();
        const auto kv = kernel.data();
        T* gx = wants_grad(x) ? x.grad_buffer().data() : nullptr;
        T* gk = wants_grad(kernel) ? kernel.grad_buffer().data() : nullptr;
        T* gb = wants_grad(bias) ? bias.grad_buffer().data() : nullptr;
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t t = 0; t < len; ++t) {
            const T* grow = g.data() + (b * len + t) * ch;
            if (gb) {
              for (std::size_t c = 0; c < ch; ++c) gb[c] += grow[c];
            }
            for (std::size_t j = 0; j < k && j <= t; ++j) {
              const std::size_t src = (b * len + t - j) * ch;
              for (std::size_t c = 0; c < ch; ++c) {
                if (gx) gx[src + c] += kv[c * k + j] * grow[c];
                if (gk) gk[c * k + j] += xv[src + c] * grow[c];
              }
            }
          }
        }
      });
}

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::int32_t> targets) {
  if (logits.dim() != 2) throw ShapeError("cross_entropy: expected [N, V] logits, got " + shape_str(logits.shape()));
  const std::size_t n = logits.size(0);
  const std::size_t vocab = logits.size(1);
  if (targets.size() != n) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " + std::to_string(n) +
                     " rows");
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= vocab) {
      throw IndexError("cross_entropy: target " + std::to_string(targets[i]) + " at row " + std::to_string(i) +
                       " outside [0, " + std::to_string(vocab) + ")");
    }
  }
  const auto lv = logits.data();
  std::vector<T> probs(lv.size());
  std::vector<std::int32_t> tgt(targets.begin(), targets.end());
  T total = T(0);
  for (std::size_t i = 0; i < n; ++i) {
    const T* row = lv.data() + i * vocab;
    std::size_t arg = 0;
    for (std::size_t v = 1; v < vocab; ++v) {
      if (row[v] > row[arg]) arg = v;
    }
    const T mx = row[arg];
    // The max term is exactly 1; summing the rest apart keeps log1p accurate
    // for confident rows.
    T rest = T(0);
    for (std::size_t v = 0; v < vocab; ++v) {
      probs[i * vocab + v] = std::exp(row[v] - mx);
      if (v != arg) rest += probs[i * vocab + v];
    }
    const T denom = T(1) + rest;
    for (std::size_t v = 0; v < vocab; ++v) probs[i * vocab + v] /= denom;
    total += (mx - row[tgt[i]]) + std::log1p(rest);
  }
  const T inv_n = T(1) / static_cast<T>(n);
  return make_op_result<T>(
      "cross_entropy", Shape{1}, {total * inv_n}, {logits},
      [logits, probs = std::move(probs), tgt = std::move(tgt), n, vocab, inv_n](std::span<const T> g,
                                                                                std::span<const T>) {
        if (!wants_grad(logits)) return;
        auto gl = logits.grad_buffer();
        const T s = g[0] * inv_n;
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t v = 0; v < vocab; ++v) gl[i * vocab + v] += s * probs[i * vocab + v];
          gl[i * vocab + tgt[i]] -= s;
        }
      });
}

template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const std::int32_t> ids, const Shape& lead) {
  if (table.dim() != 2) throw ShapeError("embedding: table must be [V, d], got " + shape_str(table.shape()));
  if (shape_numel(lead) != ids.size()) {
    throw ShapeError("embedding: " + std::to_string(ids.size()) + " ids do not fill shape " + shape_str(lead));
  }
  const std::size_t vocab = table.size(0);
  const std::size_t d = table.size(1);
  const auto tv = table.data();
  std::vector<std::int32_t> idx(ids.begin(), ids.end());
  std::vector<T> out(ids.size() * d);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || static_cast<std::size_t>(idx[i]) >= vocab) {
      throw IndexError("embedding: id " + std::to_string(idx[i]) + " outside [0, " + std::to_string(vocab) + ")");
    }
    std::copy_n(tv.data() + idx[i] * d, d, out.data() + i * d);
  }
  Shape out_shape = lead;
  out_shape.push_back(d);
  return make_op_result<T>("embedding", std::move(out_shape), std::move(out), {table},
                           [table, idx = std::move(idx), d](std::span<const T> g, std::span<const T>) {
                             if (!wants_grad(table)) return;
                             auto gt = table.grad_buffer();
                             for (std::size_t i = 0; i < idx.size(); ++i) {
                               T* dst = gt.data() + idx[i] * d;
                               for (std::size_t j = 0; j < d; ++j) dst[j] += g[i * d + j];
                             }
                           });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  const auto xv = x.data();
  return make_op_result<T>("reshape", std::move(shape), std::vector<T>(xv.begin(), xv.end()), {x},
                           [x](std::span<const T> g, std::span<const T>) {
                             if (!wants_grad(x)) return;
                             auto gx = x.grad_buffer();
                             for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                           });
}

template <typename T>
Tensor<T> slice_last(const Tensor<T>& x, std::size_t start, std::size_t length) {
  const std::size_t width = x.shape().back();
  if (length == 0 || start + length > width) {
    throw ShapeError("slice_last: columns [" + std::to_string(start) + ", " + std::to_string(start + length) +
                     ") outside " + shape_str(x.shape()));
  }
  const std::size_t rows = x.numel() / width;
  const auto xv = x.data();
  std::vector<T> out(rows * length);
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(xv.data() + r * width + start, length, out.data() + r * length);
  }
  Shape out_shape = x.shape();
  out_shape.back() = length;
  return make_op_result<T>("slice_last", std::move(out_shape), std::move(out), {x},
                           [x, rows, width, start, length](std::span<const T> g, std::span<const T>) {
                             if (!wants_grad(x)) return;
                             auto gx = x.grad_buffer();
                             for (std::size_t r = 0; r < rows; ++r) {
                               for (std::size_t j = 0; j < length; ++j) gx[r * width + start + j] += g[r * length + j];
                             }
                           });
}

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, std::span<const std::size_t> rows) {
  if (x.dim() != 2) throw ShapeError("gather_rows: expected a 2-D tensor, got " + shape_str(x.shape()));
  const std::size_t n = x.size(0);
  const std::size_t d = x.size(1);
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  const auto xv = x.data();
  std::vector<T> out(idx.size() * d);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= n) throw IndexError("gather_rows: row " + std::to_string(idx[i]) + " of " + std::to_string(n));
    std::copy_n(xv.data() + idx[i] * d, d, out.data() + i * d);
  }
  Shape shape{idx.size(), d};
  return make_op_result<T>("gather_rows", std::move(shape), std::move(out), {x},
                           [x, idx = std::move(idx), d](std::span<const T> g, std::span<const T>) {
                             if (!wants_grad(x)) return;
                             auto gx = x.grad_buffer();
                             for (std::size_t i = 0; i < idx.size(); ++i) {
                               for (std::size_t j = 0; j < d; ++j) gx[idx[i] * d + j] += g[i * d + j];
                             }
                           });
}

template <typename T>
Tensor<T> combine_rows(const std::vector<Tensor<T>>& parts, const std::vector<std::vector<std::size_t>>& rows,
                       std::size_t n_rows, std::size_t width) {
  if (parts.size() != rows.size()) throw ShapeError("combine_rows: parts and row lists differ in count");
  std::vector<T> out(n_rows * width, T(0));
  for (std::size_t p = 0; p < parts.size(); ++p) {
    if (rows[p].empty()) continue;
    const Tensor<T>& part = parts[p];
    if (part.dim() != 2 || part.size(0) != rows[p].size() || part.size(1) != width) {
      throw ShapeError("combine_rows: part " + std::to_string(p) + " has shape " + shape_str(part.shape()) +
                       ", expected [" + std::to_string(rows[p].size()) + "," + std::to_string(width) + "]");
    }
    const auto pv = part.data();
    for (std::size_t i = 0; i < rows[p].size(); ++i) {
      if (rows[p][i] >= n_rows) throw IndexError("combine_rows: row index out of range");
      std::copy_n(pv.data() + i * width, width, out.data() + rows[p][i] * width);
    }
  }
  std::vector<Tensor<T>> inputs;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    if (!rows[p].empty()) inputs.push_back(parts[p]);
  }
  return make_op_result<T>("combine_rows", Shape{n_rows, width}, std::move(out), inputs,
                           [parts, rows, width](std::span<const T> g, std::span<const T>) {
                             for (std::size_t p = 0; p < parts.size(); ++p) {
                               if (rows[p].empty() || !wants_grad(parts[p])) continue;
                               auto gp = parts[p].grad_buffer();
                               for (std::size_t i = 0; i < rows[p].size(); ++i) {
                                 for (std::size_t j = 0; j < width; ++j) gp[i * width + j] += g[rows[p][i] * width + j];
                               }
                             }
                           });
}

template <typename T>
Tensor<T> pick(const Tensor<T>& x, std::span<const std::int32_t> cols) {
  if (x.dim() != 2 || cols.size() != x.size(0)) {
    throw ShapeError("pick: " + std::to_string(cols.size()) + " columns for tensor " + shape_str(x.shape()));
  }
  const std::size_t n = x.size(0);
  const std::size_t d = x.size(1);
  std::vector<std::int32_t> idx(cols.begin(), cols.end());
  const auto xv = x.data();
  std::vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (idx[i] < 0 || static_cast<std::size_t>(idx[i]) >= d) throw IndexError("pick: column out of range");
    out[i] = xv[i * d + idx[i]];
  }
  return make_op_result<T>("pick", Shape{n}, std::move(out), {x},
                           [x, idx = std::move(idx), d](std::span<const T> g, std::span<const T>) {
                             if (!wants_grad(x)) return;
                             auto gx = x.grad_buffer();
                             for (std::size_t i = 0; i < idx.size(); ++i) gx[i * d + idx[i]] += g[i];
                           });
}

template <typename T>
Tensor<T> scale_rows(const Tensor<T>& x, const Tensor<T>& s) {
  if (x.dim() != 2 || s.dim() != 1 || s.size(0) != x.size(0)) {
    throw ShapeError("scale_rows: x " + shape_str(x.shape()) + " with scales " + shape_str(s.shape()));
  }
  const std::size_t n = x.size(0);
  const std::size_t d = x.size(1);
  const auto xv = x.data();
  const auto sv = s.data();
  std::vector<T> out(xv.size());
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] = xv[i * d + j] * sv[i];
  }
  return make_op_result<T>("scale_rows", x.shape(), std::move(out), {x, s},
                           [x, s, n, d](std::span<const T> g, std::span<const T>) {
                             const auto xv = x.data();
                             const auto sv = s.data();
                             if (wants_grad(x)) {
                               auto gx = x.grad_buffer();
                               for (std::size_t i = 0; i < n; ++i) {
                                 for (std::size_t j = 0; j < d; ++j) gx[i * d + j] += g[i * d + j] * sv[i];
                               }
                             }
                             if (wants_grad(s)) {
                               auto gs = s.grad_buffer();
                               for (std::size_t i = 0; i < n; ++i) {
                                 T acc = T(0);
                                 for (std::size_t j = 0; j < d; ++j) acc += g[i * d + j] * xv[i * d + j];
                                 gs[i] += acc;
                               }
                             }
                           });
}

#define MOEMAMBA_INSTANTIATE_OPS(T)                                                                           \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                             \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                                \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                                \
  template Tensor<T> negate(const Tensor<T>&);                                                               \
  template Tensor<T> scale(const Tensor<T>&, T);                                                             \
  template Tensor<T> exp(const Tensor<T>&);                                                                  \
  template Tensor<T> softplus(const Tensor<T>&);                                                             \
  template Tensor<T> sigmoid(const Tensor<T>&);                                                              \
  template Tensor<T> silu(const Tensor<T>&);                                                                 \
  template Tensor<T> sum(const Tensor<T>&);                                                                  \
  template Tensor<T> mean(const Tensor<T>&);                                                                 \
  template Tensor<T> mean_rows(const Tensor<T>&);                                                            \
  template Tensor<T> softmax(const Tensor<T>&, int);                                                         \
  template Tensor<T> rmsnorm(const Tensor<T>&, const Tensor<T>&, T);                                         \
  template Tensor<T> conv1d_depthwise_causal(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);          \
  template Tensor<T> cross_entropy(const Tensor<T>&, std::span<const std::int32_t>);                         \
  template Tensor<T> embedding(const Tensor<T>&, std::span<const std::int32_t>, const Shape&);               \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                                       \
  template Tensor<T> slice_last(const Tensor<T>&, std::size_t, std::size_t);                                 \
  template Tensor<T> gather_rows(const Tensor<T>&, std::span<const std::size_t>);                            \
  template Tensor<T> combine_rows(const std::vector<Tensor<T>>&, const std::vector<std::vector<std::size_t>>&, \
                                  std::size_t, std::size_t);                                                 \
  template Tensor<T> pick(const Tensor<T>&, std::span<const std::int32_t>);                                  \
  template Tensor<T> scale_rows(const Tensor<T>&, const Tensor<T>&);

MOEMAMBA_INSTANTIATE_OPS(float)
MOEMAMBA_INSTANTIATE_OPS(double)

}  // namespace moemamba
