#include "moemamba/attention.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "moemamba/errors.hpp"
#include "moemamba/ops.hpp"

namespace moemamba {

namespace {

void check_heads(std::size_t d_model, std::size_t n_heads) {
  if (n_heads == 0 || d_model % n_heads != 0) {
    throw ConfigError("attention: n_heads " + std::to_string(n_heads) + " does not divide d_model " +
                      std::to_string(d_model));
  }
}

}  // namespace

template <typename T>
Tensor<T> rotary(const Tensor<T>& x, std::size_t n_heads, double base) {
  if (x.dim() != 3) throw ShapeError("rotary: input " + shape_str(x.shape()) + " is not [B, L, d]");
  const std::size_t batch = x.size(0);
  const std::size_t length = x.size(1);
  const std::size_t d = x.size(2);
  check_heads(d, n_heads);
  const std::size_t head_dim = d / n_heads;
  const std::size_t pairs = head_dim / 2;

  // cos/sin tables [L, pairs]
  std::vector<T> cos_t(length * pairs);
  std::vector<T> sin_t(length * pairs);
  for (std::size_t pos = 0; pos < length; ++pos) {
    for (std::size_t i = 0; i < pairs; ++i) {
      const double freq = std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(head_dim));
      const double angle = static_cast<double>(pos) * freq;
      cos_t[pos * pairs + i] = static_cast<T>(std::cos(angle));
      sin_t[pos * pairs + i] = static_cast<T>(std::sin(angle));
    }
  }

  auto rotate = [=](const T* in, T* out, const std::vector<T>& c, const std::vector<T>& s, T direction) {
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t pos = 0; pos < length; ++pos) {
        const std::size_t row = (b * length + pos) * d;
        for (std::size_t h = 0; h < n_heads; ++h) {
          const std::size_t off = row + h * head_dim;
          for (std::size_t i = 0; i < pairs; ++i) {
            const T cs = c[pos * pairs + i];
            const T sn = direction * s[pos * pairs + i];
            const T x0 = in[off + 2 * i];
            const T x1 = in[off + 2 * i + 1];
            out[off + 2 * i] += x0 * cs - x1 * sn;
            out[off + 2 * i + 1] += x0 * sn + x1 * cs;
          }
          if (head_dim % 2 == 1) out[off + head_dim - 1] += in[off + head_dim - 1];
        }
      }
    }
  };

  std::vector<T> y(x.numel(), T(0));
  rotate(x.data().data(), y.data(), cos_t, sin_t, T(1));
  return make_op_result<T>("rotary", x.shape(), std::move(y), {x},
                           [x, rotate, cos_t = std::move(cos_t), sin_t = std::move(sin_t)](std::span<const T> g,
                                                                                            std::span<const T>) {
                             if (!wants_grad(x)) return;
                             // The transpose of a rotation is the rotation by the negated angle.
                             rotate(g.data(), x.grad_buffer().data(), cos_t, sin_t, T(-1));
                           });
}

template <typename T>
Tensor<T> causal_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::size_t n_heads) {
  if (q.dim() != 3 || k.shape() != q.shape() || v.shape() != q.shape()) {
    throw ShapeError("causal_attention: q " + shape_str(q.shape()) + ", k " + shape_str(k.shape()) + ", v " +
                     shape_str(v.shape()) + " must share one [B, L, d] shape");
  }
  const std::size_t batch = q.size(0);
  const std::size_t length = q.size(1);
  const std::size_t d = q.size(2);
  check_heads(d, n_heads);
  const std::size_t head_dim = d / n_heads;
  const T scale_factor = static_cast<T>(1.0 / std::sqrt(static_cast<double>(head_dim)));

  const auto qv = q.data();
  const auto kv = k.data();
  const auto vv = v.data();
  std::vector<T> probs(batch * n_heads * length * length, T(0));
  std::vector<T> out(q.numel(), T(0));
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < n_heads; ++h) {
      T* p_bh = probs.data() + (b * n_heads + h) * length * length;
      for (std::size_t i = 0; i < length; ++i) {
        const T* qi = qv.data() + (b * length + i) * d + h * head_dim;
        T* prow = p_bh + i * length;
        T max_score = -INFINITY;
        for (std::size_t j = 0; j <= i; ++j) {
          const T* kj = kv.data() + (b * length + j) * d + h * head_dim;
          T s = T(0);
          for (std::size_t c = 0; c < head_dim; ++c) s += qi[c] * kj[c];
          prow[j] = s * scale_factor;
          max_score = std::max(max_score, prow[j]);
        }
        T total = T(0);
        for (std::size_t j = 0; j <= i; ++j) {
          prow[j] = std::exp(prow[j] - max_score);
          total += prow[j];
        }
        T* oi = out.data() + (b * length + i) * d + h * head_dim;
        for (std::size_t j = 0; j <= i; ++j) {
          prow[j] /= total;
          const T* vj = vv.data() + (b * length + j) * d + h * head_dim;
          for (std::size_t c = 0; c < head_dim; ++c) oi[c] += prow[j] * vj[c];
        }
      }
    }
  }

  return make_op_result<T>(
      "causal_attention", q.shape(), std::move(out), {q, k, v},
      [q, k, v, batch, length, d, n_heads, head_dim, scale_factor, probs = std::move(probs)](std::span<const T> g,
                                                                                            std::span<const T>) {
        const auto qv = q.data();
        const auto kv = k.data();
        const auto vv = v.data();
        std::vector<T> gq(q.numel(), T(0)), gk(k.numel(), T(0)), gv(v.numel(), T(0));
        std::vector<T> dp(length);
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t h = 0; h < n_heads; ++h) {
            const T* p_bh = probs.data() + (b * n_heads + h) * length * length;
            for (std::size_t i = 0; i < length; ++i) {
              const std::size_t oi = (b * length + i) * d + h * head_dim;
              const T* go = g.data() + oi;
              const T* prow = p_bh + i * length;
              T row_dot = T(0);
              for (std::size_t j = 0; j <= i; ++j) {
                const std::size_t oj = (b * length + j) * d + h * head_dim;
                T s = T(0);
                for (std::size_t c = 0; c < head_dim; ++c) {
                  s += go[c] * vv[oj + c];
                  gv[oj + c] += prow[j] * go[c];
                }
                dp[j] = s;
                row_dot += prow[j] * s;
              }
              for (std::size_t j = 0; j <= i; ++j) {
                const std::size_t oj = (b * length + j) * d + h * head_dim;
                const T ds = prow[j] * (dp[j] - row_dot) * scale_factor;
                for (std::size_t c = 0; c < head_dim; ++c) {
                  gq[oi + c] += ds * kv[oj + c];
                  gk[oj + c] += ds * qv[oi + c];
                }
              }
            }
          }
        }
        auto accumulate = [](const Tensor<T>& t, const std::vector<T>& src) {
          if (!wants_grad(t)) return;
          auto dst = t.grad_buffer();
          for (std::size_t i = 0; i < src.size(); ++i) dst[i] += src[i];
        };
        accumulate(q, gq);
        accumulate(k, gk);
        accumulate(v, gv);
      });
}

template <typename T>
AttentionLayer<T>::AttentionLayer(std::size_t d_model, std::size_t n_heads, Rng& rng)
    : n_heads_(n_heads),
      wq_(make_parameter<T>({d_model, d_model})),
      wk_(make_parameter<T>({d_model, d_model})),
      wv_(make_parameter<T>({d_model, d_model})),
      wo_(make_parameter<T>({d_model, d_model})) {
  check_heads(d_model, n_heads);
  const double bound = 1.0 / std::sqrt(static_cast<double>(d_model));
  for (Tensor<T>* w : {&wq_, &wk_, &wv_, &wo_}) fill_uniform(*w, bound, rng);
}

template <typename T>
Tensor<T> AttentionLayer<T>::forward(const Tensor<T>& x) const {
  if (x.dim() != 3 || x.size(2) != d_model()) {
    throw ShapeError("attention: input " + shape_str(x.shape()) + " is not [B, L, " + std::to_string(d_model()) +
                     "]");
  }
  const Tensor<T> q = rotary(matmul(x, wq_), n_heads_);
  const Tensor<T> k = rotary(matmul(x, wk_), n_heads_);
  const Tensor<T> v = matmul(x, wv_);
  return matmul(causal_attention(q, k, v, n_heads_), wo_);
}

template <typename T>
void AttentionLayer<T>::collect(const std::string& prefix, ParameterList<T>& out) const {
  out.push_back({prefix + ".wq", wq_, true, "", -1});
  out.push_back({prefix + ".wk", wk_, true, "", -1});
  out.push_back({prefix + ".wv", wv_, true, "", -1});
  out.push_back({prefix + ".wo", wo_, true, "", -1});
}

template <typename T>
FeedForward<T>::FeedForward(std::size_t d_model, std::size_t d_ff, Rng& rng)
    : w_in_(make_parameter<T>({d_model, d_ff})), w_out_(make_parameter<T>({d_ff, d_model})) {
  fill_uniform(w_in_, 1.0 / std::sqrt(static_cast<double>(d_model)), rng);
  fill_uniform(w_out_, 1.0 / std::sqrt(static_cast<double>(d_ff)), rng);
}

template <typename T>
Tensor<T> FeedForward<T>::forward(const Tensor<T>& x) const {
  return matmul(silu(matmul(x, w_in_)), w_out_);
}

template <typename T>
void FeedForward<T>::collect(const std::string& prefix, ParameterList<T>& out) const {
  out.push_back({prefix + ".w_in", w_in_, true, "", -1});
  out.push_back({prefix + ".w_out", w_out_, true, "", -1});
}

template Tensor<float> rotary(const Tensor<float>&, std::size_t, double);
template Tensor<double> rotary(const Tensor<double>&, std::size_t, double);
template Tensor<float> causal_attention(const Tensor<float>&, const Tensor<float>&, const Tensor<float>&, std::size_t);
template Tensor<double> causal_attention(const Tensor<double>&, const Tensor<double>&, const Tensor<double>&,
                                         std::size_t);
template class AttentionLayer<float>;
template class AttentionLayer<double>;
template class FeedForward<float>;
template class FeedForward<double>;

}  // namespace moemamba
