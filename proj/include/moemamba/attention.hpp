#pragma once

#include <cstddef>
#include <string>

#include "moemamba/nn.hpp"
#include "moemamba/tensor.hpp"

namespace moemamba {

/// Rotary position embedding on x [B, L, d] split into `n_heads` heads. Within
/// each head, lanes (2i, 2i + 1) rotate by angle pos * base^(-2i / head_dim).
/// An odd trailing lane passes through unchanged.
template <typename T>
Tensor<T> rotary(const Tensor<T>& x, std::size_t n_heads, double base = 10000.0);

/// Multi-head causal softmax attention. q, k, v: [B, L, d] -> [B, L, d];
/// scores are scaled by 1 / sqrt(head_dim) and position i sees j <= i.
template <typename T>
Tensor<T> causal_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::size_t n_heads);

/// Q, K, V and O projections (no biases, 4 * d^2 parameters) around rotary
/// causal attention.
template <typename T>
class AttentionLayer {
 public:
  AttentionLayer(std::size_t d_model, std::size_t n_heads, Rng& rng);

  std::size_t d_model() const { return wq_.size(0); }
  std::size_t n_heads() const { return n_heads_; }

  Tensor<T> forward(const Tensor<T>& x) const;
  void collect(const std::string& prefix, ParameterList<T>& out) const;

  Tensor<T>& wq() { return wq_; }
  Tensor<T>& wk() { return wk_; }
  Tensor<T>& wv() { return wv_; }
  Tensor<T>& wo() { return wo_; }

 private:
  std::size_t n_heads_;
  Tensor<T> wq_, wk_, wv_, wo_;  // [d, d]
};

/// Two bias-free matrices with SiLU between: d -> d_ff -> d.
template <typename T>
class FeedForward {
 public:
  FeedForward(std::size_t d_model, std::size_t d_ff, Rng& rng);

  Tensor<T> forward(const Tensor<T>& x) const;
  void collect(const std::string& prefix, ParameterList<T>& out) const;

  Tensor<T>& w_in() { return w_in_; }
  Tensor<T>& w_out() { return w_out_; }

 private:
  Tensor<T> w_in_;   // [d, d_ff]
  Tensor<T> w_out_;  // [d_ff, d]
};

}  // namespace moemamba
