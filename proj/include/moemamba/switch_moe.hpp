#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "moemamba/nn.hpp"
#include "moemamba/tensor.hpp"

namespace moemamba {

struct SwitchConfig {
  std::size_t n_experts = 1;
  std::size_t d_model = 0;
  std::size_t d_expert = 0;
  double capacity_factor = 1.0;
  double aux_alpha = 0.01;

  // Throws ConfigError on zero widths, no experts or a non-positive capacity factor.
  void validate() const;
  // floor(capacity_factor * n_tokens / n_experts), at least 1 once every
  // expert could receive a token.
  std::size_t capacity(std::size_t n_tokens) const;
};

/// Outcome of routing N tokens over a bank of experts.
template <typename T>
struct RoutingDecision {
  Tensor<T> scores;                  // [N, E] router logits
  Tensor<T> probs;                   // [N, E] softmax over experts
  std::vector<std::int32_t> chosen;  // argmax of probs, ties to the lowest index
  std::vector<bool> kept;            // false for tokens dropped by capacity
  std::vector<std::size_t> assigned; // tokens choosing each expert, before dropping
  std::vector<std::size_t> kept_counts;
  std::size_t capacity = 0;

  std::size_t n_tokens() const { return chosen.size(); }
  std::size_t n_experts() const { return assigned.size(); }
  std::size_t dropped() const;
  double fraction_dropped() const;
  // Hash of (chosen, kept); equal digests mean the same discrete routing.
  std::uint64_t digest() const;
};

/// Softmax + top-1 choice from precomputed scores [N, E], then capacity.
template <typename T>
RoutingDecision<T> route_from_scores(const Tensor<T>& scores, std::size_t capacity);

/// Scores = x · router for x [N, d], router [d, E].
template <typename T>
RoutingDecision<T> route(const Tensor<T>& x, const Tensor<T>& router, std::size_t capacity);

/// Keeps the first `capacity` tokens per expert in token order and drops the rest.
template <typename T>
void apply_capacity(RoutingDecision<T>& decision, std::size_t capacity);

/// alpha * E * sum_i f_i * P_i. f_i (share of tokens choosing expert i,
/// before drops) is a constant; P_i (mean probability) carries the gradient.
template <typename T>
Tensor<T> load_balance_loss(const RoutingDecision<T>& decision, double alpha);

enum class ExpertKind {
  kFeedForward,  // W_in, SiLU, W_out
  kLinear,       // single bias-free matrix
};

/// Experts of identical shape, addressed by index.
template <typename T>
class ExpertBank {
 public:
  // kFeedForward: in -> hidden -> out. kLinear: in -> out, hidden ignored.
  ExpertBank(ExpertKind kind, std::size_t n_experts, std::size_t in, std::size_t hidden, std::size_t out, Rng& rng);

  ExpertKind kind() const { return kind_; }
  std::size_t size() const { return w_in_.size(); }
  std::size_t in_features() const { return w_in_.front().size(0); }
  std::size_t out_features() const;
  std::size_t params_per_expert() const;

  // x: [n, in] -> [n, out]
  Tensor<T> apply(std::size_t expert, const Tensor<T>& x) const;

  void collect(const std::string& prefix, ParameterList<T>& out) const;

  Tensor<T>& w_in(std::size_t expert) { return w_in_.at(expert); }
  Tensor<T>& w_out(std::size_t expert) { return w_out_.at(expert); }

 private:
  ExpertKind kind_;
  std::vector<Tensor<T>> w_in_;
  std::vector<Tensor<T>> w_out_;  // empty for kLinear
};

template <typename T>
struct MoeOutput {
  Tensor<T> y;         // [N, out]
  Tensor<T> aux_loss;  // scalar
  RoutingDecision<T> decision;
};

/// y[n] = p[n, I[n]] * E_{I[n]}(x[n]) for kept tokens, zero for dropped ones.
/// x: [N, in], router: [in, E].
template <typename T>
MoeOutput<T> moe_forward(const Tensor<T>& x, const Tensor<T>& router, const ExpertBank<T>& bank,
                         const SwitchConfig& config);

/// Switch layer with a linear router. Usable wherever a Projection is: as the
/// feed-forward half of a block (feed-forward experts, in == out) or in place
/// of a Mamba projection (linear experts).
template <typename T>
class SwitchMoE final : public Projection<T> {
 public:
  // Feed-forward experts d_model -> d_expert -> d_model.
  SwitchMoE(const SwitchConfig& config, Rng& rng);
  // Linear experts d_model -> out_features.
  static SwitchMoE linear(const SwitchConfig& config, std::size_t out_features, Rng& rng);

  const SwitchConfig& config() const { return config_; }

  // x: [..., d_model]; the leading dims are flattened in order, so drop order
  // is batch-major. Records aux loss and drop fraction into `stats`.
  Tensor<T> forward(const Tensor<T>& x, RoutingStats<T>* stats) const override;
  MoeOutput<T> forward_tokens(const Tensor<T>& x) const;

  void collect(const std::string& prefix, ParameterList<T>& out) const override;
  std::size_t in_features() const override { return bank_.in_features(); }
  std::size_t out_features() const override { return bank_.out_features(); }

  Tensor<T>& router() { return router_; }
  const Tensor<T>& router() const { return router_; }
  ExpertBank<T>& bank() { return bank_; }
  const ExpertBank<T>& bank() const { return bank_; }

 private:
  SwitchMoE(const SwitchConfig& config, ExpertKind kind, std::size_t out_features, Rng& rng);

  SwitchConfig config_;
  Tensor<T> router_;  // [d_model, E]
  ExpertBank<T> bank_;
};

}  // namespace moemamba
