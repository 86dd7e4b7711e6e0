#include "moemamba/switch_moe.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "moemamba/errors.hpp"
#include "moemamba/ops.hpp"

namespace moemamba {

void SwitchConfig::validate() const {
  if (n_experts == 0) throw ConfigError("switch: n_experts must be at least 1");
  if (d_model == 0) throw ConfigError("switch: d_model must be positive");
  if (!(capacity_factor > 0.0) || !std::isfinite(capacity_factor)) {
    throw ConfigError("switch: capacity_factor must be positive");
  }
  if (!(aux_alpha >= 0.0) || !std::isfinite(aux_alpha)) throw ConfigError("switch: aux_alpha must be non-negative");
}

std::size_t SwitchConfig::capacity(std::size_t n_tokens) const {
  const double raw = capacity_factor * static_cast<double>(n_tokens) / static_cast<double>(n_experts);
  auto cap = static_cast<std::size_t>(std::floor(raw));
  if (cap == 0 && n_tokens >= n_experts) cap = 1;
  return cap;
}

template <typename T>
std::size_t RoutingDecision<T>::dropped() const {
  std::size_t n = 0;
  for (bool k : kept) n += k ? 0 : 1;
  return n;
}

template <typename T>
double RoutingDecision<T>::fraction_dropped() const {
  return chosen.empty() ? 0.0 : static_cast<double>(dropped()) / static_cast<double>(chosen.size());
}

template <typename T>
std::uint64_t RoutingDecision<T>::digest() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::size_t n = 0; n < chosen.size(); ++n) {
    h = (h ^ static_cast<std::uint64_t>(chosen[n])) * 0x100000001b3ULL;
    h = (h ^ (kept[n] ? 1u : 0u)) * 0x100000001b3ULL;
  }
  return h;
}

template <typename T>
void apply_capacity(RoutingDecision<T>& decision, std::size_t capacity) {
  decision.capacity = capacity;
  decision.kept.assign(decision.chosen.size(), false);
  decision.kept_counts.assign(decision.assigned.size(), 0);
  for (std::size_t n = 0; n < decision.chosen.size(); ++n) {
    auto& count = decision.kept_counts[static_cast<std::size_t>(decision.chosen[n])];
    if (count < capacity) {
      decision.kept[n] = true;
      ++count;
    }
  }
}

template <typename T>
RoutingDecision<T> route_from_scores(const Tensor<T>& scores, std::size_t capacity) {
  if (scores.dim() != 2) throw ShapeError("route: scores " + shape_str(scores.shape()) + " must be [N, E]");
  const std::size_t n_tokens = scores.size(0);
  const std::size_t n_experts = scores.size(1);

  RoutingDecision<T> decision;
  decision.scores = scores;
  decision.probs = softmax(scores, -1);
  decision.chosen.resize(n_tokens);
  decision.assigned.assign(n_experts, 0);

  const auto p = decision.probs.data();
  for (std::size_t n = 0; n < n_tokens; ++n) {
    const T* row = p.data() + n * n_experts;
    std::size_t best = 0;
    for (std::size_t e = 1; e < n_experts; ++e) {
      if (row[e] > row[best]) best = e;
    }
    decision.chosen[n] = static_cast<std::int32_t>(best);
    ++decision.assigned[best];
  }
  apply_capacity(decision, capacity);
  return decision;
}

template <typename T>
RoutingDecision<T> route(const Tensor<T>& x, const Tensor<T>& router, std::size_t capacity) {
  if (x.dim() != 2 || router.dim() != 2 || x.size(1) != router.size(0)) {
    throw ShapeError("route: x " + shape_str(x.shape()) + " and router " + shape_str(router.shape()) +
                     " do not compose");
  }
  return route_from_scores(matmul(x, router), capacity);
}

template <typename T>
Tensor<T> load_balance_loss(const RoutingDecision<T>& decision, double alpha) {
  const std::size_t n_experts = decision.n_experts();
  const auto n_tokens = static_cast<double>(decision.n_tokens());
  std::vector<T> f(n_experts);
  for (std::size_t e = 0; e < n_experts; ++e) f[e] = static_cast<T>(static_cast<double>(decision.assigned[e]) / n_tokens);
  const Tensor<T> fractions(Shape{n_experts}, std::move(f));
  const Tensor<T> mean_probs = mean_rows(decision.probs);
  return scale(sum(mul(mean_probs, fractions)), static_cast<T>(alpha * static_cast<double>(n_experts)));
}

template <typename T>
ExpertBank<T>::ExpertBank(ExpertKind kind, std::size_t n_experts, std::size_t in, std::size_t hidden,
                          std::size_t out, Rng& rng)
    : kind_(kind) {
  if (n_experts == 0 || in == 0 || out == 0 || (kind == ExpertKind::kFeedForward && hidden == 0)) {
    throw ConfigError("expert bank: widths and expert count must be positive");
  }
  const std::size_t first_out = kind == ExpertKind::kFeedForward ? hidden : out;
  for (std::size_t e = 0; e < n_experts; ++e) {
    Tensor<T> w = make_parameter<T>({in, first_out});
    fill_uniform(w, 1.0 / std::sqrt(static_cast<double>(in)), rng);
    w_in_.push_back(std::move(w));
    if (kind == ExpertKind::kFeedForward) {
      Tensor<T> w2 = make_parameter<T>({hidden, out});
      fill_uniform(w2, 1.0 / std::sqrt(static_cast<double>(hidden)), rng);
      w_out_.push_back(std::move(w2));
    }
  }
}

template <typename T>
std::size_t ExpertBank<T>::out_features() const {
  return kind_ == ExpertKind::kFeedForward ? w_out_.front().size(1) : w_in_.front().size(1);
}

template <typename T>
std::size_t ExpertBank<T>::params_per_expert() const {
  std::size_t n = w_in_.front().numel();
  if (!w_out_.empty()) n += w_out_.front().numel();
  return n;
}

template <typename T>
Tensor<T> ExpertBank<T>::apply(std::size_t expert, const Tensor<T>& x) const {
  const Tensor<T> h = matmul(x, w_in_.at(expert));
  if (kind_ == ExpertKind::kLinear) return h;
  return matmul(silu(h), w_out_.at(expert));
}

template <typename T>
void ExpertBank<T>::collect(const std::string& prefix, ParameterList<T>& out) const {
  for (std::size_t e = 0; e < w_in_.size(); ++e) {
    const std::string base = prefix + ".experts." + std::to_string(e);
    const int index = static_cast<int>(e);
    if (kind_ == ExpertKind::kFeedForward) {
      out.push_back({base + ".w_in", w_in_[e], true, prefix, index});
      out.push_back({base + ".w_out", w_out_[e], true, prefix, index});
    } else {
      out.push_back({base + ".weight", w_in_[e], true, prefix, index});
    }
  }
}

template <typename T>
MoeOutput<T> moe_forward(const Tensor<T>& x, const Tensor<T>& router, const ExpertBank<T>& bank,
                         const SwitchConfig& config) {
  if (x.dim() != 2 || x.size(1) != bank.in_features()) {
    throw ShapeError("moe: x " + shape_str(x.shape()) + " is not [N, " + std::to_string(bank.in_features()) + "]");
  }
  if (router.dim() != 2 || router.size(1) != bank.size()) {
    throw ShapeError("moe: router " + shape_str(router.shape()) + " does not match " + std::to_string(bank.size()) +
                     " experts");
  }
  const std::size_t n_tokens = x.size(0);
  RoutingDecision<T> decision = route(x, router, config.capacity(n_tokens));

  std::vector<std::vector<std::size_t>> rows(bank.size());
  for (std::size_t n = 0; n < n_tokens; ++n) {
    if (decision.kept[n]) rows[static_cast<std::size_t>(decision.chosen[n])].push_back(n);
  }

  std::vector<Tensor<T>> parts;
  std::vector<std::vector<std::size_t>> part_rows;
  for (std::size_t e = 0; e < bank.size(); ++e) {
    if (rows[e].size() > decision.capacity) {
      throw std::logic_error("moe: expert " + std::to_string(e) + " received " + std::to_string(rows[e].size()) +
                             " tokens over capacity " + std::to_string(decision.capacity));
    }
    if (rows[e].empty()) continue;
    parts.push_back(bank.apply(e, gather_rows(x, std::span<const std::size_t>(rows[e]))));
    part_rows.push_back(std::move(rows[e]));
  }

  Tensor<T> y;
  if (parts.empty()) {
    y = Tensor<T>::zeros({n_tokens, bank.out_features()});
  } else {
    const Tensor<T> expert_out = combine_rows(parts, part_rows, n_tokens, bank.out_features());
    const Tensor<T> gate = pick(decision.probs, std::span<const std::int32_t>(decision.chosen));
    y = scale_rows(expert_out, gate);
  }
  Tensor<T> aux = load_balance_loss(decision, config.aux_alpha);
  return {std::move(y), std::move(aux), std::move(decision)};
}

template <typename T>
SwitchMoE<T>::SwitchMoE(const SwitchConfig& config, Rng& rng)
    : SwitchMoE(config, ExpertKind::kFeedForward, config.d_model, rng) {}

template <typename T>
SwitchMoE<T> SwitchMoE<T>::linear(const SwitchConfig& config, std::size_t out_features, Rng& rng) {
  return SwitchMoE(config, ExpertKind::kLinear, out_features, rng);
}

namespace {

const SwitchConfig& checked(const SwitchConfig& config) {
  config.validate();
  return config;
}

template <typename T>
Tensor<T> make_router(const SwitchConfig& config, Rng& rng) {
  Tensor<T> router = make_parameter<T>({config.d_model, config.n_experts});
  fill_uniform(router, 1.0 / std::sqrt(static_cast<double>(config.d_model)), rng);
  return router;
}

}  // namespace

template <typename T>
SwitchMoE<T>::SwitchMoE(const SwitchConfig& config, ExpertKind kind, std::size_t out_features, Rng& rng)
    : config_(checked(config)),
      router_(make_router<T>(config_, rng)),
      bank_(kind, config_.n_experts, config_.d_model, config_.d_expert, out_features, rng) {}

template <typename T>
MoeOutput<T> SwitchMoE<T>::forward_tokens(const Tensor<T>& x) const {
  return moe_forward(x, router_, bank_, config_);
}

template <typename T>
Tensor<T> SwitchMoE<T>::forward(const Tensor<T>& x, RoutingStats<T>* stats) const {
  if (x.dim() < 1 || x.shape().back() != config_.d_model) {
    throw ShapeError("switch: input " + shape_str(x.shape()) + " does not end in d_model " +
                     std::to_string(config_.d_model));
  }
  const std::size_t n_tokens = x.numel() / config_.d_model;
  MoeOutput<T> out = moe_forward(reshape(x, Shape{n_tokens, config_.d_model}), router_, bank_, config_);
  if (stats) stats->record(out.aux_loss, out.decision.fraction_dropped(), out.decision.digest());
  Shape shape = x.shape();
  shape.back() = bank_.out_features();
  return reshape(out.y, std::move(shape));
}

template <typename T>
void SwitchMoE<T>::collect(const std::string& prefix, ParameterList<T>& out) const {
  out.push_back({prefix + ".router", router_, true, "", -1});
  bank_.collect(prefix, out);
}

#define MOEMAMBA_INSTANTIATE_SWITCH(T)                                                                        \
  template struct RoutingDecision<T>;                                                                         \
  template void apply_capacity(RoutingDecision<T>&, std::size_t);                                             \
  template RoutingDecision<T> route_from_scores(const Tensor<T>&, std::size_t);                               \
  template RoutingDecision<T> route(const Tensor<T>&, const Tensor<T>&, std::size_t);                         \
  template Tensor<T> load_balance_loss(const RoutingDecision<T>&, double);                                    \
  template class ExpertBank<T>;                                                                               \
  template MoeOutput<T> moe_forward(const Tensor<T>&, const Tensor<T>&, const ExpertBank<T>&,                 \
                                    const SwitchConfig&);                                                     \
  template class SwitchMoE<T>;

MOEMAMBA_INSTANTIATE_SWITCH(float)
MOEMAMBA_INSTANTIATE_SWITCH(double)

}  // namespace moemamba
