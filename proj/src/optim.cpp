#include "moemamba/optim.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include "moemamba/errors.hpp"

namespace moemamba {

double lr_at(std::size_t step, const ScheduleConfig& config) {
  const auto total = static_cast<double>(config.steps);
  const double warmup = config.warmup_fraction * total;
  const auto s = static_cast<double>(step);
  if (warmup > 0.0 && s <= warmup) return config.max_lr * s / warmup;
  const double floor_lr = config.final_lr_ratio * config.max_lr;
  const double span = total - warmup;
  const double progress = span > 0.0 ? std::min(1.0, (s - warmup) / span) : 1.0;
  return floor_lr + (config.max_lr - floor_lr) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

template <typename T>
ClipResult clip_grad_norm(const ParameterList<T>& params, double max_norm) {
  double sq = 0.0;
  for (const NamedParameter<T>& p : params) {
    for (T g : p.tensor.grad()) {
      if (!std::isfinite(static_cast<double>(g))) {
        throw NumericError("non-finite gradient in parameter " + p.name);
      }
      sq += static_cast<double>(g) * static_cast<double>(g);
    }
  }
  ClipResult result{std::sqrt(sq), std::sqrt(sq)};
  if (result.norm_before > max_norm) {
    const double factor = max_norm / result.norm_before;
    double after = 0.0;
    for (const NamedParameter<T>& p : params) {
      if (!p.tensor.has_grad()) continue;
      for (T& g : p.tensor.grad_buffer()) {
        g = static_cast<T>(static_cast<double>(g) * factor);
        after += static_cast<double>(g) * static_cast<double>(g);
      }
    }
    result.norm_after = std::sqrt(after);
  }
  return result;
}

template <typename T>
AdamW<T>::AdamW(ParameterList<T> params, AdamWConfig config) : params_(std::move(params)), config_(config) {
  for (const NamedParameter<T>& p : params_) {
    m_.emplace_back(p.tensor.numel(), T(0));
    v_.emplace_back(p.tensor.numel(), T(0));
  }
}

template <typename T>
void AdamW<T>::step(double lr) {
  ++t_;
  const double b1 = config_.beta1;
  const double b2 = config_.beta2;
  const double correction1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double correction2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const NamedParameter<T>& p = params_[i];
    Tensor<T> tensor = p.tensor;
    auto values = tensor.mutable_data();
    const auto grads = p.tensor.grad();
    const double decay = p.decay ? lr * config_.weight_decay : 0.0;
    for (std::size_t k = 0; k < values.size(); ++k) {
      const double g = grads.empty() ? 0.0 : static_cast<double>(grads[k]);
      double w = static_cast<double>(values[k]);
      w -= decay * w;
      const double m = b1 * static_cast<double>(m_[i][k]) + (1.0 - b1) * g;
      const double v = b2 * static_cast<double>(v_[i][k]) + (1.0 - b2) * g * g;
      m_[i][k] = static_cast<T>(m);
      v_[i][k] = static_cast<T>(v);
      w -= lr * (m / correction1) / (std::sqrt(v / correction2) + config_.eps);
      values[k] = static_cast<T>(w);
    }
  }
}

template <typename T>
void AdamW<T>::zero_grad() const {
  for (const NamedParameter<T>& p : params_) p.tensor.zero_grad();
}

template ClipResult clip_grad_norm(const ParameterList<float>&, double);
template ClipResult clip_grad_norm(const ParameterList<double>&, double);
template class AdamW<float>;
template class AdamW<double>;

}  // namespace moemamba
