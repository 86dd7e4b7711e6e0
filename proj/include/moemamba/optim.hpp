#pragma once

#include <cstddef>
#include <vector>

#include "moemamba/nn.hpp"

namespace moemamba {

struct ScheduleConfig {
  std::size_t steps = 1;
  double max_lr = 1e-3;
  double warmup_fraction = 0.01;
  double final_lr_ratio = 0.1;
};

/// Learning rate at 1-based `step`: linear from 0 to max_lr over the first
/// warmup_fraction * steps steps, then cosine down to final_lr_ratio * max_lr
/// at step == steps.
double lr_at(std::size_t step, const ScheduleConfig& config);

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.1;
};

struct ClipResult {
  double norm_before = 0.0;
  double norm_after = 0.0;
};

/// Scales all gradients by max_norm / norm when the global L2 norm exceeds
/// max_norm. Throws NumericError naming the first parameter with a
/// non-finite gradient.
template <typename T>
ClipResult clip_grad_norm(const ParameterList<T>& params, double max_norm);

/// AdamW with decoupled weight decay applied to parameters flagged `decay`.
/// Parameters without a gradient buffer are treated as having zero gradient.
template <typename T>
class AdamW {
 public:
  AdamW(ParameterList<T> params, AdamWConfig config);

  void step(double lr);
  void zero_grad() const;

  const ParameterList<T>& params() const { return params_; }
  std::size_t steps_taken() const { return t_; }

  // Moment buffers, parallel to params(); exposed for checkpointing.
  std::vector<std::vector<T>>& first_moments() { return m_; }
  std::vector<std::vector<T>>& second_moments() { return v_; }
  void set_steps_taken(std::size_t t) { t_ = t; }

 private:
  ParameterList<T> params_;
  AdamWConfig config_;
  std::vector<std::vector<T>> m_;
  std::vector<std::vector<T>> v_;
  std::size_t t_ = 0;
};

}  // namespace moemamba
