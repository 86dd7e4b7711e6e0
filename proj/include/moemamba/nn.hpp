#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "moemamba/tensor.hpp"

namespace moemamba {

using Rng = std::mt19937_64;

/// A trainable buffer as seen by the optimizer, the checkpoint writer and the
/// parameter accountant.
template <typename T>
struct NamedParameter {
  std::string name;
  Tensor<T> tensor;
  bool decay = false;  // receives decoupled weight decay
  // Expert parameters name their bank and index; everything else leaves
  // `bank` empty. Used for active-parameter enumeration.
  std::string bank;
  int expert = -1;
};

template <typename T>
using ParameterList = std::vector<NamedParameter<T>>;

/// Running totals of the routed layers visited during one forward pass.
template <typename T>
struct RoutingStats {
  Tensor<T> aux_loss;  // sum of load-balancing losses; undefined when no bank ran
  double dropped_fraction_sum = 0.0;
  std::size_t banks = 0;
  std::uint64_t routing_digest = 0;  // changes whenever any bank routes differently

  void record(const Tensor<T>& aux, double dropped_fraction, std::uint64_t decision_digest);
  double mean_dropped_fraction() const { return banks ? dropped_fraction_sum / static_cast<double>(banks) : 0.0; }
};

template <typename T>
Tensor<T> make_parameter(Shape shape);
template <typename T>
void fill_uniform(Tensor<T>& t, double bound, Rng& rng);
template <typename T>
void fill_normal(Tensor<T>& t, double stddev, Rng& rng);

/// Linear map [..., in] -> [..., out] inside a larger layer. Dense by default;
/// a routed bank of experts can stand in for it.
template <typename T>
class Projection {
 public:
  virtual ~Projection() = default;
  virtual Tensor<T> forward(const Tensor<T>& x, RoutingStats<T>* stats) const = 0;
  virtual void collect(const std::string& prefix, ParameterList<T>& out) const = 0;
  virtual std::size_t in_features() const = 0;
  virtual std::size_t out_features() const = 0;
};

/// Bias-free x * W with W stored as [in, out].
template <typename T>
class DenseProjection final : public Projection<T> {
 public:
  DenseProjection(std::size_t in, std::size_t out, Rng& rng);

  Tensor<T> forward(const Tensor<T>& x, RoutingStats<T>* stats) const override;
  void collect(const std::string& prefix, ParameterList<T>& out) const override;
  std::size_t in_features() const override { return weight_.size(0); }
  std::size_t out_features() const override { return weight_.size(1); }

  const Tensor<T>& weight() const { return weight_; }

 private:
  Tensor<T> weight_;
};

}  // namespace moemamba
