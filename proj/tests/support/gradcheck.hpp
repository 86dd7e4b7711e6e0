#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "moemamba/nn.hpp"
#include "moemamba/ops.hpp"
#include "moemamba/tensor.hpp"

namespace moemamba::testing {

using TensorD = Tensor<double>;

inline TensorD uniform_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0, bool requires_grad = true) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> data(shape_numel(shape));
  for (double& v : data) v = dist(rng);
  return TensorD(std::move(shape), std::move(data), requires_grad);
}

// sum(out * w) for a fixed random w, so every output element gets a
// distinct upstream gradient.
inline TensorD project_to_scalar(const TensorD& out, const TensorD& weights) { return sum(mul(out, weights)); }

struct GradInput {
  std::string name;
  TensorD tensor;
};

struct GradcheckReport {
  double max_rel = 0.0;
  std::string worst;
  std::size_t entries = 0;
  std::size_t refined = 0;  // entries whose stencil had to shrink to keep routing fixed
  std::size_t skipped = 0;  // entries sitting on a routing boundary even at the smallest step

  void merge(const GradcheckReport& other) {
    entries += other.entries;
    refined += other.refined;
    skipped += other.skipped;
    if (worst.empty() || other.max_rel > max_rel) {
      max_rel = other.max_rel;
      worst = other.worst;
    }
  }
};

// Per input: max |analytic - numeric| / max(max |analytic|, max |numeric|, kGradFloor).
// Inputs whose gradient is (near) zero everywhere are judged on absolute error
// against the floor.
inline constexpr double kGradFloor = 1e-6;
// Five-point differences have O(h^4) truncation error; at 3e-3 that is far
// below the round-off of a double forward pass.
inline constexpr double kDefaultStep = 3e-3;
inline constexpr double kSmallestStep = 1e-7;

/// Compares backward() against a five-point central difference
/// (f(x-2h) - 8 f(x-h) + 8 f(x+h) - f(x+2h)) / 12h, h = step * clamp(rms(input), 0.01, 1), for every input entry, or
/// for `max_entries` random entries per input when that is nonzero. Inputs
/// must be leaves; `loss` must return a fresh scalar on each call.
///
/// Routed layers are only piecewise smooth. When `signature` is given it is
/// read after every evaluation; a stencil whose points route differently from
/// the unperturbed input is retried with h / 10 down to kSmallestStep, so the
/// comparison always stays on one smooth piece.
template <typename F>
GradcheckReport gradcheck(F&& loss, const std::vector<GradInput>& inputs, std::size_t max_entries = 0,
                          std::uint64_t sample_seed = 0, const std::function<std::uint64_t()>& signature = {},
                          double h = kDefaultStep) {
  for (const GradInput& in : inputs) in.tensor.zero_grad();
  loss().backward();
  const std::uint64_t base = signature ? signature() : 0;
  std::vector<std::vector<double>> analytic;
  for (const GradInput& in : inputs) {
    const auto g = in.tensor.grad();
    analytic.emplace_back(in.tensor.numel(), 0.0);
    std::copy(g.begin(), g.end(), analytic.back().begin());
  }

  Rng pick(sample_seed);
  GradcheckReport report;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    TensorD t = inputs[i].tensor;
    std::vector<std::size_t> entries(t.numel());
    std::iota(entries.begin(), entries.end(), std::size_t{0});
    if (max_entries != 0 && entries.size() > max_entries) {
      std::shuffle(entries.begin(), entries.end(), pick);
      entries.resize(max_entries);
    }
    // Step relative to the tensor's own scale: a 0.02-std embedding needs a
    // finer stencil than a unit-scale gain.
    double sq = 0.0;
    for (double v : t.data()) sq += v * v;
    const double rms = std::sqrt(sq / static_cast<double>(t.numel()));
    const double base_step = h * std::clamp(rms, 1e-2, 1.0);
    GradcheckReport one;
    double max_err = 0.0, max_a = 0.0, max_n = 0.0;
    std::size_t worst_entry = 0;
    for (std::size_t k : entries) {
      auto values = t.mutable_data();
      const double x0 = values[k];
      bool stable = true;
      auto f_at = [&](double x) {
        values[k] = x;
        NoGradGuard guard;
        const double f = loss().item();
        if (signature && signature() != base) stable = false;
        return f;
      };
      double step = base_step, numeric = 0.0;
      while (true) {
        stable = true;
        numeric = (f_at(x0 - 2 * step) - 8 * f_at(x0 - step) + 8 * f_at(x0 + step) - f_at(x0 + 2 * step)) /
                  (12 * step);
        if (stable || step / 10 < kSmallestStep) break;
        step /= 10;
      }
      values[k] = x0;
      if (!stable) {
        ++one.skipped;
        continue;
      }
      if (step != base_step) ++one.refined;
      ++one.entries;
      const double a = analytic[i][k];
      const double err = std::abs(a - numeric);
      if (err > max_err) {
        max_err = err;
        worst_entry = k;
      }
      max_a = std::max(max_a, std::abs(a));
      max_n = std::max(max_n, std::abs(numeric));
    }
    one.max_rel = max_err / std::max({max_a, max_n, kGradFloor});
    one.worst = inputs[i].name + "[" + std::to_string(worst_entry) + "]";
    report.merge(one);
  }
  return report;
}

template <typename T>
std::vector<GradInput> as_inputs(const ParameterList<T>& params) {
  std::vector<GradInput> out;
  for (const NamedParameter<T>& p : params) out.push_back({p.name, p.tensor});
  return out;
}

}  // namespace moemamba::testing
