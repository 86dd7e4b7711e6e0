#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <string>

#include "moemamba/nn.hpp"
#include "moemamba/tensor.hpp"

namespace moemamba {

/// Expansion factor E as an exact fraction.
struct ExpansionFactor {
  std::int64_t num = 2;
  std::int64_t den = 1;

  double value() const { return static_cast<double>(num) / static_cast<double>(den); }
  ExpansionFactor reduced() const;
  friend bool operator==(const ExpansionFactor& a, const ExpansionFactor& b) {
    return a.num * b.den == b.num * a.den;
  }
};

enum class ScanMode { kSequential, kParallel };

struct MambaConfig {
  std::size_t d_model = 0;
  ExpansionFactor expansion{};
  std::size_t d_state = 16;
  std::size_t dt_rank = 0;  // 0 selects ceil(d_model / 16)
  std::size_t d_conv = 4;
  // kSequential runs the fused discretize + scan op; kParallel materializes
  // Abar and BbarU and runs the up-sweep / down-sweep scan.
  ScanMode scan = ScanMode::kSequential;

  // Validated copy with dt_rank filled in. Throws ConfigError when E * d_model
  // is not a positive integer or any width is zero.
  MambaConfig resolved() const;
  std::size_t d_inner() const;
};

/// Closed-form number of trainable parameters in one Mamba layer (all
/// projections dense).
std::size_t mamba_param_count(const MambaConfig& config);

/// Element of the first-order linear recurrence h_t = a_t * h_{t-1} + b_t.
/// Composition is associative, which is what the parallel scan relies on.
template <typename V>
struct ScanElement {
  V a;
  V b;
};

/// `earlier` applied first, then `later`: (a1*a2, a2*b1 + b2).
template <typename V>
ScanElement<V> combine(const ScanElement<V>& earlier, const ScanElement<V>& later) {
  return {earlier.a * later.a, later.a * earlier.b + later.b};
}

template <typename T>
struct Discretized {
  Tensor<T> a_bar;   // [B, L, Ed, ds], exp(delta * A)
  Tensor<T> bu_bar;  // [B, L, Ed, ds], delta * B * u
  Tensor<T> c;       // [B, L, ds]
};

/// Zero-order hold for A, Euler step for B.
/// delta, u: [B, L, Ed]; a: [Ed, ds] (negative); b, c: [B, L, ds].
template <typename T>
Discretized<T> discretize(const Tensor<T>& delta, const Tensor<T>& a, const Tensor<T>& b, const Tensor<T>& c,
                          const Tensor<T>& u);

/// y_t = sum_s C_t[s] * h_t[:, s] + D * u_t with h_t = Abar_t * h_{t-1} + BbarU_t,
/// h_0 = 0, evaluated step by step.
template <typename T>
Tensor<T> selective_scan_sequential(const Tensor<T>& a_bar, const Tensor<T>& bu_bar, const Tensor<T>& c,
                                    const Tensor<T>& d, const Tensor<T>& u);

/// Same result through a work-efficient (up-sweep / down-sweep) scan over
/// ScanElements. Lengths that are not a power of two are padded with the
/// identity element (1, 0).
template <typename T>
Tensor<T> selective_scan_parallel(const Tensor<T>& a_bar, const Tensor<T>& bu_bar, const Tensor<T>& c,
                                  const Tensor<T>& d, const Tensor<T>& u);

/// Discretization and sequential scan in one op, without materializing Abar
/// and BbarU. Same result as discretize followed by selective_scan_sequential.
/// delta, u: [B, L, Ed]; a: [Ed, ds]; b, c: [B, L, ds]; d: [Ed].
template <typename T>
Tensor<T> selective_scan_fused(const Tensor<T>& delta, const Tensor<T>& a, const Tensor<T>& b, const Tensor<T>& c,
                               const Tensor<T>& d, const Tensor<T>& u);

/// Inclusive scan of h_t = a_t * h_{t-1} + b_t over `length` positions of
/// `width` independent lanes, h_{-1} = 0. Arrays are [length, width].
template <typename T>
void linear_recurrence_sequential(const T* a, const T* b, T* h, std::size_t length, std::size_t width);
template <typename T>
void linear_recurrence_parallel(const T* a, const T* b, T* h, std::size_t length, std::size_t width);

/// Selective state-space block: gate and conv projections widen d_model to
/// E * d_model, the conv branch runs a causal depthwise conv, SiLU and the
/// selective scan, the result is gated by SiLU(gate) and projected back.
/// The caller owns normalization and the residual add.
template <typename T>
class MambaLayer {
 public:
  enum class Slot { kConv, kGate, kOutput };

  MambaLayer(const MambaConfig& config, Rng& rng);

  const MambaConfig& config() const { return config_; }

  // x: [B, L, d_model]
  Tensor<T> forward(const Tensor<T>& x, RoutingStats<T>* stats = nullptr) const;

  // Input-dependent SSM parameters for the post-conv, post-activation
  // sequence u: [B, L, Ed].
  struct SsmInputs {
    Tensor<T> delta;  // [B, L, Ed], softplus(dt_proj(x_proj(u)) + bias)
    Tensor<T> b;      // [B, L, ds]
    Tensor<T> c;      // [B, L, ds]
  };
  SsmInputs ssm_inputs(const Tensor<T>& u) const;

  // u -> (Abar, BbarU, C).
  Discretized<T> discretize(const Tensor<T>& u) const;

  // A = -exp(A_log), [Ed, ds].
  Tensor<T> state_matrix() const;

  void replace_projection(Slot slot, std::unique_ptr<Projection<T>> projection);
  const Projection<T>& projection(Slot slot) const;

  void collect(const std::string& prefix, ParameterList<T>& out) const;

  Tensor<T>& conv_kernel() { return conv_kernel_; }
  Tensor<T>& conv_bias() { return conv_bias_; }
  Tensor<T>& x_proj() { return x_proj_; }
  Tensor<T>& dt_proj_weight() { return dt_proj_weight_; }
  Tensor<T>& dt_proj_bias() { return dt_proj_bias_; }
  Tensor<T>& a_log() { return a_log_; }
  Tensor<T>& skip() { return d_; }

 private:
  MambaConfig config_;
  std::unique_ptr<Projection<T>> conv_proj_;
  std::unique_ptr<Projection<T>> gate_proj_;
  std::unique_ptr<Projection<T>> out_proj_;
  Tensor<T> conv_kernel_;     // [Ed, k]
  Tensor<T> conv_bias_;       // [Ed]
  Tensor<T> x_proj_;          // [Ed, dt_rank + 2 * ds]
  Tensor<T> dt_proj_weight_;  // [dt_rank, Ed]
  Tensor<T> dt_proj_bias_;    // [Ed]
  Tensor<T> a_log_;           // [Ed, ds]
  Tensor<T> d_;               // [Ed]
};

}  // namespace moemamba
