#include "moemamba/mamba.hpp"

#include <cmath>
#include <numeric>
#include <string>

#include "moemamba/errors.hpp"
#include "moemamba/ops.hpp"

namespace moemamba {

ExpansionFactor ExpansionFactor::reduced() const {
  if (num <= 0 || den <= 0) {
    throw ConfigError("expansion factor must be positive, got " + std::to_string(num) + "/" + std::to_string(den));
  }
  const std::int64_t g = std::gcd(num, den);
  return {num / g, den / g};
}

MambaConfig MambaConfig::resolved() const {
  MambaConfig out = *this;
  if (d_model == 0) throw ConfigError("mamba: d_model must be positive");
  out.expansion = expansion.reduced();
  const auto widened = static_cast<std::int64_t>(d_model) * out.expansion.num;
  if (widened % out.expansion.den != 0) {
    throw ConfigError("mamba: expansion " + std::to_string(out.expansion.num) + "/" +
                      std::to_string(out.expansion.den) + " times d_model " + std::to_string(d_model) +
                      " is not an integer");
  }
  if (d_state == 0) throw ConfigError("mamba: d_state must be positive");
  if (d_conv == 0) throw ConfigError("mamba: d_conv must be positive");
  if (out.dt_rank == 0) out.dt_rank = (d_model + 15) / 16;
  return out;
}

std::size_t MambaConfig::d_inner() const {
  const MambaConfig r = resolved();
  return static_cast<std::size_t>(static_cast<std::int64_t>(d_model) * r.expansion.num / r.expansion.den);
}

std::size_t mamba_param_count(const MambaConfig& config) {
  const MambaConfig c = config.resolved();
  const std::size_t d = c.d_model;
  const std::size_t ed = c.d_inner();
  const std::size_t ds = c.d_state;
  const std::size_t r = c.dt_rank;
  return 2 * d * ed             // conv and gate projections
         + ed * c.d_conv + ed   // conv kernel and bias
         + ed * (r + 2 * ds)    // x_proj
         + r * ed + ed          // dt projection and bias
         + ed * ds              // A_log
         + ed                   // D
         + ed * d;              // output projection
}

template <typename T>
MambaLayer<T>::MambaLayer(const MambaConfig& config, Rng& rng) : config_(config.resolved()) {
  const std::size_t d = config_.d_model;
  const std::size_t ed = config_.d_inner();
  const std::size_t ds = config_.d_state;
  const std::size_t r = config_.dt_rank;
  const std::size_t k = config_.d_conv;

  conv_proj_ = std::make_unique<DenseProjection<T>>(d, ed, rng);
  gate_proj_ = std::make_unique<DenseProjection<T>>(d, ed, rng);

  conv_kernel_ = make_parameter<T>({ed, k});
  conv_bias_ = make_parameter<T>({ed});
  const double conv_bound = 1.0 / std::sqrt(static_cast<double>(k));
  fill_uniform(conv_kernel_, conv_bound, rng);
  fill_uniform(conv_bias_, conv_bound, rng);

  x_proj_ = make_parameter<T>({ed, r + 2 * ds});
  fill_uniform(x_proj_, 1.0 / std::sqrt(static_cast<double>(ed)), rng);

  dt_proj_weight_ = make_parameter<T>({r, ed});
  fill_uniform(dt_proj_weight_, 1.0 / std::sqrt(static_cast<double>(r)), rng);

  // Step sizes start log-uniform in [1e-3, 1e-1]; the bias holds softplus^-1(dt).
  dt_proj_bias_ = make_parameter<T>({ed});
  {
    std::uniform_real_distribution<double> dist(std::log(1e-3), std::log(1e-1));
    for (T& b : dt_proj_bias_.mutable_data()) {
      const double dt = std::max(std::exp(dist(rng)), 1e-4);
      b = static_cast<T>(dt + std::log(-std::expm1(-dt)));
    }
  }

  a_log_ = make_parameter<T>({ed, ds});
  {
    auto a = a_log_.mutable_data();
    for (std::size_t e = 0; e < ed; ++e) {
      for (std::size_t s = 0; s < ds; ++s) a[e * ds + s] = static_cast<T>(std::log(static_cast<double>(s + 1)));
    }
  }

  d_ = Tensor<T>::full({ed}, T(1), true);

  out_proj_ = std::make_unique<DenseProjection<T>>(ed, d, rng);
}

template <typename T>
Tensor<T> MambaLayer<T>::state_matrix() const {
  return negate(exp(a_log_));
}

template <typename T>
typename MambaLayer<T>::SsmInputs MambaLayer<T>::ssm_inputs(const Tensor<T>& u) const {
  const std::size_t r = config_.dt_rank;
  const std::size_t ds = config_.d_state;
  const Tensor<T> xdbl = matmul(u, x_proj_);
  const Tensor<T> dt_in = slice_last(xdbl, 0, r);
  SsmInputs out;
  out.b = slice_last(xdbl, r, ds);
  out.c = slice_last(xdbl, r + ds, ds);
  out.delta = softplus(add(matmul(dt_in, dt_proj_weight_), dt_proj_bias_));
  return out;
}

template <typename T>
Discretized<T> MambaLayer<T>::discretize(const Tensor<T>& u) const {
  const SsmInputs in = ssm_inputs(u);
  return moemamba::discretize(in.delta, state_matrix(), in.b, in.c, u);
}

template <typename T>
Tensor<T> MambaLayer<T>::forward(const Tensor<T>& x, RoutingStats<T>* stats) const {
  if (x.dim() != 3 || x.size(2) != config_.d_model) {
    throw ShapeError("mamba: input " + shape_str(x.shape()) + " is not [B, L, " + std::to_string(config_.d_model) +
                     "]");
  }
  const Tensor<T> xc = conv_proj_->forward(x, stats);
  const Tensor<T> z = gate_proj_->forward(x, stats);
  const Tensor<T> u = silu(conv1d_depthwise_causal(xc, conv_kernel_, conv_bias_));
  Tensor<T> y;
  if (config_.scan == ScanMode::kParallel) {
    const Discretized<T> disc = discretize(u);
    y = selective_scan_parallel(disc.a_bar, disc.bu_bar, disc.c, d_, u);
  } else {
    const SsmInputs in = ssm_inputs(u);
    y = selective_scan_fused(in.delta, state_matrix(), in.b, in.c, d_, u);
  }
  return out_proj_->forward(mul(y, silu(z)), stats);
}

template <typename T>
void MambaLayer<T>::replace_projection(Slot slot, std::unique_ptr<Projection<T>> projection) {
  const std::size_t d = config_.d_model;
  const std::size_t ed = config_.d_inner();
  const bool widening = slot != Slot::kOutput;
  const std::size_t in = widening ? d : ed;
  const std::size_t out = widening ? ed : d;
  if (!projection || projection->in_features() != in || projection->out_features() != out) {
    throw ShapeError("mamba: replacement projection must map " + std::to_string(in) + " -> " + std::to_string(out));
  }
  switch (slot) {
    case Slot::kConv: conv_proj_ = std::move(projection); break;
    case Slot::kGate: gate_proj_ = std::move(projection); break;
    case Slot::kOutput: out_proj_ = std::move(projection); break;
  }
}

template <typename T>
const Projection<T>& MambaLayer<T>::projection(Slot slot) const {
  switch (slot) {
    case Slot::kConv: return *conv_proj_;
    case Slot::kGate: return *gate_proj_;
    case Slot::kOutput: break;
  }
  return *out_proj_;
}

template <typename T>
void MambaLayer<T>::collect(const std::string& prefix, ParameterList<T>& out) const {
  conv_proj_->collect(prefix + ".conv_proj", out);
  gate_proj_->collect(prefix + ".gate_proj", out);
  out.push_back({prefix + ".conv.weight", conv_kernel_, true, "", -1});
  out.push_back({prefix + ".conv.bias", conv_bias_, false, "", -1});
  out.push_back({prefix + ".x_proj.weight", x_proj_, true, "", -1});
  out.push_back({prefix + ".dt_proj.weight", dt_proj_weight_, true, "", -1});
  out.push_back({prefix + ".dt_proj.bias", dt_proj_bias_, false, "", -1});
  out.push_back({prefix + ".A_log", a_log_, false, "", -1});
  out.push_back({prefix + ".D", d_, false, "", -1});
  out_proj_->collect(prefix + ".out_proj", out);
}

template class MambaLayer<float>;
template class MambaLayer<double>;

}  // namespace moemamba
