#include "moemamba/nn.hpp"

#include <cmath>

#include "moemamba/ops.hpp"

namespace moemamba {

template <typename T>
void RoutingStats<T>::record(const Tensor<T>& aux, double dropped_fraction, std::uint64_t decision_digest) {
  aux_loss = aux_loss.defined() ? add(aux_loss, aux) : aux;
  dropped_fraction_sum += dropped_fraction;
  ++banks;
  routing_digest = (routing_digest ^ decision_digest) * 0x100000001b3ULL + banks;
}

template <typename T>
Tensor<T> make_parameter(Shape shape) {
  return Tensor<T>::zeros(std::move(shape), true);
}

template <typename T>
void fill_uniform(Tensor<T>& t, double bound, Rng& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (T& v : t.mutable_data()) v = static_cast<T>(dist(rng));
}

template <typename T>
void fill_normal(Tensor<T>& t, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  for (T& v : t.mutable_data()) v = static_cast<T>(dist(rng));
}

template <typename T>
DenseProjection<T>::DenseProjection(std::size_t in, std::size_t out, Rng& rng)
    : weight_(make_parameter<T>({in, out})) {
  fill_uniform(weight_, 1.0 / std::sqrt(static_cast<double>(in)), rng);
}

template <typename T>
Tensor<T> DenseProjection<T>::forward(const Tensor<T>& x, RoutingStats<T>*) const {
  return matmul(x, weight_);
}

template <typename T>
void DenseProjection<T>::collect(const std::string& prefix, ParameterList<T>& out) const {
  out.push_back({prefix + ".weight", weight_, true, "", -1});
}

template struct RoutingStats<float>;
template struct RoutingStats<double>;
template Tensor<float> make_parameter<float>(Shape);
template Tensor<double> make_parameter<double>(Shape);
template void fill_uniform(Tensor<float>&, double, Rng&);
template void fill_uniform(Tensor<double>&, double, Rng&);
template void fill_normal(Tensor<float>&, double, Rng&);
template void fill_normal(Tensor<double>&, double, Rng&);
template class DenseProjection<float>;
template class DenseProjection<double>;

}  // namespace moemamba
