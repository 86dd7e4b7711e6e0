#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "moemamba/model_spec.hpp"
#include "moemamba/nn.hpp"
#include "moemamba/tensor.hpp"

namespace moemamba {

inline constexpr double kNormEps = 1e-5;

/// One pre-norm residual unit of a model.
template <typename T>
class Block {
 public:
  virtual ~Block() = default;
  // x: [B, L, d] -> x + f(norm(x))
  virtual Tensor<T> forward(const Tensor<T>& x, RoutingStats<T>* stats) const = 0;
  virtual void collect(const std::string& prefix, ParameterList<T>& out) const = 0;
};

template <typename T>
std::unique_ptr<Block<T>> make_block(const BlockSpec& block, const ModelSpec& spec, Rng& rng);

template <typename T>
struct ModelOutput {
  Tensor<T> logits;    // [B, L, V]
  Tensor<T> aux_loss;  // sum over routed banks; a zero scalar when there are none
  double dropped_fraction = 0.0;  // mean over routed banks
  std::size_t routed_banks = 0;
  std::uint64_t routing_digest = 0;  // see RoutingStats
};

/// Byte embedding, the block stack, a final RMSNorm and an untied unembedding.
template <typename T>
class Model {
 public:
  Model(const ModelSpec& spec, std::uint64_t seed);

  const ModelSpec& spec() const { return spec_; }
  const std::vector<BlockSpec>& block_specs() const { return block_specs_; }

  // ids: batch * length tokens, batch-major.
  ModelOutput<T> forward(std::span<const std::int32_t> ids, std::size_t batch, std::size_t length) const;

  // Every trainable buffer in a fixed order: embedding, blocks, final norm, unembedding.
  ParameterList<T> parameters() const;

 private:
  ModelSpec spec_;
  std::vector<BlockSpec> block_specs_;
  Tensor<T> embedding_;    // [V, d]
  std::vector<std::unique_ptr<Block<T>>> blocks_;
  Tensor<T> final_norm_;   // [d]
  Tensor<T> unembedding_;  // [d, V]
};

struct BlockParams {
  std::string kind;
  std::size_t total = 0;
  std::size_t active = 0;

  friend bool operator==(const BlockParams&, const BlockParams&) = default;
};

/// Non-embedding totals: blocks plus the final norm. Embedding and
/// unembedding are reported on the side.
struct ParamReport {
  std::size_t total = 0;
  std::size_t active = 0;
  std::size_t embedding = 0;
  std::size_t unembedding = 0;
  std::size_t final_norm = 0;
  std::vector<BlockParams> blocks;

  nlohmann::json to_json() const;
  friend bool operator==(const ParamReport&, const ParamReport&) = default;
};

/// Closed-form accounting from the spec alone.
ParamReport count_params(const ModelSpec& spec);

/// Same report from walking a built model's buffers. Active counts take one
/// expert per bank.
template <typename T>
ParamReport enumerate_params(const Model<T>& model);

}  // namespace moemamba
