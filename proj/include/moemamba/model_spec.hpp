#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "moemamba/mamba.hpp"

namespace moemamba {

enum class ModelKind {
  kTransformer,        // [attention, dense FF] pairs
  kTransformerMoe,     // [attention, switch FF] pairs
  kMamba,              // Mamba layers only
  kMoeMamba,           // [Mamba, switch FF] pairs
  kParallelMoeMamba,   // x + mamba(norm x) + moe(norm x)
  kInnerMoeMamba,      // Mamba layers with routed projections
};

std::string_view kind_name(ModelKind kind);
ModelKind parse_kind(std::string_view name);

/// Projections of a Mamba layer that may be replaced by a routed bank.
enum InnerSlot : unsigned {
  kConvSlot = 1u << 0,
  kGateSlot = 1u << 1,
  kOutputSlot = 1u << 2,
};
constexpr unsigned kAllInnerSlots = kConvSlot | kGateSlot | kOutputSlot;

/// "conv+gate+output" style encoding; the empty string is the empty mask.
std::string format_inner_mask(unsigned mask);
unsigned parse_inner_mask(std::string_view text);
int mask_size(unsigned mask);

enum class BlockKind { kAttention, kDenseFF, kMoeFF, kMamba, kParallelMambaMoe, kInnerMoeMamba };

std::string_view block_kind_name(BlockKind kind);

/// One pre-norm residual unit.
struct BlockSpec {
  BlockKind kind = BlockKind::kMamba;
  unsigned inner_mask = 0;                 // kInnerMoeMamba only
  std::size_t experts_per_position = 0;    // kInnerMoeMamba only

  friend bool operator==(const BlockSpec&, const BlockSpec&) = default;
};

struct ModelSpec {
  ModelKind kind = ModelKind::kMamba;
  std::size_t d_model = 64;
  // Transformer kinds: [attention, FF] pairs. Mamba: layers. MoE-Mamba:
  // [Mamba, MoE] pairs. Parallel: parallel blocks. Inner: Mamba layers.
  std::size_t n_blocks = 2;
  // Switch FF kinds: experts per bank. Inner kinds: experts per Mamba layer,
  // split evenly over the masked projections (doubled on modified layers in
  // every-other mode).
  std::size_t n_experts = 0;
  std::size_t d_expert = 0;  // 0 selects 4 * d_model (Transformer-MoE) or 3 * d_model
  ExpansionFactor expansion{};
  unsigned inner_mask = 0;
  bool every_other = false;  // inner kinds: only odd-indexed layers are modified
  std::size_t n_heads = 0;   // 0 selects max(1, d_model / 64)
  std::size_t vocab_size = 256;

  // Copy with defaults filled in. Throws ConfigError on inconsistent fields.
  ModelSpec resolved() const;
  std::vector<BlockSpec> blocks() const;
  MambaConfig mamba_config() const;
  bool is_moe() const;
  std::size_t d_ff() const { return 4 * d_model; }

  friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

/// Reads the spec fields from a flat object; other keys are ignored.
ModelSpec model_spec_from_json(const nlohmann::json& j);
/// Writes exactly the spec fields.
void model_spec_to_json(const ModelSpec& spec, nlohmann::json& j);

/// One row of the Mamba/MoE budget split: Mamba gets r of 6 parts.
struct RatioPlan {
  int mamba_parts = 0;
  ExpansionFactor expansion{};
  std::size_t d_expert = 0;
  std::size_t n_experts = 0;
};

/// E in thirds of {2, 5, 6, 8, 10} for r = 1..5, d_expert = (6 - r) * d_model, n_experts = round(K / d_expert)
/// with K = expert_product (0 selects 96 * d_model). Throws ConfigError for r
/// outside 1..5.
RatioPlan plan_ratio(int mamba_parts, std::size_t d_model, std::size_t expert_product = 0);

struct NamedSpec {
  std::string name;
  std::string label;  // row label; inner variants also name their column
  ModelSpec spec;
};

/// The 19 comparable architectures at the given width: three baselines,
/// sequential and parallel MoE-Mamba, then the 7 inner placements over all
/// layers followed by the same 7 on every other layer. `n_experts` is the
/// per-bank count for switch FF kinds; `inner_experts` the per-layer total for
/// inner kinds.
std::vector<NamedSpec> enumerate_variants(std::size_t d_model = 64, std::size_t n_blocks = 2,
                                          std::size_t n_experts = 4, std::size_t inner_experts = 24);

}  // namespace moemamba
