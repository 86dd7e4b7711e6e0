#include "moemamba/model_spec.hpp"

#include <array>
#include <string>
#include <utility>

#include "moemamba/errors.hpp"

namespace moemamba {

namespace {

constexpr std::array<std::pair<ModelKind, std::string_view>, 6> kKindNames{{
    {ModelKind::kTransformer, "transformer"},
    {ModelKind::kTransformerMoe, "transformer_moe"},
    {ModelKind::kMamba, "mamba"},
    {ModelKind::kMoeMamba, "moe_mamba"},
    {ModelKind::kParallelMoeMamba, "parallel_moe_mamba"},
    {ModelKind::kInnerMoeMamba, "inner_moe_mamba"},
}};

constexpr std::array<std::pair<unsigned, std::string_view>, 3> kSlotNames{{
    {kConvSlot, "conv"},
    {kGateSlot, "gate"},
    {kOutputSlot, "output"},
}};

bool is_transformer(ModelKind kind) {
  return kind == ModelKind::kTransformer || kind == ModelKind::kTransformerMoe;
}

bool uses_switch_ff(ModelKind kind) {
  return kind == ModelKind::kTransformerMoe || kind == ModelKind::kMoeMamba || kind == ModelKind::kParallelMoeMamba;
}

bool uses_mamba(ModelKind kind) { return !is_transformer(kind); }

}  // namespace

std::string_view kind_name(ModelKind kind) {
  for (const auto& [k, name] : kKindNames) {
    if (k == kind) return name;
  }
  return "unknown";
}

ModelKind parse_kind(std::string_view name) {
  for (const auto& [k, n] : kKindNames) {
    if (n == name) return k;
  }
  throw ConfigError("unknown model kind '" + std::string(name) + "'");
}

std::string format_inner_mask(unsigned mask) {
  std::string out;
  for (const auto& [bit, name] : kSlotNames) {
    if ((mask & bit) == 0) continue;
    if (!out.empty()) out += '+';
    out += name;
  }
  return out;
}

unsigned parse_inner_mask(std::string_view text) {
  unsigned mask = 0;
  while (!text.empty()) {
    const std::size_t plus = text.find('+');
    const std::string_view part = text.substr(0, plus);
    unsigned bit = 0;
    for (const auto& [b, name] : kSlotNames) {
      if (name == part) bit = b;
    }
    if (bit == 0 || (mask & bit) != 0) {
      throw ConfigError("inner_mask: bad or repeated projection '" + std::string(part) + "'");
    }
    mask |= bit;
    if (plus == std::string_view::npos) break;
    text.remove_prefix(plus + 1);
    if (text.empty()) throw ConfigError("inner_mask: trailing '+'");
  }
  return mask;
}

int mask_size(unsigned mask) {
  int n = 0;
  for (const auto& [bit, name] : kSlotNames) n += (mask & bit) ? 1 : 0;
  return n;
}

std::string_view block_kind_name(BlockKind kind) {
  switch (kind) {
    case BlockKind::kAttention: return "attention";
    case BlockKind::kDenseFF: return "dense_ff";
    case BlockKind::kMoeFF: return "moe_ff";
    case BlockKind::kMamba: return "mamba";
    case BlockKind::kParallelMambaMoe: return "parallel_mamba_moe";
    case BlockKind::kInnerMoeMamba: return "inner_moe_mamba";
  }
  return "unknown";
}

ModelSpec ModelSpec::resolved() const {
  ModelSpec out = *this;
  if (d_model == 0) throw ConfigError("model: d_model must be positive");
  if (n_blocks == 0) throw ConfigError("model: n_blocks must be positive");
  if (vocab_size == 0) throw ConfigError("model: vocab_size must be positive");

  if (is_transformer(kind)) {
    if (out.n_heads == 0) out.n_heads = std::max<std::size_t>(1, d_model / 64);
    if (d_model % out.n_heads != 0) {
      throw ConfigError("model: n_heads " + std::to_string(out.n_heads) + " does not divide d_model " +
                        std::to_string(d_model));
    }
  } else {
    out.n_heads = 0;
  }

  if (uses_mamba(kind)) {
    out.expansion = mamba_config().resolved().expansion;
  } else {
    out.expansion = ExpansionFactor{};
  }

  if (uses_switch_ff(kind)) {
    if (n_experts == 0) throw ConfigError("model: " + std::string(kind_name(kind)) + " needs n_experts >= 1");
    if (out.d_expert == 0) out.d_expert = (kind == ModelKind::kTransformerMoe ? 4 : 3) * d_model;
  } else if (kind != ModelKind::kInnerMoeMamba) {
    out.n_experts = 0;
    out.d_expert = 0;
  }

  if (kind == ModelKind::kInnerMoeMamba) {
    if (inner_mask == 0 || (inner_mask & ~kAllInnerSlots) != 0) {
      throw ConfigError("model: inner_moe_mamba needs a nonempty inner_mask");
    }
    if (out.n_experts == 0) out.n_experts = 24;
    out.d_expert = 0;
    const std::size_t pool = every_other ? 2 * out.n_experts : out.n_experts;
    const auto slots = static_cast<std::size_t>(mask_size(inner_mask));
    if (pool % slots != 0) {
      throw ConfigError("model: " + std::to_string(pool) + " experts do not split evenly over " +
                        std::to_string(slots) + " projections");
    }
  } else {
    if (inner_mask != 0) throw ConfigError("model: inner_mask is only valid for inner_moe_mamba");
    if (every_other) throw ConfigError("model: every_other is only valid for inner_moe_mamba");
  }
  return out;
}

std::vector<BlockSpec> ModelSpec::blocks() const {
  const ModelSpec s = resolved();
  std::vector<BlockSpec> out;
  for (std::size_t i = 0; i < s.n_blocks; ++i) {
    switch (s.kind) {
      case ModelKind::kTransformer:
        out.push_back({BlockKind::kAttention});
        out.push_back({BlockKind::kDenseFF});
        break;
      case ModelKind::kTransformerMoe:
        out.push_back({BlockKind::kAttention});
        out.push_back({BlockKind::kMoeFF});
        break;
      case ModelKind::kMamba:
        out.push_back({BlockKind::kMamba});
        break;
      case ModelKind::kMoeMamba:
        out.push_back({BlockKind::kMamba});
        out.push_back({BlockKind::kMoeFF});
        break;
      case ModelKind::kParallelMoeMamba:
        out.push_back({BlockKind::kParallelMambaMoe});
        break;
      case ModelKind::kInnerMoeMamba: {
        if (s.every_other && i % 2 == 0) {
          out.push_back({BlockKind::kMamba});
          break;
        }
        const std::size_t pool = s.every_other ? 2 * s.n_experts : s.n_experts;
        out.push_back({BlockKind::kInnerMoeMamba, s.inner_mask,
                       pool / static_cast<std::size_t>(mask_size(s.inner_mask))});
        break;
      }
    }
  }
  return out;
}

MambaConfig ModelSpec::mamba_config() const {
  MambaConfig c;
  c.d_model = d_model;
  c.expansion = expansion;
  return c;
}

bool ModelSpec::is_moe() const {
  return uses_switch_ff(kind) || kind == ModelKind::kInnerMoeMamba;
}

ModelSpec model_spec_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("model spec: expected a JSON object");
  ModelSpec s;
  try {
    if (j.contains("kind")) s.kind = parse_kind(j.at("kind").get<std::string>());
    s.d_model = j.value("d_model", s.d_model);
    s.n_blocks = j.value("n_blocks", s.n_blocks);
    s.n_experts = j.value("n_experts", s.n_experts);
    s.d_expert = j.value("d_expert", s.d_expert);
    s.expansion.num = j.value("expansion_num", s.expansion.num);
    s.expansion.den = j.value("expansion_den", s.expansion.den);
    s.inner_mask = parse_inner_mask(j.value("inner_mask", std::string()));
    s.every_other = j.value("every_other", s.every_other);
    s.n_heads = j.value("n_heads", s.n_heads);
    s.vocab_size = j.value("vocab_size", s.vocab_size);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model spec: ") + e.what());
  }
  return s;
}

void model_spec_to_json(const ModelSpec& spec, nlohmann::json& j) {
  j["kind"] = std::string(kind_name(spec.kind));
  j["d_model"] = spec.d_model;
  j["n_blocks"] = spec.n_blocks;
  j["n_experts"] = spec.n_experts;
  j["d_expert"] = spec.d_expert;
  j["expansion_num"] = spec.expansion.num;
  j["expansion_den"] = spec.expansion.den;
  j["inner_mask"] = format_inner_mask(spec.inner_mask);
  j["every_other"] = spec.every_other;
  j["n_heads"] = spec.n_heads;
  j["vocab_size"] = spec.vocab_size;
}

RatioPlan plan_ratio(int mamba_parts, std::size_t d_model, std::size_t expert_product) {
  if (mamba_parts < 1 || mamba_parts > 5) {
    throw ConfigError("plan_ratio: Mamba share must be 1..5 parts of 6, got " + std::to_string(mamba_parts));
  }
  if (d_model == 0) throw ConfigError("plan_ratio: d_model must be positive");
  const std::size_t product = expert_product ? expert_product : 96 * d_model;
  RatioPlan plan;
  plan.mamba_parts = mamba_parts;
  // E tracks 2r/3 except at 2:4, which uses 5/3.
  static constexpr std::int64_t kExpansionThirds[] = {2, 5, 6, 8, 10};
  plan.expansion = ExpansionFactor{kExpansionThirds[mamba_parts - 1], 3}.reduced();
  plan.d_expert = static_cast<std::size_t>(6 - mamba_parts) * d_model;
  plan.n_experts = (product + plan.d_expert / 2) / plan.d_expert;
  return plan;
}

std::vector<NamedSpec> enumerate_variants(std::size_t d_model, std::size_t n_blocks, std::size_t n_experts,
                                          std::size_t inner_experts) {
  std::vector<NamedSpec> out;
  auto base = [&](ModelKind kind) {
    ModelSpec s;
    s.kind = kind;
    s.d_model = d_model;
    s.n_blocks = n_blocks;
    return s;
  };
  auto with_experts = [&](ModelKind kind) {
    ModelSpec s = base(kind);
    s.n_experts = n_experts;
    return s;
  };
  out.push_back({"transformer", "Transformer", base(ModelKind::kTransformer)});
  out.push_back({"transformer_moe", "Transformer-MoE", with_experts(ModelKind::kTransformerMoe)});
  out.push_back({"mamba", "Vanilla Mamba", base(ModelKind::kMamba)});
  out.push_back({"moe_mamba", "MoE-Mamba", with_experts(ModelKind::kMoeMamba)});
  out.push_back({"parallel_moe_mamba", "Parallel MoE-Mamba", with_experts(ModelKind::kParallelMoeMamba)});

  constexpr std::array<unsigned, 7> kMasks{kConvSlot,
                                           kGateSlot,
                                           kOutputSlot,
                                           kConvSlot | kGateSlot,
                                           kConvSlot | kOutputSlot,
                                           kGateSlot | kOutputSlot,
                                           kConvSlot | kGateSlot | kOutputSlot};
  auto row_label = [](unsigned mask) {
    std::string label;
    for (const auto& [bit, name] : kSlotNames) {
      if ((mask & bit) == 0) continue;
      if (!label.empty()) label += " + ";
      std::string word(name);
      word[0] = static_cast<char>(word[0] - 'a' + 'A');
      label += word;
    }
    return label + " Projection";
  };
  for (bool every_other : {false, true}) {
    for (unsigned mask : kMasks) {
      ModelSpec s = base(ModelKind::kInnerMoeMamba);
      s.n_experts = inner_experts;
      s.inner_mask = mask;
      s.every_other = every_other;
      std::string name = "inner_" + format_inner_mask(mask);
      for (char& c : name) {
        if (c == '+') c = '_';
      }
      if (every_other) name += "_every_other";
      std::string label = row_label(mask) + (every_other ? " / Every Other Layer" : " / All Layers");
      out.push_back({std::move(name), std::move(label), s});
    }
  }
  return out;
}

}  // namespace moemamba
