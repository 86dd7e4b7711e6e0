#include "moemamba/model.hpp"

#include <string>

#include "moemamba/attention.hpp"
#include "moemamba/errors.hpp"
#include "moemamba/mamba.hpp"
#include "moemamba/ops.hpp"
#include "moemamba/switch_moe.hpp"

namespace moemamba {

namespace {

template <typename T>
Tensor<T> make_norm_gain(std::size_t d) {
  return Tensor<T>::full({d}, T(1), true);
}

template <typename T>
Tensor<T> normed(const Tensor<T>& x, const Tensor<T>& gain) {
  return rmsnorm(x, gain, static_cast<T>(kNormEps));
}

SwitchConfig switch_config(const ModelSpec& spec) {
  SwitchConfig c;
  c.n_experts = spec.n_experts;
  c.d_model = spec.d_model;
  c.d_expert = spec.d_expert;
  return c;
}

template <typename T>
class AttentionBlock final : public Block<T> {
 public:
  AttentionBlock(const ModelSpec& spec, Rng& rng)
      : norm_(make_norm_gain<T>(spec.d_model)), attn_(spec.d_model, spec.n_heads, rng) {}

  Tensor<T> forward(const Tensor<T>& x, RoutingStats<T>*) const override {
    return add(x, attn_.forward(normed(x, norm_)));
  }
  void collect(const std::string& prefix, ParameterList<T>& out) const override {
    out.push_back({prefix + ".norm.gain", norm_, false, "", -1});
    attn_.collect(prefix + ".attn", out);
  }

 private:
  Tensor<T> norm_;
  AttentionLayer<T> attn_;
};

template <typename T>
class DenseFFBlock final : public Block<T> {
 public:
  DenseFFBlock(const ModelSpec& spec, Rng& rng)
      : norm_(make_norm_gain<T>(spec.d_model)), ff_(spec.d_model, spec.d_ff(), rng) {}

  Tensor<T> forward(const Tensor<T>& x, RoutingStats<T>*) const override {
    return add(x, ff_.forward(normed(x, norm_)));
  }
  void collect(const std::string& prefix, ParameterList<T>& out) const override {
    out.push_back({prefix + ".norm.gain", norm_, false, "", -1});
    ff_.collect(prefix + ".ff", out);
  }

 private:
  Tensor<T> norm_;
  FeedForward<T> ff_;
};

template <typename T>
class MoeFFBlock final : public Block<T> {
 public:
  MoeFFBlock(const ModelSpec& spec, Rng& rng)
      : norm_(make_norm_gain<T>(spec.d_model)), moe_(switch_config(spec), rng) {}

  Tensor<T> forward(const Tensor<T>& x, RoutingStats<T>* stats) const override {
    return add(x, moe_.forward(normed(x, norm_), stats));
  }
  void collect(const std::string& prefix, ParameterList<T>& out) const override {
    out.push_back({prefix + ".norm.gain", norm_, false, "", -1});
    moe_.collect(prefix + ".moe", out);
  }

 private:
  Tensor<T> norm_;
  SwitchMoE<T> moe_;
};

// Plain Mamba, or Mamba with some projections routed.
template <typename T>
class MambaBlock final : public Block<T> {
 public:
  MambaBlock(const BlockSpec& block, const ModelSpec& spec, Rng& rng)
      : norm_(make_norm_gain<T>(spec.d_model)), mamba_(spec.mamba_config(), rng) {
    if (block.kind != BlockKind::kInnerMoeMamba) return;
    const std::size_t d = spec.d_model;
    const std::size_t ed = mamba_.config().d_inner();
    using Slot = typename MambaLayer<T>::Slot;
    const struct {
      unsigned bit;
      Slot slot;
      std::size_t in, out;
    } slots[] = {{kConvSlot, Slot::kConv, d, ed}, {kGateSlot, Slot::kGate, d, ed}, {kOutputSlot, Slot::kOutput, ed, d}};
    for (const auto& s : slots) {
      if ((block.inner_mask & s.bit) == 0) continue;
      SwitchConfig c;
      c.n_experts = block.experts_per_position;
      c.d_model = s.in;
      mamba_.replace_projection(s.slot, std::make_unique<SwitchMoE<T>>(SwitchMoE<T>::linear(c, s.out, rng)));
    }
  }

  Tensor<T> forward(const Tensor<T>& x, RoutingStats<T>* stats) const override {
    return add(x, mamba_.forward(normed(x, norm_), stats));
  }
  void collect(const std::string& prefix, ParameterList<T>& out) const override {
    out.push_back({prefix + ".norm.gain", norm_, false, "", -1});
    mamba_.collect(prefix + ".mamba", out);
  }

 private:
  Tensor<T> norm_;
  MambaLayer<T> mamba_;
};

template <typename T>
class ParallelBlock final : public Block<T> {
 public:
  ParallelBlock(const ModelSpec& spec, Rng& rng)
      : norm_(make_norm_gain<T>(spec.d_model)), mamba_(spec.mamba_config(), rng), moe_(switch_config(spec), rng) {}

  Tensor<T> forward(const Tensor<T>& x, RoutingStats<T>* stats) const override {
    const Tensor<T> h = normed(x, norm_);
    return add(add(x, mamba_.forward(h, stats)), moe_.forward(h, stats));
  }
  void collect(const std::string& prefix, ParameterList<T>& out) const override {
    out.push_back({prefix + ".norm.gain", norm_, false, "", -1});
    mamba_.collect(prefix + ".mamba", out);
    moe_.collect(prefix + ".moe", out);
  }

 private:
  Tensor<T> norm_;
  MambaLayer<T> mamba_;
  SwitchMoE<T> moe_;
};

}  // namespace

template <typename T>
std::unique_ptr<Block<T>> make_block(const BlockSpec& block, const ModelSpec& spec, Rng& rng) {
  switch (block.kind) {
    case BlockKind::kAttention: return std::make_unique<AttentionBlock<T>>(spec, rng);
    case BlockKind::kDenseFF: return std::make_unique<DenseFFBlock<T>>(spec, rng);
    case BlockKind::kMoeFF: return std::make_unique<MoeFFBlock<T>>(spec, rng);
    case BlockKind::kMamba:
    case BlockKind::kInnerMoeMamba: return std::make_unique<MambaBlock<T>>(block, spec, rng);
    case BlockKind::kParallelMambaMoe: return std::make_unique<ParallelBlock<T>>(spec, rng);
  }
  throw ConfigError("model: unknown block kind");
}

template <typename T>
Model<T>::Model(const ModelSpec& spec, std::uint64_t seed)
    : spec_(spec.resolved()),
      block_specs_(spec_.blocks()),
      embedding_(make_parameter<T>({spec_.vocab_size, spec_.d_model})),
      final_norm_(make_norm_gain<T>(spec_.d_model)),
      unembedding_(make_parameter<T>({spec_.d_model, spec_.vocab_size})) {
  Rng rng(seed);
  fill_normal(embedding_, 0.02, rng);
  for (const BlockSpec& b : block_specs_) blocks_.push_back(make_block<T>(b, spec_, rng));
  fill_normal(unembedding_, 0.02, rng);
}

template <typename T>
ModelOutput<T> Model<T>::forward(std::span<const std::int32_t> ids, std::size_t batch, std::size_t length) const {
  if (ids.size() != batch * length) {
    throw ShapeError("model: " + std::to_string(ids.size()) + " ids for batch " + std::to_string(batch) +
                     " x length " + std::to_string(length));
  }
  RoutingStats<T> stats;
  Tensor<T> x = embedding(embedding_, ids, Shape{batch, length});
  for (const auto& block : blocks_) x = block->forward(x, &stats);
  ModelOutput<T> out;
  out.logits = matmul(normed(x, final_norm_), unembedding_);
  out.aux_loss = stats.aux_loss.defined() ? stats.aux_loss : Tensor<T>::scalar(T(0));
  out.dropped_fraction = stats.mean_dropped_fraction();
  out.routed_banks = stats.banks;
  out.routing_digest = stats.routing_digest;
  return out;
}

template <typename T>
ParameterList<T> Model<T>::parameters() const {
  ParameterList<T> out;
  out.push_back({"embedding", embedding_, true, "", -1});
  for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i]->collect("blocks." + std::to_string(i), out);
  out.push_back({"final_norm.gain", final_norm_, false, "", -1});
  out.push_back({"unembedding", unembedding_, true, "", -1});
  return out;
}

nlohmann::json ParamReport::to_json() const {
  nlohmann::json j;
  j["total_params"] = total;
  j["active_params_per_token"] = active;
  j["embedding_params"] = embedding;
  j["unembedding_params"] = unembedding;
  j["final_norm_params"] = final_norm;
  auto& arr = j["blocks"] = nlohmann::json::array();
  for (const BlockParams& b : blocks) arr.push_back({{"kind", b.kind}, {"total", b.total}, {"active", b.active}});
  return j;
}

ParamReport count_params(const ModelSpec& raw) {
  const ModelSpec spec = raw.resolved();
  const std::size_t d = spec.d_model;
  ParamReport report;
  report.embedding = spec.vocab_size * d;
  report.unembedding = d * spec.vocab_size;
  report.final_norm = d;

  const std::size_t expert_ff = 2 * d * spec.d_expert;
  const std::size_t router = d * spec.n_experts;
  for (const BlockSpec& block : spec.blocks()) {
    BlockParams b{std::string(block_kind_name(block.kind)), d, d};  // the norm gain
    auto both = [&b](std::size_t n) {
      b.total += n;
      b.active += n;
    };
    switch (block.kind) {
      case BlockKind::kAttention: both(4 * d * d); break;
      case BlockKind::kDenseFF: both(2 * d * spec.d_ff()); break;
      case BlockKind::kMoeFF:
        b.total += spec.n_experts * expert_ff + router;
        b.active += expert_ff + router;
        break;
      case BlockKind::kMamba: both(mamba_param_count(spec.mamba_config())); break;
      case BlockKind::kParallelMambaMoe:
        both(mamba_param_count(spec.mamba_config()));
        b.total += spec.n_experts * expert_ff + router;
        b.active += expert_ff + router;
        break;
      case BlockKind::kInnerMoeMamba: {
        const std::size_t ed = spec.mamba_config().d_inner();
        const std::size_t n = block.experts_per_position;
        both(mamba_param_count(spec.mamba_config()));
        for (unsigned bit : {kConvSlot, kGateSlot, kOutputSlot}) {
          if ((block.inner_mask & bit) == 0) continue;
          const std::size_t in = bit == kOutputSlot ? ed : d;
          const std::size_t dense = d * ed;
          b.total += n * dense + in * n - dense;
          b.active += in * n;
        }
        break;
      }
    }
    report.total += b.total;
    report.active += b.active;
    report.blocks.push_back(std::move(b));
  }
  report.total += report.final_norm;
  report.active += report.final_norm;
  return report;
}

template <typename T>
ParamReport enumerate_params(const Model<T>& model) {
  ParamReport report;
  for (const BlockSpec& b : model.block_specs()) report.blocks.push_back({std::string(block_kind_name(b.kind)), 0, 0});
  for (const NamedParameter<T>& p : model.parameters()) {
    const std::size_t n = p.tensor.numel();
    const bool active = p.expert <= 0;
    if (p.name == "embedding") {
      report.embedding += n;
    } else if (p.name == "unembedding") {
      report.unembedding += n;
    } else if (p.name.starts_with("final_norm")) {
      report.final_norm += n;
    } else if (p.name.starts_with("blocks.")) {
      const std::size_t index = std::stoul(p.name.substr(7));
      BlockParams& b = report.blocks.at(index);
      b.total += n;
      if (active) b.active += n;
    } else {
      throw std::logic_error("enumerate_params: unclassified parameter " + p.name);
    }
  }
  for (const BlockParams& b : report.blocks) {
    report.total += b.total;
    report.active += b.active;
  }
  report.total += report.final_norm;
  report.active += report.final_norm;
  return report;
}

template std::unique_ptr<Block<float>> make_block(const BlockSpec&, const ModelSpec&, Rng&);
template std::unique_ptr<Block<double>> make_block(const BlockSpec&, const ModelSpec&, Rng&);
template class Model<float>;
template class Model<double>;
template ParamReport enumerate_params(const Model<float>&);
template ParamReport enumerate_params(const Model<double>&);

}  // namespace moemamba
