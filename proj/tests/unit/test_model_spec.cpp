#include <set>
#include <string>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "moemamba/errors.hpp"
#include "moemamba/model_spec.hpp"

using namespace moemamba;

TEST(ModelKind, NamesRoundTrip) {
  for (ModelKind k : {ModelKind::kTransformer, ModelKind::kTransformerMoe, ModelKind::kMamba, ModelKind::kMoeMamba,
                      ModelKind::kParallelMoeMamba, ModelKind::kInnerMoeMamba}) {
    EXPECT_EQ(parse_kind(kind_name(k)), k);
  }
  EXPECT_THROW(parse_kind("mamba2"), ConfigError);
}

TEST(InnerMask, Encoding) {
  EXPECT_EQ(format_inner_mask(0), "");
  EXPECT_EQ(format_inner_mask(kConvSlot | kOutputSlot), "conv+output");
  EXPECT_EQ(parse_inner_mask("output+gate"), kGateSlot | kOutputSlot);
  EXPECT_EQ(parse_inner_mask(""), 0u);
  for (unsigned m = 0; m <= kAllInnerSlots; ++m) EXPECT_EQ(parse_inner_mask(format_inner_mask(m)), m);
  EXPECT_EQ(mask_size(kAllInnerSlots), 3);
  EXPECT_THROW(parse_inner_mask("conv+conv"), ConfigError);
  EXPECT_THROW(parse_inner_mask("conv+"), ConfigError);
  EXPECT_THROW(parse_inner_mask("x_proj"), ConfigError);
}

TEST(ModelSpec, DefaultsResolve) {
  ModelSpec t{.kind = ModelKind::kTransformerMoe, .d_model = 128, .n_experts = 4};
  const ModelSpec r = t.resolved();
  EXPECT_EQ(r.n_heads, 2u);
  EXPECT_EQ(r.d_expert, 512u);
  ModelSpec m{.kind = ModelKind::kMoeMamba, .d_model = 64, .n_experts = 4};
  EXPECT_EQ(m.resolved().d_expert, 192u);
  EXPECT_TRUE(m.is_moe());
  EXPECT_FALSE((ModelSpec{.kind = ModelKind::kMamba}.is_moe()));
}

TEST(ModelSpec, RejectsInconsistentFields) {
  EXPECT_THROW((ModelSpec{.kind = ModelKind::kMoeMamba}.resolved()), ConfigError);
  EXPECT_THROW((ModelSpec{.kind = ModelKind::kInnerMoeMamba}.resolved()), ConfigError);
  EXPECT_THROW((ModelSpec{.kind = ModelKind::kMamba, .inner_mask = kGateSlot}.resolved()), ConfigError);
  EXPECT_THROW((ModelSpec{.kind = ModelKind::kTransformer, .d_model = 64, .n_heads = 3}.resolved()), ConfigError);
  EXPECT_THROW(
      (ModelSpec{.kind = ModelKind::kInnerMoeMamba, .n_experts = 4, .inner_mask = kAllInnerSlots}.resolved()),
      ConfigError);
  EXPECT_THROW((ModelSpec{.kind = ModelKind::kMamba, .d_model = 64, .expansion = {5, 3}}.resolved()), ConfigError);
}

TEST(ModelSpec, BlockLayouts) {
  EXPECT_EQ((ModelSpec{.kind = ModelKind::kMoeMamba, .n_blocks = 2, .n_experts = 2}.blocks()),
            (std::vector<BlockSpec>{{BlockKind::kMamba}, {BlockKind::kMoeFF}, {BlockKind::kMamba}, {BlockKind::kMoeFF}}));
  EXPECT_EQ((ModelSpec{.kind = ModelKind::kTransformer, .n_blocks = 1}.blocks()),
            (std::vector<BlockSpec>{{BlockKind::kAttention}, {BlockKind::kDenseFF}}));
  EXPECT_EQ((ModelSpec{.kind = ModelKind::kParallelMoeMamba, .n_blocks = 3, .n_experts = 2}.blocks().size()), 3u);
}

TEST(ModelSpec, EveryOtherModifiesOddLayersWithDoubledExperts) {
  const ModelSpec s{.kind = ModelKind::kInnerMoeMamba,
                    .n_blocks = 4,
                    .n_experts = 12,
                    .inner_mask = kGateSlot | kOutputSlot,
                    .every_other = true};
  const auto b = s.blocks();
  ASSERT_EQ(b.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) {
    if (i % 2 == 0) {
      EXPECT_EQ(b[i].kind, BlockKind::kMamba);
    } else {
      EXPECT_EQ(b[i].kind, BlockKind::kInnerMoeMamba);
      EXPECT_EQ(b[i].experts_per_position, 12u);
    }
  }
}

TEST(ModelSpec, JsonRoundTrip) {
  for (const NamedSpec& v : enumerate_variants(96, 3, 4, 12)) {
    nlohmann::json j;
    model_spec_to_json(v.spec, j);
    EXPECT_EQ(model_spec_from_json(nlohmann::json::parse(j.dump())), v.spec) << v.name;
  }
  EXPECT_THROW(model_spec_from_json(nlohmann::json::array()), ConfigError);
  EXPECT_THROW(model_spec_from_json(nlohmann::json{{"kind", "mamba"}, {"d_model", "wide"}}), ConfigError);
}

TEST(Variants, NineteenUniqueAndValid) {
  const auto vs = enumerate_variants();
  ASSERT_EQ(vs.size(), 19u);
  std::set<std::string> names;
  for (const auto& v : vs) {
    names.insert(v.name);
    EXPECT_NO_THROW(v.spec.resolved()) << v.name;
  }
  EXPECT_EQ(names.size(), 19u);
  EXPECT_EQ(vs[3].name, "moe_mamba");
  EXPECT_EQ(vs[11].name, "inner_conv_gate_output");
  EXPECT_EQ(vs[11].label, "Conv + Gate + Output Projection / All Layers");
  EXPECT_EQ(vs[12].name, "inner_conv_every_other");
}

TEST(PlanRatio, Rows) {
  const RatioPlan p = plan_ratio(2, 512);
  EXPECT_EQ(p.expansion.num, 5);
  EXPECT_EQ(p.expansion.den, 3);
  EXPECT_EQ(p.d_expert, 2048u);
  EXPECT_EQ(p.n_experts, 24u);
  const RatioPlan q = plan_ratio(3, 512);
  EXPECT_EQ(q.expansion.num, 2);
  EXPECT_EQ(q.expansion.den, 1);
  EXPECT_EQ(q.n_experts, 32u);
  EXPECT_EQ(plan_ratio(5, 512).n_experts, 96u);
  EXPECT_EQ(plan_ratio(1, 512).n_experts, 19u);
  EXPECT_THROW(plan_ratio(0, 512), ConfigError);
  EXPECT_THROW(plan_ratio(6, 512), ConfigError);
}
