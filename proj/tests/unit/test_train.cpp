#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>

#include <gtest/gtest.h>

#include "moemamba/errors.hpp"
#include "moemamba/train.hpp"

using namespace moemamba;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "moemamba_train_test" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

TrainConfig small_config(ModelKind kind) {
  TrainConfig c;
  c.model = ModelSpec{.kind = kind, .d_model = 16, .n_blocks = 1, .n_heads = 0};
  if (kind == ModelKind::kMoeMamba || kind == ModelKind::kTransformerMoe || kind == ModelKind::kParallelMoeMamba) {
    c.model.n_experts = 3;
  }
  c.steps = 10;
  c.context_length = 16;
  c.batch_size = 2;
  c.max_lr = 3e-3;
  c.seed = 5;
  c.data = (fs::path(MOEMAMBA_SOURCE_DIR) / "data" / "shakespeare_train.txt").string();
  c.log_wallclock = false;
  return c;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST(TrainConfig, JsonRoundTripAndUnknownKeys) {
  TrainConfig c = small_config(ModelKind::kMoeMamba);
  c.dtype = DType::kFloat64;
  const TrainConfig back = train_config_from_json(nlohmann::json::parse(train_config_to_json(c).dump()));
  EXPECT_EQ(train_config_to_json(back), train_config_to_json(c));
  EXPECT_EQ(back.model, c.model);
  nlohmann::json j = train_config_to_json(c);
  j["learning_rate"] = 1e-3;
  EXPECT_THROW(train_config_from_json(j), ConfigError);
  j = train_config_to_json(c);
  j["steps"] = "many";
  EXPECT_THROW(train_config_from_json(j), ConfigError);
  j = train_config_to_json(c);
  j["grad_clip"] = 0.0;
  EXPECT_THROW(train_config_from_json(j), ConfigError);
}

TEST(ComputeLoss, AuxIsZeroWithoutRoutingAndPositiveWithIt) {
  const std::vector<std::int32_t> corpus = load_corpus(small_config(ModelKind::kMamba).data);
  Rng rng(1);
  const Batch batch = sample_batch(corpus, 8, 2, rng);
  const Model<double> plain(ModelSpec{.kind = ModelKind::kMamba, .d_model = 16, .n_blocks = 1}, 1);
  const auto a = compute_loss(plain, batch);
  EXPECT_EQ(a.aux, 0.0);
  EXPECT_EQ(a.dropped_fraction, 0.0);
  EXPECT_EQ(a.total.item(), a.cross_entropy.item());
  const Model<double> moe(ModelSpec{.kind = ModelKind::kMoeMamba, .d_model = 16, .n_blocks = 1, .n_experts = 3}, 1);
  const auto b = compute_loss(moe, batch);
  EXPECT_GT(b.aux, 0.0);
  EXPECT_NEAR(b.total.item(), b.cross_entropy.item() + b.aux, 1e-12);
}

TEST(Evaluate, UntrainedModelIsNearUniformAndDeterministic) {
  const std::vector<std::int32_t> corpus = load_corpus(small_config(ModelKind::kMamba).data);
  const std::span<const std::int32_t> head(corpus.data(), 2000);
  const Model<double> m(ModelSpec{.kind = ModelKind::kMamba, .d_model = 16, .n_blocks = 1}, 1);
  const double a = evaluate(m, head, 32, 4);
  EXPECT_NEAR(a, std::log(256.0), 0.05);
  EXPECT_EQ(a, evaluate(m, head, 32, 4));
  EXPECT_THROW(evaluate(m, head.subspan(0, 10), 32, 4), ConfigError);
}

TEST(Evaluate, EqualsTrainingLossOnTheSameWindows) {
  const std::vector<std::int32_t> corpus = load_corpus(small_config(ModelKind::kMamba).data);
  const std::span<const std::int32_t> head(corpus.data(), 3 * 16 + 1);
  const Model<double> m(ModelSpec{.kind = ModelKind::kMoeMamba, .d_model = 16, .n_blocks = 1, .n_experts = 3}, 4);
  Batch batch{.batch = 3, .length = 16};
  for (std::size_t w = 0; w < 3; ++w) {
    batch.inputs.insert(batch.inputs.end(), head.begin() + w * 16, head.begin() + w * 16 + 16);
    batch.targets.insert(batch.targets.end(), head.begin() + w * 16 + 1, head.begin() + w * 16 + 17);
  }
  EXPECT_EQ(evaluate(m, head, 16, 3), compute_loss(m, batch).cross_entropy.item());
}

TEST(Train, WritesLogAndCheckpointAndLearns) {
  const fs::path out = scratch("learn");
  TrainConfig c = small_config(ModelKind::kMoeMamba);
  c.steps = 40;
  const TrainResult r = train(c, {.out_dir = out});
  ASSERT_EQ(r.log.size(), 40u);
  EXPECT_EQ(read_runlog(r.runlog), r.log);
  EXPECT_TRUE(fs::exists(out / "checkpoint-40.bin"));
  EXPECT_LT(r.log.back().raw_loss, r.log.front().raw_loss);
  for (const LogRecord& rec : r.log) {
    EXPECT_EQ(rec.tokens_seen, rec.step * 32);
    EXPECT_GT(rec.aux_loss, 0.0);
    EXPECT_EQ(rec.wallclock_s, 0.0);
  }
}

TEST(Train, NonMoeLogsZeroAux) {
  const TrainResult r = train(small_config(ModelKind::kTransformer), {.out_dir = scratch("dense")});
  for (const LogRecord& rec : r.log) {
    EXPECT_EQ(rec.aux_loss, 0.0);
    EXPECT_EQ(rec.dropped_fraction, 0.0);
  }
}

TEST(Train, ResumeMatchesUninterruptedRun) {
  TrainConfig c = small_config(ModelKind::kMoeMamba);
  c.checkpoint_every = 5;
  const fs::path full = scratch("full"), part = scratch("part");
  train(c, {.out_dir = full});
  fs::copy_file(full / "checkpoint-5.bin", part / "start.bin");
  train(c, {.out_dir = part, .resume = part / "start.bin"});
  EXPECT_EQ(slurp(full / "runlog.csv"), slurp(part / "runlog.csv"));
  EXPECT_EQ(slurp(full / "checkpoint-10.bin"), slurp(part / "checkpoint-10.bin"));
}

TEST(Train, ResumeRejectsDifferentModel) {
  TrainConfig c = small_config(ModelKind::kMamba);
  c.steps = 2;
  const fs::path dir = scratch("mismatch");
  train(c, {.out_dir = dir});
  TrainConfig other = c;
  other.model.d_model = 32;
  EXPECT_THROW(train(other, {.out_dir = dir, .resume = dir / "checkpoint-2.bin"}), ConfigError);
}

TEST(Checkpoint, RoundTripsParametersAndState) {
  const fs::path dir = scratch("ckpt");
  TrainConfig c = small_config(ModelKind::kParallelMoeMamba);
  c.dtype = DType::kFloat64;
  const Model<double> a(c.model, 1);
  TrainState state{.step = 3, .tokens_seen = 96, .ema = 4.5, .initial_loss = 5.5};
  state.log.push_back({1, 32, 1e-3, 5.5, 5.5, 0.01, 0.1, 0.0});
  save_checkpoint(dir / "c.bin", c, state, a.parameters(), static_cast<AdamW<double>*>(nullptr));
  const Checkpoint ck = read_checkpoint(dir / "c.bin");
  EXPECT_EQ(ck.state.step, 3u);
  EXPECT_EQ(ck.state.ema, 4.5);
  EXPECT_EQ(ck.state.log, state.log);
  EXPECT_EQ(ck.config.model, c.model);
  const Model<double> b(c.model, 2);
  restore_checkpoint(ck, b.parameters(), static_cast<AdamW<double>*>(nullptr));
  const auto pa = a.parameters(), pb = b.parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_TRUE(std::ranges::equal(pa[i].tensor.data(), pb[i].tensor.data())) << pa[i].name;
  }
  const Model<float> wrong_dtype(c.model, 1);
  EXPECT_THROW(restore_checkpoint(ck, wrong_dtype.parameters(), static_cast<AdamW<float>*>(nullptr)), ConfigError);
}

TEST(Checkpoint, RejectsTruncatedFile) {
  const fs::path dir = scratch("trunc");
  { std::ofstream(dir / "bad.bin", std::ios::binary) << "abc"; }
  EXPECT_THROW(read_checkpoint(dir / "bad.bin"), ConfigError);
  EXPECT_THROW(read_checkpoint(dir / "missing.bin"), ConfigError);
}
