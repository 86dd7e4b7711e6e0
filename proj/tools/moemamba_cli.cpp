// Command-line front end: training, evaluation, parameter accounting and
// run comparison.

#include <algorithm>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "moemamba/errors.hpp"
#include "moemamba/model.hpp"
#include "moemamba/model_spec.hpp"
#include "moemamba/runlog.hpp"
#include "moemamba/train.hpp"

namespace fs = std::filesystem;
using namespace moemamba;

namespace {

std::string format_expansion(const ExpansionFactor& e) {
  return e.den == 1 ? std::to_string(e.num) : fmt::format("{}/{}", e.num, e.den);
}

int run_train(const fs::path& config_path, const fs::path& out_dir, const std::optional<fs::path>& resume) {
  const TrainConfig config = load_train_config(config_path);
  TrainOptions options;
  options.out_dir = out_dir;
  options.resume = resume;
  options.on_step = [&](const LogRecord& r) {
    if (r.step % 100 == 0 || r.step == config.steps) {
      fmt::print(stderr, "step {:>6}  lr {:.3e}  loss {:.4f}  ema {:.4f}  aux {:.4f}  dropped {:.3f}\n", r.step, r.lr,
                 r.raw_loss, r.ema_loss, r.aux_loss, r.dropped_fraction);
    }
  };
  const TrainResult result = train(config, options);
  nlohmann::json j;
  j["runlog"] = result.runlog.string();
  j["checkpoint"] = result.checkpoint.string();
  j["steps"] = result.log.empty() ? 0 : result.log.back().step;
  j["final_ema_loss"] = result.log.empty() ? 0.0 : result.log.back().ema_loss;
  if (!config.heldout.empty()) {
    const EvalReport eval = evaluate_checkpoint(result.checkpoint, config.heldout);
    j["heldout_log_perplexity"] = eval.mean_log_perplexity;
  }
  std::cout << j.dump(2) << '\n';
  return 0;
}

int run_eval(const fs::path& ckpt, const fs::path& data) {
  const EvalReport report = evaluate_checkpoint(ckpt, data);
  nlohmann::json j;
  j["mean_log_perplexity"] = report.mean_log_perplexity;
  j["windows"] = report.windows;
  j["tokens"] = report.tokens;
  std::cout << j.dump(2) << '\n';
  return 0;
}

int run_params(const fs::path& config_path) {
  std::ifstream in(config_path);
  if (!in) throw ConfigError("cannot open " + config_path.string());
  nlohmann::json raw;
  in >> raw;
  const ModelSpec spec = model_spec_from_json(raw).resolved();
  nlohmann::json j = count_params(spec).to_json();
  nlohmann::json spec_json;
  model_spec_to_json(spec, spec_json);
  j["spec"] = spec_json;
  std::cout << j.dump(2) << '\n';
  return 0;
}

int run_plan_ratio(int ratio, std::size_t d_model) {
  const RatioPlan plan = plan_ratio(ratio, d_model);
  nlohmann::json j;
  j["ratio"] = fmt::format("{}:{}", plan.mamba_parts, 6 - plan.mamba_parts);
  j["expansion"] = format_expansion(plan.expansion);
  j["expansion_num"] = plan.expansion.num;
  j["expansion_den"] = plan.expansion.den;
  j["d_expert"] = plan.d_expert;
  j["n_experts"] = plan.n_experts;
  std::cout << j.dump(2) << '\n';
  return 0;
}

int run_variants(std::size_t d_model, std::size_t n_blocks, std::size_t n_experts, std::size_t inner_experts) {
  nlohmann::json arr = nlohmann::json::array();
  for (const NamedSpec& v : enumerate_variants(d_model, n_blocks, n_experts, inner_experts)) {
    nlohmann::json spec;
    model_spec_to_json(v.spec.resolved(), spec);
    arr.push_back({{"name", v.name}, {"label", v.label}, {"spec", spec}});
  }
  std::cout << arr.dump(2) << '\n';
  return 0;
}

int run_speedup(const fs::path& run_a, const fs::path& run_b, std::optional<double> level) {
  const LossCurve a = LossCurve::from_runlog(read_runlog(run_a));
  const LossCurve b = LossCurve::from_runlog(read_runlog(run_b));
  // Without an explicit level, compare at the lowest loss both runs reach.
  const double l = level.value_or(std::max(a.min_loss(), b.min_loss()));
  nlohmann::json j;
  j["level"] = l;
  j["tokens_a"] = a.tokens_to_reach(l);
  j["tokens_b"] = b.tokens_to_reach(l);
  j["speedup"] = speedup_at(a, b, l);
  std::cout << j.dump(2) << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Mamba / MoE-Mamba byte-level language model trainer"};
  app.require_subcommand(1);

  fs::path config, out, ckpt, data, run_a, run_b;
  std::optional<fs::path> resume;
  int ratio = 3;
  std::size_t d_model = 512;
  std::optional<double> level;
  std::size_t variant_d = 64, variant_blocks = 2, variant_experts = 4, variant_inner = 24;

  auto* train_cmd = app.add_subcommand("train", "Train a model and write runlog.csv plus a checkpoint");
  train_cmd->add_option("--config", config, "Flat JSON config")->required()->check(CLI::ExistingFile);
  train_cmd->add_option("--out", out, "Output directory")->required();
  train_cmd->add_option("--resume", resume, "Checkpoint to continue from")->check(CLI::ExistingFile);

  auto* eval_cmd = app.add_subcommand("eval", "Mean log perplexity of a checkpoint on a corpus");
  eval_cmd->add_option("--ckpt", ckpt, "Checkpoint file")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--data", data, "Corpus file")->required()->check(CLI::ExistingFile);

  auto* params_cmd = app.add_subcommand("params", "Parameter report for a model config, as JSON");
  params_cmd->add_option("--config", config, "Flat JSON config")->required()->check(CLI::ExistingFile);

  auto* plan_cmd = app.add_subcommand("plan-ratio", "Expansion factor and expert shape for a Mamba:MoE split");
  plan_cmd->add_option("--ratio", ratio, "Mamba share out of 6 parts (1..5)")->required();
  plan_cmd->add_option("--d-model", d_model, "Model width")->required();

  auto* variants_cmd = app.add_subcommand("variants", "List the 19 comparable architectures");
  variants_cmd->add_option("--d-model", variant_d, "Model width")->capture_default_str();
  variants_cmd->add_option("--blocks", variant_blocks, "Blocks per model")->capture_default_str();
  variants_cmd->add_option("--experts", variant_experts, "Experts per switch FF bank")->capture_default_str();
  variants_cmd->add_option("--inner-experts", variant_inner, "Experts per inner-MoE layer")->capture_default_str();

  auto* speedup_cmd = app.add_subcommand("speedup", "Token-count ratio for run B to reach a loss level vs run A");
  speedup_cmd->add_option("--run-a", run_a, "Baseline runlog.csv")->required()->check(CLI::ExistingFile);
  speedup_cmd->add_option("--run-b", run_b, "Candidate runlog.csv")->required()->check(CLI::ExistingFile);
  speedup_cmd->add_option("--level", level, "EMA loss level (default: lowest level both reach)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train_cmd) return run_train(config, out, resume);
    if (*eval_cmd) return run_eval(ckpt, data);
    if (*params_cmd) return run_params(config);
    if (*plan_cmd) return run_plan_ratio(ratio, d_model);
    if (*variants_cmd) return run_variants(variant_d, variant_blocks, variant_experts, variant_inner);
    if (*speedup_cmd) return run_speedup(run_a, run_b, level);
  } catch (const UndefinedAtLevel& e) {
    fmt::print(stderr, "error: {}\n", e.what());
    return 3;
  } catch (const DivergenceError& e) {
    fmt::print(stderr, "error: {}\n", e.what());
    return 4;
  } catch (const std::exception& e) {
    fmt::print(stderr, "error: {}\n", e.what());
    return 1;
  }
  return 0;
}
