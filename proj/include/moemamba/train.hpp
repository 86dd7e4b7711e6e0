#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "moemamba/data.hpp"
#include "moemamba/model.hpp"
#include "moemamba/model_spec.hpp"
#include "moemamba/optim.hpp"
#include "moemamba/runlog.hpp"
#include "moemamba/tensor.hpp"

namespace moemamba {

inline constexpr std::size_t kDivergencePatience = 100;

struct TrainConfig {
  ModelSpec model;
  std::size_t steps = 1000;
  std::size_t context_length = 1024;
  std::size_t batch_size = 8;
  double max_lr = 1e-3;
  double warmup_fraction = 0.01;
  double final_lr_ratio = 0.1;
  double weight_decay = 0.1;
  double grad_clip = 0.5;
  std::uint64_t seed = 0;
  DType dtype = DType::kFloat32;
  std::string data;              // training corpus path
  std::string heldout;           // optional evaluation corpus path
  std::size_t checkpoint_every = 0;  // 0 keeps only the final checkpoint
  bool log_wallclock = true;     // false writes 0 so logs and checkpoints are byte-reproducible

  void validate() const;
  ScheduleConfig schedule() const { return {steps, max_lr, warmup_fraction, final_lr_ratio}; }
};

/// Flat object holding the model spec fields and the training fields above.
/// Unknown keys are rejected.
TrainConfig train_config_from_json(const nlohmann::json& j);
nlohmann::json train_config_to_json(const TrainConfig& config);
TrainConfig load_train_config(const std::filesystem::path& path);

/// Loop counters that a checkpoint must carry for an exact resume.
struct TrainState {
  std::size_t step = 0;
  std::size_t tokens_seen = 0;
  double ema = 0.0;
  double initial_loss = 0.0;
  std::size_t over_limit_steps = 0;
  double elapsed_s = 0.0;
  std::vector<LogRecord> log;
};

/// Single-file checkpoint: uint64 little-endian manifest length, the JSON
/// manifest (config, state, array index with name/dtype/shape/offset/nbytes),
/// then the little-endian array payloads in manifest order.
template <typename T>
void save_checkpoint(const std::filesystem::path& path, const TrainConfig& config, const TrainState& state,
                     const ParameterList<T>& params, AdamW<T>* optimizer);

struct Checkpoint {
  TrainConfig config;
  TrainState state;
  nlohmann::json manifest;
  std::vector<char> payload;
};

Checkpoint read_checkpoint(const std::filesystem::path& path);

/// Copies stored arrays into `params` (and the optimizer moments when given).
template <typename T>
void restore_checkpoint(const Checkpoint& checkpoint, const ParameterList<T>& params, AdamW<T>* optimizer);

template <typename T>
struct StepLoss {
  Tensor<T> total;  // cross-entropy + aux
  Tensor<T> cross_entropy;
  double aux = 0.0;
  double dropped_fraction = 0.0;
  std::uint64_t routing_digest = 0;
};

template <typename T>
StepLoss<T> compute_loss(const Model<T>& model, const Batch& batch);

/// Mean next-token cross-entropy over non-overlapping windows, without gradients.
template <typename T>
double evaluate(const Model<T>& model, std::span<const std::int32_t> tokens, std::size_t context_length,
                std::size_t batch_size);

struct TrainOptions {
  std::filesystem::path out_dir;
  std::optional<std::filesystem::path> resume;
  std::function<void(const LogRecord&)> on_step;
};

struct TrainResult {
  std::vector<LogRecord> log;
  std::filesystem::path runlog;
  std::filesystem::path checkpoint;
};

/// Writes <out>/runlog.csv and <out>/checkpoint-<step>.bin. Throws
/// DivergenceError (after writing the log) when the raw loss stays above
/// twice the first step's loss for kDivergencePatience consecutive steps.
TrainResult train(const TrainConfig& config, const TrainOptions& options);

/// Loads a checkpoint's model and evaluates it on a corpus file.
struct EvalReport {
  double mean_log_perplexity = 0.0;
  std::size_t windows = 0;
  std::size_t tokens = 0;
};
EvalReport evaluate_checkpoint(const std::filesystem::path& checkpoint, const std::filesystem::path& data);

}  // namespace moemamba
