#include "moemamba/train.hpp"

#include <bit>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <set>

#include <fmt/format.h>

#include "moemamba/errors.hpp"
#include "moemamba/ops.hpp"

namespace moemamba {

void TrainConfig::validate() const {
  model.resolved();
  if (steps < 1) throw ConfigError("train: steps must be at least 1");
  if (context_length < 1) throw ConfigError("train: context_length must be positive");
  if (batch_size < 1) throw ConfigError("train: batch_size must be positive");
  if (!(max_lr > 0.0)) throw ConfigError("train: max_lr must be positive");
  if (!(warmup_fraction >= 0.0 && warmup_fraction < 1.0)) throw ConfigError("train: warmup_fraction must be in [0, 1)");
  if (!(final_lr_ratio > 0.0 && final_lr_ratio <= 1.0)) throw ConfigError("train: final_lr_ratio must be in (0, 1]");
  if (!(weight_decay >= 0.0)) throw ConfigError("train: weight_decay must be non-negative");
  if (!(grad_clip > 0.0)) throw ConfigError("train: grad_clip must be positive");
}

namespace {

const std::set<std::string>& known_keys() {
  static const std::set<std::string> keys{
      "kind",       "d_model",        "n_blocks",   "n_experts",       "d_expert",     "expansion_num",
      "expansion_den", "inner_mask",  "every_other", "n_heads",        "vocab_size",   "steps",
      "context_length", "batch_size", "max_lr",     "warmup_fraction", "final_lr_ratio", "weight_decay",
      "grad_clip",  "seed",           "dtype",      "data",            "heldout",      "checkpoint_every",
      "log_wallclock"};
  return keys;
}

}  // namespace

TrainConfig train_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("train config: expected a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (!known_keys().contains(key)) throw ConfigError("train config: unknown key '" + key + "'");
  }
  TrainConfig c;
  c.model = model_spec_from_json(j);
  try {
    c.steps = j.value("steps", c.steps);
    c.context_length = j.value("context_length", c.context_length);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.max_lr = j.value("max_lr", c.max_lr);
    c.warmup_fraction = j.value("warmup_fraction", c.warmup_fraction);
    c.final_lr_ratio = j.value("final_lr_ratio", c.final_lr_ratio);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.grad_clip = j.value("grad_clip", c.grad_clip);
    c.seed = j.value("seed", c.seed);
    c.dtype = parse_dtype(j.value("dtype", std::string(dtype_name(c.dtype))));
    c.data = j.value("data", c.data);
    c.heldout = j.value("heldout", c.heldout);
    c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
    c.log_wallclock = j.value("log_wallclock", c.log_wallclock);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  c.validate();
  return c;
}

nlohmann::json train_config_to_json(const TrainConfig& c) {
  nlohmann::json j;
  model_spec_to_json(c.model, j);
  j["steps"] = c.steps;
  j["context_length"] = c.context_length;
  j["batch_size"] = c.batch_size;
  j["max_lr"] = c.max_lr;
  j["warmup_fraction"] = c.warmup_fraction;
  j["final_lr_ratio"] = c.final_lr_ratio;
  j["weight_decay"] = c.weight_decay;
  j["grad_clip"] = c.grad_clip;
  j["seed"] = c.seed;
  j["dtype"] = std::string(dtype_name(c.dtype));
  j["data"] = c.data;
  j["heldout"] = c.heldout;
  j["checkpoint_every"] = c.checkpoint_every;
  j["log_wallclock"] = c.log_wallclock;
  return j;
}

TrainConfig load_train_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("train config: cannot open " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("train config: " + path.string() + ": " + e.what());
  }
  return train_config_from_json(j);
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

template <typename T>
void append_le(std::vector<char>& out, std::span<const T> values) {
  const std::size_t start = out.size();
  out.resize(start + values.size_bytes());
  std::memcpy(out.data() + start, values.data(), values.size_bytes());
  if constexpr (std::endian::native == std::endian::big) {
    for (std::size_t i = 0; i < values.size(); ++i) {
      char* p = out.data() + start + i * sizeof(T);
      std::reverse(p, p + sizeof(T));
    }
  }
}

template <typename T>
void read_le(const char* src, std::span<T> values) {
  std::memcpy(values.data(), src, values.size_bytes());
  if constexpr (std::endian::native == std::endian::big) {
    auto* bytes = reinterpret_cast<char*>(values.data());
    for (std::size_t i = 0; i < values.size(); ++i) std::reverse(bytes + i * sizeof(T), bytes + (i + 1) * sizeof(T));
  }
}

nlohmann::json state_to_json(const TrainState& s) {
  nlohmann::json j;
  j["step"] = s.step;
  j["tokens_seen"] = s.tokens_seen;
  j["ema"] = s.ema;
  j["initial_loss"] = s.initial_loss;
  j["over_limit_steps"] = s.over_limit_steps;
  j["elapsed_s"] = s.elapsed_s;
  auto& log = j["log"] = nlohmann::json::array();
  for (const LogRecord& r : s.log) log.push_back(format_record(r));
  return j;
}

TrainState state_from_json(const nlohmann::json& j) {
  TrainState s;
  s.step = j.at("step").get<std::size_t>();
  s.tokens_seen = j.at("tokens_seen").get<std::size_t>();
  s.ema = j.at("ema").get<double>();
  s.initial_loss = j.at("initial_loss").get<double>();
  s.over_limit_steps = j.at("over_limit_steps").get<std::size_t>();
  s.elapsed_s = j.at("elapsed_s").get<double>();
  for (const auto& line : j.at("log")) s.log.push_back(parse_record(line.get<std::string>(), "checkpoint state"));
  return s;
}

}  // namespace

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const TrainConfig& config, const TrainState& state,
                     const ParameterList<T>& params, AdamW<T>* optimizer) {
  nlohmann::json manifest;
  manifest["format"] = "moemamba-checkpoint-1";
  manifest["config"] = train_config_to_json(config);
  manifest["state"] = state_to_json(state);
  if (optimizer) manifest["optimizer_steps"] = optimizer->steps_taken();
  auto& arrays = manifest["arrays"] = nlohmann::json::array();

  std::vector<char> payload;
  auto add_array = [&](const std::string& name, const Shape& shape, std::span<const T> values) {
    arrays.push_back({{"name", name},
                      {"dtype", std::string(dtype_name(DTypeOf<T>::value))},
                      {"shape", shape},
                      {"offset", payload.size()},
                      {"nbytes", values.size_bytes()}});
    append_le(payload, values);
  };
  for (std::size_t i = 0; i < params.size(); ++i) add_array(params[i].name, params[i].tensor.shape(), params[i].tensor.data());
  if (optimizer) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      add_array("adam.m." + params[i].name, params[i].tensor.shape(), optimizer->first_moments()[i]);
      add_array("adam.v." + params[i].name, params[i].tensor.shape(), optimizer->second_moments()[i]);
    }
  }

  const std::string header = manifest.dump();
  std::vector<char> length_bytes;
  const std::uint64_t header_len = header.size();
  append_le(length_bytes, std::span<const std::uint64_t>(&header_len, 1));

  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ConfigError("checkpoint: cannot write " + tmp.string());
    out.write(length_bytes.data(), static_cast<std::streamsize>(length_bytes.size()));
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    if (!out) throw ConfigError("checkpoint: write to " + tmp.string() + " failed");
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("checkpoint: cannot open " + path.string());
  char len_bytes[8];
  if (!in.read(len_bytes, 8)) throw ConfigError("checkpoint: " + path.string() + " is truncated");
  std::uint64_t header_len = 0;
  read_le(len_bytes, std::span<std::uint64_t>(&header_len, 1));
  std::string header(header_len, '\0');
  if (!in.read(header.data(), static_cast<std::streamsize>(header_len))) {
    throw ConfigError("checkpoint: " + path.string() + " manifest is truncated");
  }
  Checkpoint c;
  try {
    c.manifest = nlohmann::json::parse(header);
    c.config = train_config_from_json(c.manifest.at("config"));
    c.state = state_from_json(c.manifest.at("state"));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("checkpoint: " + path.string() + ": " + e.what());
  }
  c.payload.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  std::size_t expected = 0;
  for (const auto& a : c.manifest.at("arrays")) expected += a.at("nbytes").get<std::size_t>();
  if (c.payload.size() != expected) {
    throw ConfigError(fmt::format("checkpoint: {} has {} payload bytes, manifest lists {}", path.string(),
                                  c.payload.size(), expected));
  }
  return c;
}

template <typename T>
void restore_checkpoint(const Checkpoint& checkpoint, const ParameterList<T>& params, AdamW<T>* optimizer) {
  std::map<std::string, const nlohmann::json*> index;
  for (const auto& a : checkpoint.manifest.at("arrays")) index[a.at("name").get<std::string>()] = &a;

  auto load = [&](const std::string& name, const Shape& shape, std::span<T> dst) {
    const auto it = index.find(name);
    if (it == index.end()) throw ConfigError("checkpoint: missing array " + name);
    const nlohmann::json& a = *it->second;
    if (parse_dtype(a.at("dtype").get<std::string>()) != DTypeOf<T>::value) {
      throw ConfigError("checkpoint: array " + name + " has dtype " + a.at("dtype").get<std::string>());
    }
    if (a.at("shape").get<Shape>() != shape) {
      throw ShapeError("checkpoint: array " + name + " has shape " + shape_str(a.at("shape").get<Shape>()) +
                       ", model expects " + shape_str(shape));
    }
    read_le(checkpoint.payload.data() + a.at("offset").get<std::size_t>(), dst);
  };
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<T> t = params[i].tensor;
    load(params[i].name, t.shape(), t.mutable_data());
  }
  if (optimizer) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      load("adam.m." + params[i].name, params[i].tensor.shape(), optimizer->first_moments()[i]);
      load("adam.v." + params[i].name, params[i].tensor.shape(), optimizer->second_moments()[i]);
    }
    optimizer->set_steps_taken(checkpoint.manifest.value("optimizer_steps", std::size_t{0}));
  }
}

// ---------------------------------------------------------------------------
// Loss and evaluation

template <typename T>
StepLoss<T> compute_loss(const Model<T>& model, const Batch& batch) {
  const ModelOutput<T> out = model.forward(batch.inputs, batch.batch, batch.length);
  const std::size_t vocab = model.spec().vocab_size;
  StepLoss<T> loss;
  loss.cross_entropy =
      cross_entropy(reshape(out.logits, Shape{batch.batch * batch.length, vocab}), std::span(batch.targets));
  loss.total = add(loss.cross_entropy, out.aux_loss);
  loss.aux = static_cast<double>(out.aux_loss.item());
  loss.dropped_fraction = out.dropped_fraction;
  loss.routing_digest = out.routing_digest;
  return loss;
}

template <typename T>
double evaluate(const Model<T>& model, std::span<const std::int32_t> tokens, std::size_t context_length,
                std::size_t batch_size) {
  if (context_length == 0 || batch_size == 0) throw ConfigError("evaluate: context_length and batch_size must be positive");
  if (tokens.size() < context_length + 1) {
    throw ConfigError("evaluate: corpus of " + std::to_string(tokens.size()) + " tokens is shorter than one window");
  }
  const std::size_t windows = (tokens.size() - 1) / context_length;
  NoGradGuard no_grad;
  double weighted = 0.0;
  for (std::size_t first = 0; first < windows; first += batch_size) {
    const std::size_t count = std::min(batch_size, windows - first);
    Batch batch;
    batch.batch = count;
    batch.length = context_length;
    for (std::size_t w = first; w < first + count; ++w) {
      const auto start = tokens.begin() + static_cast<std::ptrdiff_t>(w * context_length);
      batch.inputs.insert(batch.inputs.end(), start, start + static_cast<std::ptrdiff_t>(context_length));
      batch.targets.insert(batch.targets.end(), start + 1, start + 1 + static_cast<std::ptrdiff_t>(context_length));
    }
    const StepLoss<T> loss = compute_loss(model, batch);
    weighted += static_cast<double>(loss.cross_entropy.item()) * static_cast<double>(count);
  }
  return weighted / static_cast<double>(windows);
}

// ---------------------------------------------------------------------------
// Training loop

namespace {

Rng step_rng(std::uint64_t seed, std::size_t step) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(step), static_cast<std::uint32_t>(step >> 32)};
  return Rng(seq);
}

template <typename T>
TrainResult train_impl(const TrainConfig& config, const TrainOptions& options) {
  config.validate();
  std::filesystem::create_directories(options.out_dir);
  const std::vector<std::int32_t> corpus = load_corpus(config.data);
  if (corpus.size() < config.context_length + 1) {
    throw ConfigError("train: corpus is shorter than context_length + 1");
  }

  Model<T> model(config.model, config.seed);
  const ParameterList<T> params = model.parameters();
  AdamW<T> optimizer(params, AdamWConfig{0.9, 0.999, 1e-8, config.weight_decay});

  TrainState state;
  if (options.resume) {
    const Checkpoint ckpt = read_checkpoint(*options.resume);
    if (!(ckpt.config.model.resolved() == config.model.resolved()) || ckpt.config.seed != config.seed ||
        ckpt.config.dtype != config.dtype) {
      throw ConfigError("train: checkpoint " + options.resume->string() + " was written for a different model, seed or dtype");
    }
    restore_checkpoint(ckpt, params, &optimizer);
    state = ckpt.state;
  }

  TrainResult result;
  result.runlog = options.out_dir / "runlog.csv";
  Ema ema;
  if (state.step > 0) ema.restore(state.ema);

  const auto started = std::chrono::steady_clock::now();
  const double elapsed_before = state.elapsed_s;
  const std::size_t tokens_per_step = config.batch_size * config.context_length;

  auto checkpoint = [&]() {
    result.checkpoint = options.out_dir / fmt::format("checkpoint-{}.bin", state.step);
    save_checkpoint(result.checkpoint, config, state, params, &optimizer);
  };

  for (std::size_t step = state.step + 1; step <= config.steps; ++step) {
    Rng rng = step_rng(config.seed, step);
    const Batch batch = sample_batch(corpus, config.context_length, config.batch_size, rng);
    const StepLoss<T> loss = compute_loss(model, batch);
    loss.total.backward();
    clip_grad_norm(params, config.grad_clip);
    const double lr = lr_at(step, config.schedule());
    optimizer.step(lr);
    optimizer.zero_grad();

    const double raw = static_cast<double>(loss.cross_entropy.item());
    if (!std::isfinite(raw)) throw NumericError(fmt::format("train: loss is {} at step {}", raw, step));
    if (step == 1) state.initial_loss = raw;
    state.over_limit_steps = raw > 2.0 * state.initial_loss ? state.over_limit_steps + 1 : 0;

    state.step = step;
    state.tokens_seen += tokens_per_step;
    state.ema = ema.update(raw);
    const double elapsed =
        elapsed_before + std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    state.elapsed_s = config.log_wallclock ? elapsed : 0.0;

    LogRecord record{step, state.tokens_seen, lr, raw, state.ema, loss.aux, loss.dropped_fraction, state.elapsed_s};
    state.log.push_back(record);
    if (options.on_step) options.on_step(record);

    if (state.over_limit_steps >= kDivergencePatience) {
      write_runlog(result.runlog, state.log);
      throw DivergenceError(fmt::format("train: raw loss above twice the initial {} for {} steps (step {})",
                                        state.initial_loss, kDivergencePatience, step));
    }
    if (config.checkpoint_every > 0 && step % config.checkpoint_every == 0 && step != config.steps) checkpoint();
  }
  write_runlog(result.runlog, state.log);
  checkpoint();
  result.log = state.log;
  return result;
}

template <typename T>
EvalReport evaluate_impl(const Checkpoint& ckpt, const std::filesystem::path& data) {
  Model<T> model(ckpt.config.model, ckpt.config.seed);
  restore_checkpoint<T>(ckpt, model.parameters(), nullptr);
  const std::vector<std::int32_t> tokens = load_corpus(data);
  EvalReport report;
  report.mean_log_perplexity = evaluate(model, tokens, ckpt.config.context_length, ckpt.config.batch_size);
  report.windows = (tokens.size() - 1) / ckpt.config.context_length;
  report.tokens = report.windows * ckpt.config.context_length;
  return report;
}

}  // namespace

TrainResult train(const TrainConfig& config, const TrainOptions& options) {
  return config.dtype == DType::kFloat64 ? train_impl<double>(config, options) : train_impl<float>(config, options);
}

EvalReport evaluate_checkpoint(const std::filesystem::path& checkpoint, const std::filesystem::path& data) {
  const Checkpoint ckpt = read_checkpoint(checkpoint);
  return ckpt.config.dtype == DType::kFloat64 ? evaluate_impl<double>(ckpt, data) : evaluate_impl<float>(ckpt, data);
}

#define MOEMAMBA_INSTANTIATE_TRAIN(T)                                                                          \
  template void save_checkpoint(const std::filesystem::path&, const TrainConfig&, const TrainState&,           \
                                const ParameterList<T>&, AdamW<T>*);                                           \
  template void restore_checkpoint(const Checkpoint&, const ParameterList<T>&, AdamW<T>*);                     \
  template StepLoss<T> compute_loss(const Model<T>&, const Batch&);                                            \
  template double evaluate(const Model<T>&, std::span<const std::int32_t>, std::size_t, std::size_t);

MOEMAMBA_INSTANTIATE_TRAIN(float)
MOEMAMBA_INSTANTIATE_TRAIN(double)

}  // namespace moemamba
