#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "moemamba/nn.hpp"

namespace moemamba {

inline constexpr std::size_t kByteVocab = 256;

/// Identity byte mapping: each byte becomes one token in [0, 256).
std::vector<std::int32_t> tokenize_bytes(std::string_view bytes);
std::string decode_bytes(std::span<const std::int32_t> tokens);

/// Reads and tokenizes a whole file. Empty or unreadable files are errors.
std::vector<std::int32_t> load_corpus(const std::filesystem::path& path);

struct Batch {
  std::size_t batch = 0;
  std::size_t length = 0;
  std::vector<std::int32_t> inputs;   // [batch, length]
  std::vector<std::int32_t> targets;  // inputs shifted left by one
};

/// Uniformly random windows of length + 1 tokens, all inside the corpus.
/// Throws ConfigError when the corpus is shorter than length + 1.
Batch sample_batch(std::span<const std::int32_t> tokens, std::size_t length, std::size_t batch, Rng& rng);

}  // namespace moemamba
