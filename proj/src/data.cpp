#include "moemamba/data.hpp"

#include <fstream>
#include <iterator>

#include "moemamba/errors.hpp"

namespace moemamba {

std::vector<std::int32_t> tokenize_bytes(std::string_view bytes) {
  std::vector<std::int32_t> out;
  out.reserve(bytes.size());
  for (char c : bytes) out.push_back(static_cast<std::int32_t>(static_cast<unsigned char>(c)));
  return out;
}

std::string decode_bytes(std::span<const std::int32_t> tokens) {
  std::string out;
  out.reserve(tokens.size());
  for (std::int32_t t : tokens) {
    if (t < 0 || t >= static_cast<std::int32_t>(kByteVocab)) {
      throw IndexError("decode_bytes: token " + std::to_string(t) + " is not a byte");
    }
    out.push_back(static_cast<char>(static_cast<unsigned char>(t)));
  }
  return out;
}

std::vector<std::int32_t> load_corpus(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("corpus: cannot open " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.empty()) throw ConfigError("corpus: " + path.string() + " is empty");
  return tokenize_bytes(bytes);
}

Batch sample_batch(std::span<const std::int32_t> tokens, std::size_t length, std::size_t batch, Rng& rng) {
  if (length == 0 || batch == 0) throw ConfigError("sample_batch: length and batch must be positive");
  if (tokens.size() < length + 1) {
    throw ConfigError("sample_batch: corpus of " + std::to_string(tokens.size()) + " tokens is shorter than " +
                      std::to_string(length + 1));
  }
  std::uniform_int_distribution<std::size_t> start_dist(0, tokens.size() - length - 1);
  Batch out;
  out.batch = batch;
  out.length = length;
  out.inputs.reserve(batch * length);
  out.targets.reserve(batch * length);
  for (std::size_t b = 0; b < batch; ++b) {
    const std::size_t start = start_dist(rng);
    out.inputs.insert(out.inputs.end(), tokens.begin() + start, tokens.begin() + start + length);
    out.targets.insert(out.targets.end(), tokens.begin() + start + 1, tokens.begin() + start + length + 1);
  }
  return out;
}

}  // namespace moemamba
