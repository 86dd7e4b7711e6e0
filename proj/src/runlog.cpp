#include "moemamba/runlog.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>

#include <fmt/format.h>

#include "moemamba/errors.hpp"

namespace moemamba {

double Ema::update(double sample) {
  if (!started_) {
    value_ = sample;
    started_ = true;
  } else {
    value_ = (1.0 - alpha_) * value_ + alpha_ * sample;
  }
  return value_;
}

std::string format_record(const LogRecord& r) {
  return fmt::format("{},{},{},{},{},{},{},{}", r.step, r.tokens_seen, r.lr, r.raw_loss, r.ema_loss, r.aux_loss,
                     r.dropped_fraction, r.wallclock_s);
}

void write_runlog(const std::filesystem::path& path, const std::vector<LogRecord>& records) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("runlog: cannot write " + path.string());
  out << kRunLogHeader << '\n';
  for (const LogRecord& r : records) out << format_record(r) << '\n';
  if (!out) throw ConfigError("runlog: write to " + path.string() + " failed");
}

namespace {

template <typename V>
V parse_field(std::string_view text, const std::string& where) {
  V value{};
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  if (ec != std::errc() || ptr != text.data() + text.size()) {
    throw ConfigError("runlog: bad field '" + std::string(text) + "' at " + where);
  }
  return value;
}

}  // namespace

LogRecord parse_record(std::string_view line, const std::string& where) {
  std::vector<std::string_view> fields;
  while (true) {
    const std::size_t comma = line.find(',');
    fields.push_back(line.substr(0, comma));
    if (comma == std::string_view::npos) break;
    line.remove_prefix(comma + 1);
  }
  if (fields.size() != 8) throw ConfigError("runlog: expected 8 fields at " + where);
  LogRecord r;
  r.step = parse_field<std::size_t>(fields[0], where);
  r.tokens_seen = parse_field<std::size_t>(fields[1], where);
  r.lr = parse_field<double>(fields[2], where);
  r.raw_loss = parse_field<double>(fields[3], where);
  r.ema_loss = parse_field<double>(fields[4], where);
  r.aux_loss = parse_field<double>(fields[5], where);
  r.dropped_fraction = parse_field<double>(fields[6], where);
  r.wallclock_s = parse_field<double>(fields[7], where);
  return r;
}

std::vector<LogRecord> read_runlog(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("runlog: cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != kRunLogHeader) {
    throw ConfigError("runlog: " + path.string() + " does not start with the expected header");
  }
  std::vector<LogRecord> out;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    out.push_back(parse_record(line, path.string() + ":" + std::to_string(line_no)));
  }
  return out;
}

LossCurve LossCurve::from_runlog(const std::vector<LogRecord>& records) {
  LossCurve c;
  for (const LogRecord& r : records) {
    c.tokens.push_back(static_cast<double>(r.tokens_seen));
    c.losses.push_back(r.ema_loss);
  }
  c.validate();
  return c;
}

void LossCurve::validate() const {
  if (tokens.empty() || tokens.size() != losses.size()) {
    throw ConfigError("loss curve: needs matching, nonempty token and loss columns");
  }
  for (std::size_t i = 1; i < tokens.size(); ++i) {
    if (!(tokens[i] > tokens[i - 1])) throw ConfigError("loss curve: token counts must strictly increase");
  }
}

double LossCurve::min_loss() const {
  validate();
  return *std::min_element(losses.begin(), losses.end());
}

double LossCurve::tokens_to_reach(double level) const {
  validate();
  if (losses[0] <= level) return tokens[0];
  for (std::size_t i = 1; i < losses.size(); ++i) {
    if (losses[i] <= level) {
      const double t0 = tokens[i - 1];
      const double t1 = tokens[i];
      const double l0 = losses[i - 1];
      const double l1 = losses[i];
      return t0 + (l0 - level) / (l0 - l1) * (t1 - t0);
    }
  }
  throw UndefinedAtLevel(fmt::format("loss curve never reaches {} (minimum {})", level, min_loss()));
}

double speedup_at(const LossCurve& a, const LossCurve& b, double level) {
  return a.tokens_to_reach(level) / b.tokens_to_reach(level);
}

}  // namespace moemamba
