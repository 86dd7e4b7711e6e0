#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace moemamba {

inline constexpr double kEmaAlpha = 0.001;

/// s_1 = first sample, s_t = (1 - alpha) * s_{t-1} + alpha * sample_t.
class Ema {
 public:
  explicit Ema(double alpha = kEmaAlpha) : alpha_(alpha) {}

  double update(double sample);
  double value() const { return value_; }
  bool started() const { return started_; }
  void restore(double value) {
    value_ = value;
    started_ = true;
  }

 private:
  double alpha_;
  double value_ = 0.0;
  bool started_ = false;
};

struct LogRecord {
  std::size_t step = 0;
  std::size_t tokens_seen = 0;
  double lr = 0.0;
  double raw_loss = 0.0;
  double ema_loss = 0.0;
  double aux_loss = 0.0;
  double dropped_fraction = 0.0;
  double wallclock_s = 0.0;

  friend bool operator==(const LogRecord&, const LogRecord&) = default;
};

inline constexpr const char* kRunLogHeader =
    "step,tokens_seen,lr,raw_loss,ema_loss,aux_loss,dropped_fraction,wallclock_s";

/// One CSV line (no newline); doubles use the shortest round-trip form.
std::string format_record(const LogRecord& record);
// Inverse of format_record; `where` names the source in error messages.
LogRecord parse_record(std::string_view line, const std::string& where);
void write_runlog(const std::filesystem::path& path, const std::vector<LogRecord>& records);
std::vector<LogRecord> read_runlog(const std::filesystem::path& path);

/// Loss as a function of processed tokens.
struct LossCurve {
  std::vector<double> tokens;  // strictly increasing
  std::vector<double> losses;

  static LossCurve from_runlog(const std::vector<LogRecord>& records);  // ema_loss column
  void validate() const;
  double min_loss() const;
  // Tokens at the first crossing of `level`, interpolating linearly between
  // logged points. Throws UndefinedAtLevel when the curve never gets there.
  double tokens_to_reach(double level) const;
};

/// tokens_a(level) / tokens_b(level): how many times fewer tokens B needed.
double speedup_at(const LossCurve& a, const LossCurve& b, double level);

}  // namespace moemamba
