#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace ldl {

/// Invalid configuration, manifest or argument. The CLI maps this to exit code 1.
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Failure during a run (non-finite loss, unreadable image). The CLI maps this to exit code 2.
struct RuntimeFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Point {
  int h = 0;
  int w = 0;
  friend bool operator==(const Point&, const Point&) = default;
};

double distance(Point a, Point b);

// ---------------------------------------------------------------------------
// Logging. Warnings are counted so callers (and tests) can observe them.

enum class LogLevel { Debug, Info, Warn, Error };

void set_log_level(LogLevel level);
void log(LogLevel level, std::string_view msg);
inline void info(std::string_view msg) { log(LogLevel::Info, msg); }
void warn(std::string_view msg);
std::int64_t warning_count();

// ---------------------------------------------------------------------------
// Randomness. Every random stream is derived from a root seed and a name so
// that streams are independent of call order elsewhere in the program.

std::uint64_t splitmix64(std::uint64_t x);
std::uint64_t derive_seed(std::uint64_t root, std::string_view stream, std::uint64_t index = 0);

/// Small portable generator (xoshiro256**) with explicit uniform helpers, so
/// sampled values do not depend on the standard library's distributions.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);
  std::uint64_t next();
  double uniform();                       // [0, 1)
  double uniform(double lo, double hi);   // [lo, hi)
  int uniform_int(int lo, int hi);        // [lo, hi]
  bool bernoulli(double p);
  double normal();

 private:
  std::uint64_t s_[4];
};

}  // namespace ldl
