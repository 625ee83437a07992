#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>

namespace strokeseg {

/// Voxel counts or voxel coordinates along (x, y, z).
using Dims3 = std::array<std::int64_t, 3>;

inline std::int64_t voxel_count(const Dims3& d) { return d[0] * d[1] * d[2]; }

/// x-fastest linear index.
inline std::int64_t linear_index(const Dims3& d, std::int64_t x, std::int64_t y, std::int64_t z)
{
    return x + d[0] * (y + d[1] * z);
}

/// Raised for malformed inputs: bad files, shape mismatches, invalid configs.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Raised for invalid user configuration (maps to CLI exit code 2).
class ConfigError : public Error {
public:
    using Error::Error;
};

// ---------------------------------------------------------------------------
// Logging: one line per event, `level=<l> event=<e> key=value ...`.

enum class LogLevel { Debug, Info, Warn, Error };

using LogField = std::pair<std::string, std::string>;
using LogSink = std::function<void(LogLevel, std::string_view)>;

void log_event(LogLevel level, std::string_view event, std::initializer_list<LogField> fields = {});

/// Replaces the process-wide sink; returns the previous one. Default writes to stderr.
LogSink set_log_sink(LogSink sink);
void set_log_threshold(LogLevel level);

std::string to_field(double v);
inline std::string to_field(std::int64_t v) { return std::to_string(v); }
inline std::string to_field(int v) { return std::to_string(v); }
inline std::string to_field(std::size_t v) { return std::to_string(v); }
inline std::string to_field(std::string_view v) { return std::string(v); }
inline std::string to_field(const char* v) { return std::string(v); }

// ---------------------------------------------------------------------------
// Random numbers. xoshiro256** seeded through splitmix64; every derived
// quantity uses integer arithmetic or IEEE double so sequences are identical
// on every platform.

class Rng {
public:
    explicit Rng(std::uint64_t seed = 0);

    std::uint64_t next_u64();
    /// Uniform integer in [0, bound) by rejection; bound > 0.
    std::uint64_t uniform_index(std::uint64_t bound);
    /// Uniform integer in [lo, hi].
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi);
    /// Uniform double in [0, 1) with 53 random bits.
    double uniform();
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    /// Standard normal via Box-Muller (no cached spare).
    double normal();

    std::array<std::uint64_t, 4> state() const { return s_; }

private:
    std::array<std::uint64_t, 4> s_{};
};

std::uint64_t splitmix64(std::uint64_t& state);

/// Deterministic seed derivation for independent streams.
std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> salt);

// ---------------------------------------------------------------------------
// Threading. Work is split into contiguous index ranges; callers must write
// disjoint outputs so results do not depend on scheduling.

void set_max_threads(int n);
int max_threads();
void parallel_for(std::int64_t begin, std::int64_t end,
                  const std::function<void(std::int64_t, std::int64_t)>& body,
                  std::int64_t min_chunk = 1);

/// Tool fingerprint written next to every output.
std::string_view tool_version();

} // namespace strokeseg
