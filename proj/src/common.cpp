#include "strokeseg/common.hpp"

#include <atomic>
#include <bit>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <mutex>
#include <numbers>
#include <sstream>
#include <thread>
#include <vector>

namespace strokeseg {

namespace {

std::mutex g_log_mutex;
LogLevel g_log_threshold = LogLevel::Info;

void default_sink(LogLevel, std::string_view line) { std::cerr << line << '\n'; }

LogSink& sink_ref()
{
    static LogSink sink = default_sink;
    return sink;
}

const char* level_name(LogLevel l)
{
    switch (l) {
    case LogLevel::Debug: return "debug";
    case LogLevel::Info: return "info";
    case LogLevel::Warn: return "warn";
    case LogLevel::Error: return "error";
    }
    return "info";
}

std::atomic<int> g_max_threads{1};
thread_local bool t_in_parallel = false;

} // namespace

void log_event(LogLevel level, std::string_view event, std::initializer_list<LogField> fields)
{
    std::lock_guard lock(g_log_mutex);
    if (level < g_log_threshold) return;
    std::string line = "level=";
    line += level_name(level);
    line += " event=";
    line += event;
    for (const auto& [k, v] : fields) {
        line += ' ';
        line += k;
        line += '=';
        if (v.find(' ') != std::string::npos) {
            line += '"';
            line += v;
            line += '"';
        } else {
            line += v;
        }
    }
    if (sink_ref()) sink_ref()(level, line);
}

LogSink set_log_sink(LogSink sink)
{
    std::lock_guard lock(g_log_mutex);
    return std::exchange(sink_ref(), std::move(sink));
}

void set_log_threshold(LogLevel level)
{
    std::lock_guard lock(g_log_mutex);
    g_log_threshold = level;
}

std::string to_field(double v)
{
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6g", v);
    return buf;
}

// ---------------------------------------------------------------------------

std::uint64_t splitmix64(std::uint64_t& state)
{
    std::uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> salt)
{
    std::uint64_t s = base;
    std::uint64_t out = splitmix64(s);
    for (auto v : salt) {
        s ^= v + 0x632BE59BD9B4E019ULL + (out << 6) + (out >> 2);
        out = splitmix64(s);
    }
    return out;
}

Rng::Rng(std::uint64_t seed)
{
    std::uint64_t sm = seed;
    for (auto& w : s_) w = splitmix64(sm);
}

std::uint64_t Rng::next_u64()
{
    const std::uint64_t result = std::rotl(s_[1] * 5, 7) * 9;
    const std::uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = std::rotl(s_[3], 45);
    return result;
}

std::uint64_t Rng::uniform_index(std::uint64_t bound)
{
    if (bound == 0) throw std::invalid_argument("uniform_index: bound must be positive");
    // Largest multiple of bound that fits; reject above it.
    const std::uint64_t limit = UINT64_MAX - (UINT64_MAX % bound + 1) % bound;
    for (;;) {
        const std::uint64_t r = next_u64();
        if (r <= limit) return r % bound;
    }
}

std::int64_t Rng::uniform_int(std::int64_t lo, std::int64_t hi)
{
    if (hi < lo) throw std::invalid_argument("uniform_int: empty range");
    return lo + static_cast<std::int64_t>(uniform_index(static_cast<std::uint64_t>(hi - lo) + 1));
}

double Rng::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

double Rng::normal()
{
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

// ---------------------------------------------------------------------------

void set_max_threads(int n)
{
    if (n <= 0) n = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
    g_max_threads = n;
}

int max_threads() { return g_max_threads.load(); }

void parallel_for(std::int64_t begin, std::int64_t end,
                  const std::function<void(std::int64_t, std::int64_t)>& body, std::int64_t min_chunk)
{
    const std::int64_t n = end - begin;
    if (n <= 0) return;
    const std::int64_t workers =
        std::min<std::int64_t>(max_threads(), std::max<std::int64_t>(1, n / std::max<std::int64_t>(1, min_chunk)));
    // Nested calls run inline on the worker that issued them.
    if (workers <= 1 || t_in_parallel) {
        body(begin, end);
        return;
    }
    std::vector<std::thread> threads;
    threads.reserve(static_cast<std::size_t>(workers - 1));
    const std::int64_t chunk = (n + workers - 1) / workers;
    std::exception_ptr failure;
    std::mutex failure_mutex;
    auto run = [&](std::int64_t lo, std::int64_t hi) {
        const bool outer = std::exchange(t_in_parallel, true);
        try {
            body(lo, hi);
        } catch (...) {
            std::lock_guard lock(failure_mutex);
            if (!failure) failure = std::current_exception();
        }
        t_in_parallel = outer;
    };
    for (std::int64_t w = 1; w < workers; ++w) {
        const std::int64_t lo = begin + w * chunk;
        const std::int64_t hi = std::min(end, lo + chunk);
        if (lo < hi) threads.emplace_back(run, lo, hi);
    }
    run(begin, std::min(end, begin + chunk));
    for (auto& t : threads) t.join();
    if (failure) std::rethrow_exception(failure);
}

std::string_view tool_version() { return "strokeseg 0.1.0 (vol-format 1, checkpoint-format 1)"; }

} // namespace strokeseg
