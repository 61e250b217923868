#pragma once

#include <cstddef>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <memory>
#include <mutex>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

namespace amal {

namespace fs = std::filesystem;

std::string sha256_hex(std::string_view bytes);

std::string read_file(const fs::path& path);

/// Write through a temporary sibling and rename, so readers never see a
/// half-written file.
void write_file_atomic(const fs::path& path, std::string_view contents);

/// Append one line and fsync before returning.
void append_line_synced(const fs::path& path, std::string_view line);

/// Timestamp source. Deterministic runs use LogicalClock so persisted
/// artifacts stay byte-identical between runs.
class Clock {
public:
    virtual ~Clock() = default;
    virtual std::string now_iso() = 0;
};

class WallClock final : public Clock {
public:
    std::string now_iso() override;
};

/// Ticks one second per call, starting at the Unix epoch.
class LogicalClock final : public Clock {
public:
    std::string now_iso() override;

private:
    std::mutex mu_;
    std::int64_t tick_ = 0;
};

std::string format_iso_utc(std::int64_t unix_seconds);

std::unique_ptr<Clock> make_clock(bool deterministic);

/// mt19937_64 with explicit, library-independent conversions, so a given
/// seed gives the same stream with any standard library.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next() { return engine_(); }
    /// Uniform in [0, 1) with 53 random bits.
    double uniform01() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }
    /// Uniform integer in [0, n), rejection-sampled.
    std::uint64_t below(std::uint64_t n);
    double normal();

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::swap(v[i - 1], v[below(i)]);
        }
    }

private:
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

/// Seed derivation for independent sub-streams (splitmix64 finalizer).
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream);

unsigned default_workers();

/// Runs fn(i) for i in [0, n) on up to `workers` threads. Each index is
/// processed exactly once; the first exception is rethrown after joining.
template <typename Fn>
void parallel_for(std::size_t n, unsigned workers, Fn&& fn) {
    if (n == 0) return;
    if (workers <= 1 || n == 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::size_t threads = std::min<std::size_t>(workers, n);
    std::mutex mu;
    std::size_t next = 0;
    std::exception_ptr failure;
    auto body = [&] {
        for (;;) {
            std::size_t i;
            {
                std::lock_guard lock(mu);
                if (failure || next >= n) return;
                i = next++;
            }
            try {
                fn(i);
            } catch (...) {
                std::lock_guard lock(mu);
                if (!failure) failure = std::current_exception();
            }
        }
    };
    std::vector<std::thread> pool;
    pool.reserve(threads);
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(body);
    for (auto& th : pool) th.join();
    if (failure) std::rethrow_exception(failure);
}

/// Minimal RFC 4180 helpers used by the manifest and report writers.
namespace csv {
std::string escape(std::string_view field);
std::string join(std::span<const std::string> fields);
/// Splits one logical record. Throws std::invalid_argument on an
/// unterminated quote.
std::vector<std::string> split(std::string_view line);
}  // namespace csv

}  // namespace amal
