#pragma once

// Common types for the structural hierarchical learning library.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <limits>
#include <mutex>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace shl {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;
using Index = Eigen::Index;

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Bad input: malformed tree, shape mismatch, out-of-range parameter.
class ValidationError : public Error {
public:
    using Error::Error;
};

/// Failure while computing on valid input (divergence, singular system, I/O).
class RuntimeError : public Error {
public:
    using Error::Error;
};

inline void require(bool ok, const std::string& what) {
    if (!ok) throw ValidationError(what);
}

inline void require_shape(Index rows, Index cols, Index want_rows, Index want_cols,
                          const char* what) {
    if (rows != want_rows || cols != want_cols)
        throw ValidationError(std::string(what) + ": shape " + std::to_string(rows) + "x" +
                              std::to_string(cols) + ", expected " + std::to_string(want_rows) +
                              "x" + std::to_string(want_cols));
}

// Warnings are routed through a replaceable handler so tests and the CLI can
// capture them. Default writes to stderr.
using WarningHandler = std::function<void(const std::string&)>;

namespace detail {
inline WarningHandler& warning_handler() {
    static WarningHandler handler = [](const std::string& msg) {
        std::fputs(("warning: " + msg + "\n").c_str(), stderr);
    };
    return handler;
}
inline std::mutex& warning_mutex() {
    static std::mutex m;
    return m;
}
}  // namespace detail

inline WarningHandler set_warning_handler(WarningHandler handler) {
    std::lock_guard lock(detail::warning_mutex());
    return std::exchange(detail::warning_handler(), std::move(handler));
}

inline void warn(const std::string& msg) {
    std::lock_guard lock(detail::warning_mutex());
    if (detail::warning_handler()) detail::warning_handler()(msg);
}

/// Deterministic random source. The engine output is fully specified by the
/// standard; the distributions below are hand-rolled so that results do not
/// depend on the standard library implementation.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    /// Uniform in [0, 1).
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        constexpr double two_pi = 6.283185307179586476925286766559;
        spare_ = r * std::sin(two_pi * u2);
        has_spare_ = true;
        return r * std::cos(two_pi * u2);
    }

    /// Uniform integer in [0, bound).
    std::uint64_t below(std::uint64_t bound) {
        const std::uint64_t threshold = (0 - bound) % bound;
        for (;;) {
            const std::uint64_t r = engine_();
            if (r >= threshold) return r % bound;
        }
    }

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[below(i)]);
    }

    /// Derives an independent stream seed from a base seed and a stream key.
    static std::uint64_t derive(std::uint64_t seed, std::uint64_t key) {
        std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (key + 1);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    }

private:
    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace shl
