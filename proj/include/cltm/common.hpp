#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <exception>
#include <thread>
#include <vector>
#include <algorithm>

#include <Eigen/Dense>

namespace cltm {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using LabelMatrix = Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Rng = std::mt19937_64;

// Error taxonomy. Every module throws one of these; the CLI maps them to
// machine-readable error records.

class Error : public std::runtime_error {
public:
    Error(std::string kind, const std::string& what)
        : std::runtime_error(what), kind_(std::move(kind)) {}
    const std::string& kind() const noexcept { return kind_; }

private:
    std::string kind_;
};

/// Malformed or out-of-contract input (shapes, non-finite values, bad indices).
class InvalidInput : public Error {
public:
    explicit InvalidInput(const std::string& what) : Error("invalid_input", what) {}
};

/// A numerical routine could not produce a trustworthy answer.
class NumericalError : public Error {
public:
    explicit NumericalError(const std::string& what) : Error("numerical_error", what) {}
};

/// Raised by pairwise_distance when a label is conditionally deterministic at a query.
class DegenerateMarginal : public Error {
public:
    explicit DegenerateMarginal(const std::string& what) : Error("degenerate_marginal", what) {}
};

class TrainingError : public Error {
public:
    TrainingError(const std::string& what, int epoch)
        : Error("training_error", what), epoch_(epoch) {}
    int epoch() const noexcept { return epoch_; }

private:
    int epoch_;
};

class IoError : public Error {
public:
    explicit IoError(const std::string& what) : Error("io_error", what) {}
};

// splitmix64 finalizer; used to decorrelate derived seeds.
inline std::uint64_t mix_seed(std::uint64_t x) noexcept {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t fnv1a64(std::string_view s) noexcept {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

/// Per-stage seed: splitmix64(master ^ fnv1a64(stage)). Stages never share a stream.
inline std::uint64_t derive_seed(std::uint64_t master, std::string_view stage) noexcept {
    return mix_seed(master ^ fnv1a64(stage));
}

inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index) noexcept {
    return mix_seed(master ^ mix_seed(index + 0x632be59bd9b4e019ULL));
}

// Portable uniform draws. std::uniform_real_distribution is implementation
// defined; these are not, so artifacts are stable across standard libraries.
inline double uniform01(Rng& rng) {
    return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline std::size_t uniform_index(Rng& rng, std::size_t n) {
    // Lemire-style rejection would be tighter; modulo bias is < 2^-40 for n < 2^24.
    return static_cast<std::size_t>(rng() % n);
}

inline double standard_normal(Rng& rng) {
    // Box-Muller, one value per call.
    double u1 = uniform01(rng);
    while (u1 <= 0.0) u1 = uniform01(rng);
    const double u2 = uniform01(rng);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
}

template <typename Container>
void shuffle_in_place(Container& c, Rng& rng) {
    for (std::size_t i = c.size(); i > 1; --i) {
        const std::size_t j = uniform_index(rng, i);
        std::swap(c[i - 1], c[j]);
    }
}

inline bool all_finite(const Eigen::Ref<const Matrix>& m) {
    return m.allFinite();
}

/// Runs fn(begin, end) over contiguous chunks of [0, n) on up to `threads`
/// threads. The first exception raised by any chunk is rethrown.
template <typename Fn>
void parallel_for(std::size_t n, int threads, Fn&& fn) {
    const auto t = static_cast<std::size_t>(std::max(1, threads));
    if (t == 1 || n < 2) {
        fn(std::size_t{0}, n);
        return;
    }
    const std::size_t chunk = (n + t - 1) / t;
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors((n + chunk - 1) / chunk);
    for (std::size_t b = 0, i = 0; b < n; b += chunk, ++i) {
        pool.emplace_back([&, b, i] {
            try {
                fn(b, std::min(n, b + chunk));
            } catch (...) {
                errors[i] = std::current_exception();
            }
        });
    }
    for (auto& th : pool) th.join();
    for (const auto& e : errors)
        if (e) std::rethrow_exception(e);
}

}  // namespace cltm
