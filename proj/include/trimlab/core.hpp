#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace trimlab {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << ',';
        os << s[i];
    }
    os << ']';
    return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (auto d : s) n *= d;
    return n;
}

/// Raised by a primitive whose operand shapes do not conform.
class ShapeError : public std::invalid_argument {
   public:
    ShapeError(std::string primitive, Shape lhs, Shape rhs, const std::string& detail = {})
        : std::invalid_argument(primitive + ": shape mismatch " + shape_str(lhs) + " vs " +
                                shape_str(rhs) + (detail.empty() ? "" : " (" + detail + ")")),
          primitive_(std::move(primitive)),
          lhs_(std::move(lhs)),
          rhs_(std::move(rhs)) {}

    const std::string& primitive() const { return primitive_; }
    const Shape& lhs() const { return lhs_; }
    const Shape& rhs() const { return rhs_; }

   private:
    std::string primitive_;
    Shape lhs_, rhs_;
};

/// Raised when an operation produces a NaN or an infinity.
class NumericError : public std::runtime_error {
   public:
    NumericError(std::string where, const std::string& detail)
        : std::runtime_error(where + ": non-finite value (" + detail + ")"), where_(std::move(where)) {}
    const std::string& where() const { return where_; }

   private:
    std::string where_;
};

/// Invalid hyperparameters, configuration keys or mode combinations.
class ConfigError : public std::invalid_argument {
   public:
    using std::invalid_argument::invalid_argument;
};

/// Trim plan / mask assignment that does not fit the model it is applied to.
class PlanError : public std::invalid_argument {
   public:
    using std::invalid_argument::invalid_argument;
};

// ---------------------------------------------------------------------------
// Random numbers.
//
// Everything reproducible in this library draws from Rng: a xorshift64*
// stream whose state is seeded through splitmix64. Distribution transforms
// are written out here (not <random>) so that streams are identical across
// standard libraries.
// ---------------------------------------------------------------------------

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

/// Order-sensitive combination of several seed words into one.
inline std::uint64_t seed_mix(std::initializer_list<std::uint64_t> words) {
    std::uint64_t h = 0x6A09E667F3BCC909ull;
    for (auto w : words) h = splitmix64(h ^ splitmix64(w));
    return h;
}

/// FNV-1a, used to derive per-parameter seed streams from names.
inline std::uint64_t name_hash(const std::string& s) {
    std::uint64_t h = 0xCBF29CE484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001B3ull;
    }
    return h;
}

class Rng {
   public:
    explicit Rng(std::uint64_t seed) : state_(splitmix64(seed) | 1ull) {}

    std::uint64_t next_u64() {
        state_ ^= state_ >> 12;
        state_ ^= state_ << 25;
        state_ ^= state_ >> 27;
        return state_ * 0x2545F4914F6CDD1Dull;
    }

    /// Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n).
    std::size_t below(std::size_t n) { return static_cast<std::size_t>(uniform() * static_cast<double>(n)); }

    bool bernoulli(double p) { return uniform() < p; }

    /// Box-Muller; one draw per call, the partner value is discarded.
    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    template <class It>
    void shuffle(It first, It last) {
        const auto n = static_cast<std::size_t>(last - first);
        for (std::size_t i = n; i > 1; --i) std::swap(first[i - 1], first[below(i)]);
    }

   private:
    std::uint64_t state_;
};

// ---------------------------------------------------------------------------
// Multiply-accumulate instrumentation. Arithmetic kernels report the scalar
// MACs they execute; the counter only accumulates while a MacCounterScope is
// alive on the current thread.
// ---------------------------------------------------------------------------

namespace detail {
inline thread_local std::uint64_t* active_mac_counter = nullptr;
}

inline void record_macs(std::uint64_t n) {
    if (detail::active_mac_counter) *detail::active_mac_counter += n;
}

class MacCounterScope {
   public:
    MacCounterScope() : previous_(detail::active_mac_counter) { detail::active_mac_counter = &count_; }
    ~MacCounterScope() { detail::active_mac_counter = previous_; }
    MacCounterScope(const MacCounterScope&) = delete;
    MacCounterScope& operator=(const MacCounterScope&) = delete;

    std::uint64_t count() const { return count_; }

   private:
    std::uint64_t count_ = 0;
    std::uint64_t* previous_;
};

}  // namespace trimlab
