#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>

namespace toponets {

/// Bad arguments or inputs that violate an operation's preconditions.
class InputError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Malformed network graph (cycles, dangling children, invalid layout).
class StructuralError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed serialized payload.
class ParseError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Evidence has zero probability under the model.
class ImpossibleEvidence : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Numerical failure during training (NaN or infinite loss).
class TrainingError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

/// log(exp(a) + exp(b)) with -inf as the additive identity.
inline double log_add(double a, double b) {
    if (a == kNegInf) return b;
    if (b == kNegInf) return a;
    return a > b ? a + std::log1p(std::exp(b - a)) : b + std::log1p(std::exp(a - b));
}

/// Max-shifted log-sum-exp; -inf terms are ignored.
inline double log_sum_exp(std::span<const double> xs) {
    double m = kNegInf;
    for (double x : xs) m = x > m ? x : m;
    if (m == kNegInf) return kNegInf;
    double s = 0.0;
    for (double x : xs) s += std::exp(x - m);
    return m + std::log(s);
}

/// 64-bit FNV-1a, used for content hashes of model files and reports.
inline std::uint64_t fnv1a(std::span<const std::uint8_t> bytes,
                           std::uint64_t h = 1469598103934665603ULL) {
    for (auto b : bytes) {
        h ^= b;
        h *= 1099511628211ULL;
    }
    return h;
}

inline std::uint64_t fnv1a(const std::string& s) {
    return fnv1a(std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
}

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

std::string hex64(std::uint64_t v);

/// Verbosity from TOPONETS_VERBOSE (0 = quiet, default 1).
int verbosity();

}  // namespace toponets
