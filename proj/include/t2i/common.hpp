#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace t2i {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

// Invalid arguments / violated preconditions. Callers map this to exit code 1.
struct invalid_input : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Failures mid-computation (non-finite losses, broken files, ...). Exit code 2.
struct runtime_failure : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw invalid_input(msg);
}

inline bool all_finite(const Mat& m) {
    return m.allFinite();
}

inline void require_finite(const Mat& m, const std::string& what) {
    if (!m.allFinite()) throw invalid_input(what + ": non-finite entries");
}

// FNV-1a over the raw bytes of a matrix. Used by freeze-contract checks.
inline std::uint64_t bytes_hash(const Mat& m) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(m.data());
    const std::size_t n = sizeof(double) * static_cast<std::size_t>(m.size());
    std::uint64_t h = 14695981039346656037ull;
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 1099511628211ull;
    }
    return h;
}

}  // namespace t2i
