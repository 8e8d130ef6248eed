#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace smplab {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Raised when operands disagree in dimension.
class DimensionError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Raised for numerical breakdown (singular solves, non-finite values).
class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline void require_same_dim(Eigen::Index a, Eigen::Index b, const char* what) {
    if (a != b) {
        throw DimensionError(std::string(what) + ": dimension mismatch (" + std::to_string(a) +
                             " vs " + std::to_string(b) + ")");
    }
}

/// Randomness handle handed to coefficient and operator callbacks.
///
/// A coefficient evaluated at step k sees the path index, the left endpoint
/// t_k and the martingale value M(t_k); anything computed from these is
/// predictable.
struct PathContext {
    std::size_t path = 0;
    std::size_t step = 0;
    double t = 0.0;
    std::span<const double> m;

    Eigen::Map<const Vector> martingale() const {
        return {m.data(), static_cast<Eigen::Index>(m.size())};
    }
};

/// Pass/fail with the worst observed value of the checked quantity.
struct CheckReport {
    bool pass = true;
    double worst_margin = 0.0;
};

struct MeanStderr {
    double mean = 0.0;
    double stderr_ = 0.0;
};

/// Sample mean and standard error of the mean.
inline MeanStderr mean_stderr(std::span<const double> xs) {
    MeanStderr r;
    const auto n = xs.size();
    if (n == 0) return r;
    double s = 0.0;
    for (double x : xs) s += x;
    r.mean = s / static_cast<double>(n);
    if (n > 1) {
        double ss = 0.0;
        for (double x : xs) ss += (x - r.mean) * (x - r.mean);
        r.stderr_ = std::sqrt(ss / static_cast<double>(n - 1) / static_cast<double>(n));
    }
    return r;
}

inline bool is_power_of_two(std::size_t v) { return v != 0 && (v & (v - 1)) == 0; }

}  // namespace smplab
