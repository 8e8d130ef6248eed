#pragma once

#include "smplab/control.hpp"
#include "smplab/core.hpp"
#include "smplab/noise.hpp"

namespace smplab {

/// a, b, σ, g evaluated at one (t, ω, v).
struct CoefficientValues {
    double a = 0.0;
    Vector b;
    Vector sigma;
    Matrix g;

    explicit CoefficientValues(int n = 0) : b(Vector::Zero(n)), sigma(Vector::Zero(n)), g(Matrix::Zero(n, n)) {}
};

/// Declared uniform bounds: |a| <= k_a, |b|_K <= k2, |σ|_K <= k3 and
/// ||g||_op <= k4 (so ||g Q^{1/2}(t)||_2 <= k4 ||Q^{1/2}||_2).
struct CoefficientBounds {
    double k_a = 0.0;
    double k2 = 0.0;
    double k3 = 0.0;
    double k4 = 0.0;
};

/// Coefficients of the controlled equation and the cost data.
struct CoefficientSet {
    int dim = 0;
    /// Fills a, b, σ, g at (t, ω, v). Must only read predictable data from ctx.
    std::function<void(double t, const PathContext& ctx, const Vector& v, CoefficientValues& out)> evaluate;
    /// Running cost density ℓ(t, v); deterministic.
    std::function<Vector(double t, const Vector& v)> ell;
    Vector terminal;  // G
    Vector x0;
    CoefficientBounds bounds;
    /// Features of the randomness that drives the coefficients (regression
    /// inputs for the adjoint); empty when coefficients ignore ω.
    std::function<Vector(double t, const PathContext& ctx)> factor;

    CoefficientValues at(double t, const PathContext& ctx, const Vector& v) const {
        CoefficientValues out(dim);
        evaluate(t, ctx, v, out);
        return out;
    }

    void validate() const {
        if (dim <= 0) throw std::invalid_argument("CoefficientSet: dimension must be positive");
        if (!evaluate || !ell) throw std::invalid_argument("CoefficientSet: missing coefficient maps");
        require_same_dim(terminal.size(), dim, "CoefficientSet terminal G");
        require_same_dim(x0.size(), dim, "CoefficientSet x0");
    }
};

/// Checks the declared bounds on every (path, step, u) of the first
/// `max_paths` noise paths. worst_margin is the largest excess over a bound.
inline CheckReport check_coefficient_bounds(const CoefficientSet& coeffs, const ControlSet& set,
                                            const NoiseEnsemble& noise, std::size_t max_paths = 16) {
    CheckReport r;
    r.worst_margin = -std::numeric_limits<double>::infinity();
    CoefficientValues cv(coeffs.dim);
    for (std::size_t p = 0; p < std::min(max_paths, noise.paths()); ++p) {
        const auto view = noise.path(p);
        for (std::size_t k = 0; k < noise.steps(); ++k) {
            for (const auto& v : set.values()) {
                coeffs.evaluate(noise.grid().time(k), view.context(k), v, cv);
                const double g_op = cv.g.size() ? Eigen::JacobiSVD<Matrix>(cv.g).singularValues()(0) : 0.0;
                const double m = std::max({std::abs(cv.a) - coeffs.bounds.k_a, cv.b.norm() - coeffs.bounds.k2,
                                           cv.sigma.norm() - coeffs.bounds.k3, g_op - coeffs.bounds.k4});
                r.worst_margin = std::max(r.worst_margin, m);
            }
        }
    }
    r.pass = r.worst_margin <= 1e-12;
    return r;
}

}  // namespace smplab
