#pragma once

#include "smplab/core.hpp"
#include "smplab/parallel.hpp"

#include <Eigen/Eigenvalues>

#include <random>

namespace smplab {

/// Finite-dimensional Gelfand triple V ⊂ K ⊂ V' on R^n.
///
/// |y|_V^2 = Σ ν_i y_i^2, |y|_K^2 = Σ y_i^2, |y|_{V'}^2 = Σ y_i^2 / ν_i with
/// ν_i >= 1, so |y|_{V'} <= |y|_K <= |y|_V. All three share the duality
/// pairing Σ y_i η_i.
class GelfandTriple {
public:
    explicit GelfandTriple(Vector v_weights) : weights_(std::move(v_weights)) {
        if (weights_.size() == 0) throw std::invalid_argument("GelfandTriple: dimension must be positive");
        for (Eigen::Index i = 0; i < weights_.size(); ++i) {
            if (!(weights_(i) >= 1.0)) {
                throw std::invalid_argument("GelfandTriple: V-weights must satisfy nu_i >= 1");
            }
        }
    }

    static GelfandTriple uniform(int n) { return GelfandTriple(Vector::Ones(n)); }

    /// ν_i = 1 + step·(i-1).
    static GelfandTriple linear(int n, double step = 1.0) {
        Vector w(n);
        for (int i = 0; i < n; ++i) w(i) = 1.0 + step * i;
        return GelfandTriple(std::move(w));
    }

    int dim() const { return static_cast<int>(weights_.size()); }
    const Vector& weights() const { return weights_; }

    double norm_v_sq(const Eigen::Ref<const Vector>& y) const {
        require_same_dim(y.size(), weights_.size(), "GelfandTriple::norm_v");
        return (weights_.array() * y.array().square()).sum();
    }
    double norm_k_sq(const Eigen::Ref<const Vector>& y) const {
        require_same_dim(y.size(), weights_.size(), "GelfandTriple::norm_k");
        return y.squaredNorm();
    }
    double norm_vdual_sq(const Eigen::Ref<const Vector>& y) const {
        require_same_dim(y.size(), weights_.size(), "GelfandTriple::norm_vdual");
        return (y.array().square() / weights_.array()).sum();
    }
    double norm_v(const Eigen::Ref<const Vector>& y) const { return std::sqrt(norm_v_sq(y)); }
    double norm_k(const Eigen::Ref<const Vector>& y) const { return std::sqrt(norm_k_sq(y)); }
    double norm_vdual(const Eigen::Ref<const Vector>& y) const { return std::sqrt(norm_vdual_sq(y)); }

private:
    Vector weights_;
};

/// The drift operator A(t, ω) with its coercivity and boundedness constants.
struct OperatorFamily {
    std::function<Matrix(double t, const PathContext& ctx)> evaluate;
    double alpha = 1.0;
    double lambda = 1.0;
    double k1 = 0.0;
    /// True when A depends on t only; integrators then factor once per step.
    bool deterministic = true;

    static OperatorFamily constant(Matrix a, double alpha, double lambda, double k1) {
        OperatorFamily f;
        f.evaluate = [a = std::move(a)](double, const PathContext&) { return a; };
        f.alpha = alpha;
        f.lambda = lambda;
        f.k1 = k1;
        return f;
    }
};

/// Finite-dimensional Hilbert–Schmidt pairing <Φ1, Φ2>_2 = Σ_ij Φ1_ij Φ2_ij.
inline double hs_inner(const Eigen::Ref<const Matrix>& phi1, const Eigen::Ref<const Matrix>& phi2) {
    if (phi1.rows() != phi2.rows() || phi1.cols() != phi2.cols()) {
        throw DimensionError("hs_inner: dimension mismatch");
    }
    return (phi1.array() * phi2.array()).sum();
}

inline double hs_norm_sq(const Eigen::Ref<const Matrix>& phi) { return phi.squaredNorm(); }

/// Principal square root of a symmetric PSD matrix with its pseudo-inverse
/// and the orthogonal projector onto its range.
struct PsdRoot {
    Matrix sqrt;
    Matrix pinv;
    Matrix range;
    Vector eigenvalues;
};

inline PsdRoot psd_root(const Eigen::Ref<const Matrix>& q, double range_tol = 1e-14) {
    Eigen::SelfAdjointEigenSolver<Matrix> es(q);
    if (es.info() != Eigen::Success) throw NumericalError("psd_root: eigendecomposition failed");
    const Vector ev = es.eigenvalues().cwiseMax(0.0);
    const double scale = std::max(ev.maxCoeff(), 0.0);
    Vector root = ev.cwiseSqrt();
    Vector inv(ev.size());
    Vector on(ev.size());
    for (Eigen::Index i = 0; i < ev.size(); ++i) {
        const bool in_range = ev(i) > range_tol * std::max(scale, 1e-300) && ev(i) > 0.0;
        inv(i) = in_range ? 1.0 / root(i) : 0.0;
        on(i) = in_range ? 1.0 : 0.0;
    }
    const Matrix& v = es.eigenvectors();
    PsdRoot r;
    r.sqrt = v * root.asDiagonal() * v.transpose();
    r.sqrt = 0.5 * (r.sqrt + r.sqrt.transpose()).eval();
    r.pinv = v * inv.asDiagonal() * v.transpose();
    r.range = v * on.asDiagonal() * v.transpose();
    r.eigenvalues = es.eigenvalues();
    return r;
}

/// Symmetric PSD trace-class covariance Q with its principal square root.
class NuclearCovariance {
public:
    explicit NuclearCovariance(Matrix q) : matrix_(std::move(q)) {
        if (matrix_.rows() != matrix_.cols() || matrix_.rows() == 0) {
            throw DimensionError("NuclearCovariance: matrix must be square and non-empty");
        }
        if (!(matrix_ == matrix_.transpose())) {
            throw std::invalid_argument("NuclearCovariance: matrix must be exactly symmetric");
        }
        PsdRoot root = psd_root(matrix_);
        if (root.eigenvalues.minCoeff() < -1e-12) {
            throw std::invalid_argument("NuclearCovariance: matrix is not positive semi-definite");
        }
        sqrt_ = std::move(root.sqrt);
        trace_ = matrix_.trace();
    }

    /// Diagonal covariance with the given spectrum.
    static NuclearCovariance from_spectrum(const Vector& q) { return NuclearCovariance(Matrix(q.asDiagonal())); }

    /// q_i = 2^{-i}, i = 1..n.
    static NuclearCovariance default_spectrum(int n) {
        Vector q(n);
        for (int i = 0; i < n; ++i) q(i) = std::ldexp(1.0, -(i + 1));
        return from_spectrum(q);
    }

    int dim() const { return static_cast<int>(matrix_.rows()); }
    const Matrix& matrix() const { return matrix_; }
    const Matrix& sqrt() const { return sqrt_; }
    double trace() const { return trace_; }
    /// ||Q^{1/2}||_2^2, equal to tr Q.
    double sqrt_hs_norm_sq() const { return sqrt_.squaredNorm(); }

private:
    Matrix matrix_;
    Matrix sqrt_;
    double trace_ = 0.0;
};

namespace detail {

struct OperatorSample {
    double t;
    Vector m;
    Vector y;
};

inline OperatorSample draw_operator_sample(std::mt19937_64& rng, int n, double horizon) {
    std::uniform_real_distribution<double> unif(0.0, horizon);
    std::normal_distribution<double> normal;
    OperatorSample s;
    s.t = unif(rng);
    s.m.resize(n);
    for (int i = 0; i < n; ++i) s.m(i) = std::sqrt(s.t) * normal(rng);
    s.y.resize(n);
    do {
        for (int i = 0; i < n; ++i) s.y(i) = normal(rng);
    } while (s.y.norm() == 0.0);
    s.y.normalize();
    return s;
}

}  // namespace detail

/// Samples (t, ω, y) with y on the unit K-sphere and checks
/// 2<A y, y> + α|y|_V^2 - λ|y|_K^2 <= 1e-9.
inline CheckReport verify_coercivity(const OperatorFamily& family, const GelfandTriple& triple, int samples,
                                     std::uint64_t seed, double horizon = 1.0) {
    if (samples < 1) throw std::invalid_argument("verify_coercivity: samples must be >= 1");
    auto rng = stream_engine(seed, streams::diagnostics, 0);
    CheckReport r;
    r.worst_margin = -std::numeric_limits<double>::infinity();
    for (int s = 0; s < samples; ++s) {
        const auto smp = detail::draw_operator_sample(rng, triple.dim(), horizon);
        const PathContext ctx{0, 0, smp.t, {smp.m.data(), static_cast<std::size_t>(smp.m.size())}};
        const Matrix a = family.evaluate(smp.t, ctx);
        require_same_dim(a.rows(), triple.dim(), "verify_coercivity");
        const double lhs = 2.0 * smp.y.dot(a * smp.y) + family.alpha * triple.norm_v_sq(smp.y) -
                           family.lambda * triple.norm_k_sq(smp.y);
        r.worst_margin = std::max(r.worst_margin, lhs);
    }
    r.pass = r.worst_margin <= 1e-9;
    return r;
}

/// Samples (t, ω, y) and checks |A y|_{V'} - k1 |y|_V <= 1e-9.
inline CheckReport verify_operator_bound(const OperatorFamily& family, const GelfandTriple& triple, int samples,
                                         std::uint64_t seed, double horizon = 1.0) {
    if (samples < 1) throw std::invalid_argument("verify_operator_bound: samples must be >= 1");
    auto rng = stream_engine(seed, streams::diagnostics, 1);
    CheckReport r;
    r.worst_margin = -std::numeric_limits<double>::infinity();
    for (int s = 0; s < samples; ++s) {
        const auto smp = detail::draw_operator_sample(rng, triple.dim(), horizon);
        const PathContext ctx{0, 0, smp.t, {smp.m.data(), static_cast<std::size_t>(smp.m.size())}};
        const Matrix a = family.evaluate(smp.t, ctx);
        require_same_dim(a.rows(), triple.dim(), "verify_operator_bound");
        const Vector ay = a * smp.y;
        const double margin = triple.norm_vdual(ay) - family.k1 * triple.norm_v(smp.y);
        r.worst_margin = std::max(r.worst_margin, margin);
    }
    r.pass = r.worst_margin <= 1e-9;
    return r;
}

}  // namespace smplab
