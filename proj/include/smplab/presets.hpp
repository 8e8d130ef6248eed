#pragma once

#include "smplab/coefficients.hpp"
#include "smplab/control.hpp"
#include "smplab/hilbert.hpp"
#include "smplab/noise.hpp"
#include "smplab/regression.hpp"

#include <array>
#include <numbers>

namespace smplab {

/// Spike value and placement; eps is ignored by the scaling study.
struct SpikeTemplate {
    double t0 = 0.0;
    double eps = 0.0;
    int u_index = 0;
};

/// Everything a run needs besides sample size and seed.
struct Problem {
    std::string name;
    GelfandTriple triple{Vector::Ones(1)};
    OperatorFamily family;
    CoefficientSet coeffs;
    ControlSet controls;
    CovarianceProcess cov = CovarianceProcess::constant(NuclearCovariance::default_spectrum(1));
    double horizon = 1.0;
    std::size_t steps = 128;
    std::size_t n_intervals = 1;
    std::vector<int> base_intervals{0};  // reference control u* per interval
    BasisSpec basis;
    std::vector<SpikeTemplate> spikes;   // duality / envelope / variational spikes
    SpikeTemplate scaling_spike;
    std::vector<double> eps_list;        // fractions of T for the scaling study
    std::size_t scaling_steps = 512;

    TimeGrid grid() const { return TimeGrid::uniform(horizon, steps); }
};

namespace presets {

/// θ(t) = M_1(t) / sqrt(q_1), the scalar factor behind random coefficients.
inline std::function<Vector(double, const PathContext&)> first_mode_factor(double q1) {
    const double s = 1.0 / std::sqrt(q1);
    return [s](double, const PathContext& ctx) { return Vector::Constant(1, s * ctx.m[0]); };
}

inline Problem zero(int n = 8) {
    Problem p;
    p.name = "zero";
    p.triple = GelfandTriple::linear(n);
    p.family = OperatorFamily::constant(-Matrix(p.triple.weights().asDiagonal()), 1.0, 0.1, 1.0);
    p.coeffs.dim = n;
    p.coeffs.evaluate = [n](double, const PathContext&, const Vector&, CoefficientValues& out) {
        out.a = 0.0;
        out.b.setZero(n);
        out.sigma.setZero(n);
        out.g.setZero(n, n);
    };
    p.coeffs.ell = [n](double, const Vector&) { return Vector::Zero(n).eval(); };
    p.coeffs.terminal = Vector::Zero(n);
    p.coeffs.x0 = Vector::Zero(n);
    p.controls = ControlSet::scalars({0.0});
    p.cov = CovarianceProcess::decaying(NuclearCovariance::default_spectrum(n));
    p.basis = {1, 0};
    p.spikes = {{0.25, 0.25, 0}};
    p.scaling_spike = {0.25, 0.0, 0};
    p.eps_list = {1.0 / 16, 1.0 / 32, 1.0 / 64, 1.0 / 128};
    p.scaling_steps = 128;
    return p;
}

/// n = 1 with constant coefficients; the adjoint has a closed form.
struct ScalarData {
    double A = -0.5, a = 0.3, b = 0.2, sigma = 0.4, g = 0.3, ell = 1.0, G = 2.0, x0 = 1.0, q = 0.5;
};

inline Problem scalar_closed_form(const ScalarData& d = {}) {
    Problem p;
    p.name = "scalar-closed-form";
    p.triple = GelfandTriple::uniform(1);
    p.family = OperatorFamily::constant(Matrix::Constant(1, 1, d.A), 1.0, 0.1, std::abs(d.A));
    p.coeffs.dim = 1;
    p.coeffs.evaluate = [d](double, const PathContext&, const Vector&, CoefficientValues& out) {
        out.a = d.a;
        out.b.setConstant(1, d.b);
        out.sigma.setConstant(1, d.sigma);
        out.g.setConstant(1, 1, d.g);
    };
    p.coeffs.ell = [d](double, const Vector&) { return Vector::Constant(1, d.ell).eval(); };
    p.coeffs.terminal = Vector::Constant(1, d.G);
    p.coeffs.x0 = Vector::Constant(1, d.x0);
    p.coeffs.bounds = {std::abs(d.a), std::abs(d.b), std::abs(d.sigma), std::abs(d.g)};
    p.controls = ControlSet::scalars({0.0});
    p.cov = CovarianceProcess::decaying(NuclearCovariance::from_spectrum(Vector::Constant(1, d.q)));
    p.steps = 256;
    p.basis = {1, 0};
    p.spikes = {{0.25, 0.25, 0}};
    p.scaling_spike = {0.25, 0.0, 0};
    p.eps_list = {1.0 / 16, 1.0 / 32, 1.0 / 64, 1.0 / 128};
    p.scaling_steps = 256;
    return p;
}

/// y(t) = e^{κ(T-t)} G + ℓ (e^{κ(T-t)} - 1) / κ with κ = A + a; z = 0.
inline double scalar_adjoint(const ScalarData& d, double horizon, double t) {
    const double kappa = d.A + d.a;
    const double e = std::exp(kappa * (horizon - t));
    return e * d.G + (kappa != 0.0 ? d.ell * (e - 1.0) / kappa : d.ell * (horizon - t));
}

/// n = 8, ν_i = i, A(t) = -0.5 diag(ν) + 0.1 sin(2πt) S with S skew,
/// a driven by θ = M_1 / sqrt(q_1), controls U = {(0,0), (1,0), (0,1)}: (1,0) shifts the drift, (0,1)
/// only the noise.
inline Problem benchmark_n8() {
    constexpr int n = 8;
    Problem p;
    p.name = "benchmark-n8";
    p.triple = GelfandTriple::linear(n);
    const Vector nu = p.triple.weights();
    Matrix skew = Matrix::Zero(n, n);
    for (int i = 0; i + 1 < n; ++i) {
        skew(i, i + 1) = 0.5;
        skew(i + 1, i) = -0.5;
    }
    p.family.evaluate = [nu, skew](double t, const PathContext&) {
        Matrix a = -0.5 * Matrix(nu.asDiagonal());
        a += 0.1 * std::sin(2.0 * std::numbers::pi * t) * skew;
        return a;
    };
    p.family.alpha = 0.5;
    p.family.lambda = 0.1;
    p.family.k1 = 0.6;
    const double q1 = 0.5;
    const double theta_scale = 1.0 / std::sqrt(q1);

    Vector beta(n), ones = Vector::Ones(n) / std::sqrt(double(n)), drift0(n);
    for (int i = 0; i < n; ++i) {
        beta(i) = std::ldexp(1.0, -i);
        drift0(i) = 0.3 / (1.0 + i);
    }
    Vector e1 = Vector::Unit(n, 0);
    p.coeffs.dim = n;
    p.coeffs.factor = first_mode_factor(q1);
    p.coeffs.evaluate = [=](double, const PathContext& ctx, const Vector& v, CoefficientValues& out) {
        out.a = 0.2 * std::tanh(theta_scale * ctx.m[0]) - 0.1 * v(0);
        out.b = drift0 + v(0) * beta;
        out.sigma = 0.2 * ones + 0.2 * v(1) * e1;
        out.g = (0.1 + 0.2 * v(0) + 0.6 * v(1)) * Matrix::Identity(n, n);
    };
    p.coeffs.ell = [=](double, const Vector& v) { return Vector(0.5 * ones + 0.3 * v(0) * e1 + 0.5 * v(1) * ones); };
    p.coeffs.terminal = ones;
    p.coeffs.x0 = Vector::Constant(n, 0.5);
    p.coeffs.x0(0) = 1.0;
    p.coeffs.bounds = {0.3, drift0.norm() + beta.norm(), 0.4, 0.7};
    p.controls = ControlSet({Vector::Zero(2), Vector::Unit(2, 0), Vector::Unit(2, 1)});
    p.cov = CovarianceProcess::decaying(NuclearCovariance::default_spectrum(n));
    p.steps = 128;
    p.basis = {1, 3};
    p.spikes = {{0.25, 0.25, 1}};
    p.scaling_spike = {0.25, 0.0, 2};
    p.eps_list = {1.0 / 16, 1.0 / 32, 1.0 / 64, 1.0 / 128, 1.0 / 256, 1.0 / 512};
    p.scaling_steps = 512;
    return p;
}

/// n = 4, U = {-1, 0, 1}, four control intervals with signs s = (+1, -1, -1, +1):
/// b = s_j v β + b0, so the optimal control is v = -s_j on interval j.
inline Problem mp_n4_u3() {
    constexpr int n = 4;
    Problem p;
    p.name = "mp-n4-U3";
    p.triple = GelfandTriple::linear(n);
    p.family = OperatorFamily::constant(-0.5 * Matrix(p.triple.weights().asDiagonal()), 0.5, 0.1, 0.5);
    const Vector beta = (Vector(n) << 1.0, 0.5, 0.25, 0.125).finished();
    const Vector b0 = Vector::Constant(n, 0.1);
    const std::array<double, 4> sign{1.0, -1.0, -1.0, 1.0};
    const double q1 = 0.5;
    const double theta_scale = 1.0 / std::sqrt(q1);
    const Vector ones = Vector::Ones(n);
    p.coeffs.dim = n;
    p.coeffs.factor = first_mode_factor(q1);
    p.coeffs.evaluate = [=](double t, const PathContext& ctx, const Vector& v, CoefficientValues& out) {
        const auto j = std::min<std::size_t>(static_cast<std::size_t>(t * 4.0), 3);
        out.a = 0.05 * std::tanh(theta_scale * ctx.m[0]);
        out.b = b0 + sign[j] * v(0) * beta;
        out.sigma = 0.1 * Vector::Unit(n, 0);
        out.g = 0.1 * Matrix::Identity(n, n);
    };
    p.coeffs.ell = [=](double, const Vector& v) { return Vector(0.5 * ones + 0.2 * v(0) * v(0) * ones); };
    p.coeffs.terminal = ones;
    p.coeffs.x0 = (Vector(n) << 1.0, 0.5, 0.5, 0.5).finished();
    p.coeffs.bounds = {0.05, (b0 + beta).norm(), 0.1, 0.1};
    p.controls = ControlSet::scalars({-1.0, 0.0, 1.0});
    p.cov = CovarianceProcess::decaying(NuclearCovariance::default_spectrum(n));
    p.steps = 128;
    p.n_intervals = 4;
    p.base_intervals = {0, 2, 2, 0};
    p.basis = {1, 3};
    p.spikes = {{0.125, 0.0625, 1}, {0.375, 0.0625, 0}, {0.625, 0.0625, 1}, {0.875, 0.0625, 2}};
    p.scaling_spike = {0.25, 0.0, 1};
    p.eps_list = {1.0 / 16, 1.0 / 32, 1.0 / 64, 1.0 / 128};
    p.scaling_steps = 128;
    return p;
}

inline std::vector<std::string> names() { return {"zero", "scalar-closed-form", "benchmark-n8", "mp-n4-U3"}; }

inline Problem by_name(const std::string& name) {
    if (name == "zero") return zero();
    if (name == "scalar-closed-form") return scalar_closed_form();
    if (name == "benchmark-n8") return benchmark_n8();
    if (name == "mp-n4-U3") return mp_n4_u3();
    throw std::invalid_argument("unknown preset '" + name + "'");
}

}  // namespace presets
}  // namespace smplab
