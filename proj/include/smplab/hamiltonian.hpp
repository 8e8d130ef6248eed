#pragma once

#include "smplab/coefficients.hpp"
#include "smplab/forward.hpp"
#include "smplab/hilbert.hpp"

namespace smplab {

/// Arguments of H(t, x, v, y, z Q^{1/2}); z_q is the composite z Q^{1/2}(t).
struct HamiltonianArgs {
    double t = 0.0;
    Vector x;
    Vector v;
    Vector y;
    Matrix z_q;
};

/// σ̃ = <σ, x> I + g.
inline Matrix sigma_tilde(const CoefficientValues& cv, const Vector& x) {
    require_same_dim(cv.sigma.size(), x.size(), "sigma_tilde");
    Matrix out = cv.g;
    out.diagonal().array() += cv.sigma.dot(x);
    return out;
}

inline Matrix sigma_tilde(double t, const PathContext& ctx, const Vector& x, const Vector& v,
                          const CoefficientSet& coeffs) {
    return sigma_tilde(coeffs.at(t, ctx, v), x);
}

/// B z = <Q^{1/2}(t), z>_2 σ.
inline Vector b_operator(const Vector& sigma, const Matrix& z, const Matrix& q_sqrt) {
    return hs_inner(q_sqrt, z) * sigma;
}

inline Vector b_operator(double t, const PathContext& ctx, const Vector& v, const Matrix& z,
                         const CoefficientSet& coeffs, const Matrix& q_sqrt) {
    return b_operator(coeffs.at(t, ctx, v).sigma, z, q_sqrt);
}

/// -<ℓ, x> - a <x, y> - <b, y> - <σ̃ Q^{1/2}, z_q>_2.
inline double hamiltonian(const CoefficientValues& cv, const Vector& ell, const Vector& x, const Vector& y,
                          const Matrix& z_q, const Matrix& q_sqrt) {
    require_same_dim(x.size(), y.size(), "hamiltonian");
    return -ell.dot(x) - cv.a * x.dot(y) - cv.b.dot(y) - hs_inner(sigma_tilde(cv, x) * q_sqrt, z_q);
}

/// Same value through <σ̃ Q^{1/2}, z_q>_2 = <B z_q, x> + <g Q^{1/2}, z_q>_2.
inline double hamiltonian_expanded(const CoefficientValues& cv, const Vector& ell, const Vector& x,
                                   const Vector& y, const Matrix& z_q, const Matrix& q_sqrt) {
    require_same_dim(x.size(), y.size(), "hamiltonian");
    return -ell.dot(x) - cv.a * x.dot(y) - cv.b.dot(y) - b_operator(cv.sigma, z_q, q_sqrt).dot(x) -
           hs_inner(cv.g * q_sqrt, z_q);
}

inline double hamiltonian(const HamiltonianArgs& args, const PathContext& ctx, const CoefficientSet& coeffs,
                          const Matrix& q_sqrt) {
    return hamiltonian(coeffs.at(args.t, ctx, args.v), coeffs.ell(args.t, args.v), args.x, args.y, args.z_q,
                       q_sqrt);
}

inline double hamiltonian_expanded(const HamiltonianArgs& args, const PathContext& ctx,
                                   const CoefficientSet& coeffs, const Matrix& q_sqrt) {
    return hamiltonian_expanded(coeffs.at(args.t, ctx, args.v), coeffs.ell(args.t, args.v), args.x, args.y,
                                args.z_q, q_sqrt);
}

/// ∇_x H = -ℓ - a y - B z_q; independent of x.
inline Vector grad_x_hamiltonian(const CoefficientValues& cv, const Vector& ell, const Vector& y, const Matrix& z_q,
                                 const Matrix& q_sqrt) {
    return -ell - cv.a * y - b_operator(cv.sigma, z_q, q_sqrt);
}

inline Vector grad_x_hamiltonian(double t, const PathContext& ctx, const Vector& v, const Vector& y,
                                 const Matrix& z_q, const CoefficientSet& coeffs, const Matrix& q_sqrt) {
    return grad_x_hamiltonian(coeffs.at(t, ctx, v), coeffs.ell(t, v), y, z_q, q_sqrt);
}

struct CostReport {
    double value = 0.0;
    double stderr_ = 0.0;
    std::vector<double> per_path;
};

/// Pathwise Σ_k Δt <ℓ(t_k, u_k), x(t_k)> + <G, x(T)>.
inline double path_cost(const ForwardEnsemble& ens, const CoefficientSet& coeffs, std::size_t p) {
    const auto& grid = ens.grid();
    double s = 0.0;
    for (std::size_t k = 0; k < grid.steps(); ++k) {
        s += grid.dt(k) * coeffs.ell(grid.time(k), ens.control().value(p, k)).dot(ens.state(p, k));
    }
    return s + coeffs.terminal.dot(ens.state(p, grid.steps()));
}

/// Monte Carlo estimate of J with left-endpoint quadrature.
inline CostReport cost(const ForwardEnsemble& ens, const CoefficientSet& coeffs) {
    if (ens.paths() == 0) throw std::invalid_argument("cost: empty ensemble");
    CostReport r;
    r.per_path.resize(ens.paths());
    for (std::size_t p = 0; p < ens.paths(); ++p) r.per_path[p] = path_cost(ens, coeffs, p);
    const auto ms = mean_stderr(r.per_path);
    r.value = ms.mean;
    r.stderr_ = ms.stderr_;
    return r;
}

}  // namespace smplab
