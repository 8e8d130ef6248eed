#pragma once

#include "smplab/hamiltonian.hpp"
#include "smplab/regression.hpp"
#include "smplab/variation.hpp"

#include <array>

namespace smplab {

/// Backward solution (y, z, N) on the forward ensemble's paths.
///
/// Step k (L-1 down to 0), with R_k = (I - Δt A(t_{k+1}))^{-1}:
///   p                = R_k^T y_{k+1}
///   p ≈ ŷ_k + z_k ΔM_k  least squares on [φ, φ ⊗ ΔW_k] with φ the basis at t_k,
///                      zQ^½ projected onto range Q^½(t_k)
///   y_k              = ŷ_k + Δt (a ŷ_k + <Q^½, zQ^½>_2 σ + ℓ)
///   N_k              = p - ŷ_k - z_k ΔM_k
/// so N_k is orthogonal in sample to every φ_f and φ_f ΔW_k. For the explicit
/// forward scheme p = y_{k+1} and Δt A(t_k)^T ŷ_k joins the drift.
class AdjointTriple {
public:
    std::size_t paths() const { return paths_; }
    std::size_t steps() const { return steps_; }
    int dim() const { return dim_; }
    const ForwardEnsemble& forward() const { return *forward_; }
    const std::shared_ptr<const ForwardEnsemble>& forward_ptr() const { return forward_; }
    const BasisSpec& basis() const { return basis_; }

    Eigen::Map<const Vector> y(std::size_t p, std::size_t k) const { return at(y_, p, k, steps_ + 1); }
    /// Ê_k[R_k^T y_{k+1}], the value paired with step-k coefficients.
    Eigen::Map<const Vector> y_cond(std::size_t p, std::size_t k) const { return at(y_cond_, p, k, steps_); }
    Eigen::Map<const Vector> n_residual(std::size_t p, std::size_t k) const { return at(n_res_, p, k, steps_); }

    /// z Q^{1/2}(t_k) on path p.
    Matrix z_q(std::size_t p, std::size_t k) const {
        Vector phi(features_->size());
        feature_row(p, k, phi);
        const Vector red = fits_[k].reduce(phi);
        const auto& zb = fits_[k].zbeta;
        Matrix zeta = Matrix::Zero(dim_, dim_);
        for (Eigen::Index f = 0; f < red.size(); ++f) {
            zeta.noalias() += red(f) * zb.middleRows(f * dim_, dim_).transpose();
        }
        return zeta * forward_->noise().snapshot(k).range;
    }

    /// z itself, zero off the range of Q^{1/2}(t_k).
    Matrix z(std::size_t p, std::size_t k) const { return z_q(p, k) * forward_->noise().snapshot(k).sqrt_pinv; }

    const std::vector<bool>& ridge_steps() const { return ridge_; }
    bool any_ridge() const { return std::find(ridge_.begin(), ridge_.end(), true) != ridge_.end(); }
    /// max over unregularised steps of |Φ^T (p - Φβ)|_∞ / (|Φ|_F |p|_F).
    double normal_equation_defect() const { return normal_defect_; }

private:
    friend AdjointTriple solve_bspde(const CoefficientSet&, const OperatorFamily&,
                                     std::shared_ptr<const ForwardEnsemble>, const BasisSpec&, unsigned);

    Eigen::Map<const Vector> at(const std::vector<double>& buf, std::size_t p, std::size_t k, std::size_t rows) const {
        return {buf.data() + (p * rows + k) * static_cast<std::size_t>(dim_), dim_};
    }
    Eigen::Map<Vector> at_mut(std::vector<double>& buf, std::size_t p, std::size_t k, std::size_t rows) {
        return {buf.data() + (p * rows + k) * static_cast<std::size_t>(dim_), dim_};
    }

    void feature_row(std::size_t p, std::size_t k, Eigen::Ref<Vector> out) const {
        if (k == 0) {
            out.setZero();
            out(0) = 1.0;
            return;
        }
        const auto ctx = forward_->noise().path(p).context(k);
        const Vector f = factor_ ? factor_(forward_->grid().time(k), ctx) : Vector();
        features_->evaluate(forward_->state(p, k), f, out);
    }

    std::shared_ptr<const ForwardEnsemble> forward_;
    std::function<Vector(double, const PathContext&)> factor_;
    BasisSpec basis_;
    std::shared_ptr<const FeatureMap> features_;
    std::size_t paths_ = 0, steps_ = 0;
    int dim_ = 0;
    std::vector<double> y_, y_cond_, n_res_;
    /// Basis columns kept at one step, standardised as (φ - mu) / sd.
    struct StepFit {
        std::vector<Eigen::Index> cols;
        Vector mu, sd;
        Matrix zbeta;  // (kept columns * n) x n; rows f*n + j hold column j of zQ^½ against φ_f

        Vector reduce(const Vector& phi) const {
            Vector out(static_cast<Eigen::Index>(cols.size()));
            out(0) = 1.0;
            for (std::size_t j = 1; j < cols.size(); ++j) {
                const auto i = static_cast<Eigen::Index>(j);
                out(i) = (phi(cols[j]) - mu(i)) / sd(i);
            }
            return out;
        }
    };
    std::vector<StepFit> fits_;
    std::vector<bool> ridge_;
    double normal_defect_ = 0.0;
};

inline AdjointTriple solve_bspde(const CoefficientSet& coeffs, const OperatorFamily& family,
                                 std::shared_ptr<const ForwardEnsemble> forward, const BasisSpec& basis = {},
                                 unsigned threads = 0) {
    const auto& fwd = *forward;
    const auto& grid = fwd.grid();
    const int n = coeffs.dim;
    require_same_dim(fwd.dim(), n, "solve_bspde");
    const std::size_t N = fwd.paths();
    const std::size_t L = fwd.steps();
    const ForwardStepper stepper(coeffs, family, grid, fwd.scheme());
    const bool implicit = fwd.scheme() == Scheme::semi_implicit;

    AdjointTriple adj;
    adj.forward_ = forward;
    adj.factor_ = coeffs.factor;
    adj.basis_ = basis;
    adj.paths_ = N;
    adj.steps_ = L;
    adj.dim_ = n;
    const int factor_dim =
        coeffs.factor ? static_cast<int>(coeffs.factor(0.0, fwd.noise().path(0).context(0)).size()) : 0;
    adj.features_ = std::make_shared<const FeatureMap>(basis, n, factor_dim);
    const int nf = adj.features_->size();
    adj.y_.assign(N * (L + 1) * n, 0.0);
    adj.y_cond_.assign(N * L * n, 0.0);
    adj.n_res_.assign(N * L * n, 0.0);
    adj.fits_.assign(L, {});
    adj.ridge_.assign(L, false);

    for (std::size_t p = 0; p < N; ++p) adj.at_mut(adj.y_, p, L, L + 1) = coeffs.terminal;

    const auto rows = static_cast<Eigen::Index>(N);
    RowMatrix design(rows, nf), pmat(rows, n), centered(rows, n);
    for (std::size_t kk = L; kk-- > 0;) {
        const auto k = kk;
        const double dt = grid.dt(k);
        const auto& snap = fwd.noise().snapshot(k);
        const int basis_size = k == 0 ? 1 : nf;
        parallel_for(N, threads, [&](std::size_t p) {
            const auto noise = fwd.noise().path(p);
            const auto r = static_cast<Eigen::Index>(p);
            if (implicit) {
                pmat.row(r) = stepper.transpose_solve(k, noise.context(k + 1), adj.y(p, k + 1)).transpose();
            } else {
                pmat.row(r) = adj.y(p, k + 1).transpose();
            }
            Vector phi(nf);
            adj.feature_row(p, k, phi);
            design.row(r) = phi.transpose();
        });
        auto& fit = adj.fits_[k];
        fit.cols = {0};
        std::vector<double> mus{0.0}, sds{1.0};
        for (Eigen::Index j = 1; j < basis_size; ++j) {
            const double mu = design.col(j).mean();
            const double sd = std::sqrt((design.col(j).array() - mu).square().mean());
            if (sd > 1e-10 * (1.0 + std::abs(mu))) {
                fit.cols.push_back(j);
                mus.push_back(mu);
                sds.push_back(sd);
            }
        }
        fit.mu = Eigen::Map<const Vector>(mus.data(), static_cast<Eigen::Index>(mus.size()));
        fit.sd = Eigen::Map<const Vector>(sds.data(), static_cast<Eigen::Index>(sds.size()));
        const auto m = static_cast<Eigen::Index>(fit.cols.size());
        RowMatrix dsub(rows, m * (1 + n));
        dsub.col(0).setOnes();
        for (Eigen::Index j = 1; j < m; ++j) {
            dsub.col(j) = (design.col(fit.cols[static_cast<std::size_t>(j)]).array() - fit.mu(j)) / fit.sd(j);
        }
        const double inv_sqrt_dt = 1.0 / std::sqrt(dt);
        parallel_for(N, threads, [&](std::size_t p) {
            const auto r = static_cast<Eigen::Index>(p);
            const auto dw = fwd.noise().path(p).brownian_increments.row(static_cast<Eigen::Index>(k));
            for (Eigen::Index f = 0; f < m; ++f) {
                for (int j = 0; j < n; ++j) dsub(r, m + f * n + j) = dsub(r, f) * dw(j) * inv_sqrt_dt;
            }
        });
        const GramSolver solver(dsub);
        adj.ridge_[k] = solver.ridge();
        const auto fit_p = solver.solve(dsub, pmat);
        centered.noalias() = pmat - dsub.leftCols(m) * fit_p.beta.topRows(m);
        if (!solver.ridge()) {
            const Matrix ne = dsub.transpose() * (centered - dsub.rightCols(m * n) * fit_p.beta.bottomRows(m * n));
            const double scale = std::max(dsub.norm() * pmat.norm(), 1e-300);
            adj.normal_defect_ = std::max(adj.normal_defect_, ne.cwiseAbs().maxCoeff() / scale);
        }
        fit.zbeta = fit_p.beta.bottomRows(m * n) * inv_sqrt_dt;

        parallel_for(N, threads, [&](std::size_t p) {
            const auto r = static_cast<Eigen::Index>(p);
            const auto noise = fwd.noise().path(p);
            const auto ctx = noise.context(k);
            const Vector v = fwd.control().value(p, k);
            CoefficientValues cv(n);
            coeffs.evaluate(grid.time(k), ctx, v, cv);
            const Vector yhat = (pmat.row(r) - centered.row(r)).transpose();
            const Matrix zq = adj.z_q(p, k);
            adj.at_mut(adj.y_cond_, p, k, L) = yhat;
            Vector drift = cv.a * yhat + b_operator(cv.sigma, zq, snap.sqrt) + coeffs.ell(grid.time(k), v);
            if (!implicit) drift.noalias() += stepper.step_operator(k, ctx, noise.context(k + 1)).transpose() * yhat;
            adj.at_mut(adj.y_, p, k, L + 1) = yhat + dt * drift;
            adj.at_mut(adj.n_res_, p, k, L) =
                centered.row(r).transpose() - zq * noise.brownian_increments.row(static_cast<Eigen::Index>(k)).transpose();
        });
    }
    return adj;
}

/// t, E|y|^2, E||z Q^{1/2}||_2^2, E|N|^2 (last two are 0 at T).
inline void write_adjoint_csv(std::ostream& os, const AdjointTriple& adj) {
    const auto& grid = adj.forward().grid();
    os << "t,mean_sq_y,mean_sq_zq,mean_sq_n\n" << std::setprecision(17);
    std::vector<double> ys(adj.paths()), zs(adj.paths()), ns(adj.paths());
    for (std::size_t k = 0; k <= adj.steps(); ++k) {
        for (std::size_t p = 0; p < adj.paths(); ++p) {
            ys[p] = adj.y(p, k).squaredNorm();
            zs[p] = k < adj.steps() ? adj.z_q(p, k).squaredNorm() : 0.0;
            ns[p] = k < adj.steps() ? adj.n_residual(p, k).squaredNorm() : 0.0;
        }
        os << grid.time(k) << ',' << mean_stderr(ys).mean << ',' << mean_stderr(zs).mean << ','
           << mean_stderr(ns).mean << '\n';
    }
}

/// Mean over paths and steps of |N_k|^2.
inline double residual_energy(const AdjointTriple& adj) {
    double s = 0.0;
    for (std::size_t p = 0; p < adj.paths(); ++p) {
        for (std::size_t k = 0; k < adj.steps(); ++k) s += adj.n_residual(p, k).squaredNorm();
    }
    return s / static_cast<double>(adj.paths());
}

struct DualityReport {
    double lhs = 0.0;
    double rhs = 0.0;
    double rel_err = 0.0;
    double lhs_stderr = 0.0;
    double rhs_stderr = 0.0;
    double diff_stderr = 0.0;
    std::vector<double> terms;  // components of rhs
};

namespace detail {

inline DualityReport finish_duality(const std::vector<double>& lhs, const std::vector<double>& rhs) {
    DualityReport r;
    const auto l = mean_stderr(lhs);
    const auto q = mean_stderr(rhs);
    std::vector<double> d(lhs.size());
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = lhs[i] - rhs[i];
    r.lhs = l.mean;
    r.rhs = q.mean;
    r.lhs_stderr = l.stderr_;
    r.rhs_stderr = q.stderr_;
    r.diff_stderr = mean_stderr(d).stderr_;
    r.rel_err = std::abs(r.lhs - r.rhs) / std::max(std::abs(r.rhs), 1e-12);
    if (r.lhs == 0.0 && r.rhs == 0.0) r.rel_err = 0.0;
    return r;
}

inline void require_shared_forward(const AdjointTriple& adj, const VariationEnsemble& var) {
    if (adj.forward_ptr() != var.base_ptr()) {
        if (!(adj.forward().grid() == var.base().grid()) || adj.forward().noise_ptr() != var.base().noise_ptr()) {
            throw std::invalid_argument("duality check: adjoint and variation use different grids or noise");
        }
        if (!(adj.forward().control() == var.base().control())) {
            throw std::invalid_argument("duality check: adjoint and variation use different base controls");
        }
    }
}

}  // namespace detail

/// lhs = E[<y*(t0+ε), ξ(t0+ε)> + ∫_{t0}^{t0+ε} <ℓ(u*), ξ> dt]
/// rhs = E ∫_{t0}^{t0+ε} [Δa <y*, x_ε> + <y*, Δb> + <Δσ, x_ε> <Q^½, z*Q^½>_2 + <Δg Q^½, z*Q^½>_2] dt
inline DualityReport duality_check_inner(const AdjointTriple& adj, const VariationEnsemble& var,
                                         const CoefficientSet& coeffs) {
    detail::require_shared_forward(adj, var);
    const auto& grid = var.base().grid();
    const auto [k0, k1] = var.window();
    const std::size_t N = var.paths();
    std::vector<double> lhs(N), rhs(N);
    std::vector<std::array<double, 4>> parts(N);
    parallel_for(N, 0, [&](std::size_t p) {
        const auto noise = var.base().noise().path(p);
        CoefficientValues cs(coeffs.dim), ce(coeffs.dim);
        double l = adj.y(p, k1).dot(var.xi(p, k1));
        std::array<double, 4> t{0, 0, 0, 0};
        for (std::size_t k = k0; k < k1; ++k) {
            const double dt = grid.dt(k);
            const auto ctx = noise.context(k);
            const Vector& us = var.base().control().value(p, k);
            coeffs.evaluate(grid.time(k), ctx, us, cs);
            coeffs.evaluate(grid.time(k), ctx, var.perturbed().control().value(p, k), ce);
            const Vector xe = var.perturbed().state(p, k);
            const Vector y = adj.y_cond(p, k);
            const Matrix zq = adj.z_q(p, k);
            const Matrix& qs = var.base().noise().snapshot(k).sqrt;
            l += dt * coeffs.ell(grid.time(k), us).dot(var.xi(p, k));
            t[0] += dt * (ce.a - cs.a) * y.dot(xe);
            t[1] += dt * y.dot(ce.b - cs.b);
            t[2] += dt * (ce.sigma - cs.sigma).dot(xe) * hs_inner(qs, zq);
            t[3] += dt * hs_inner((ce.g - cs.g) * qs, zq);
        }
        lhs[p] = l;
        rhs[p] = t[0] + t[1] + t[2] + t[3];
        parts[p] = t;
    });
    auto r = detail::finish_duality(lhs, rhs);
    r.terms.assign(4, 0.0);
    for (const auto& t : parts) {
        for (int i = 0; i < 4; ++i) r.terms[i] += t[i] / static_cast<double>(N);
    }
    return r;
}

/// lhs = E<y*(t0+ε), ξ(t0+ε)>, rhs = E[∫_{t0+ε}^T <ℓ(u*), ξ> dt + <G, ξ(T)>].
inline DualityReport duality_check_tail(const AdjointTriple& adj, const VariationEnsemble& var,
                                        const CoefficientSet& coeffs) {
    detail::require_shared_forward(adj, var);
    const auto& grid = var.base().grid();
    const auto k1 = var.window().k1;
    const std::size_t N = var.paths();
    const std::size_t L = grid.steps();
    std::vector<double> lhs(N), rhs(N);
    parallel_for(N, 0, [&](std::size_t p) {
        lhs[p] = adj.y(p, k1).dot(var.xi(p, k1));
        double s = coeffs.terminal.dot(var.xi(p, L));
        for (std::size_t k = k1; k < L; ++k) {
            s += grid.dt(k) * coeffs.ell(grid.time(k), var.base().control().value(p, k)).dot(var.xi(p, k));
        }
        rhs[p] = s;
    });
    return detail::finish_duality(lhs, rhs);
}

}  // namespace smplab
