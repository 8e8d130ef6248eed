#pragma once

#include "smplab/coefficients.hpp"
#include "smplab/control.hpp"
#include "smplab/core.hpp"
#include "smplab/hilbert.hpp"
#include "smplab/noise.hpp"

#include <iomanip>
#include <memory>
#include <optional>
#include <ostream>

namespace smplab {

enum class Scheme { semi_implicit, explicit_euler };

inline const char* to_string(Scheme s) { return s == Scheme::semi_implicit ? "semi_implicit" : "explicit"; }

/// Scratch buffers for one path; not shared between threads.
struct StepWorkspace {
    CoefficientValues cv;
    Vector rhs;
    Vector tmp;
    explicit StepWorkspace(int n) : cv(n), rhs(n), tmp(n) {}
};

/// One step of the discretised forward equation
///
///   semi-implicit: (I - Δt A(t_{k+1})) x_{k+1} = x_k + Δt (a x_k + b) + [<σ, x_k> I + g] ΔM_k
///   explicit:      x_{k+1} = x_k + Δt (A(t_k) x_k + a x_k + b) + [<σ, x_k> I + g] ΔM_k
///
/// with a, b, σ, g frozen at (t_k, ω, u_k).
class ForwardStepper {
public:
    ForwardStepper(const CoefficientSet& coeffs, const OperatorFamily& family, const TimeGrid& grid, Scheme scheme)
        : coeffs_(&coeffs), family_(&family), grid_(&grid), scheme_(scheme) {
        coeffs.validate();
        if (family.deterministic) {
            const PathContext none{};
            const Matrix id = Matrix::Identity(coeffs.dim, coeffs.dim);
            for (std::size_t k = 0; k < grid.steps(); ++k) {
                if (scheme == Scheme::semi_implicit) {
                    Matrix a = family.evaluate(grid.time(k + 1), none);
                    require_same_dim(a.rows(), coeffs.dim, "ForwardStepper: operator");
                    lu_.emplace_back(id - grid.dt(k) * a);
                    check_lu(lu_.back(), k, 0);
                    ops_.push_back(std::move(a));
                } else {
                    ops_.push_back(family.evaluate(grid.time(k), none));
                    require_same_dim(ops_.back().rows(), coeffs.dim, "ForwardStepper: operator");
                }
            }
        }
    }

    Scheme scheme() const { return scheme_; }

    /// Operator used by step k: A(t_{k+1}) (semi-implicit) or A(t_k) (explicit).
    Matrix step_operator(std::size_t k, const PathContext& ctx_k, const PathContext& ctx_k1) const {
        if (family_->deterministic) return ops_[k];
        return scheme_ == Scheme::semi_implicit ? family_->evaluate(grid_->time(k + 1), ctx_k1)
                                                : family_->evaluate(grid_->time(k), ctx_k);
    }

    /// Drift-free, noise-driven part of step k: rhs = x + Δt(a x + b) + [<σ,x> I + g] ΔM.
    void explicit_part(std::size_t k, const PathContext& ctx_k, const Vector& v,
                       const Eigen::Ref<const Vector>& dm, const Eigen::Ref<const Vector>& x,
                       StepWorkspace& ws) const {
        const double dt = grid_->dt(k);
        coeffs_->evaluate(grid_->time(k), ctx_k, v, ws.cv);
        ws.rhs = x;
        ws.rhs += dt * (ws.cv.a * x + ws.cv.b);
        ws.rhs += ws.cv.sigma.dot(x) * dm;
        ws.rhs.noalias() += ws.cv.g * dm;
    }

    void step(std::size_t k, const PathContext& ctx_k, const PathContext& ctx_k1, const Vector& v,
              const Eigen::Ref<const Vector>& dm, const Eigen::Ref<const Vector>& x, Eigen::Ref<Vector> x_next,
              StepWorkspace& ws) const {
        explicit_part(k, ctx_k, v, dm, x, ws);
        finish(k, ctx_k, ctx_k1, x, x_next, ws);
    }

    /// Applies the operator part to ws.rhs.
    void finish(std::size_t k, const PathContext& ctx_k, const PathContext& ctx_k1,
                const Eigen::Ref<const Vector>& x, Eigen::Ref<Vector> x_next, StepWorkspace& ws) const {
        const double dt = grid_->dt(k);
        if (scheme_ == Scheme::semi_implicit) {
            if (family_->deterministic) {
                x_next = lu_[k].solve(ws.rhs);
            } else {
                const Matrix a = family_->evaluate(grid_->time(k + 1), ctx_k1);
                Eigen::PartialPivLU<Matrix> lu(Matrix::Identity(a.rows(), a.cols()) - dt * a);
                check_lu(lu, k, ctx_k.path);
                x_next = lu.solve(ws.rhs);
            }
        } else {
            if (family_->deterministic) {
                ws.tmp.noalias() = ops_[k] * x;
            } else {
                ws.tmp.noalias() = family_->evaluate(grid_->time(k), ctx_k) * x;
            }
            x_next = ws.rhs + dt * ws.tmp;
        }
    }

    /// R_k^T y with R_k = (I - Δt A(t_{k+1}))^{-1}; semi-implicit scheme only.
    Vector transpose_solve(std::size_t k, const PathContext& ctx_k1, const Eigen::Ref<const Vector>& y) const {
        if (scheme_ != Scheme::semi_implicit) throw std::logic_error("transpose_solve: semi-implicit scheme only");
        if (family_->deterministic) return lu_[k].transpose().solve(y);
        const Matrix a = family_->evaluate(grid_->time(k + 1), ctx_k1);
        Eigen::PartialPivLU<Matrix> lu(Matrix::Identity(a.rows(), a.cols()) - grid_->dt(k) * a);
        check_lu(lu, k, ctx_k1.path);
        return lu.transpose().solve(y);
    }

private:
    static void check_lu(const Eigen::PartialPivLU<Matrix>& lu, std::size_t k, std::size_t path) {
        const double rc = lu.rcond();
        if (!(rc > 1e-13)) {
            throw NumericalError("singular implicit matrix at step " + std::to_string(k) + ", path " +
                                 std::to_string(path));
        }
    }

    const CoefficientSet* coeffs_;
    const OperatorFamily* family_;
    const TimeGrid* grid_;
    Scheme scheme_;
    std::vector<Eigen::PartialPivLU<Matrix>> lu_;
    std::vector<Matrix> ops_;
};

/// Monte Carlo paths of the controlled state under one control.
class ForwardEnsemble {
public:
    ForwardEnsemble(std::shared_ptr<const NoiseEnsemble> noise, ControlProcess control, Scheme scheme, int dim)
        : noise_(std::move(noise)), control_(std::move(control)), scheme_(scheme), dim_(dim) {
        states_.assign(noise_->paths() * (noise_->steps() + 1) * static_cast<std::size_t>(dim_), 0.0);
    }

    const TimeGrid& grid() const { return noise_->grid(); }
    std::size_t paths() const { return noise_->paths(); }
    std::size_t steps() const { return noise_->steps(); }
    int dim() const { return dim_; }
    Scheme scheme() const { return scheme_; }
    const ControlProcess& control() const { return control_; }
    const NoiseEnsemble& noise() const { return *noise_; }
    const std::shared_ptr<const NoiseEnsemble>& noise_ptr() const { return noise_; }

    Eigen::Map<const RowMatrix> path_states(std::size_t p) const {
        return {states_.data() + p * stride(), static_cast<Eigen::Index>(steps() + 1), dim_};
    }
    Eigen::Map<RowMatrix> path_states(std::size_t p) {
        return {states_.data() + p * stride(), static_cast<Eigen::Index>(steps() + 1), dim_};
    }
    Eigen::Map<const Vector> state(std::size_t p, std::size_t k) const {
        return {states_.data() + p * stride() + k * static_cast<std::size_t>(dim_), dim_};
    }

private:
    std::size_t stride() const { return (steps() + 1) * static_cast<std::size_t>(dim_); }

    std::shared_ptr<const NoiseEnsemble> noise_;
    ControlProcess control_;
    Scheme scheme_;
    int dim_;
    std::vector<double> states_;
};

/// Integrates one path from step `k_from` (state already set) to the end.
inline void integrate_path(const ForwardStepper& stepper, const ControlProcess& control,
                           const MartingalePathView& noise, Eigen::Map<RowMatrix> states, std::size_t k_from,
                           StepWorkspace& ws) {
    const std::size_t L = noise.grid->steps();
    Vector x_next(states.cols());
    for (std::size_t k = k_from; k < L; ++k) {
        const auto kk = static_cast<Eigen::Index>(k);
        const Vector x = states.row(kk).transpose();
        stepper.step(k, noise.context(k), noise.context(k + 1), control.value(noise.index, k),
                     noise.increments.row(kk).transpose(), x, x_next, ws);
        if (!x_next.allFinite()) {
            throw NumericalError("non-finite state at step " + std::to_string(k) + ", path " +
                                 std::to_string(noise.index));
        }
        states.row(kk + 1) = x_next.transpose();
    }
}

inline ForwardEnsemble integrate(const CoefficientSet& coeffs, const OperatorFamily& family,
                                 const ControlProcess& control, std::shared_ptr<const NoiseEnsemble> noise,
                                 Scheme scheme = Scheme::semi_implicit, unsigned threads = 0) {
    control.validate(noise->grid(), noise->paths());
    require_same_dim(noise->dim(), coeffs.dim, "integrate: noise/state");
    const ForwardStepper stepper(coeffs, family, noise->grid(), scheme);
    ForwardEnsemble ens(noise, control, scheme, coeffs.dim);
    parallel_for(ens.paths(), threads, [&](std::size_t p) {
        StepWorkspace ws(coeffs.dim);
        auto states = ens.path_states(p);
        states.row(0) = coeffs.x0.transpose();
        integrate_path(stepper, control, noise->path(p), states, 0, ws);
    });
    return ens;
}

/// Max over paths and grid times of |<x(t_k) - x_0 - drift - ∫[<σ,x>+g] dM, η>|
/// for each test vector, with the drift quadrature of `scheme`.
inline std::vector<double> weak_residual(const ForwardEnsemble& ens, const CoefficientSet& coeffs,
                                         const OperatorFamily& family, const std::vector<Vector>& test_vectors,
                                         std::optional<Scheme> scheme = std::nullopt, unsigned threads = 0) {
    if (test_vectors.empty()) throw std::invalid_argument("weak_residual: need at least one test vector");
    const Scheme sch = scheme.value_or(ens.scheme());
    const auto& grid = ens.grid();
    const ForwardStepper stepper(coeffs, family, grid, sch);
    Matrix eta(ens.dim(), static_cast<Eigen::Index>(test_vectors.size()));
    for (std::size_t j = 0; j < test_vectors.size(); ++j) {
        require_same_dim(test_vectors[j].size(), ens.dim(), "weak_residual test vector");
        eta.col(static_cast<Eigen::Index>(j)) = test_vectors[j];
    }
    std::vector<Vector> per_path(ens.paths());
    parallel_for(ens.paths(), threads, [&](std::size_t p) {
        const auto noise = ens.noise().path(p);
        CoefficientValues cv(ens.dim());
        Vector acc = Vector::Zero(ens.dim());
        Vector worst = Vector::Zero(eta.cols());
        const Vector x0 = ens.state(p, 0);
        for (std::size_t k = 0; k < grid.steps(); ++k) {
            const auto kk = static_cast<Eigen::Index>(k);
            const Vector x = ens.state(p, k);
            const auto ctx = noise.context(k);
            coeffs.evaluate(grid.time(k), ctx, ens.control().value(p, k), cv);
            const Matrix a = stepper.step_operator(k, ctx, noise.context(k + 1));
            const Vector ax = sch == Scheme::semi_implicit ? Vector(a * ens.state(p, k + 1)) : Vector(a * x);
            const Vector dm = noise.increments.row(kk).transpose();
            acc += grid.dt(k) * (ax + cv.a * x + cv.b);
            acc += cv.sigma.dot(x) * dm + cv.g * dm;
            const Vector r = ens.state(p, k + 1) - x0 - acc;
            worst = worst.cwiseMax((eta.transpose() * r).cwiseAbs());
        }
        per_path[p] = std::move(worst);
    });
    std::vector<double> out(test_vectors.size(), 0.0);
    for (const auto& w : per_path) {
        for (std::size_t j = 0; j < out.size(); ++j) out[j] = std::max(out[j], w(static_cast<Eigen::Index>(j)));
    }
    return out;
}

/// E|x(t_k)|_K^2 per grid time with its Monte Carlo standard error.
inline std::vector<MeanStderr> second_moments(const ForwardEnsemble& ens) {
    std::vector<MeanStderr> out(ens.steps() + 1);
    std::vector<double> buf(ens.paths());
    for (std::size_t k = 0; k <= ens.steps(); ++k) {
        for (std::size_t p = 0; p < ens.paths(); ++p) buf[p] = ens.state(p, k).squaredNorm();
        out[k] = mean_stderr(buf);
    }
    return out;
}

/// Gronwall envelope for E|x|^2 over a window of length `width`:
/// C1 (E|x(start)|^2 + C2 width) with
///   C1 = exp(width (λ + 2 k_a + k2^2 + 2 k3^2 ||Q^{1/2}||_2^2 (1 + width)))
///   C2 = 1 + 2 k4^2 ||Q^{1/2}||_2^2.
struct GronwallConstants {
    double c1 = 1.0;
    double c2 = 1.0;
};

inline GronwallConstants gronwall_constants(double lambda, const CoefficientBounds& b, double sqrt_q_hs_sq,
                                            double width) {
    GronwallConstants c;
    c.c1 = std::exp(width * (lambda + 2.0 * b.k_a + b.k2 * b.k2 + 2.0 * b.k3 * b.k3 * sqrt_q_hs_sq * (1.0 + width)));
    c.c2 = 1.0 + 2.0 * b.k4 * b.k4 * sqrt_q_hs_sq;
    return c;
}

struct MomentBoundReport {
    double empirical_sup = 0.0;
    double envelope = 0.0;
    double initial_moment = 0.0;
    double rel_stderr = 0.0;
    double c1 = 1.0;
    double c2 = 1.0;
    bool pass = false;
};

namespace detail {

inline MomentBoundReport window_bound(const ForwardEnsemble& ens, std::size_t k_from, std::size_t k_to,
                                      double start_bound, const GronwallConstants& c, double width) {
    const auto m = second_moments(ens);
    MomentBoundReport r;
    r.c1 = c.c1;
    r.c2 = c.c2;
    r.initial_moment = m[k_from].mean;
    r.envelope = c.c1 * (start_bound + c.c2 * width);
    r.empirical_sup = -1.0;
    for (std::size_t k = k_from; k <= k_to; ++k) {
        if (m[k].mean > r.empirical_sup) {
            r.empirical_sup = m[k].mean;
            r.rel_stderr = m[k].mean > 0.0 ? m[k].stderr_ / m[k].mean : 0.0;
        }
    }
    r.pass = r.empirical_sup <= r.envelope * (1.0 + 3.0 * r.rel_stderr);
    return r;
}

}  // namespace detail

/// Envelope check on [t0, t0 + eps] for an ensemble driven by the spiked
/// control, started from E|x*(t0)|^2 (which the ensemble shares with x*).
inline MomentBoundReport moment_bound_check(const ForwardEnsemble& ens, const OperatorFamily& family,
                                            const CoefficientBounds& bounds, const NuclearCovariance& q_bound,
                                            double t0, double eps) {
    const auto k0 = ens.grid().index_of(t0);
    const auto k1 = ens.grid().index_of(t0 + eps);
    const auto c = gronwall_constants(family.lambda, bounds, q_bound.sqrt_hs_norm_sq(), eps);
    const double start = second_moments(ens)[k0].mean;
    return detail::window_bound(ens, k0, k1, start, c, eps);
}

/// Same envelope on [t0 + eps, T], restarted from the [t0, t0 + eps] envelope.
inline MomentBoundReport tail_moment_bound_check(const ForwardEnsemble& ens, const OperatorFamily& family,
                                                 const CoefficientBounds& bounds, const NuclearCovariance& q_bound,
                                                 double t0, double eps) {
    const auto head = moment_bound_check(ens, family, bounds, q_bound, t0, eps);
    const auto k1 = ens.grid().index_of(t0 + eps);
    const double width = ens.grid().horizon() - (t0 + eps);
    const auto c = gronwall_constants(family.lambda, bounds, q_bound.sqrt_hs_norm_sq(), width);
    return detail::window_bound(ens, k1, ens.steps(), head.envelope, c, width);
}

/// t, mean |x|_K^2, stderr.
inline void write_moment_csv(std::ostream& os, const ForwardEnsemble& ens) {
    const auto m = second_moments(ens);
    os << "t,mean_sq_norm,stderr\n" << std::setprecision(17);
    for (std::size_t k = 0; k < m.size(); ++k) os << ens.grid().time(k) << ',' << m[k].mean << ',' << m[k].stderr_ << '\n';
}

}  // namespace smplab
