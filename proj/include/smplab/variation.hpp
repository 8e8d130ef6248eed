#pragma once

#include "smplab/forward.hpp"

namespace smplab {

/// Needle variation: u_spike on [t0, t0 + eps), base control elsewhere.
/// With `rule` set, the spike value is chosen per path from x*(t0).
struct SpikeSpec {
    double t0 = 0.0;
    double eps = 0.0;
    int u_index = 0;
    ControlProcess base;
    std::function<int(std::size_t path, const Vector& x_t0)> rule;
};

struct SpikeWindow {
    std::size_t k0 = 0;
    std::size_t k1 = 0;
};

inline SpikeWindow spike_window(const SpikeSpec& spec, const TimeGrid& grid) {
    if (!(spec.eps > 0.0)) throw std::invalid_argument("SpikeSpec: eps must be positive");
    if (spec.t0 < 0.0 || spec.t0 + spec.eps > grid.horizon() * (1.0 + 1e-12)) {
        throw std::invalid_argument("SpikeSpec: [t0, t0 + eps] leaves [0, T]");
    }
    SpikeWindow w{grid.index_of(spec.t0), grid.index_of(spec.t0 + spec.eps)};
    if (w.k1 <= w.k0) throw std::invalid_argument("SpikeSpec: eps is shorter than one step");
    return w;
}

/// u_eps; `xstar` supplies x*(t0) when the spike value is state dependent.
inline ControlProcess spike_control(const SpikeSpec& spec, const TimeGrid& grid,
                                    const ForwardEnsemble* xstar = nullptr) {
    const auto w = spike_window(spec, grid);
    if (spec.base.steps() != grid.steps()) throw std::invalid_argument("SpikeSpec: base control grid differs");
    if (!spec.rule) return spec.base.with_steps(w.k0, w.k1, spec.u_index);
    if (xstar == nullptr) throw std::invalid_argument("SpikeSpec: state-dependent spike needs x*");
    PathwiseSegment seg{w.k0, w.k1, w.k0, std::vector<int>(xstar->paths())};
    for (std::size_t p = 0; p < xstar->paths(); ++p) seg.per_path[p] = spec.rule(p, xstar->state(p, w.k0));
    return spec.base.with_segment(std::move(seg));
}

/// x_eps and x* on common noise; ξ = x_eps - x*.
class VariationEnsemble {
public:
    VariationEnsemble(std::shared_ptr<const ForwardEnsemble> base, ForwardEnsemble perturbed, SpikeWindow w,
                      SpikeSpec spec)
        : base_(std::move(base)), perturbed_(std::move(perturbed)), window_(w), spec_(std::move(spec)) {}

    const ForwardEnsemble& base() const { return *base_; }
    const std::shared_ptr<const ForwardEnsemble>& base_ptr() const { return base_; }
    const ForwardEnsemble& perturbed() const { return perturbed_; }
    const SpikeWindow& window() const { return window_; }
    const SpikeSpec& spec() const { return spec_; }
    std::size_t paths() const { return perturbed_.paths(); }
    std::size_t steps() const { return perturbed_.steps(); }

    Vector xi(std::size_t p, std::size_t k) const { return perturbed_.state(p, k) - base_->state(p, k); }

private:
    std::shared_ptr<const ForwardEnsemble> base_;
    ForwardEnsemble perturbed_;
    SpikeWindow window_;
    SpikeSpec spec_;
};

inline VariationEnsemble variation_ensemble(const SpikeSpec& spec, const CoefficientSet& coeffs,
                                            const OperatorFamily& family, std::shared_ptr<const ForwardEnsemble> xstar,
                                            unsigned threads = 0) {
    if (!(spec.base == xstar->control())) throw std::invalid_argument("variation_ensemble: x* was not driven by the base control");
    const auto w = spike_window(spec, xstar->grid());
    auto control = spike_control(spec, xstar->grid(), xstar.get());
    auto pert = integrate(coeffs, family, control, xstar->noise_ptr(), xstar->scheme(), threads);
    return VariationEnsemble(std::move(xstar), std::move(pert), w, spec);
}

/// Max over paths and steps of the gap between the stored ξ_{k+1} and one
/// step of the ξ equation
///   ξ_{k+1} = R_k [ξ_k + Δt (a* ξ_k + Δa x_eps + Δb) + (<σ*, ξ_k> + <Δσ, x_eps>) ΔM + Δg ΔM]
/// started from the stored ξ_k (Δ = coefficient under u_eps minus under u*).
inline double xi_dynamics_residual(const VariationEnsemble& var, const CoefficientSet& coeffs,
                                   const OperatorFamily& family, unsigned threads = 0) {
    const auto& grid = var.base().grid();
    const ForwardStepper stepper(coeffs, family, grid, var.base().scheme());
    std::vector<double> worst(var.paths(), 0.0);
    parallel_for(var.paths(), threads, [&](std::size_t p) {
        const auto noise = var.base().noise().path(p);
        StepWorkspace ws(coeffs.dim);
        CoefficientValues cs(coeffs.dim), ce(coeffs.dim);
        Vector next(coeffs.dim);
        for (std::size_t k = 0; k < grid.steps(); ++k) {
            const auto ctx = noise.context(k);
            const double dt = grid.dt(k);
            const Vector xi = var.xi(p, k);
            const Vector xe = var.perturbed().state(p, k);
            coeffs.evaluate(grid.time(k), ctx, var.base().control().value(p, k), cs);
            coeffs.evaluate(grid.time(k), ctx, var.perturbed().control().value(p, k), ce);
            const Vector dm = noise.increments.row(static_cast<Eigen::Index>(k)).transpose();
            ws.rhs = xi + dt * (cs.a * xi + (ce.a - cs.a) * xe + (ce.b - cs.b));
            ws.rhs += (cs.sigma.dot(xi) + (ce.sigma - cs.sigma).dot(xe)) * dm + (ce.g - cs.g) * dm;
            stepper.finish(k, ctx, noise.context(k + 1), xi, next, ws);
            worst[p] = std::max(worst[p], (next - var.xi(p, k + 1)).cwiseAbs().maxCoeff());
        }
    });
    return *std::max_element(worst.begin(), worst.end());
}

}  // namespace smplab
