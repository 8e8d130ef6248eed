#pragma once

#include "smplab/adjoint.hpp"
#include "smplab/hamiltonian.hpp"
#include "smplab/variation.hpp"

#include <map>

namespace smplab {

// ---------------------------------------------------------------------------
// Moment envelopes for ξ_ε

/// C6(ε) = exp((λ + 4k_a^2 + k2^2 + 2k_a + 3k3^2 ||Q^½||^2) ε)
///         [(6 k3^2 ||Q^½||^2 + 1) C1 (E|x*(t0)|^2 + C2 ε) + 1 + 12 k4^2]
inline double c6_constant(double lambda, const CoefficientBounds& b, double sqrt_q_hs_sq, double eps,
                          double x_star_t0_moment) {
    const auto c = gronwall_constants(lambda, b, sqrt_q_hs_sq, eps);
    const double rate = lambda + 4.0 * b.k_a * b.k_a + b.k2 * b.k2 + 2.0 * b.k_a + 3.0 * b.k3 * b.k3 * sqrt_q_hs_sq;
    return std::exp(rate * eps) *
           ((6.0 * b.k3 * b.k3 * sqrt_q_hs_sq + 1.0) * c.c1 * (x_star_t0_moment + c.c2 * eps) + 1.0 +
            12.0 * b.k4 * b.k4);
}

/// C5 = exp((λ + 2k_a + k3^2 ||Q^½||^2) width), the Gronwall factor of the
/// homogeneous ξ equation on [t0 + ε, T].
inline double c5_constant(double lambda, const CoefficientBounds& b, double sqrt_q_hs_sq, double width) {
    return std::exp((lambda + 2.0 * b.k_a + b.k3 * b.k3 * sqrt_q_hs_sq) * width);
}

// ---------------------------------------------------------------------------
// ε-scaling of sup E|ξ_ε|^2, streamed path by path

struct ScalingPoint {
    double eps = 0.0;
    double sup_mean = 0.0;
    double sup_stderr = 0.0;
    double t_at_sup = 0.0;
    double envelope = 0.0;  // C5 C6(ε) ε
};

struct ScalingReport {
    std::vector<ScalingPoint> points;
    double slope = 0.0;
    double intercept = 0.0;
    bool degenerate = false;
    std::vector<double> doubling_ratios;  // sup(2ε) / sup(ε)
    bool envelope_pass = true;
};

/// Least-squares line through (x_i, y_i).
inline std::pair<double, double> fit_line(const std::vector<double>& x, const std::vector<double>& y) {
    const auto n = static_cast<double>(x.size());
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        mx += x[i] / n;
        my += y[i] / n;
    }
    double sxy = 0, sxx = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
    }
    const double slope = sxx > 0 ? sxy / sxx : 0.0;
    return {slope, my - slope * mx};
}

struct ScalingSetup {
    const CoefficientSet* coeffs = nullptr;
    const OperatorFamily* family = nullptr;
    CovarianceProcess cov;
    TimeGrid grid;
    std::size_t n_paths = 0;
    std::uint64_t seed = 0;
    Scheme scheme = Scheme::semi_implicit;
    unsigned threads = 0;
};

/// `tmpl` fixes t0, the spike value and the base control; its eps is
/// replaced by each entry of eps_list. All ε share the same noise paths.
inline ScalingReport xi_scaling_study(const SpikeSpec& tmpl, const std::vector<double>& eps_list,
                                      const ScalingSetup& s) {
    if (eps_list.size() < 4) throw std::invalid_argument("xi_scaling_study: need at least 4 eps values");
    const auto& grid = s.grid;
    const auto& coeffs = *s.coeffs;
    const std::size_t L = grid.steps();
    const std::size_t E = eps_list.size();
    std::vector<SpikeWindow> windows;
    std::vector<ControlProcess> controls;
    for (double eps : eps_list) {
        SpikeSpec sp = tmpl;
        sp.eps = eps;
        if (sp.rule) throw std::invalid_argument("xi_scaling_study: state-dependent spikes are not streamed");
        windows.push_back(spike_window(sp, grid));
        controls.push_back(spike_control(sp, grid));
    }
    tmpl.base.validate(grid, s.n_paths);
    const auto snaps = covariance_snapshots(s.cov, grid);
    const ForwardStepper stepper(coeffs, *s.family, grid, s.scheme);
    const std::size_t k0 = windows.front().k0;
    const int n = coeffs.dim;

    // sums[e][k] and sums of squares of |ξ_k|^2, chunk-local then merged in order
    constexpr std::size_t chunk = 256;
    const std::size_t n_chunks = (s.n_paths + chunk - 1) / chunk;
    std::vector<std::vector<double>> part_sum(n_chunks, std::vector<double>(E * (L + 1), 0.0));
    std::vector<std::vector<double>> part_sq(n_chunks, std::vector<double>(E * (L + 1), 0.0));
    double t0_moment = 0.0;
    std::vector<double> part_t0(n_chunks, 0.0);
    parallel_chunks(s.n_paths, chunk, s.threads, [&](std::size_t c, std::size_t b, std::size_t e) {
        StreamedPath gen(snaps, grid, n);
        StepWorkspace ws(n);
        RowMatrix xs(static_cast<Eigen::Index>(L + 1), n), xe(static_cast<Eigen::Index>(L + 1), n);
        for (std::size_t p = b; p < e; ++p) {
            const auto view = gen.generate(s.seed, p);
            Eigen::Map<RowMatrix> ms(xs.data(), xs.rows(), n);
            ms.row(0) = coeffs.x0.transpose();
            integrate_path(stepper, tmpl.base, view, ms, 0, ws);
            part_t0[c] += xs.row(static_cast<Eigen::Index>(k0)).squaredNorm();
            for (std::size_t ei = 0; ei < E; ++ei) {
                const auto kb = windows[ei].k0;
                Eigen::Map<RowMatrix> me(xe.data(), xe.rows(), n);
                me.topRows(static_cast<Eigen::Index>(kb + 1)) = xs.topRows(static_cast<Eigen::Index>(kb + 1));
                integrate_path(stepper, controls[ei], view, me, kb, ws);
                for (std::size_t k = 0; k <= L; ++k) {
                    const double v = (xe.row(static_cast<Eigen::Index>(k)) - xs.row(static_cast<Eigen::Index>(k))).squaredNorm();
                    part_sum[c][ei * (L + 1) + k] += v;
                    part_sq[c][ei * (L + 1) + k] += v * v;
                }
            }
        }
    });
    std::vector<double> sum(E * (L + 1), 0.0), sq(E * (L + 1), 0.0);
    for (std::size_t c = 0; c < n_chunks; ++c) {
        for (std::size_t i = 0; i < sum.size(); ++i) {
            sum[i] += part_sum[c][i];
            sq[i] += part_sq[c][i];
        }
        t0_moment += part_t0[c];
    }
    const double N = static_cast<double>(s.n_paths);
    t0_moment /= N;

    ScalingReport r;
    const double qhs = s.cov.bound.sqrt_hs_norm_sq();
    std::vector<double> lx, ly;
    for (std::size_t ei = 0; ei < E; ++ei) {
        ScalingPoint pt;
        pt.eps = eps_list[ei];
        pt.sup_mean = -1.0;
        for (std::size_t k = windows[ei].k1; k <= L; ++k) {
            const double m = sum[ei * (L + 1) + k] / N;
            if (m > pt.sup_mean) {
                pt.sup_mean = m;
                const double var = N > 1 ? std::max(sq[ei * (L + 1) + k] / N - m * m, 0.0) * N / (N - 1) : 0.0;
                pt.sup_stderr = std::sqrt(var / N);
                pt.t_at_sup = grid.time(k);
            }
        }
        const double width = grid.horizon() - (tmpl.t0 + pt.eps);
        pt.envelope = c5_constant(s.family->lambda, coeffs.bounds, qhs, width) *
                      c6_constant(s.family->lambda, coeffs.bounds, qhs, pt.eps, t0_moment) * pt.eps;
        if (pt.sup_mean > pt.envelope * (1.0 + 3.0 * (pt.sup_mean > 0 ? pt.sup_stderr / pt.sup_mean : 0.0))) {
            r.envelope_pass = false;
        }
        if (pt.sup_mean > 0.0) {
            lx.push_back(std::log(pt.eps));
            ly.push_back(std::log(pt.sup_mean));
        }
        r.points.push_back(pt);
    }
    r.degenerate = lx.size() < 2;
    if (!r.degenerate) std::tie(r.slope, r.intercept) = fit_line(lx, ly);
    for (std::size_t i = 0; i < E; ++i) {
        for (std::size_t j = 0; j < E; ++j) {
            if (std::abs(eps_list[j] - 2.0 * eps_list[i]) < 1e-12 * eps_list[j] && r.points[i].sup_mean > 0.0) {
                r.doubling_ratios.push_back(r.points[j].sup_mean / r.points[i].sup_mean);
            }
        }
    }
    return r;
}

inline void write_scaling_csv(std::ostream& os, const ScalingReport& r) {
    os << "eps,sup_mean_sq_xi,stderr,t_at_sup,envelope,slope\n" << std::setprecision(17);
    for (const auto& p : r.points) {
        os << p.eps << ',' << p.sup_mean << ',' << p.sup_stderr << ',' << p.t_at_sup << ',' << p.envelope << ','
           << r.slope << '\n';
    }
}

// ---------------------------------------------------------------------------
// Variational inequality

struct VariationalReport {
    double eps = 0.0;
    double total = 0.0;  // E Σ_window Δt [H(u*) - H(u)] with x*
    double total_stderr = 0.0;
    std::array<double, 5> terms{};  // ℓ, a, σ, b, g differences
    double total_eps_based = 0.0;   // same terms with x_ε
    double remainder = 0.0;         // total_eps_based - total
    double remainder_stderr = 0.0;
    double remainder_over_eps = 0.0;
    double cost_difference = 0.0;   // J(u_ε) - J(u*)
    double cost_difference_stderr = 0.0;
    bool pass = true;               // total >= -3 stderr
};

namespace detail {

/// Δt [<Δℓ, x> + Δa <y, x> + <Δσ, x><Q^½, zQ^½> + <y, Δb> + <Δg Q^½, zQ^½>], one entry per term.
inline std::array<double, 5> variation_terms(const CoefficientValues& ce, const CoefficientValues& cs,
                                             const Vector& ell_e, const Vector& ell_s, const Vector& x,
                                             const Vector& y, const Matrix& zq, const Matrix& qs, double dt) {
    const double pair = hs_inner(qs, zq);
    return {dt * (ell_e - ell_s).dot(x), dt * (ce.a - cs.a) * y.dot(x), dt * (ce.sigma - cs.sigma).dot(x) * pair,
            dt * y.dot(ce.b - cs.b), dt * hs_inner((ce.g - cs.g) * qs, zq)};
}

}  // namespace detail

inline VariationalReport variational_inequality(const VariationEnsemble& var, const CoefficientSet& coeffs,
                                                const AdjointTriple& adj) {
    detail::require_shared_forward(adj, var);
    const auto& grid = var.base().grid();
    const auto [k0, k1] = var.window();
    const std::size_t N = var.paths();
    std::vector<double> tot(N), tot_e(N), dj(N);
    std::vector<std::array<double, 5>> parts(N);
    parallel_for(N, 0, [&](std::size_t p) {
        const auto noise = var.base().noise().path(p);
        CoefficientValues cs(coeffs.dim), ce(coeffs.dim);
        std::array<double, 5> acc{};
        double acc_e = 0.0;
        for (std::size_t k = k0; k < k1; ++k) {
            const double t = grid.time(k);
            const auto ctx = noise.context(k);
            const Vector& us = var.base().control().value(p, k);
            const Vector& ue = var.perturbed().control().value(p, k);
            coeffs.evaluate(t, ctx, us, cs);
            coeffs.evaluate(t, ctx, ue, ce);
            const Vector ls = coeffs.ell(t, us), le = coeffs.ell(t, ue);
            const Vector y = adj.y_cond(p, k);
            const Matrix zq = adj.z_q(p, k);
            const Matrix& qs = var.base().noise().snapshot(k).sqrt;
            const auto a = detail::variation_terms(ce, cs, le, ls, var.base().state(p, k), y, zq, qs, grid.dt(k));
            const auto b = detail::variation_terms(ce, cs, le, ls, var.perturbed().state(p, k), y, zq, qs, grid.dt(k));
            for (int i = 0; i < 5; ++i) {
                acc[i] += a[i];
                acc_e += b[i];
            }
        }
        parts[p] = acc;
        tot[p] = acc[0] + acc[1] + acc[2] + acc[3] + acc[4];
        tot_e[p] = acc_e;
        dj[p] = path_cost(var.perturbed(), coeffs, p) - path_cost(var.base(), coeffs, p);
    });
    VariationalReport r;
    r.eps = grid.time(k1) - grid.time(k0);
    const auto t = mean_stderr(tot);
    r.total = t.mean;
    r.total_stderr = t.stderr_;
    for (const auto& a : parts) {
        for (int i = 0; i < 5; ++i) r.terms[i] += a[i] / static_cast<double>(N);
    }
    r.total_eps_based = mean_stderr(tot_e).mean;
    r.remainder = r.total_eps_based - r.total;
    std::vector<double> rem(N);
    for (std::size_t p = 0; p < N; ++p) rem[p] = tot_e[p] - tot[p];
    r.remainder_stderr = mean_stderr(rem).stderr_;
    r.remainder_over_eps = r.remainder / r.eps;
    const auto d = mean_stderr(dj);
    r.cost_difference = d.mean;
    r.cost_difference_stderr = d.stderr_;
    r.pass = r.total >= -3.0 * r.total_stderr;
    return r;
}

inline void write_variational_csv(std::ostream& os, const std::vector<VariationalReport>& rs) {
    os << "eps,total,stderr,term_ell,term_a,term_sigma,term_b,term_g,total_eps_based,remainder,remainder_stderr,"
          "remainder_over_eps,cost_difference,cost_difference_stderr\n"
       << std::setprecision(17);
    for (const auto& r : rs) {
        os << r.eps << ',' << r.total << ',' << r.total_stderr;
        for (double v : r.terms) os << ',' << v;
        os << ',' << r.total_eps_based << ',' << r.remainder << ',' << r.remainder_stderr << ',' << r.remainder_over_eps << ','
           << r.cost_difference << ',' << r.cost_difference_stderr << '\n';
    }
}

// ---------------------------------------------------------------------------
// Control optimisation over piecewise-constant controls

enum class SearchMode { exhaustive, coordinate_descent };

inline const char* to_string(SearchMode m) {
    return m == SearchMode::exhaustive ? "exhaustive" : "coordinate_descent";
}

struct OptimizeResult {
    ControlProcess control;
    std::vector<int> intervals;
    double cost = 0.0;
    double cost_stderr = 0.0;
    SearchMode mode = SearchMode::exhaustive;
    std::size_t evaluations = 0;
    std::map<std::vector<int>, double> evaluated;  // every candidate and its J
};

/// J of one control without storing the ensemble.
inline CostReport evaluate_cost(const CoefficientSet& coeffs, const OperatorFamily& family,
                                const ControlProcess& control, const NoiseEnsemble& noise,
                                Scheme scheme = Scheme::semi_implicit, unsigned threads = 0) {
    control.validate(noise.grid(), noise.paths());
    const auto& grid = noise.grid();
    const ForwardStepper stepper(coeffs, family, grid, scheme);
    const std::size_t L = grid.steps();
    CostReport r;
    r.per_path.assign(noise.paths(), 0.0);
    parallel_chunks(noise.paths(), 64, threads, [&](std::size_t, std::size_t b, std::size_t e) {
        StepWorkspace ws(coeffs.dim);
        RowMatrix xs(static_cast<Eigen::Index>(L + 1), coeffs.dim);
        for (std::size_t p = b; p < e; ++p) {
            Eigen::Map<RowMatrix> m(xs.data(), xs.rows(), xs.cols());
            m.row(0) = coeffs.x0.transpose();
            integrate_path(stepper, control, noise.path(p), m, 0, ws);
            double s = 0.0;
            for (std::size_t k = 0; k < L; ++k) {
                s += grid.dt(k) * coeffs.ell(grid.time(k), control.value(p, k)).dot(xs.row(static_cast<Eigen::Index>(k)).transpose());
            }
            r.per_path[p] = s + coeffs.terminal.dot(xs.row(static_cast<Eigen::Index>(L)).transpose());
        }
    });
    const auto ms = mean_stderr(r.per_path);
    r.value = ms.mean;
    r.stderr_ = ms.stderr_;
    return r;
}

struct OptimizeOptions {
    SearchMode mode = SearchMode::exhaustive;
    std::size_t max_evaluations = 4096;
    Scheme scheme = Scheme::semi_implicit;
    unsigned threads = 0;
};

/// Minimises J over controls constant on n_intervals equal intervals, with
/// common noise. Ties keep the lexicographically smallest index sequence.
inline OptimizeResult optimize_control(const CoefficientSet& coeffs, const OperatorFamily& family,
                                       const NoiseEnsemble& noise, const ControlSet& U, std::size_t n_intervals,
                                       const OptimizeOptions& opt = {}) {
    if (n_intervals == 0) throw std::invalid_argument("optimize_control: need at least one interval");
    OptimizeResult res;
    res.mode = opt.mode;
    auto eval = [&](const std::vector<int>& idx) {
        auto it = res.evaluated.find(idx);
        if (it != res.evaluated.end()) return it->second;
        const auto c = ControlProcess::piecewise_constant(U, noise.grid(), idx);
        const double j = evaluate_cost(coeffs, family, c, noise, opt.scheme, opt.threads).value;
        res.evaluated.emplace(idx, j);
        ++res.evaluations;
        return j;
    };
    std::vector<int> best(n_intervals, 0);
    double best_j = 0.0;
    if (opt.mode == SearchMode::exhaustive) {
        double total = 1.0;
        for (std::size_t i = 0; i < n_intervals; ++i) total *= static_cast<double>(U.size());
        if (U.size() > 8 || n_intervals > 8 || total > static_cast<double>(opt.max_evaluations)) {
            throw std::invalid_argument("optimize_control: exhaustive search needs " + std::to_string(total) +
                                        " evaluations (budget " + std::to_string(opt.max_evaluations) +
                                        "); use coordinate-descent mode");
        }
        std::vector<int> idx(n_intervals, 0);
        best_j = eval(idx);
        best = idx;
        while (true) {
            std::size_t pos = n_intervals;
            while (pos > 0) {
                --pos;
                if (static_cast<std::size_t>(++idx[pos]) < U.size()) break;
                idx[pos] = 0;
                if (pos == 0) {
                    pos = n_intervals;
                    break;
                }
            }
            if (pos == n_intervals) break;
            const double j = eval(idx);
            if (j < best_j) {
                best_j = j;
                best = idx;
            }
        }
    } else {
        best_j = eval(best);
        bool improved = true;
        while (improved) {
            improved = false;
            for (std::size_t i = 0; i < n_intervals; ++i) {
                for (std::size_t u = 0; u < U.size(); ++u) {
                    auto cand = best;
                    cand[i] = static_cast<int>(u);
                    const double j = eval(cand);
                    if (j < best_j) {
                        best_j = j;
                        best = cand;
                        improved = true;
                    }
                }
            }
        }
    }
    res.intervals = best;
    res.control = ControlProcess::piecewise_constant(U, noise.grid(), best);
    const auto final_cost = evaluate_cost(coeffs, family, res.control, noise, opt.scheme, opt.threads);
    res.cost = final_cost.value;
    res.cost_stderr = final_cost.stderr_;
    return res;
}

// ---------------------------------------------------------------------------
// Pointwise Hamiltonian condition

struct MarginEntry {
    std::size_t k = 0;
    double t = 0.0;
    int u_index = 0;
    double margin = 0.0;  // E[H(u) - H(u*)]
    double stderr_ = 0.0;
    bool violation = false;
};

struct MaximumPrincipleReport {
    std::vector<MarginEntry> margins;
    std::vector<MarginEntry> violations;
    bool pass = true;
};

/// H(t, x, u, y, zQ^½) - H(t, x, u*, y, zQ^½) from coefficient differences only.
inline double hamiltonian_difference(const CoefficientValues& cu, const CoefficientValues& cs, const Vector& ell_u,
                                     const Vector& ell_s, const Vector& x, const Vector& y, const Matrix& zq,
                                     const Matrix& qs) {
    const double pair = hs_inner(qs, zq);
    return -(ell_u - ell_s).dot(x) - (cu.a - cs.a) * x.dot(y) - (cu.b - cs.b).dot(y) -
           (cu.sigma - cs.sigma).dot(x) * pair - hs_inner((cu.g - cs.g) * qs, zq);
}

/// Δ(t_k, u) = E[H(u) - H(u*)] at (x*, y*, z*Q^½) for every step and u ∈ U;
/// a violation is Δ > 3 standard errors.
inline MaximumPrincipleReport maximum_principle_check(const AdjointTriple& adj, const CoefficientSet& coeffs,
                                                      const ControlSet& U) {
    const auto& fwd = adj.forward();
    const auto& ustar = fwd.control();
    if (ustar.set().size() != U.size()) throw std::invalid_argument("maximum_principle_check: u* is not U-valued");
    for (std::size_t i = 0; i < U.size(); ++i) {
        if (!(ustar.set()[i] == U[i])) throw std::invalid_argument("maximum_principle_check: u* is not U-valued");
    }
    const auto& grid = fwd.grid();
    const std::size_t N = fwd.paths(), L = fwd.steps(), nu = U.size();
    std::vector<double> vals(N * L * nu, 0.0);
    parallel_for(N, 0, [&](std::size_t p) {
        const auto noise = fwd.noise().path(p);
        CoefficientValues cs(coeffs.dim), cu(coeffs.dim);
        for (std::size_t k = 0; k < L; ++k) {
            const double t = grid.time(k);
            const auto ctx = noise.context(k);
            const Vector& us = ustar.value(p, k);
            coeffs.evaluate(t, ctx, us, cs);
            const Vector ls = coeffs.ell(t, us);
            const Vector x = fwd.state(p, k);
            const Vector y = adj.y_cond(p, k);
            const Matrix zq = adj.z_q(p, k);
            const Matrix& qs = fwd.noise().snapshot(k).sqrt;
            for (std::size_t u = 0; u < nu; ++u) {
                if (static_cast<int>(u) == ustar.index(p, k)) continue;
                coeffs.evaluate(t, ctx, U[u], cu);
                vals[(k * nu + u) * N + p] = hamiltonian_difference(cu, cs, coeffs.ell(t, U[u]), ls, x, y, zq, qs);
            }
        }
    });
    MaximumPrincipleReport r;
    for (std::size_t k = 0; k < L; ++k) {
        for (std::size_t u = 0; u < nu; ++u) {
            const auto ms = mean_stderr(std::span<const double>(vals.data() + (k * nu + u) * N, N));
            MarginEntry e{k, grid.time(k), static_cast<int>(u), ms.mean, ms.stderr_, ms.mean > 3.0 * ms.stderr_};
            if (e.violation) r.violations.push_back(e);
            r.margins.push_back(e);
        }
    }
    r.pass = r.violations.empty();
    return r;
}

inline void write_margins_csv(std::ostream& os, const MaximumPrincipleReport& r) {
    os << "t,u,margin,stderr,violation\n" << std::setprecision(17);
    for (const auto& e : r.margins) {
        os << e.t << ',' << e.u_index << ',' << e.margin << ',' << e.stderr_ << ',' << (e.violation ? 1 : 0) << '\n';
    }
}

/// u* with interval `interval` (of n_intervals) replaced by U-index `index`.
inline ControlProcess perturb_interval(const ControlProcess& u, std::size_t n_intervals, std::size_t interval,
                                       int index) {
    const std::size_t per = u.steps() / n_intervals;
    return u.with_steps(interval * per, (interval + 1) * per, index);
}

}  // namespace smplab
