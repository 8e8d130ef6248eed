#pragma once

#include "smplab/config.hpp"

#include <filesystem>
#include <iostream>

namespace smplab {

namespace fs = std::filesystem;

/// One command run: its directory, record and thread budget.
class RunContext {
public:
    RunContext(const ExperimentConfig& cfg, const fs::path& out, std::string command, unsigned threads)
        : cfg_(cfg), threads_(resolve_threads(threads)) {
        record_.command = std::move(command);
        record_.config_hash = config_hash(cfg.canonical);
        record_.config = cfg.canonical;
        dir_ = out / record_.config_hash;
        fs::create_directories(dir_ / "plots");
    }

    const ExperimentConfig& config() const { return cfg_; }
    const Problem& problem() const { return cfg_.problem; }
    unsigned threads() const { return threads_; }
    const fs::path& dir() const { return dir_; }
    RunRecord& record() { return record_; }

    std::ostringstream& table(const std::string& name) { return files_[name]; }

    /// Writes every buffered table, then merges this command into record.json.
    bool finish() {
        for (const auto& [name, buf] : files_) {
            const fs::path path = dir_ / name;
            fs::create_directories(path.parent_path());
            std::ofstream os(path, std::ios::binary);
            os << buf.str();
            if (!os) throw std::runtime_error("cannot write '" + path.string() + "'");
        }
        record_.finished_at = utc_timestamp();
        const fs::path rec_path = dir_ / "record.json";
        Json merged = Json::object();
        if (fs::exists(rec_path)) {
            std::ifstream in(rec_path);
            merged = Json::parse(in, nullptr, false);
            if (merged.is_discarded() || !merged.is_object()) merged = Json::object();
        }
        const Json run = record_.to_json();
        merged["config_hash"] = record_.config_hash;
        merged["config"] = record_.config;
        merged["version"] = record_.version;
        merged["runs"][record_.command] = run;
        bool all = true;
        for (const auto& r : merged["runs"]) all = all && r.at("pass").get<bool>();
        merged["pass"] = all;
        std::ofstream os(rec_path, std::ios::binary);
        os << merged.dump(2) << '\n';
        return record_.pass();
    }

private:
    ExperimentConfig cfg_;
    unsigned threads_;
    RunRecord record_;
    fs::path dir_;
    std::map<std::string, std::ostringstream> files_;
};

namespace detail {

inline std::ostream& precise(std::ostream& os) { return os << std::setprecision(17); }

inline ControlProcess base_control(const Problem& p, const TimeGrid& grid) {
    return ControlProcess::piecewise_constant(p.controls, grid, p.base_intervals);
}

inline SpikeSpec spike_spec(const SpikeTemplate& s, const ControlProcess& base) {
    SpikeSpec out;
    out.t0 = s.t0;
    out.eps = s.eps;
    out.u_index = s.u_index;
    out.base = base;
    return out;
}

inline std::string spike_key(const SpikeTemplate& s) {
    std::ostringstream os;
    os << "t0=" << s.t0 << ",eps=" << s.eps << ",u=" << s.u_index;
    return os.str();
}

/// Two-sided per-entry threshold keeping the family-wise level at `alpha`
/// over `m` independent z-tests.
inline double sidak_z(double alpha, std::size_t m) {
    const double per = 1.0 - std::pow(1.0 - alpha, 1.0 / static_cast<double>(std::max<std::size_t>(m, 1)));
    double lo = 0.0, hi = 40.0;
    for (int i = 0; i < 200; ++i) {
        const double mid = 0.5 * (lo + hi);
        (std::erfc(mid / std::sqrt(2.0)) > per ? lo : hi) = mid;
    }
    return 0.5 * (lo + hi);
}

inline Json moment_json(const MomentBoundReport& r) {
    return Json{{"empirical_sup", r.empirical_sup}, {"envelope", r.envelope}, {"initial_moment", r.initial_moment},
                {"rel_stderr", r.rel_stderr},       {"c1", r.c1},             {"c2", r.c2}};
}

inline Json duality_json(const DualityReport& r) {
    return Json{{"lhs", r.lhs},
                {"rhs", r.rhs},
                {"rel_err", r.rel_err},
                {"lhs_stderr", r.lhs_stderr},
                {"rhs_stderr", r.rhs_stderr},
                {"diff_stderr", r.diff_stderr}};
}

inline Json intervals_json(const std::vector<int>& idx, const ControlSet& U) {
    Json out = Json::array();
    for (int i : idx) {
        const Vector& v = U[static_cast<std::size_t>(i)];
        out.push_back(std::vector<double>(v.data(), v.data() + v.size()));
    }
    return out;
}

}  // namespace detail

/// Forward ensemble under the base control, cost, moment envelopes.
inline bool cmd_simulate(RunContext& run) {
    const auto& cfg = run.config();
    const auto& p = run.problem();
    auto& rec = run.record();
    const auto grid = p.grid();

    const auto coer = verify_coercivity(p.family, p.triple, 2000, cfg.seed, p.horizon);
    rec.check("coercivity", coer.pass, {{"worst_margin", coer.worst_margin}});
    const auto bound = verify_operator_bound(p.family, p.triple, 2000, cfg.seed, p.horizon);
    rec.check("operator_bound", bound.pass, {{"worst_margin", bound.worst_margin}});
    const auto dom = verify_dominated(p.cov, grid);
    rec.check("covariance_dominated", dom.pass, {{"worst_margin", dom.worst_margin}});

    auto noise = sample_paths(p.cov, grid, cfg.paths, cfg.seed, run.threads());
    const auto cb = check_coefficient_bounds(p.coeffs, p.controls, *noise);
    rec.check("coefficient_bounds", cb.pass, {{"worst_excess", cb.worst_margin}});

    const auto qv = quadratic_variation(*noise);
    const double qv_exact = angle_process(p.cov, grid).trace();
    rec.check("quadratic_variation", std::abs(qv.mean - qv_exact) <= 3.0 * qv.stderr_,
              {{"mc", qv.mean}, {"stderr", qv.stderr_}, {"exact", qv_exact}});

    const auto base = detail::base_control(p, grid);
    auto xstar = std::make_shared<const ForwardEnsemble>(
        integrate(p.coeffs, p.family, base, noise, cfg.scheme, run.threads()));
    const auto J = cost(*xstar, p.coeffs);
    rec.metrics["J"] = {{"value", J.value}, {"stderr", J.stderr_}};

    const auto moments = second_moments(*xstar);
    auto& stats = run.table("stats.csv");
    detail::precise(stats) << "quantity,t,value,stderr\n";
    for (std::size_t k = 0; k < moments.size(); ++k) {
        stats << "mean_sq_norm," << grid.time(k) << ',' << moments[k].mean << ',' << moments[k].stderr_ << '\n';
    }
    stats << "J,," << J.value << ',' << J.stderr_ << '\n';
    auto& plot = run.table("plots/moments.dat");
    detail::precise(plot);
    for (std::size_t k = 0; k < moments.size(); ++k) plot << grid.time(k) << ' ' << moments[k].mean << '\n';

    for (const auto& s : p.spikes) {
        const auto var = variation_ensemble(detail::spike_spec(s, base), p.coeffs, p.family, xstar, run.threads());
        const auto head = moment_bound_check(var.perturbed(), p.family, p.coeffs.bounds, p.cov.bound, s.t0, s.eps);
        const auto tail =
            tail_moment_bound_check(var.perturbed(), p.family, p.coeffs.bounds, p.cov.bound, s.t0, s.eps);
        rec.check("moment_envelope[" + detail::spike_key(s) + "]", head.pass, detail::moment_json(head));
        rec.check("tail_moment_envelope[" + detail::spike_key(s) + "]", tail.pass, detail::moment_json(tail));
    }
    return run.finish();
}

/// Adjoint triple under the base control, duality identities, residual diagnostics.
inline bool cmd_adjoint(RunContext& run) {
    const auto& cfg = run.config();
    const auto& p = run.problem();
    auto& rec = run.record();
    const auto grid = p.grid();
    auto noise = sample_paths(p.cov, grid, cfg.paths, cfg.seed, run.threads());
    const auto base = detail::base_control(p, grid);
    auto xstar = std::make_shared<const ForwardEnsemble>(
        integrate(p.coeffs, p.family, base, noise, cfg.scheme, run.threads()));
    const auto adj = solve_bspde(p.coeffs, p.family, xstar, p.basis, run.threads());

    double terminal_gap = 0.0;
    for (std::size_t q = 0; q < adj.paths(); ++q) {
        terminal_gap = std::max(terminal_gap, (adj.y(q, adj.steps()) - p.coeffs.terminal).cwiseAbs().maxCoeff());
    }
    rec.check("terminal_condition", terminal_gap == 0.0, {{"max_abs_gap", terminal_gap}});
    rec.metrics["normal_equation_defect"] = adj.normal_equation_defect();
    rec.metrics["ridge_steps"] = static_cast<std::size_t>(
        std::count(adj.ridge_steps().begin(), adj.ridge_steps().end(), true));
    rec.metrics["residual_energy"] = residual_energy(adj);

    const auto cc = cross_covariation(*noise, [&](std::size_t q, std::size_t k) { return adj.n_residual(q, k); });
    const std::size_t entries = static_cast<std::size_t>(p.coeffs.dim) * static_cast<std::size_t>(noise->dim());
    const double z_crit = detail::sidak_z(0.01, entries);
    rec.check("residual_cross_covariation", cc.max_z <= z_crit, {{"max_z", cc.max_z}, {"threshold", z_crit}});

    write_adjoint_csv(run.table("adjoint.csv"), adj);
    {
        auto& plot = run.table("plots/adjoint_y.dat");
        std::vector<double> ys(adj.paths());
        detail::precise(plot);
        for (std::size_t k = 0; k <= adj.steps(); ++k) {
            for (std::size_t q = 0; q < adj.paths(); ++q) ys[q] = adj.y(q, k).squaredNorm();
            plot << grid.time(k) << ' ' << mean_stderr(ys).mean << '\n';
        }
    }

    auto& dual = run.table("duality.csv");
    detail::precise(dual) << "t0,eps,u,display,lhs,rhs,rel_err,lhs_stderr,rhs_stderr,diff_stderr\n";
    for (const auto& s : p.spikes) {
        const auto var = variation_ensemble(detail::spike_spec(s, base), p.coeffs, p.family, xstar, run.threads());
        const auto inner = duality_check_inner(adj, var, p.coeffs);
        const auto tail = duality_check_tail(adj, var, p.coeffs);
        for (const auto& [name, r] : {std::pair{"inner", inner}, std::pair{"tail", tail}}) {
            dual << s.t0 << ',' << s.eps << ',' << s.u_index << ',' << name << ',' << r.lhs << ',' << r.rhs << ','
                 << r.rel_err << ',' << r.lhs_stderr << ',' << r.rhs_stderr << ',' << r.diff_stderr << '\n';
            rec.check(std::string("duality_") + name + "[" + detail::spike_key(s) + "]", r.rel_err <= 0.05,
                      detail::duality_json(r));
        }
        const double res = xi_dynamics_residual(var, p.coeffs, p.family, run.threads());
        rec.check("xi_dynamics[" + detail::spike_key(s) + "]", res <= 1e-9, {{"max_residual", res}});
    }
    return run.finish();
}

/// Exhaustive (or coordinate) search for u*, the pointwise Hamiltonian check
/// under u*, and the same check after spoiling u* on one interval.
inline bool cmd_check_mp(RunContext& run) {
    const auto& cfg = run.config();
    const auto& p = run.problem();
    auto& rec = run.record();
    const auto grid = p.grid();
    auto noise = sample_paths(p.cov, grid, cfg.paths, cfg.seed, run.threads());

    auto opt = cfg.optimizer;
    opt.threads = run.threads();
    const auto best = optimize_control(p.coeffs, p.family, *noise, p.controls, p.n_intervals, opt);
    rec.metrics["optimizer"] = {{"mode", to_string(best.mode)},
                                {"evaluations", best.evaluations},
                                {"intervals", best.intervals},
                                {"controls", detail::intervals_json(best.intervals, p.controls)},
                                {"J", best.cost},
                                {"J_stderr", best.cost_stderr}};
    auto& cands = run.table("optimizer.csv");
    detail::precise(cands) << "candidate,J\n";
    for (const auto& [idx, j] : best.evaluated) {
        for (std::size_t i = 0; i < idx.size(); ++i) cands << (i ? "-" : "") << idx[i];
        cands << ',' << j << '\n';
    }

    auto mp_under = [&](const ControlProcess& u, const std::string& csv, const std::string& plot_prefix) {
        auto fwd = std::make_shared<const ForwardEnsemble>(
            integrate(p.coeffs, p.family, u, noise, cfg.scheme, run.threads()));
        const auto adj = solve_bspde(p.coeffs, p.family, fwd, p.basis, run.threads());
        auto r = maximum_principle_check(adj, p.coeffs, p.controls);
        write_margins_csv(run.table(csv), r);
        for (std::size_t ui = 0; ui < p.controls.size(); ++ui) {
            auto& plot = run.table("plots/" + plot_prefix + "_u" + std::to_string(ui) + ".dat");
            detail::precise(plot);
            for (const auto& e : r.margins) {
                if (e.u_index == static_cast<int>(ui)) plot << e.t << ' ' << e.margin << '\n';
            }
        }
        return r;
    };

    const auto mp = mp_under(best.control, "margins.csv", "margins");
    double worst = -std::numeric_limits<double>::infinity();
    for (const auto& e : mp.margins) {
        if (e.stderr_ > 0.0) worst = std::max(worst, e.margin / e.stderr_);
    }
    rec.check("maximum_principle", mp.pass,
              {{"violations", mp.violations.size()}, {"worst_z", std::isfinite(worst) ? Json(worst) : Json()}});

    if (p.controls.size() < 2) {
        rec.metrics["falsification"] = "skipped: U is a singleton";
        return run.finish();
    }
    const std::size_t iv = cfg.perturb.interval;
    int alt = -1;
    if (cfg.perturb.u_index) {
        alt = *cfg.perturb.u_index;
    } else {
        double worst_j = -std::numeric_limits<double>::infinity();
        for (std::size_t u = 0; u < p.controls.size(); ++u) {
            if (static_cast<int>(u) == best.intervals[iv]) continue;
            auto idx = best.intervals;
            idx[iv] = static_cast<int>(u);
            const double j = evaluate_cost(p.coeffs, p.family, ControlProcess::piecewise_constant(p.controls, grid, idx),
                                           *noise, cfg.scheme, run.threads())
                                 .value;
            if (j > worst_j) {
                worst_j = j;
                alt = static_cast<int>(u);
            }
        }
    }
    if (alt < 0 || static_cast<std::size_t>(alt) >= p.controls.size() || alt == best.intervals[iv]) {
        throw ConfigError("perturb: replacement control must be a different element of U");
    }
    const auto spoiled = perturb_interval(best.control, p.n_intervals, iv, alt);
    const auto jp = evaluate_cost(p.coeffs, p.family, spoiled, *noise, cfg.scheme, run.threads());
    const auto mpp = mp_under(spoiled, "margins_perturbed.csv", "margins_perturbed");
    const double t_lo = grid.horizon() * static_cast<double>(iv) / static_cast<double>(p.n_intervals);
    const double t_hi = grid.horizon() * static_cast<double>(iv + 1) / static_cast<double>(p.n_intervals);
    std::size_t inside = 0;
    for (const auto& e : mpp.violations) {
        if (e.t >= t_lo - 1e-12 && e.t < t_hi - 1e-12) ++inside;
    }
    rec.check("falsification_detected", inside > 0,
              {{"interval", iv},
               {"replacement", alt},
               {"J_perturbed", jp.value},
               {"J_optimal", best.cost},
               {"violations_total", mpp.violations.size()},
               {"violations_inside", inside}});
    return run.finish();
}

/// ε-scaling of sup E|ξ_ε|^2 and the variational inequality across eps_list.
inline bool cmd_spike_sweep(RunContext& run) {
    const auto& cfg = run.config();
    const auto& p = run.problem();
    auto& rec = run.record();

    std::vector<double> eps_abs;
    for (double e : p.eps_list) eps_abs.push_back(e * p.horizon);

    // scaling study on its own, finer grid
    {
        const auto sgrid = TimeGrid::uniform(p.horizon, p.scaling_steps);
        const auto sbase = detail::base_control(p, sgrid);
        SpikeSpec tmpl = detail::spike_spec(p.scaling_spike, sbase);
        ScalingSetup setup{&p.coeffs, &p.family, p.cov, sgrid, cfg.paths, cfg.seed, cfg.scheme, run.threads()};
        const auto sc = xi_scaling_study(tmpl, eps_abs, setup);
        write_scaling_csv(run.table("scaling.csv"), sc);
        auto& plot = run.table("plots/scaling_loglog.dat");
        detail::precise(plot);
        for (const auto& pt : sc.points) {
            if (pt.sup_mean > 0.0) plot << std::log(pt.eps) << ' ' << std::log(pt.sup_mean) << '\n';
        }
        rec.metrics["scaling"] = {{"slope", sc.slope},
                                  {"intercept", sc.intercept},
                                  {"degenerate", sc.degenerate},
                                  {"doubling_ratios", sc.doubling_ratios}};
        if (sc.degenerate) {
            bool zeros = true;
            for (const auto& pt : sc.points) zeros = zeros && pt.sup_mean == 0.0;
            rec.check("scaling_degenerate_zero", zeros);
        } else {
            rec.check("scaling_slope", sc.slope >= 0.85 && sc.slope <= 1.15, {{"slope", sc.slope}});
            bool ratios = !sc.doubling_ratios.empty();
            for (double r : sc.doubling_ratios) ratios = ratios && r >= 1.7 && r <= 2.3;
            rec.check("scaling_doubling", ratios, {{"ratios", sc.doubling_ratios}});
        }
        rec.check("scaling_envelope", sc.envelope_pass);
    }

    // variational inequality on the main grid
    const auto grid = p.grid();
    auto noise = sample_paths(p.cov, grid, cfg.paths, cfg.seed, run.threads());
    const auto base = detail::base_control(p, grid);
    auto xstar = std::make_shared<const ForwardEnsemble>(
        integrate(p.coeffs, p.family, base, noise, cfg.scheme, run.threads()));
    const auto adj = solve_bspde(p.coeffs, p.family, xstar, p.basis, run.threads());
    auto& vi_csv = run.table("vi.csv");
    detail::precise(vi_csv) << "t0,u,eps,total,stderr,term_ell,term_a,term_sigma,term_b,term_g,remainder,"
                               "remainder_stderr,remainder_over_eps,cost_difference,cost_difference_stderr\n";
    auto& vi_plot = run.table("plots/vi_remainder.dat");
    detail::precise(vi_plot);
    for (const auto& s : p.spikes) {
        std::vector<VariationalReport> rows;
        for (double e : eps_abs) {
            if (s.t0 + e > grid.horizon() * (1.0 + 1e-12) || e < grid.dt(0) * (1.0 - 1e-12)) continue;
            SpikeTemplate st = s;
            st.eps = e;
            const auto var =
                variation_ensemble(detail::spike_spec(st, base), p.coeffs, p.family, xstar, run.threads());
            rows.push_back(variational_inequality(var, p.coeffs, adj));
        }
        const std::string key = "t0=" + Json(s.t0).dump() + ",u=" + std::to_string(s.u_index);
        bool vi_ok = true;
        for (const auto& r : rows) {
            vi_csv << s.t0 << ',' << s.u_index << ',' << r.eps << ',' << r.total << ',' << r.total_stderr;
            for (double v : r.terms) vi_csv << ',' << v;
            vi_csv << ',' << r.remainder << ',' << r.remainder_stderr << ',' << r.remainder_over_eps << ','
                   << r.cost_difference << ',' << r.cost_difference_stderr << '\n';
            vi_plot << r.eps << ' ' << r.remainder_over_eps << '\n';
            vi_ok = vi_ok && r.pass;
        }
        vi_plot << '\n';
        rec.check("variational_inequality[" + key + "]", vi_ok);
        // remainder / ε shrinks with ε (rows are in eps_list order, largest first)
        bool trend = true;
        for (std::size_t i = 0; i + 1 < rows.size(); ++i) {
            const auto& a = rows[i];
            const auto& b = rows[i + 1];
            const double band =
                3.0 * std::hypot(a.remainder_stderr / a.eps, b.remainder_stderr / b.eps);
            trend = trend && std::abs(b.remainder_over_eps) <= std::abs(a.remainder_over_eps) + band;
        }
        rec.check("remainder_trend[" + key + "]", trend);
    }
    return run.finish();
}

/// summary.txt over every run directory under `dir`, sorted by config hash.
inline std::string cmd_report(const fs::path& dir) {
    if (!fs::is_directory(dir)) throw std::invalid_argument("report: '" + dir.string() + "' is not a directory");
    std::vector<std::pair<std::string, Json>> runs;
    for (const auto& entry : fs::directory_iterator(dir)) {
        const auto rec = entry.path() / "record.json";
        if (!entry.is_directory() || !fs::exists(rec)) continue;
        std::ifstream in(rec);
        Json j = Json::parse(in, nullptr, false);
        if (j.is_discarded()) throw std::runtime_error("report: malformed " + rec.string());
        runs.emplace_back(entry.path().filename().string(), std::move(j));
    }
    if (runs.empty()) throw std::invalid_argument("report: no runs found in '" + dir.string() + "'");
    std::sort(runs.begin(), runs.end(), [](const auto& a, const auto& b) { return a.first < b.first; });

    std::ostringstream out;
    std::ostringstream dat;
    std::size_t idx = 0;
    for (const auto& [hash, j] : runs) {
        const Json cfgj = j.value("config", Json::object());
        const Json cmds = j.value("runs", Json::object());
        out << "run " << hash << "  preset=" << cfgj.value("preset", std::string("inline"))
            << "  paths=" << cfgj.value("paths", Json()).dump() << "  seed=" << cfgj.value("seed", Json()).dump()
            << "  pass=" << (j.value("pass", false) ? "yes" : "no") << '\n';
        std::size_t total = 0, passed = 0;
        for (const auto& [cmd, r] : cmds.items()) {
            const Json checks = r.value("checks", Json::object());
            const Json metrics = r.value("metrics", Json::object());
            out << "  " << cmd << " (" << r.value("finished_at", std::string()) << ")\n";
            for (const auto& [name, c] : checks.items()) {
                const bool ok = c.value("pass", false);
                ++total;
                passed += ok ? 1 : 0;
                out << "    " << (ok ? "PASS " : "FAIL ") << name << '\n';
            }
            for (const auto& [name, m] : metrics.items()) {
                out << "    " << name << " = " << m.dump() << '\n';
            }
        }
        dat << idx++ << ' ' << (total ? static_cast<double>(passed) / static_cast<double>(total) : 1.0) << '\n';
    }
    std::ofstream(dir / "summary.txt", std::ios::binary) << out.str();
    std::ofstream(dir / "summary_pass_fraction.dat", std::ios::binary) << dat.str();
    return out.str();
}

}  // namespace smplab
