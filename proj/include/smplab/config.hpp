#pragma once

#include "smplab/forward.hpp"
#include "smplab/presets.hpp"
#include "smplab/spike.hpp"

#include <json.hpp>

#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>

namespace smplab {

using Json = nlohmann::json;

/// Thrown for malformed or inconsistent configurations.
class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

struct PerturbSpec {
    std::size_t interval = 1;
    std::optional<int> u_index;
};

struct ExperimentConfig {
    Json canonical;  // after overrides; the hash is taken over this
    Problem problem;
    std::size_t paths = 10000;
    std::uint64_t seed = 0;
    Scheme scheme = Scheme::semi_implicit;
    PerturbSpec perturb;
    OptimizeOptions optimizer;
};

/// Objects with sorted keys, every number as a double.
inline Json canonicalize(const Json& j) {
    if (j.is_object()) {
        Json out = Json::object();
        for (auto it = j.begin(); it != j.end(); ++it) out[it.key()] = canonicalize(it.value());
        return out;
    }
    if (j.is_array()) {
        Json out = Json::array();
        for (const auto& v : j) out.push_back(canonicalize(v));
        return out;
    }
    if (j.is_number()) return Json(j.get<double>());
    return j;
}

/// FNV-1a 64 over the canonical dump, as 16 hex digits.
inline std::string config_hash(const Json& canonical) {
    const std::string s = canonical.dump();
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

namespace detail {

inline Vector json_vector(const Json& j, const char* what) {
    if (!j.is_array()) throw ConfigError(std::string(what) + ": expected an array of numbers");
    Vector v(static_cast<Eigen::Index>(j.size()));
    for (std::size_t i = 0; i < j.size(); ++i) v(static_cast<Eigen::Index>(i)) = j[i].get<double>();
    return v;
}

inline Matrix json_matrix(const Json& j, const char* what) {
    if (!j.is_array() || j.empty() || !j[0].is_array()) throw ConfigError(std::string(what) + ": expected rows");
    Matrix m(static_cast<Eigen::Index>(j.size()), static_cast<Eigen::Index>(j[0].size()));
    for (std::size_t r = 0; r < j.size(); ++r) {
        if (j[r].size() != j[0].size()) throw ConfigError(std::string(what) + ": ragged rows");
        for (std::size_t c = 0; c < j[r].size(); ++c) {
            m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = j[r][c].get<double>();
        }
    }
    return m;
}

inline void check_keys(const Json& j, std::initializer_list<const char*> allowed, const std::string& where) {
    std::set<std::string> ok(allowed.begin(), allowed.end());
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (!ok.count(it.key())) throw ConfigError(where + ": unknown key '" + it.key() + "'");
    }
}

inline SpikeTemplate json_spike(const Json& j) {
    check_keys(j, {"t0", "eps", "u"}, "spike");
    return {j.at("t0").get<double>(), j.value("eps", 0.0), j.at("u").get<int>()};
}

/// Constant coefficients given as tables; the control enters affinely:
/// a + a_u·v, b + B_u v, σ + S_u v, (g + Σ_j g_u[j] v_j I), ℓ + L_u v.
inline Problem inline_problem(const Json& t) {
    check_keys(t,
               {"weights", "A", "alpha", "lambda", "k1", "a", "b", "sigma", "g", "ell", "G", "x0", "Q", "modulation",
                "U", "a_u", "b_u", "sigma_u", "g_u", "ell_u", "horizon"},
               "inline");
    Problem p;
    p.name = "inline";
    const Vector w = json_vector(t.at("weights"), "inline.weights");
    const int n = static_cast<int>(w.size());
    p.triple = GelfandTriple(w);
    const Matrix A = json_matrix(t.at("A"), "inline.A");
    if (A.rows() != n || A.cols() != n) throw ConfigError("inline.A: must be n x n");
    p.family = OperatorFamily::constant(A, t.at("alpha").get<double>(), t.at("lambda").get<double>(),
                                        t.at("k1").get<double>());
    const Matrix U = json_matrix(t.at("U"), "inline.U");
    const int m = static_cast<int>(U.cols());
    std::vector<Vector> us;
    for (Eigen::Index r = 0; r < U.rows(); ++r) us.push_back(U.row(r).transpose());
    p.controls = ControlSet(us);
    auto vec_or_zero = [&](const char* key) {
        Vector v = t.contains(key) ? json_vector(t.at(key), key) : Vector::Zero(n);
        if (v.size() != n) throw ConfigError(std::string("inline.") + key + ": length must be n");
        return v;
    };
    auto mat_or_zero = [&](const char* key, int rows, int cols) {
        Matrix v = t.contains(key) ? json_matrix(t.at(key), key) : Matrix::Zero(rows, cols);
        if (v.rows() != rows || v.cols() != cols) throw ConfigError(std::string("inline.") + key + ": wrong shape");
        return v;
    };
    const double a = t.value("a", 0.0);
    const Vector b = vec_or_zero("b"), sigma = vec_or_zero("sigma"), ell = vec_or_zero("ell");
    const Matrix g = mat_or_zero("g", n, n);
    const Vector a_u = t.contains("a_u") ? json_vector(t.at("a_u"), "a_u") : Vector::Zero(m);
    const Vector g_u = t.contains("g_u") ? json_vector(t.at("g_u"), "g_u") : Vector::Zero(m);
    if (a_u.size() != m || g_u.size() != m) throw ConfigError("inline.a_u/g_u: length must be m");
    const Matrix b_u = mat_or_zero("b_u", n, m), s_u = mat_or_zero("sigma_u", n, m), l_u = mat_or_zero("ell_u", n, m);
    p.coeffs.dim = n;
    p.coeffs.evaluate = [=](double, const PathContext&, const Vector& v, CoefficientValues& out) {
        out.a = a + a_u.dot(v);
        out.b = b + b_u * v;
        out.sigma = sigma + s_u * v;
        out.g = g;
        out.g.diagonal().array() += g_u.dot(v);
    };
    p.coeffs.ell = [=](double, const Vector& v) { return Vector(ell + l_u * v); };
    p.coeffs.terminal = vec_or_zero("G");
    p.coeffs.x0 = vec_or_zero("x0");
    CoefficientBounds bd;
    for (const auto& v : us) {
        CoefficientValues cv(n);
        p.coeffs.evaluate(0.0, PathContext{}, v, cv);
        bd.k_a = std::max(bd.k_a, std::abs(cv.a));
        bd.k2 = std::max(bd.k2, cv.b.norm());
        bd.k3 = std::max(bd.k3, cv.sigma.norm());
        bd.k4 = std::max(bd.k4, Eigen::JacobiSVD<Matrix>(cv.g).singularValues()(0));
    }
    p.coeffs.bounds = bd;
    const Vector q = t.contains("Q") ? json_vector(t.at("Q"), "inline.Q") : NuclearCovariance::default_spectrum(n).matrix().diagonal().eval();
    if (q.size() != n) throw ConfigError("inline.Q: length must be n");
    const std::string mod = t.value("modulation", std::string("decaying"));
    if (mod == "decaying") {
        p.cov = CovarianceProcess::decaying(NuclearCovariance::from_spectrum(q));
    } else if (mod == "constant") {
        p.cov = CovarianceProcess::constant(NuclearCovariance::from_spectrum(q));
    } else {
        throw ConfigError("inline.modulation: expected 'decaying' or 'constant'");
    }
    p.horizon = t.value("horizon", 1.0);
    p.basis = {1, 0};
    p.spikes = {};
    p.scaling_spike = {0.25 * p.horizon, 0.0, 0};
    p.eps_list = {1.0 / 16, 1.0 / 32, 1.0 / 64, 1.0 / 128};
    p.scaling_steps = 128;
    return p;
}

}  // namespace detail

/// Parses a configuration, applying command-line overrides first.
inline ExperimentConfig parse_config(Json j, std::optional<std::size_t> paths_override = std::nullopt,
                                     std::optional<std::uint64_t> seed_override = std::nullopt) {
    if (!j.is_object()) throw ConfigError("config: top level must be an object");
    detail::check_keys(j,
                       {"preset", "inline", "paths", "seed", "steps", "scheme", "basis", "spikes", "eps_list",
                        "scaling_spike", "scaling_steps", "base_intervals", "n_intervals", "perturb", "optimizer",
                        "output"},
                       "config");
    if (paths_override) j["paths"] = *paths_override;
    if (seed_override) j["seed"] = *seed_override;
    j.erase("output");

    ExperimentConfig c;
    if (!j.contains("seed")) throw ConfigError("config: 'seed' is required");
    const double seed = j.at("seed").get<double>();
    if (seed < 0 || seed != std::floor(seed) || seed > 9.007199254740992e15) {
        throw ConfigError("config: seed must be a non-negative integer below 2^53");
    }
    c.seed = static_cast<std::uint64_t>(seed);
    const double paths = j.value("paths", 10000.0);
    if (paths < 100 || paths != std::floor(paths)) throw ConfigError("config: paths must be an integer >= 100");
    c.paths = static_cast<std::size_t>(paths);

    if (j.contains("preset") == j.contains("inline")) throw ConfigError("config: give exactly one of 'preset' or 'inline'");
    try {
        c.problem = j.contains("preset") ? presets::by_name(j.at("preset").get<std::string>())
                                         : detail::inline_problem(j.at("inline"));
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    auto& p = c.problem;
    if (j.contains("steps")) p.steps = j.at("steps").get<std::size_t>();
    if (!is_power_of_two(p.steps)) throw ConfigError("config: steps (L) must be a power of two");
    if (j.contains("scaling_steps")) p.scaling_steps = j.at("scaling_steps").get<std::size_t>();
    if (!is_power_of_two(p.scaling_steps)) throw ConfigError("config: scaling_steps must be a power of two");
    if (j.contains("scheme")) {
        const auto s = j.at("scheme").get<std::string>();
        if (s == "semi_implicit") {
            c.scheme = Scheme::semi_implicit;
        } else if (s == "explicit") {
            c.scheme = Scheme::explicit_euler;
        } else {
            throw ConfigError("config: scheme must be 'semi_implicit' or 'explicit'");
        }
    }
    if (j.contains("basis")) {
        const auto& b = j.at("basis");
        detail::check_keys(b, {"state_degree", "factor_degree"}, "basis");
        p.basis.state_degree = b.value("state_degree", p.basis.state_degree);
        p.basis.factor_degree = b.value("factor_degree", p.basis.factor_degree);
    }
    if (j.contains("spikes")) {
        p.spikes.clear();
        for (const auto& s : j.at("spikes")) p.spikes.push_back(detail::json_spike(s));
    }
    if (j.contains("scaling_spike")) p.scaling_spike = detail::json_spike(j.at("scaling_spike"));
    if (j.contains("eps_list")) p.eps_list = j.at("eps_list").get<std::vector<double>>();
    if (j.contains("n_intervals")) p.n_intervals = j.at("n_intervals").get<std::size_t>();
    if (j.contains("base_intervals")) {
        p.base_intervals = j.at("base_intervals").get<std::vector<int>>();
        if (!j.contains("n_intervals")) p.n_intervals = p.base_intervals.size();
    } else if (p.base_intervals.size() != p.n_intervals) {
        p.base_intervals.assign(p.n_intervals, 0);
    }
    if (p.base_intervals.size() != p.n_intervals) throw ConfigError("config: base_intervals must have n_intervals entries");
    if (p.n_intervals == 0 || p.steps % p.n_intervals != 0) throw ConfigError("config: n_intervals must divide steps");
    for (int u : p.base_intervals) {
        if (u < 0 || static_cast<std::size_t>(u) >= p.controls.size()) throw ConfigError("config: base control not in U");
    }
    for (const auto& s : p.spikes) {
        if (s.u_index < 0 || static_cast<std::size_t>(s.u_index) >= p.controls.size()) {
            throw ConfigError("config: spike value not in U");
        }
    }
    if (j.contains("perturb")) {
        const auto& q = j.at("perturb");
        detail::check_keys(q, {"interval", "u"}, "perturb");
        c.perturb.interval = q.value("interval", std::size_t{1});
        if (q.contains("u")) c.perturb.u_index = q.at("u").get<int>();
    }
    if (c.perturb.interval >= p.n_intervals) c.perturb.interval = p.n_intervals - 1;
    if (j.contains("optimizer")) {
        const auto& o = j.at("optimizer");
        detail::check_keys(o, {"mode", "max_evaluations"}, "optimizer");
        const auto mode = o.value("mode", std::string("exhaustive"));
        if (mode == "exhaustive") {
            c.optimizer.mode = SearchMode::exhaustive;
        } else if (mode == "coordinate_descent") {
            c.optimizer.mode = SearchMode::coordinate_descent;
        } else {
            throw ConfigError("optimizer.mode must be 'exhaustive' or 'coordinate_descent'");
        }
        c.optimizer.max_evaluations = o.value("max_evaluations", c.optimizer.max_evaluations);
    }
    c.optimizer.scheme = c.scheme;
    c.canonical = canonicalize(j);
    return c;
}

inline ExperimentConfig load_config(const std::string& path, std::optional<std::size_t> paths_override = std::nullopt,
                                    std::optional<std::uint64_t> seed_override = std::nullopt) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config '" + path + "'");
    Json j;
    try {
        j = Json::parse(in);
    } catch (const Json::parse_error& e) {
        throw ConfigError("config '" + path + "': " + e.what());
    }
    return parse_config(std::move(j), paths_override, seed_override);
}

inline std::string version_string() {
#ifdef SMPLAB_VERSION
    return SMPLAB_VERSION;
#else
    return "0.1.0";
#endif
}

inline std::string utc_timestamp() {
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

/// Per-run metadata, check outcomes and metric tables.
struct RunRecord {
    std::string command;
    std::string config_hash;
    std::string version = version_string();
    std::string started_at = utc_timestamp();
    std::string finished_at;
    Json config;
    Json checks = Json::object();
    Json metrics = Json::object();

    void check(const std::string& name, bool pass, Json detail = Json::object()) {
        detail["pass"] = pass;
        checks[name] = std::move(detail);
    }

    bool pass() const {
        for (const auto& c : checks) {
            if (!c.at("pass").get<bool>()) return false;
        }
        return true;
    }

    Json to_json() const {
        return Json{{"command", command},   {"config_hash", config_hash}, {"version", version},
                    {"started_at", started_at}, {"finished_at", finished_at}, {"config", config},
                    {"checks", checks},     {"metrics", metrics},         {"pass", pass()}};
    }
};

}  // namespace smplab
