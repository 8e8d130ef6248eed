#pragma once

#include "smplab/core.hpp"
#include "smplab/grid.hpp"
#include "smplab/hilbert.hpp"
#include "smplab/parallel.hpp"

#include <iomanip>
#include <memory>
#include <ostream>

namespace smplab {

/// Covariance density Q(t) of the angle process <<M>>_t = ∫_0^t Q(s) ds,
/// dominated by the nuclear bound Q.
struct CovarianceProcess {
    std::function<Matrix(double t)> evaluate;
    NuclearCovariance bound;

    static CovarianceProcess constant(NuclearCovariance q) {
        Matrix m = q.matrix();
        return {[m](double) { return m; }, std::move(q)};
    }

    /// Q(t) = s(t) Q; s must take values in [0, 1].
    static CovarianceProcess modulated(NuclearCovariance q, std::function<double(double)> scale) {
        Matrix m = q.matrix();
        return {[m, scale = std::move(scale)](double t) { return Matrix(scale(t) * m); }, std::move(q)};
    }

    /// Q(t) = (0.6 + 0.4 e^{-t}) Q.
    static CovarianceProcess decaying(NuclearCovariance q) {
        return modulated(std::move(q), [](double t) { return 0.6 + 0.4 * std::exp(-t); });
    }

    int dim() const { return bound.dim(); }
};

/// Q(t) ⪯ Q and q(t) = tr Q(t) > 0 at every grid time; worst_margin is the
/// most negative eigenvalue of Q - Q(t).
inline CheckReport verify_dominated(const CovarianceProcess& cov, const TimeGrid& grid) {
    CheckReport r;
    double worst = std::numeric_limits<double>::infinity();
    bool positive_trace = true;
    for (std::size_t k = 0; k <= grid.steps(); ++k) {
        const Matrix qt = cov.evaluate(grid.time(k));
        const Matrix diff = cov.bound.matrix() - qt;
        Eigen::SelfAdjointEigenSolver<Matrix> es(0.5 * (diff + diff.transpose()), Eigen::EigenvaluesOnly);
        worst = std::min(worst, es.eigenvalues().minCoeff());
        positive_trace = positive_trace && qt.trace() > 0.0;
    }
    r.worst_margin = worst;
    r.pass = worst >= -1e-10 && positive_trace;
    return r;
}

/// Covariance data frozen at the left endpoint of a step.
struct StepCovariance {
    Matrix q;
    Matrix sqrt;
    Matrix sqrt_pinv;
    Matrix range;
};

inline std::vector<StepCovariance> covariance_snapshots(const CovarianceProcess& cov, const TimeGrid& grid) {
    std::vector<StepCovariance> out;
    out.reserve(grid.steps());
    for (std::size_t k = 0; k < grid.steps(); ++k) {
        StepCovariance s;
        s.q = cov.evaluate(grid.time(k));
        require_same_dim(s.q.rows(), cov.dim(), "covariance_snapshots");
        PsdRoot root = psd_root(s.q);
        s.sqrt = std::move(root.sqrt);
        s.sqrt_pinv = std::move(root.pinv);
        s.range = std::move(root.range);
        out.push_back(std::move(s));
    }
    return out;
}

/// Brownian driver of one path: row k holds ΔW_k ~ N(0, Δt_k I).
inline void draw_brownian(std::uint64_t seed, std::size_t path, const TimeGrid& grid, int dim, RowMatrix& dw) {
    auto rng = stream_engine(seed, streams::brownian, path);
    std::normal_distribution<double> normal;
    dw.resize(static_cast<Eigen::Index>(grid.steps()), dim);
    for (std::size_t k = 0; k < grid.steps(); ++k) {
        const double s = std::sqrt(grid.dt(k));
        for (int i = 0; i < dim; ++i) dw(static_cast<Eigen::Index>(k), i) = s * normal(rng);
    }
}

/// ΔM_k = Q^{1/2}(t_k) ΔW_k and M(t_k) = Σ_{j<k} ΔM_j.
inline void integrate_martingale(const std::vector<StepCovariance>& snaps, const Eigen::Ref<const RowMatrix>& dw,
                                 Eigen::Ref<RowMatrix> dm, Eigen::Ref<RowMatrix> m) {
    m.row(0).setZero();
    for (std::size_t k = 0; k < snaps.size(); ++k) {
        const auto kk = static_cast<Eigen::Index>(k);
        dm.row(kk) = (snaps[k].sqrt * dw.row(kk).transpose()).transpose();
        m.row(kk + 1) = m.row(kk) + dm.row(kk);
    }
}

/// Read-only view of one simulated martingale path.
struct MartingalePathView {
    const TimeGrid* grid = nullptr;
    std::size_t index = 0;
    Eigen::Map<const RowMatrix> brownian_increments{nullptr, 0, 0};  // L x n
    Eigen::Map<const RowMatrix> increments{nullptr, 0, 0};           // L x n, ΔM_k
    Eigen::Map<const RowMatrix> values{nullptr, 0, 0};               // (L+1) x n, M(t_k)

    PathContext context(std::size_t k) const {
        return PathContext{index, k, grid->time(k),
                           {values.data() + k * values.cols(), static_cast<std::size_t>(values.cols())}};
    }
};

/// Ensemble of paths of M(t) = ∫_0^t Q^{1/2}(s) dW(s), left-point discretised:
/// ΔM_k = Q^{1/2}(t_k) ΔW_k.
class NoiseEnsemble {
public:
    NoiseEnsemble(CovarianceProcess cov, TimeGrid grid, std::size_t n_paths, std::uint64_t seed,
                  unsigned threads = 0)
        : cov_(std::move(cov)), grid_(std::move(grid)), paths_(n_paths), seed_(seed), dim_(cov_.dim()) {
        if (n_paths == 0) throw std::invalid_argument("NoiseEnsemble: n_paths must be >= 1");
        snapshots_ = covariance_snapshots(cov_, grid_);
        allocate();
        parallel_for(paths_, threads, [&](std::size_t p) {
            RowMatrix dw;
            draw_brownian(seed_, p, grid_, dim_, dw);
            fill_path(p, dw);
        });
    }

    const TimeGrid& grid() const { return grid_; }
    std::size_t paths() const { return paths_; }
    std::size_t steps() const { return grid_.steps(); }
    int dim() const { return dim_; }
    std::uint64_t seed() const { return seed_; }
    const CovarianceProcess& covariance() const { return cov_; }
    const StepCovariance& snapshot(std::size_t k) const { return snapshots_[k]; }
    const std::vector<StepCovariance>& snapshots() const { return snapshots_; }

    MartingalePathView path(std::size_t p) const {
        const auto L = static_cast<Eigen::Index>(steps());
        const std::size_t inc = steps() * dim_;
        const std::size_t val = (steps() + 1) * dim_;
        return MartingalePathView{&grid_, p, {dw_.data() + p * inc, L, dim_}, {dm_.data() + p * inc, L, dim_},
                                  {m_.data() + p * val, L + 1, dim_}};
    }

    /// Same Brownian paths on a grid `factor` times coarser (summed increments).
    NoiseEnsemble coarsened(std::size_t factor) const {
        NoiseEnsemble out(*this, grid_.coarsened(factor));
        for (std::size_t p = 0; p < paths_; ++p) {
            const auto fine = path(p).brownian_increments;
            RowMatrix dw = RowMatrix::Zero(static_cast<Eigen::Index>(out.steps()), dim_);
            for (std::size_t k = 0; k < steps(); ++k) dw.row(static_cast<Eigen::Index>(k / factor)) += fine.row(k);
            out.fill_path(p, dw);
        }
        return out;
    }

private:
    NoiseEnsemble(const NoiseEnsemble& src, TimeGrid grid)
        : cov_(src.cov_), grid_(std::move(grid)), paths_(src.paths_), seed_(src.seed_), dim_(src.dim_) {
        snapshots_ = covariance_snapshots(cov_, grid_);
        allocate();
    }

    void allocate() {
        dw_.assign(paths_ * steps() * dim_, 0.0);
        dm_.assign(paths_ * steps() * dim_, 0.0);
        m_.assign(paths_ * (steps() + 1) * dim_, 0.0);
    }

    void fill_path(std::size_t p, const RowMatrix& dw) {
        const std::size_t inc = steps() * dim_;
        const std::size_t val = (steps() + 1) * dim_;
        Eigen::Map<RowMatrix> w(dw_.data() + p * inc, static_cast<Eigen::Index>(steps()), dim_);
        Eigen::Map<RowMatrix> dm(dm_.data() + p * inc, static_cast<Eigen::Index>(steps()), dim_);
        Eigen::Map<RowMatrix> m(m_.data() + p * val, static_cast<Eigen::Index>(steps() + 1), dim_);
        w = dw;
        integrate_martingale(snapshots_, w, dm, m);
    }

    CovarianceProcess cov_;
    TimeGrid grid_;
    std::size_t paths_ = 0;
    std::uint64_t seed_ = 0;
    int dim_ = 0;
    std::vector<StepCovariance> snapshots_;
    std::vector<double> dw_, dm_, m_;
};

/// One path regenerated on demand; bit-identical to path p of a
/// NoiseEnsemble with the same covariance, grid and seed.
class StreamedPath {
public:
    StreamedPath(const std::vector<StepCovariance>& snaps, const TimeGrid& grid, int dim)
        : snaps_(&snaps), grid_(&grid), dim_(dim) {}

    MartingalePathView generate(std::uint64_t seed, std::size_t p) {
        draw_brownian(seed, p, *grid_, dim_, dw_);
        const auto L = static_cast<Eigen::Index>(grid_->steps());
        dm_.resize(L, dim_);
        m_.resize(L + 1, dim_);
        integrate_martingale(*snaps_, dw_, dm_, m_);
        return MartingalePathView{grid_, p, {dw_.data(), L, dim_}, {dm_.data(), L, dim_}, {m_.data(), L + 1, dim_}};
    }

private:
    const std::vector<StepCovariance>* snaps_;
    const TimeGrid* grid_;
    int dim_;
    RowMatrix dw_, dm_, m_;
};

inline std::shared_ptr<const NoiseEnsemble> sample_paths(const CovarianceProcess& cov, const TimeGrid& grid,
                                                         std::size_t n_paths, std::uint64_t seed,
                                                         unsigned threads = 0) {
    return std::make_shared<const NoiseEnsemble>(cov, grid, n_paths, seed, threads);
}

/// Integrand Φ(t, ω); the context carries M(t_k) so Φ may be state dependent.
using IntegrandProcess = std::function<Matrix(double t, const PathContext& ctx)>;

/// Σ_k Φ(t_k) ΔM_k with left-endpoint (predictable) evaluation.
inline Vector stochastic_integral(const IntegrandProcess& phi, const MartingalePathView& path) {
    const auto n = path.increments.cols();
    Vector acc = Vector::Zero(n);
    for (std::size_t k = 0; k < path.grid->steps(); ++k) {
        const Matrix f = phi(path.grid->time(k), path.context(k));
        if (f.cols() != n) throw DimensionError("stochastic_integral: integrand/noise dimension mismatch");
        if (acc.size() != f.rows()) {
            if (k != 0) throw DimensionError("stochastic_integral: integrand changed shape");
            acc = Vector::Zero(f.rows());
        }
        acc.noalias() += f * path.increments.row(static_cast<Eigen::Index>(k)).transpose();
    }
    return acc;
}

struct IsometryReport {
    double lhs = 0.0;
    double rhs = 0.0;
    double rel_err = 0.0;
    double lhs_stderr = 0.0;
    double rhs_stderr = 0.0;
};

/// Monte Carlo E|∫Φ dM|^2 against the quadrature of E ∫ ||Φ Q^{1/2}||_2^2 ds.
inline IsometryReport ito_isometry_check(const IntegrandProcess& phi, const CovarianceProcess& cov,
                                         const TimeGrid& grid, std::size_t n_paths, std::uint64_t seed,
                                         unsigned threads = 0) {
    if (n_paths < 100) throw std::invalid_argument("ito_isometry_check: need at least 100 paths");
    const NoiseEnsemble noise(cov, grid, n_paths, seed, threads);
    std::vector<double> lhs(n_paths), rhs(n_paths);
    parallel_for(n_paths, threads, [&](std::size_t p) {
        const auto view = noise.path(p);
        lhs[p] = stochastic_integral(phi, view).squaredNorm();
        double q = 0.0;
        for (std::size_t k = 0; k < grid.steps(); ++k) {
            q += (phi(grid.time(k), view.context(k)) * noise.snapshot(k).sqrt).squaredNorm() * grid.dt(k);
        }
        rhs[p] = q;
    });
    const auto l = mean_stderr(lhs);
    const auto r = mean_stderr(rhs);
    return {l.mean, r.mean, std::abs(l.mean - r.mean) / std::max(r.mean, 1e-12), l.stderr_, r.stderr_};
}

/// Discrete angle process Σ_k Q(t_k) Δt_k.
inline Matrix angle_process(const CovarianceProcess& cov, const TimeGrid& grid) {
    Matrix acc = Matrix::Zero(cov.dim(), cov.dim());
    for (std::size_t k = 0; k < grid.steps(); ++k) acc += cov.evaluate(grid.time(k)) * grid.dt(k);
    return acc;
}

/// Ensemble mean of Σ_k |ΔM_k|^2, the estimate of <M>_T.
inline MeanStderr quadratic_variation(const NoiseEnsemble& noise) {
    std::vector<double> qv(noise.paths());
    for (std::size_t p = 0; p < noise.paths(); ++p) qv[p] = noise.path(p).increments.squaredNorm();
    return mean_stderr(qv);
}

struct CrossCovariation {
    Matrix mean;
    Matrix stderr_;
    /// max_ij |mean_ij| / stderr_ij over entries with nonzero stderr.
    double max_z = 0.0;
};

/// Grid-time cross-covariation E[Σ_k r_k ΔW_k^T] of a per-step residual with the
/// Brownian driver; used as the finite stand-in for very strong orthogonality.
inline CrossCovariation cross_covariation(const NoiseEnsemble& noise,
                                          const std::function<Vector(std::size_t path, std::size_t k)>& residual) {
    const auto n_paths = noise.paths();
    std::vector<Matrix> per_path(n_paths);
    Eigen::Index rows = 0;
    for (std::size_t p = 0; p < n_paths; ++p) {
        const auto view = noise.path(p);
        Matrix acc;
        for (std::size_t k = 0; k < noise.steps(); ++k) {
            const Vector r = residual(p, k);
            if (acc.size() == 0) acc = Matrix::Zero(r.size(), noise.dim());
            acc.noalias() += r * view.brownian_increments.row(static_cast<Eigen::Index>(k));
        }
        rows = acc.rows();
        per_path[p] = std::move(acc);
    }
    CrossCovariation out;
    out.mean = Matrix::Zero(rows, noise.dim());
    out.stderr_ = Matrix::Zero(rows, noise.dim());
    std::vector<double> buf(n_paths);
    for (Eigen::Index i = 0; i < rows; ++i) {
        for (Eigen::Index j = 0; j < noise.dim(); ++j) {
            for (std::size_t p = 0; p < n_paths; ++p) buf[p] = per_path[p](i, j);
            const auto ms = mean_stderr(buf);
            out.mean(i, j) = ms.mean;
            out.stderr_(i, j) = ms.stderr_;
            if (ms.stderr_ > 0.0) out.max_z = std::max(out.max_z, std::abs(ms.mean) / ms.stderr_);
        }
    }
    return out;
}

/// Debug dump: path,k,t_k,dW_0..dW_{n-1},dM_0..dM_{n-1}.
inline void write_path_dump(std::ostream& os, const NoiseEnsemble& noise, std::size_t max_paths) {
    os << "path,k,t_k";
    for (int i = 0; i < noise.dim(); ++i) os << ",dW_" << i;
    for (int i = 0; i < noise.dim(); ++i) os << ",dM_" << i;
    os << '\n' << std::setprecision(17);
    for (std::size_t p = 0; p < std::min(max_paths, noise.paths()); ++p) {
        const auto view = noise.path(p);
        for (std::size_t k = 0; k < noise.steps(); ++k) {
            os << p << ',' << k << ',' << noise.grid().time(k);
            const auto kk = static_cast<Eigen::Index>(k);
            for (int i = 0; i < noise.dim(); ++i) os << ',' << view.brownian_increments(kk, i);
            for (int i = 0; i < noise.dim(); ++i) os << ',' << view.increments(kk, i);
            os << '\n';
        }
    }
}

}  // namespace smplab
