#include "test_support.hpp"

using namespace smplab;
using namespace smplab::testing;

namespace {

/// dx = D x dt with no forcing and no noise.
Problem diagonal_problem(const Vector& d, const Vector& x0, double horizon, std::size_t steps) {
    Problem p = presets::zero(static_cast<int>(d.size()));
    p.family = OperatorFamily::constant(Matrix(d.asDiagonal()), 1.0, 0.1, d.cwiseAbs().maxCoeff());
    p.coeffs.x0 = x0;
    p.horizon = horizon;
    p.steps = steps;
    return p;
}

Problem scalar_problem(const presets::ScalarData& d, std::size_t steps) {
    Problem p = presets::scalar_closed_form(d);
    p.steps = steps;
    return p;
}

Vector terminal_state(const ForwardEnsemble& ens, std::size_t p) { return ens.state(p, ens.steps()); }

}  // namespace

TEST(Forward, DiagonalMatchesDiscreteProduct) {
    const Vector d = (Vector(3) << -1.0, -4.0, 0.5).finished();
    const Vector x0 = (Vector(3) << 1.0, -2.0, 0.5).finished();
    const auto p = diagonal_problem(d, x0, 1.0, 32);
    const auto ens = shared_forward(p, base_control(p), 1, 1);
    const double dt = 1.0 / 32;
    for (int i = 0; i < 3; ++i) {
        const double exact = x0(i) * std::pow(1.0 - dt * d(i), -32.0);
        EXPECT_NEAR(terminal_state(*ens, 0)(i), exact, 1e-13 * std::abs(exact));
    }
}

TEST(Forward, DiagonalConvergesFirstOrder) {
    const Vector d = (Vector(2) << -1.0, -3.0).finished();
    const Vector x0 = Vector::Ones(2);
    std::vector<double> err;
    for (std::size_t L : {16u, 32u, 64u, 128u}) {
        const auto p = diagonal_problem(d, x0, 1.0, L);
        const auto ens = shared_forward(p, base_control(p), 1, 1);
        const Vector exact = (d.array().exp() * x0.array()).matrix();
        err.push_back((terminal_state(*ens, 0) - exact).norm());
    }
    for (std::size_t i = 0; i + 1 < err.size(); ++i) {
        EXPECT_GT(err[i] / err[i + 1], 1.8);
        EXPECT_LT(err[i] / err[i + 1], 2.2);
    }
}

TEST(Forward, ZeroDataGivesZeroSolution) {
    const auto p = presets::zero(4);
    const auto ens = shared_forward(p, base_control(p), 50, 2);
    for (std::size_t q = 0; q < ens->paths(); ++q) EXPECT_EQ(ens->path_states(q).cwiseAbs().maxCoeff(), 0.0);
}

TEST(Forward, ScalarMeanMatchesDiscreteRecursion) {
    presets::ScalarData d;
    d.b = 0.0;
    d.g = 0.0;
    const std::size_t L = 64;
    const auto p = scalar_problem(d, L);
    const auto ens = shared_forward(p, base_control(p), 20000, 3);
    std::vector<double> xt(ens->paths());
    for (std::size_t q = 0; q < ens->paths(); ++q) xt[q] = terminal_state(*ens, q)(0);
    const auto ms = mean_stderr(xt);
    const double dt = 1.0 / static_cast<double>(L);
    const double expected = d.x0 * std::pow((1.0 + dt * d.a) / (1.0 - dt * d.A), static_cast<double>(L));
    EXPECT_LE(std::abs(ms.mean - expected), 3.0 * ms.stderr_);
    EXPECT_NEAR(expected, d.x0 * std::exp(d.A + d.a), 0.01);
}

TEST(WeakResidual, ConsistentSchemeVanishes) {
    const auto p = presets::benchmark_n8();
    const auto ens = shared_forward(p, base_control(p), 200, 4);
    std::vector<Vector> eta;
    for (int i = 0; i < 8; ++i) eta.push_back(Vector::Unit(8, i));
    eta.push_back(Vector::Ones(8));
    for (double r : weak_residual(*ens, p.coeffs, p.family, eta)) EXPECT_LE(r, 1e-9);
    EXPECT_EQ(weak_residual(*ens, p.coeffs, p.family, {Vector::Zero(8)})[0], 0.0);
}

TEST(WeakResidual, MismatchedQuadratureIsFirstOrder) {
    const Vector d = (Vector(2) << -1.0, -2.0).finished();
    std::vector<double> r;
    for (std::size_t L : {32u, 64u, 128u}) {
        const auto p = diagonal_problem(d, Vector::Ones(2), 1.0, L);
        const auto ens = shared_forward(p, base_control(p), 1, 5);
        r.push_back(weak_residual(*ens, p.coeffs, p.family, {Vector::Ones(2)}, Scheme::explicit_euler)[0]);
    }
    EXPECT_GT(r[0], 1e-4);
    for (std::size_t i = 0; i + 1 < r.size(); ++i) EXPECT_NEAR(r[i] / r[i + 1], 2.0, 0.3);
}

TEST(Forward, ExplicitSchemeIsConsistentWithItself) {
    const auto p = presets::benchmark_n8();
    const auto ens = shared_forward(p, base_control(p), 100, 6, Scheme::explicit_euler);
    EXPECT_LE(weak_residual(*ens, p.coeffs, p.family, {Vector::Ones(8)})[0], 1e-9);
}

TEST(Forward, LinearInInitialStateWithoutForcing) {
    Problem p = presets::benchmark_n8();
    auto noise = sample_paths(p.cov, p.grid(), 20, 7);
    const auto u = base_control(p);
    auto run = [&](const Vector& x0) {
        CoefficientSet c = p.coeffs;
        c.x0 = x0;
        auto inner = c.evaluate;
        c.evaluate = [inner](double t, const PathContext& ctx, const Vector& v, CoefficientValues& out) {
            inner(t, ctx, v, out);
            out.b.setZero();
            out.g.setZero();
        };
        return integrate(c, p.family, u, noise);
    };
    std::mt19937_64 rng(1);
    const Vector x1 = random_vector(rng, 8), x2 = random_vector(rng, 8);
    const auto e1 = run(x1), e2 = run(x2), e12 = run(x1 + 2.0 * x2);
    for (std::size_t q = 0; q < 20; ++q) {
        const Vector lhs = terminal_state(e12, q);
        const Vector rhs = terminal_state(e1, q) + 2.0 * terminal_state(e2, q);
        EXPECT_LE((lhs - rhs).norm(), 1e-12 * (1.0 + rhs.norm()));
    }
}

TEST(Forward, StatesDoNotSeeFutureIncrements) {
    const auto p = presets::benchmark_n8();
    const auto grid = p.grid();
    const NoiseEnsemble noise(p.cov, grid, 1, 8);
    const auto view = noise.path(0);
    RowMatrix dw = view.brownian_increments, dm = view.increments, m = view.values;
    const std::size_t j = 40;
    for (std::size_t k = j; k < grid.steps(); ++k) dm.row(static_cast<Eigen::Index>(k)) *= -3.0;
    for (std::size_t k = j; k < grid.steps(); ++k) {
        const auto kk = static_cast<Eigen::Index>(k);
        m.row(kk + 1) = m.row(kk) + dm.row(kk);
    }
    const MartingalePathView altered{&grid, 0, {dw.data(), dw.rows(), dw.cols()}, {dm.data(), dm.rows(), dm.cols()},
                                     {m.data(), m.rows(), m.cols()}};
    const ForwardStepper stepper(p.coeffs, p.family, grid, Scheme::semi_implicit);
    const auto u = base_control(p);
    RowMatrix s1(grid.steps() + 1, 8), s2(grid.steps() + 1, 8);
    StepWorkspace ws(8);
    s1.row(0) = p.coeffs.x0.transpose();
    s2.row(0) = p.coeffs.x0.transpose();
    integrate_path(stepper, u, view, Eigen::Map<RowMatrix>(s1.data(), s1.rows(), s1.cols()), 0, ws);
    integrate_path(stepper, u, altered, Eigen::Map<RowMatrix>(s2.data(), s2.rows(), s2.cols()), 0, ws);
    EXPECT_EQ(s1.topRows(j + 1), s2.topRows(j + 1));
    EXPECT_NE(s1.row(j + 1), s2.row(j + 1));
}

TEST(Forward, SingularImplicitMatrixThrows) {
    const std::size_t L = 16;
    auto p = diagonal_problem(Vector::Constant(2, static_cast<double>(L)), Vector::Ones(2), 1.0, L);
    EXPECT_THROW(shared_forward(p, base_control(p), 1, 9), NumericalError);
}

TEST(Forward, NonAdaptedSegmentThrows) {
    const auto p = presets::mp_n4_u3();
    auto noise = sample_paths(p.cov, p.grid(), 10, 10);
    PathwiseSegment seg{32, 48, 40, std::vector<int>(10, 1)};
    const auto u = base_control(p).with_segment(seg);
    EXPECT_THROW(integrate(p.coeffs, p.family, u, noise), std::invalid_argument);
    seg.decision_step = 32;
    EXPECT_NO_THROW(integrate(p.coeffs, p.family, base_control(p).with_segment(seg), noise));
}

TEST(Forward, DimensionMismatchThrows) {
    const auto p = presets::benchmark_n8();
    auto noise = sample_paths(CovarianceProcess::constant(NuclearCovariance::default_spectrum(3)), p.grid(), 2, 1);
    EXPECT_THROW(integrate(p.coeffs, p.family, base_control(p), noise), DimensionError);
}

TEST(MomentBound, GronwallConstants) {
    const auto c = gronwall_constants(0.1, {0.1, 0.4, 0.2, 1.0}, 1.0, 1.0);
    EXPECT_NEAR(c.c1, std::exp(0.62), 1e-14);
    EXPECT_NEAR(c.c2, 3.0, 1e-14);
}

TEST(MomentBound, ZeroCaseHoldsTrivially) {
    const auto p = presets::zero(4);
    const auto ens = shared_forward(p, base_control(p), 100, 11);
    const auto r = moment_bound_check(*ens, p.family, p.coeffs.bounds, p.cov.bound, 0.25, 0.25);
    EXPECT_TRUE(r.pass);
    EXPECT_EQ(r.empirical_sup, 0.0);
    EXPECT_NEAR(r.envelope, r.c1 * r.c2 * 0.25, 1e-15);
}

TEST(MomentBound, BenchmarkWithinEnvelope) {
    const auto p = presets::benchmark_n8();
    const auto ens = shared_forward(p, base_control(p).with_steps(32, 64, 1), 2000, 12);
    const auto head = moment_bound_check(*ens, p.family, p.coeffs.bounds, p.cov.bound, 0.25, 0.25);
    EXPECT_TRUE(head.pass) << head.empirical_sup << " > " << head.envelope;
    EXPECT_TRUE(tail_moment_bound_check(*ens, p.family, p.coeffs.bounds, p.cov.bound, 0.25, 0.25).pass);
}

TEST(Forward, StrongOrderAtLeastHalf) {
    const auto p0 = presets::scalar_closed_form();
    auto fine_noise = sample_paths(p0.cov, TimeGrid::uniform(1.0, 512), 2000, 13);
    Problem fine = p0;
    fine.steps = 512;
    const auto ref = integrate(fine.coeffs, fine.family, base_control(fine), fine_noise);
    std::vector<double> err;
    for (std::size_t factor : {32u, 16u, 8u}) {
        auto noise = std::make_shared<const NoiseEnsemble>(fine_noise->coarsened(factor));
        Problem c = p0;
        c.steps = 512 / factor;
        const auto ens = integrate(c.coeffs, c.family, base_control(c), noise);
        double s = 0.0;
        for (std::size_t q = 0; q < ens.paths(); ++q) {
            s += (terminal_state(ens, q) - terminal_state(ref, q)).squaredNorm();
        }
        err.push_back(std::sqrt(s / static_cast<double>(ens.paths())));
    }
    const double slope = std::log2(err.front() / err.back()) / 2.0;
    EXPECT_GE(slope, 0.45) << err[0] << ' ' << err[1] << ' ' << err[2];
}

TEST(Forward, UnforcedDissipativeNormDecreases) {
    Problem p = presets::benchmark_n8();
    p.coeffs.evaluate = [](double, const PathContext&, const Vector&, CoefficientValues& out) {
        out.a = 0.0;
        out.b.setZero(8);
        out.sigma.setZero(8);
        out.g.setZero(8, 8);
    };
    const auto ens = shared_forward(p, base_control(p), 1, 14);
    for (std::size_t k = 0; k < ens->steps(); ++k) EXPECT_LE(ens->state(0, k + 1).norm(), ens->state(0, k).norm());
}

TEST(Forward, MomentCsvHeader) {
    const auto p = presets::zero(2);
    const auto ens = shared_forward(p, base_control(p), 3, 15);
    std::ostringstream os;
    write_moment_csv(os, *ens);
    EXPECT_EQ(os.str().substr(0, os.str().find('\n')), "t,mean_sq_norm,stderr");
}
