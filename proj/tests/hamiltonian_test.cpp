#include "test_support.hpp"

#include "smplab/spike.hpp"

using namespace smplab;
using namespace smplab::testing;

namespace {

CoefficientValues values(double a, const Vector& b, const Vector& sigma, const Matrix& g) {
    CoefficientValues cv(static_cast<int>(b.size()));
    cv.a = a;
    cv.b = b;
    cv.sigma = sigma;
    cv.g = g;
    return cv;
}

struct RandomTuple {
    CoefficientValues cv;
    Vector ell, x, y;
    Matrix zq, qs;
};

RandomTuple random_tuple(std::mt19937_64& rng, int n) {
    std::uniform_real_distribution<double> ud(-1.0, 1.0);
    RandomTuple t{values(ud(rng), random_vector(rng, n), random_vector(rng, n), random_matrix(rng, n, n)),
                  random_vector(rng, n), random_vector(rng, n), random_vector(rng, n), random_matrix(rng, n, n),
                  Matrix()};
    const Matrix r = random_matrix(rng, n, n);
    t.qs = psd_root(r * r.transpose()).sqrt;
    return t;
}

}  // namespace

TEST(SigmaTilde, AddsPairingOnDiagonal) {
    const auto cv = values(0.0, Vector::Zero(2), (Vector(2) << 1.0, 2.0).finished(),
                           (Matrix(2, 2) << 0.0, 1.0, 3.0, 0.0).finished());
    const Matrix st = sigma_tilde(cv, (Vector(2) << 3.0, -1.0).finished());
    EXPECT_EQ(st, (Matrix(2, 2) << 1.0, 1.0, 3.0, 1.0).finished());
    EXPECT_THROW(sigma_tilde(cv, Vector::Zero(3)), DimensionError);
}

TEST(BOperator, ScalesSigmaByPairing) {
    const Vector sigma = (Vector(2) << 1.0, -2.0).finished();
    const Matrix qs = Matrix::Identity(2, 2);
    const Matrix z = (Matrix(2, 2) << 1.0, 5.0, 7.0, 2.0).finished();
    EXPECT_EQ(b_operator(sigma, z, qs), (Vector(2) << 3.0, -6.0).finished());
}

TEST(BOperator, AdjointIdentity) {
    std::mt19937_64 rng(1);
    for (int i = 0; i < 20; ++i) {
        const auto t = random_tuple(rng, 4);
        const double lhs = b_operator(t.cv.sigma, t.zq, t.qs).dot(t.x);
        const double rhs = hs_inner(t.cv.sigma.dot(t.x) * t.qs, t.zq);
        EXPECT_NEAR(lhs, rhs, 1e-12 * (1.0 + std::abs(rhs)));
    }
}

TEST(Hamiltonian, HandComputedValue) {
    const auto cv = values(0.5, (Vector(2) << 1.0, 0.0).finished(), (Vector(2) << 0.0, 1.0).finished(),
                           Matrix::Identity(2, 2));
    const Vector ell = (Vector(2) << 1.0, 1.0).finished();
    const Vector x = (Vector(2) << 1.0, 2.0).finished();
    const Vector y = (Vector(2) << 2.0, 0.0).finished();
    const Matrix zq = Matrix::Identity(2, 2);
    const Matrix qs = Matrix::Identity(2, 2);
    // -3 - 0.5*2 - 2 - tr((2+1) I) = -12
    EXPECT_DOUBLE_EQ(hamiltonian(cv, ell, x, y, zq, qs), -12.0);
}

TEST(Hamiltonian, NegativeUnitVectorCase) {
    const int n = 3;
    const auto cv = values(0.0, Vector::Zero(n), Vector::Zero(n), Matrix::Zero(n, n));
    const Vector e2 = Vector::Unit(n, 1);
    EXPECT_DOUBLE_EQ(hamiltonian(cv, e2, -e2, Vector::Zero(n), Matrix::Zero(n, n), Matrix::Identity(n, n)), 1.0);
}

TEST(Hamiltonian, ExpandedFormAgrees) {
    std::mt19937_64 rng(2);
    for (int i = 0; i < 100; ++i) {
        const auto t = random_tuple(rng, 5);
        const double h = hamiltonian(t.cv, t.ell, t.x, t.y, t.zq, t.qs);
        const double he = hamiltonian_expanded(t.cv, t.ell, t.x, t.y, t.zq, t.qs);
        EXPECT_NEAR(h, he, 1e-12 * (1.0 + std::abs(h)));
    }
}

TEST(Hamiltonian, AffineInState) {
    std::mt19937_64 rng(3);
    for (int i = 0; i < 20; ++i) {
        const auto t = random_tuple(rng, 4);
        const Vector x2 = random_vector(rng, 4);
        const double s = 0.3;
        auto h = [&](const Vector& x) { return hamiltonian(t.cv, t.ell, x, t.y, t.zq, t.qs); };
        const double lhs = h(s * t.x + (1 - s) * x2);
        EXPECT_NEAR(lhs, s * h(t.x) + (1 - s) * h(x2), 1e-11 * (1.0 + std::abs(lhs)));
    }
}

TEST(Hamiltonian, GradientMatchesCentralDifference) {
    std::mt19937_64 rng(4);
    for (int i = 0; i < 50; ++i) {
        const auto t = random_tuple(rng, 4);
        const Vector grad = grad_x_hamiltonian(t.cv, t.ell, t.y, t.zq, t.qs);
        for (int j = 0; j < 4; ++j) {
            const double hstep = 1e-5;
            const Vector e = Vector::Unit(4, j) * hstep;
            const double fd = (hamiltonian(t.cv, t.ell, t.x + e, t.y, t.zq, t.qs) -
                               hamiltonian(t.cv, t.ell, t.x - e, t.y, t.zq, t.qs)) /
                              (2.0 * hstep);
            EXPECT_NEAR(grad(j), fd, 1e-7 * (1.0 + std::abs(fd)));
        }
    }
}

TEST(Hamiltonian, CoefficientSetOverloads) {
    const auto p = presets::benchmark_n8();
    std::mt19937_64 rng(5);
    std::vector<double> m(8, 0.2);
    const PathContext ctx_m{0, 3, 0.3, {m.data(), m.size()}};
    const HamiltonianArgs args{0.3, random_vector(rng, 8), p.controls[1], random_vector(rng, 8),
                               random_matrix(rng, 8, 8)};
    const Matrix qs = p.cov.bound.sqrt();
    EXPECT_NEAR(hamiltonian(args, ctx_m, p.coeffs, qs), hamiltonian_expanded(args, ctx_m, p.coeffs, qs), 1e-12);
}

TEST(Cost, ZeroRunningCostAndTerminal) {
    const auto p = presets::zero(3);
    const auto ens = shared_forward(p, base_control(p), 20, 1);
    const auto c = cost(*ens, p.coeffs);
    EXPECT_EQ(c.value, 0.0);
    EXPECT_EQ(c.stderr_, 0.0);
}

TEST(Cost, ConstantPath) {
    // x ≡ x0 when every coefficient and A vanish; J = T <ℓ, x0> + <G, x0>.
    Problem p = presets::zero(2);
    p.family = OperatorFamily::constant(Matrix::Zero(2, 2), 1.0, 0.1, 0.0);
    p.coeffs.x0 = (Vector(2) << 1.0, 2.0).finished();
    p.coeffs.ell = [](double, const Vector&) { return Vector((Vector(2) << 0.5, 0.25).finished()); };
    p.coeffs.terminal = (Vector(2) << 1.0, -1.0).finished();
    p.horizon = 2.0;
    const auto ens = shared_forward(p, base_control(p), 5, 2);
    EXPECT_NEAR(cost(*ens, p.coeffs).value, 2.0 * 1.0 - 1.0, 1e-13);
}

TEST(Cost, IndependentRecomputation) {
    const auto p = presets::mp_n4_u3();
    const auto ens = shared_forward(p, base_control(p), 200, 3);
    const auto c = cost(*ens, p.coeffs);
    double total = 0.0;
    const double dt = p.horizon / static_cast<double>(p.steps);
    for (std::size_t q = 0; q < ens->paths(); ++q) {
        double s = 0.0;
        for (std::size_t k = 0; k < p.steps; ++k) {
            const double v = p.controls[static_cast<std::size_t>(p.base_intervals[k * 4 / p.steps])](0);
            for (int i = 0; i < 4; ++i) s += dt * (0.5 + 0.2 * v * v) * ens->state(q, k)(i);
        }
        s += ens->state(q, p.steps).sum();
        total += s;
    }
    EXPECT_NEAR(c.value, total / static_cast<double>(ens->paths()), 1e-12 * std::abs(c.value));
    EXPECT_GT(c.stderr_, 0.0);
}

TEST(HamiltonianDifference, MatchesDirectDifferenceExactlyOnDyadicData) {
    const int n = 2;
    const auto cs = values(0.25, (Vector(2) << 0.5, -0.25).finished(), (Vector(2) << 0.125, 0.0).finished(),
                           0.5 * Matrix::Identity(n, n));
    const auto cu = values(-0.5, (Vector(2) << 1.0, 0.75).finished(), (Vector(2) << 0.0, 0.5).finished(),
                           0.25 * Matrix::Identity(n, n));
    const Vector ls = (Vector(2) << 1.0, 0.5).finished(), lu = (Vector(2) << 0.5, 0.5).finished();
    const Vector x = (Vector(2) << 2.0, -1.0).finished(), y = (Vector(2) << 0.5, 4.0).finished();
    const Matrix zq = (Matrix(2, 2) << 1.0, 0.5, -0.25, 2.0).finished();
    const Matrix qs = (Matrix(2, 2) << 0.5, 0.0, 0.0, 0.25).finished();
    const double direct = hamiltonian(cu, lu, x, y, zq, qs) - hamiltonian(cs, ls, x, y, zq, qs);
    EXPECT_EQ(hamiltonian_difference(cu, cs, lu, ls, x, y, zq, qs), direct);
    EXPECT_EQ(hamiltonian_difference(cs, cs, ls, ls, x, y, zq, qs), 0.0);
}
