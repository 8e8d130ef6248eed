#pragma once

#include "smplab/core.hpp"

namespace smplab {

/// Polynomial basis: 1, monomials of total degree 1..state_degree in the
/// state and 1..factor_degree in the coefficient-driving factor (no cross terms).
struct BasisSpec {
    int state_degree = 2;
    int factor_degree = 2;

    bool operator==(const BasisSpec&) const = default;
};

class FeatureMap {
public:
    FeatureMap(const BasisSpec& spec, int state_dim, int factor_dim) : state_dim_(state_dim), factor_dim_(factor_dim) {
        if (spec.state_degree < 0 || spec.factor_degree < 0) throw std::invalid_argument("BasisSpec: negative degree");
        monomials(state_dim, spec.state_degree, state_terms_);
        monomials(factor_dim, spec.factor_degree, factor_terms_);
    }

    int size() const { return 1 + static_cast<int>(state_terms_.size() + factor_terms_.size()); }
    int state_dim() const { return state_dim_; }
    int factor_dim() const { return factor_dim_; }

    void evaluate(const Eigen::Ref<const Vector>& x, const Eigen::Ref<const Vector>& f, Eigen::Ref<Vector> out) const {
        Eigen::Index j = 0;
        out(j++) = 1.0;
        for (const auto& m : state_terms_) out(j++) = product(x, m);
        for (const auto& m : factor_terms_) out(j++) = product(f, m);
    }

private:
    using Monomial = std::vector<int>;  // variable indices, nondecreasing

    static void monomials(int dim, int degree, std::vector<Monomial>& out) {
        Monomial cur;
        for (int d = 1; d <= degree; ++d) extend(dim, d, 0, cur, out);
    }

    static void extend(int dim, int remaining, int start, Monomial& cur, std::vector<Monomial>& out) {
        if (remaining == 0) {
            out.push_back(cur);
            return;
        }
        for (int i = start; i < dim; ++i) {
            cur.push_back(i);
            extend(dim, remaining - 1, i, cur, out);
            cur.pop_back();
        }
    }

    static double product(const Eigen::Ref<const Vector>& v, const Monomial& m) {
        double s = 1.0;
        for (int i : m) s *= v(i);
        return s;
    }

    int state_dim_;
    int factor_dim_;
    std::vector<Monomial> state_terms_;
    std::vector<Monomial> factor_terms_;
};

/// Least-squares coefficients of targets on the design matrix.
struct RegressionFit {
    Matrix beta;  // features x targets
    bool ridge = false;
    double rcond = 0.0;
};

/// Cholesky on the Gram matrix; falls back to ridge 1e-8 (scaled by the mean
/// Gram diagonal) when the design is rank deficient or ill conditioned.
class GramSolver {
public:
    explicit GramSolver(const RowMatrix& design, double ridge = 1e-8) {
        const auto p = design.cols();
        gram_ = Matrix::Zero(p, p);
        gram_.selfadjointView<Eigen::Lower>().rankUpdate(design.transpose());
        gram_.triangularView<Eigen::StrictlyUpper>() = gram_.transpose();
        llt_.compute(gram_);
        rcond_ = llt_.info() == Eigen::Success ? llt_.rcond() : 0.0;
        if (!(rcond_ >= 1e-12)) {
            ridge_ = true;
            const double scale = std::max(gram_.trace() / static_cast<double>(p), 1e-300);
            Matrix reg = gram_;
            reg.diagonal().array() += ridge * scale;
            llt_.compute(reg);
            if (llt_.info() != Eigen::Success) throw NumericalError("regression: ridge solve failed");
        }
    }

    RegressionFit solve(const RowMatrix& design, const RowMatrix& targets) const {
        RegressionFit fit;
        fit.beta = llt_.solve(Matrix(design.transpose() * targets));
        if (!ridge_) {
            // one refinement step against the unregularised normal equations
            const Matrix resid = design.transpose() * (targets - design * fit.beta);
            fit.beta += llt_.solve(resid);
        }
        fit.ridge = ridge_;
        fit.rcond = rcond_;
        return fit;
    }

    bool ridge() const { return ridge_; }
    double rcond() const { return rcond_; }

private:
    Matrix gram_;
    Eigen::LLT<Matrix> llt_;
    double rcond_ = 0.0;
    bool ridge_ = false;
};

}  // namespace smplab
