#pragma once

#include "smplab/core.hpp"

namespace smplab {

/// Strictly increasing time grid 0 = t_0 < ... < t_L = T.
class TimeGrid {
public:
    TimeGrid() = default;

    explicit TimeGrid(std::vector<double> times) : t_(std::move(times)) {
        if (t_.size() < 2) throw std::invalid_argument("TimeGrid: need at least one step");
        if (t_.front() != 0.0) throw std::invalid_argument("TimeGrid: grid must start at t = 0");
        for (std::size_t k = 1; k < t_.size(); ++k) {
            if (!(t_[k] > t_[k - 1])) throw std::invalid_argument("TimeGrid: times must be strictly increasing");
        }
    }

    static TimeGrid uniform(double horizon, std::size_t steps) {
        if (!(horizon > 0.0)) throw std::invalid_argument("TimeGrid: horizon must be positive");
        if (steps == 0) throw std::invalid_argument("TimeGrid: need at least one step");
        std::vector<double> t(steps + 1);
        for (std::size_t k = 0; k <= steps; ++k) t[k] = horizon * static_cast<double>(k) / static_cast<double>(steps);
        t.back() = horizon;
        return TimeGrid(std::move(t));
    }

    std::size_t steps() const { return t_.size() - 1; }
    double time(std::size_t k) const { return t_[k]; }
    double dt(std::size_t k) const { return t_[k + 1] - t_[k]; }
    double horizon() const { return t_.back(); }
    const std::vector<double>& times() const { return t_; }

    /// Index of the grid point at time t; throws when t is not a grid point.
    std::size_t index_of(double t) const {
        const double tol = 1e-9 * horizon();
        auto it = std::lower_bound(t_.begin(), t_.end(), t - tol);
        if (it == t_.end() || std::abs(*it - t) > tol) {
            throw std::invalid_argument("TimeGrid: time " + std::to_string(t) + " is not a grid point");
        }
        return static_cast<std::size_t>(it - t_.begin());
    }

    /// Every `factor`-th point; steps() must be divisible by factor.
    TimeGrid coarsened(std::size_t factor) const {
        if (factor == 0 || steps() % factor != 0) throw std::invalid_argument("TimeGrid: bad coarsening factor");
        std::vector<double> t;
        for (std::size_t k = 0; k <= steps(); k += factor) t.push_back(t_[k]);
        return TimeGrid(std::move(t));
    }

    bool operator==(const TimeGrid&) const = default;

private:
    std::vector<double> t_;
};

}  // namespace smplab
