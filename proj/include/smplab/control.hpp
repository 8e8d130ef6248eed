#pragma once

#include "smplab/core.hpp"
#include "smplab/grid.hpp"

#include <optional>

namespace smplab {

/// Finite control set U ⊂ R^m; it need not be convex.
class ControlSet {
public:
    ControlSet() = default;
    explicit ControlSet(std::vector<Vector> values) : values_(std::move(values)) {
        if (values_.empty()) throw std::invalid_argument("ControlSet: U must be nonempty");
        for (const auto& v : values_) require_same_dim(v.size(), values_.front().size(), "ControlSet");
    }

    /// Scalar controls.
    static ControlSet scalars(std::initializer_list<double> vs) {
        std::vector<Vector> out;
        for (double v : vs) out.push_back(Vector::Constant(1, v));
        return ControlSet(std::move(out));
    }

    std::size_t size() const { return values_.size(); }
    int dim() const { return values_.empty() ? 0 : static_cast<int>(values_.front().size()); }
    const Vector& operator[](std::size_t i) const { return values_.at(i); }
    const std::vector<Vector>& values() const { return values_; }

    std::optional<std::size_t> index_of(const Vector& v) const {
        for (std::size_t i = 0; i < values_.size(); ++i) {
            if (values_[i].size() == v.size() && values_[i] == v) return i;
        }
        return std::nullopt;
    }

private:
    std::vector<Vector> values_;
};

/// Per-path override of the control on the steps [k_begin, k_end), decided
/// from information available at `decision_step`.
struct PathwiseSegment {
    std::size_t k_begin = 0;
    std::size_t k_end = 0;
    std::size_t decision_step = 0;
    std::vector<int> per_path;
};

enum class ControlKind { piecewise_constant, spiked };

/// U-valued control on a time grid, constant on each step [t_k, t_{k+1}).
class ControlProcess {
public:
    ControlProcess() = default;
    ControlProcess(ControlSet set, std::vector<int> step_indices, ControlKind kind = ControlKind::piecewise_constant)
        : set_(std::move(set)), steps_(std::move(step_indices)), kind_(kind) {
        for (int i : steps_) {
            if (i < 0 || static_cast<std::size_t>(i) >= set_.size()) {
                throw std::invalid_argument("ControlProcess: control value not in U");
            }
        }
    }

    /// Equal-length intervals over the grid, one U-index per interval.
    static ControlProcess piecewise_constant(const ControlSet& set, const TimeGrid& grid,
                                             std::span<const int> interval_indices) {
        const std::size_t n = interval_indices.size();
        if (n == 0 || grid.steps() % n != 0) {
            throw std::invalid_argument("ControlProcess: interval count must divide the number of steps");
        }
        const std::size_t per = grid.steps() / n;
        std::vector<int> steps(grid.steps());
        for (std::size_t k = 0; k < grid.steps(); ++k) steps[k] = interval_indices[k / per];
        return ControlProcess(set, std::move(steps));
    }

    static ControlProcess constant(const ControlSet& set, const TimeGrid& grid, int index) {
        const int idx[1] = {index};
        return piecewise_constant(set, grid, idx);
    }

    /// Control from raw values; each must belong to U.
    static ControlProcess from_values(const ControlSet& set, const std::vector<Vector>& values) {
        std::vector<int> idx;
        for (const auto& v : values) {
            const auto i = set.index_of(v);
            if (!i) throw std::invalid_argument("ControlProcess: control value not in U");
            idx.push_back(static_cast<int>(*i));
        }
        return ControlProcess(set, std::move(idx));
    }

    ControlKind kind() const { return kind_; }
    const ControlSet& set() const { return set_; }
    std::size_t steps() const { return steps_.size(); }
    const std::vector<int>& step_indices() const { return steps_; }
    const std::optional<PathwiseSegment>& segment() const { return segment_; }

    int index(std::size_t path, std::size_t k) const {
        if (segment_ && k >= segment_->k_begin && k < segment_->k_end) return segment_->per_path[path];
        return steps_[k];
    }
    const Vector& value(std::size_t path, std::size_t k) const { return set_[static_cast<std::size_t>(index(path, k))]; }

    ControlProcess with_segment(PathwiseSegment seg) const {
        for (int i : seg.per_path) {
            if (i < 0 || static_cast<std::size_t>(i) >= set_.size()) {
                throw std::invalid_argument("ControlProcess: control value not in U");
            }
        }
        ControlProcess out = *this;
        out.segment_ = std::move(seg);
        out.kind_ = ControlKind::spiked;
        return out;
    }

    ControlProcess with_steps(std::size_t k_begin, std::size_t k_end, int index) const {
        ControlProcess out = *this;
        if (k_end > steps_.size() || k_begin >= k_end) throw std::invalid_argument("ControlProcess: bad step range");
        if (index < 0 || static_cast<std::size_t>(index) >= set_.size()) {
            throw std::invalid_argument("ControlProcess: control value not in U");
        }
        for (std::size_t k = k_begin; k < k_end; ++k) out.steps_[k] = index;
        out.kind_ = ControlKind::spiked;
        return out;
    }

    /// Grid agreement and adaptedness; throws on violation.
    void validate(const TimeGrid& grid, std::size_t n_paths) const {
        if (steps_.size() != grid.steps()) throw std::invalid_argument("ControlProcess: control and noise grids differ");
        if (segment_) {
            if (segment_->decision_step > segment_->k_begin) {
                throw std::invalid_argument("ControlProcess: non-adapted control (decided after it is applied)");
            }
            if (segment_->k_end > steps_.size() || segment_->per_path.size() != n_paths) {
                throw std::invalid_argument("ControlProcess: pathwise segment does not match the ensemble");
            }
        }
    }

    bool operator==(const ControlProcess& o) const {
        return steps_ == o.steps_ && kind_ == o.kind_ && segment_.has_value() == o.segment_.has_value() &&
               (!segment_ || (segment_->k_begin == o.segment_->k_begin && segment_->k_end == o.segment_->k_end &&
                              segment_->per_path == o.segment_->per_path));
    }

private:
    ControlSet set_;
    std::vector<int> steps_;
    ControlKind kind_ = ControlKind::piecewise_constant;
    std::optional<PathwiseSegment> segment_;
};

}  // namespace smplab
