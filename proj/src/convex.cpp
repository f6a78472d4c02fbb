#include "mmsde/convex.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <mutex>

namespace mmsde {

bool solve_dense(Mat a, Vec b, Vec& z) {
    const std::size_t n = a.rows;
    if (a.cols != n || b.size() != n) return false;
    for (std::size_t col = 0; col < n; ++col) {
        std::size_t piv = col;
        for (std::size_t r = col + 1; r < n; ++r)
            if (std::abs(a(r, col)) > std::abs(a(piv, col))) piv = r;
        if (std::abs(a(piv, col)) < 1e-300) return false;
        if (piv != col) {
            for (std::size_t c = 0; c < n; ++c) std::swap(a(piv, c), a(col, c));
            std::swap(b[piv], b[col]);
        }
        for (std::size_t r = col + 1; r < n; ++r) {
            const double f = a(r, col) / a(col, col);
            if (f == 0.0) continue;
            for (std::size_t c = col; c < n; ++c) a(r, c) -= f * a(col, c);
            b[r] -= f * b[col];
        }
    }
    z.assign(n, 0.0);
    for (std::size_t i = n; i-- > 0;) {
        double s = b[i];
        for (std::size_t c = i + 1; c < n; ++c) s -= a(i, c) * z[c];
        z[i] = s / a(i, i);
    }
    return true;
}

// ---------------------------------------------------------------------------
// ConvexSet

ConvexSet ConvexSet::whole_space(std::size_t dim) {
    ConvexSet s;
    s.kind_ = Kind::WholeSpace;
    s.dim_ = dim;
    s.interior_point_.assign(dim, 0.0);
    return s;
}

ConvexSet ConvexSet::box(Vec lower, Vec upper) {
    if (lower.size() != upper.size() || lower.empty())
        throw ParameterError("box: bound vectors must be nonempty and equal length");
    ConvexSet s;
    s.kind_ = Kind::Box;
    s.dim_ = lower.size();
    s.interior_point_.assign(s.dim_, 0.0);
    for (std::size_t i = 0; i < s.dim_; ++i) {
        if (std::isnan(lower[i]) || std::isnan(upper[i]) || !(lower[i] < upper[i]))
            throw ParameterError("box: need lower < upper in every coordinate");
        const bool lo = std::isfinite(lower[i]), hi = std::isfinite(upper[i]);
        if (lo && hi)
            s.interior_point_[i] = 0.5 * (lower[i] + upper[i]);
        else if (lo)
            s.interior_point_[i] = lower[i] + 1.0;
        else if (hi)
            s.interior_point_[i] = upper[i] - 1.0;
    }
    s.lower_ = std::move(lower);
    s.upper_ = std::move(upper);
    return s;
}

ConvexSet ConvexSet::halfline(double lo) {
    return box({lo}, {std::numeric_limits<double>::infinity()});
}

ConvexSet ConvexSet::ball(Vec center, double radius) {
    if (center.empty() || !all_finite(center)) throw ParameterError("ball: bad center");
    if (!(radius > 0.0) || !std::isfinite(radius)) throw ParameterError("ball: radius must be positive");
    ConvexSet s;
    s.kind_ = Kind::Ball;
    s.dim_ = center.size();
    s.interior_point_ = center;
    s.center_ = std::move(center);
    s.radius_ = radius;
    return s;
}

ConvexSet ConvexSet::halfspace(Vec normal, double offset) {
    if (normal.empty() || !all_finite(normal)) throw ParameterError("halfspace: bad normal");
    const double n2 = dot(normal, normal);
    if (!(n2 > 0.0)) throw ParameterError("halfspace: normal must be nonzero");
    if (!std::isfinite(offset)) throw ParameterError("halfspace: bad offset");
    ConvexSet s;
    s.kind_ = Kind::Halfspace;
    s.dim_ = normal.size();
    s.interior_point_.assign(s.dim_, 0.0);
    for (std::size_t i = 0; i < s.dim_; ++i)
        s.interior_point_[i] = normal[i] * (offset - 1.0) / n2;
    s.normal_ = std::move(normal);
    s.offset_ = offset;
    return s;
}

ConvexSet ConvexSet::polyhedron(Mat rows, Vec rhs, Vec interior_point) {
    if (rows.rows == 0 || rows.rows != rhs.size() || rows.cols != interior_point.size())
        throw ParameterError("polyhedron: inconsistent shapes");
    ConvexSet s;
    s.kind_ = Kind::Polyhedron;
    s.dim_ = rows.cols;
    s.rows_ = std::move(rows);
    s.rhs_ = std::move(rhs);
    s.interior_point_ = std::move(interior_point);
    if (!(s.membership_margin(s.interior_point_) < 0.0))
        throw ParameterError("polyhedron: interior_point is not strictly inside");
    return s;
}

double ConvexSet::membership_margin(const Vec& x) const {
    switch (kind_) {
        case Kind::WholeSpace:
            return -std::numeric_limits<double>::infinity();
        case Kind::Box: {
            double worst = -std::numeric_limits<double>::infinity();
            for (std::size_t i = 0; i < dim_; ++i) {
                if (std::isfinite(lower_[i])) worst = std::max(worst, lower_[i] - x[i]);
                if (std::isfinite(upper_[i])) worst = std::max(worst, x[i] - upper_[i]);
            }
            return worst;
        }
        case Kind::Ball:
            return dist(x, center_) - radius_;
        case Kind::Halfspace:
            return (dot(normal_, x) - offset_) / norm(normal_);
        case Kind::Polyhedron: {
            double worst = -std::numeric_limits<double>::infinity();
            for (std::size_t r = 0; r < rows_.rows; ++r) {
                double s = -rhs_[r];
                for (std::size_t c = 0; c < dim_; ++c) s += rows_(r, c) * x[c];
                worst = std::max(worst, s);
            }
            return worst;
        }
    }
    return 0.0;
}

namespace {

// The "already inside" tests below carry a machine-level relative collar so
// that projecting a just-projected point is a bitwise no-op.
void project_halfspace(const Vec& a, double b, const Vec& x, Vec& out) {
    out = x;
    const double ax = dot(a, x);
    const double viol = ax - b;
    const double collar = 1e-14 * std::max({1.0, std::abs(ax), std::abs(b)});
    if (viol > collar) axpy(-viol / dot(a, a), a, out);
}

// Dykstra's cyclic projection onto an intersection of halfspaces.
void project_polyhedron(const Mat& rows, const Vec& rhs, const Vec& x, Vec& out) {
    constexpr int kMaxSweeps = 200;
    constexpr double kTol = 1e-10;
    const std::size_t m = rows.rows, n = rows.cols;
    out = x;
    std::vector<Vec> corrections(m, Vec(n, 0.0));
    Vec work(n), row(n), prev(n);
    for (int sweep = 0; sweep < kMaxSweeps; ++sweep) {
        prev = out;
        for (std::size_t r = 0; r < m; ++r) {
            for (std::size_t c = 0; c < n; ++c) work[c] = out[c] + corrections[r][c];
            for (std::size_t c = 0; c < n; ++c) row[c] = rows(r, c);
            project_halfspace(row, rhs[r], work, out);
            for (std::size_t c = 0; c < n; ++c) corrections[r][c] = work[c] - out[c];
        }
        if (dist(prev, out) < kTol) break;
    }
}

}  // namespace

void ConvexSet::project(const Vec& x, Vec& out) const {
    if (x.size() != dim_) throw ParameterError("project: dimension mismatch");
    switch (kind_) {
        case Kind::WholeSpace:
            out = x;
            return;
        case Kind::Box:
            out = x;
            for (std::size_t i = 0; i < dim_; ++i)
                out[i] = std::min(std::max(out[i], lower_[i]), upper_[i]);
            return;
        case Kind::Ball: {
            const double d = dist(x, center_);
            if (d <= radius_ * (1.0 + 1e-14)) {
                out = x;
            } else {
                out = center_;
                const double scale = radius_ / d;
                for (std::size_t i = 0; i < dim_; ++i)
                    out[i] += scale * (x[i] - center_[i]);
            }
            return;
        }
        case Kind::Halfspace:
            project_halfspace(normal_, offset_, x, out);
            return;
        case Kind::Polyhedron:
            if (membership_margin(x) <= 0.0) {
                out = x;
                return;
            }
            project_polyhedron(rows_, rhs_, x, out);
            return;
    }
}

// ---------------------------------------------------------------------------
// ConvexFunction

namespace {
const ConvexSet& whole_space_of(std::size_t dim) {
    static std::mutex mu;
    static std::map<std::size_t, ConvexSet> cache;
    std::lock_guard<std::mutex> lock(mu);
    auto it = cache.find(dim);
    if (it == cache.end()) it = cache.emplace(dim, ConvexSet::whole_space(dim)).first;
    return it->second;
}
}  // namespace

ConvexFunction ConvexFunction::abs_norm(std::size_t dim, double weight) {
    if (dim == 0) throw ParameterError("abs_norm: zero dimension");
    if (!(weight >= 0.0) || !std::isfinite(weight)) throw ParameterError("abs_norm: bad weight");
    ConvexFunction f;
    f.kind_ = Kind::AbsNorm;
    f.dim_ = dim;
    f.weight_ = weight;
    return f;
}

ConvexFunction ConvexFunction::quadratic(Mat q_matrix, Vec q_linear) {
    if (q_matrix.rows == 0 || q_matrix.rows != q_matrix.cols || q_matrix.rows != q_linear.size())
        throw ParameterError("quadratic: inconsistent shapes");
    ConvexFunction f;
    f.kind_ = Kind::Quadratic;
    f.dim_ = q_matrix.rows;
    f.q_diagonal_ = true;
    f.q_isotropic_ = true;
    f.q_curvature_ = q_matrix(0, 0);
    for (std::size_t i = 0; i < f.dim_ && (f.q_diagonal_ || f.q_isotropic_); ++i)
        for (std::size_t j = 0; j < f.dim_; ++j) {
            if (i != j && q_matrix(i, j) != 0.0) { f.q_diagonal_ = false; f.q_isotropic_ = false; }
            if (i == j && q_matrix(i, j) != f.q_curvature_) f.q_isotropic_ = false;
        }
    f.q_matrix_ = std::move(q_matrix);
    f.q_linear_ = std::move(q_linear);
    return f;
}

ConvexFunction ConvexFunction::quadratic_iso(std::size_t dim, double curvature) {
    Mat q(dim, dim);
    for (std::size_t i = 0; i < dim; ++i) q(i, i) = curvature;
    return quadratic(std::move(q), Vec(dim, 0.0));
}

ConvexFunction ConvexFunction::indicator(ConvexSet set) {
    ConvexFunction f;
    f.kind_ = Kind::Indicator;
    f.dim_ = set.dim();
    f.set_ = std::make_shared<const ConvexSet>(std::move(set));
    return f;
}

ConvexFunction ConvexFunction::sum(std::vector<ConvexFunction> parts) {
    if (parts.empty()) throw ParameterError("sum: no parts");
    ConvexFunction f;
    f.kind_ = Kind::Sum;
    f.dim_ = parts.front().dim();
    for (const auto& p : parts)
        if (p.dim() != f.dim_) throw ParameterError("sum: dimension mismatch between parts");
    f.parts_ = std::move(parts);
    f.analyze_sum();
    return f;
}

void ConvexFunction::analyze_sum() {
    for (int i = 0; i < static_cast<int>(parts_.size()); ++i) {
        switch (parts_[static_cast<std::size_t>(i)].kind_) {
            case Kind::AbsNorm:
                if (sum_abs_ >= 0) throw CapabilityError("sum: multiple abs-norm parts unsupported");
                sum_abs_ = i;
                break;
            case Kind::Quadratic:
                if (sum_quad_ >= 0) throw CapabilityError("sum: multiple quadratic parts unsupported");
                sum_quad_ = i;
                break;
            case Kind::Indicator:
                if (sum_ind_ >= 0) throw CapabilityError("sum: multiple indicator parts unsupported");
                sum_ind_ = i;
                break;
            case Kind::Sum:
                throw CapabilityError("sum: nested sums unsupported");
        }
    }
}

double ConvexFunction::value(const Vec& x) const {
    switch (kind_) {
        case Kind::AbsNorm: {
            double s = 0.0;
            for (double v : x) s += std::abs(v);
            return weight_ * s;
        }
        case Kind::Quadratic: {
            Vec qx(dim_, 0.0);
            gemv_add(1.0, q_matrix_, x, qx);
            return 0.5 * dot(x, qx) + dot(q_linear_, x);
        }
        case Kind::Indicator:
            return set_->contains(x, 1e-12) ? 0.0 : std::numeric_limits<double>::infinity();
        case Kind::Sum: {
            double s = 0.0;
            for (const auto& p : parts_) s += p.value(x);
            return s;
        }
    }
    return 0.0;
}

void ConvexFunction::smooth_gradient(const Vec& x, Vec& out) const {
    out.assign(dim_, 0.0);
    if (kind_ == Kind::Quadratic) {
        gemv_add(1.0, q_matrix_, x, out);
        axpy(1.0, q_linear_, out);
    } else if (kind_ == Kind::Sum && sum_quad_ >= 0) {
        parts_[static_cast<std::size_t>(sum_quad_)].smooth_gradient(x, out);
    }
}

const ConvexSet& ConvexFunction::domain() const {
    if (kind_ == Kind::Indicator) return *set_;
    if (kind_ == Kind::Sum && sum_ind_ >= 0)
        return parts_[static_cast<std::size_t>(sum_ind_)].domain();
    return whole_space_of(dim_);
}

namespace {
inline double soft_threshold(double x, double t) {
    if (x > t) return x - t;
    if (x < -t) return x + t;
    return 0.0;
}
}  // namespace

void ConvexFunction::prox(double lambda, const Vec& x, Vec& out) const {
    if (!(lambda > 0.0)) throw ParameterError("prox: lambda must be positive");
    if (x.size() != dim_) throw ParameterError("prox: dimension mismatch");
    switch (kind_) {
        case Kind::AbsNorm:
            out.resize(dim_);
            for (std::size_t i = 0; i < dim_; ++i) out[i] = soft_threshold(x[i], lambda * weight_);
            return;
        case Kind::Quadratic: {
            // (I + lambda Q) z = x - lambda q
            Mat a = q_matrix_;
            for (auto& v : a.a) v *= lambda;
            for (std::size_t i = 0; i < dim_; ++i) a(i, i) += 1.0;
            Vec b = x;
            axpy(-lambda, q_linear_, b);
            if (!solve_dense(std::move(a), std::move(b), out))
                throw ParameterError("prox: singular quadratic system (I + lambda Q)");
            return;
        }
        case Kind::Indicator:
            set_->project(x, out);
            return;
        case Kind::Sum:
            break;
    }

    // Sum compositions with an exact closed form.
    const ConvexFunction* q = sum_quad_ >= 0 ? &parts_[static_cast<std::size_t>(sum_quad_)] : nullptr;
    const ConvexFunction* ab = sum_abs_ >= 0 ? &parts_[static_cast<std::size_t>(sum_abs_)] : nullptr;
    const ConvexFunction* ind = sum_ind_ >= 0 ? &parts_[static_cast<std::size_t>(sum_ind_)] : nullptr;

    if (ab && ind && !q) {
        // separable: clamp after soft threshold, valid for boxes only
        if (ind->set_->kind() != ConvexSet::Kind::Box)
            throw CapabilityError("prox: abs-norm + indicator supported for boxes only");
        Vec soft(dim_);
        for (std::size_t i = 0; i < dim_; ++i) soft[i] = soft_threshold(x[i], lambda * ab->weight_);
        ind->set_->project(soft, out);
        return;
    }
    if (ab && q && !ind) {
        if (!q->q_diagonal_)
            throw CapabilityError("prox: abs-norm + quadratic supported for diagonal quadratics only");
        out.resize(dim_);
        for (std::size_t i = 0; i < dim_; ++i) {
            const double shifted = x[i] - lambda * q->q_linear_[i];
            out[i] = soft_threshold(shifted, lambda * ab->weight_) / (1.0 + lambda * q->q_matrix_(i, i));
        }
        return;
    }
    if (q && ind && !ab) {
        if (!q->q_isotropic_)
            throw CapabilityError("prox: quadratic + indicator supported for isotropic quadratics only");
        Vec shifted = x;
        axpy(-lambda, q->q_linear_, shifted);
        const double scale = 1.0 / (1.0 + lambda * q->q_curvature_);
        for (auto& v : shifted) v *= scale;
        ind->set_->project(shifted, out);
        return;
    }
    if (ab && q && ind) {
        if (!q->q_diagonal_ || ind->set_->kind() != ConvexSet::Kind::Box)
            throw CapabilityError("prox: abs+quadratic+indicator needs diagonal quadratic and box");
        Vec soft(dim_);
        for (std::size_t i = 0; i < dim_; ++i) {
            const double shifted = x[i] - lambda * q->q_linear_[i];
            soft[i] = soft_threshold(shifted, lambda * ab->weight_) / (1.0 + lambda * q->q_matrix_(i, i));
        }
        ind->set_->project(soft, out);
        return;
    }
    // single-part sums fall back to the part itself
    if (parts_.size() == 1) {
        parts_.front().prox(lambda, x, out);
        return;
    }
    throw CapabilityError("prox: unsupported sum composition");
}

}  // namespace mmsde
