#include "mmsde/monotone.hpp"

#include <cmath>

#include "mmsde/errors.hpp"
#include "mmsde/rng.hpp"

namespace mmsde {

MonotoneOperator MonotoneOperator::zero(std::size_t dim) {
    MonotoneOperator op;
    op.kind_ = Kind::Zero;
    op.dim_ = dim;
    op.set_ = std::make_shared<const ConvexSet>(ConvexSet::whole_space(dim));
    return op;
}

MonotoneOperator MonotoneOperator::linear(Mat m) {
    if (m.rows == 0 || m.rows != m.cols) throw ParameterError("linear operator: square matrix required");
    MonotoneOperator op;
    op.kind_ = Kind::Linear;
    op.dim_ = m.rows;
    op.m_ = std::move(m);
    op.set_ = std::make_shared<const ConvexSet>(ConvexSet::whole_space(op.dim_));
    return op;
}

MonotoneOperator MonotoneOperator::subdifferential(ConvexFunction f) {
    MonotoneOperator op;
    op.kind_ = Kind::Subdifferential;
    op.dim_ = f.dim();
    op.f_ = std::make_shared<const ConvexFunction>(std::move(f));
    return op;
}

MonotoneOperator MonotoneOperator::normal_cone(ConvexSet set) {
    MonotoneOperator op;
    op.kind_ = Kind::NormalCone;
    op.dim_ = set.dim();
    op.set_ = std::make_shared<const ConvexSet>(std::move(set));
    return op;
}

const ConvexSet& MonotoneOperator::domain() const {
    if (kind_ == Kind::Subdifferential) return f_->domain();
    return *set_;
}

void MonotoneOperator::resolvent(double lambda, const Vec& x, Vec& out) const {
    if (!(lambda > 0.0)) throw ParameterError("resolvent: lambda must be positive");
    if (x.size() != dim_) throw ParameterError("resolvent: dimension mismatch");
    switch (kind_) {
        case Kind::Zero:
            out = x;
            return;
        case Kind::Linear: {
            Mat a = m_;
            for (auto& v : a.a) v *= lambda;
            for (std::size_t i = 0; i < dim_; ++i) a(i, i) += 1.0;
            if (!solve_dense(std::move(a), x, out))
                throw ParameterError("resolvent: singular system (I + lambda M)");
            return;
        }
        case Kind::Subdifferential:
            f_->prox(lambda, x, out);
            return;
        case Kind::NormalCone:
            set_->project(x, out);
            return;
    }
}

void MonotoneOperator::yosida(double lambda, const Vec& x, Vec& out) const {
    resolvent(lambda, x, out);
    for (std::size_t i = 0; i < dim_; ++i) out[i] = (x[i] - out[i]) / lambda;
}

MonotoneAuditReport audit_monotone(const MonotoneOperator& op, std::uint64_t seed, int count,
                                   double tol, double lambda) {
    if (count < 1) throw ParameterError("audit_monotone: count must be >= 1");
    MonotoneAuditReport report;
    report.worst_violation = 0.0;
    const std::size_t n = op.dim();
    const Vec& center = op.domain().interior_point();
    NoiseStream stream(seed, /*stream_id=*/0x4d4f4e4f, static_cast<int>(n));

    Vec x1(n), x2(n), a1(n), a2(n), dx(n), da(n);
    std::uint64_t counter = 0;
    for (int k = 0; k < count; ++k) {
        for (std::size_t i = 0; i < n; ++i) x1[i] = center[i] + stream.normal(counter++);
        for (std::size_t i = 0; i < n; ++i) x2[i] = center[i] + stream.normal(counter++);
        op.yosida(lambda, x1, a1);
        op.yosida(lambda, x2, a2);
        for (std::size_t i = 0; i < n; ++i) {
            dx[i] = x1[i] - x2[i];
            da[i] = a1[i] - a2[i];
        }
        const double inner = dot(dx, da);
        if (inner < report.worst_violation) {
            report.worst_violation = inner;
            report.witness_x1 = x1;
            report.witness_x2 = x2;
        }
    }
    report.pass = report.worst_violation >= -tol;
    return report;
}

}  // namespace mmsde
