#pragma once

#include <cstdint>
#include <memory>
#include <optional>

#include "mmsde/convex.hpp"
#include "mmsde/linalg.hpp"

namespace mmsde {

struct MonotoneAuditReport {
    bool pass = true;
    double worst_violation = 0.0;
    Vec witness_x1, witness_x2;
};

/// Maximal monotone operator exposed through its resolvent
/// J_lambda = (I + lambda A)^{-1}. Kinds: the zero operator, a linear map
/// x -> Mx with M positive semidefinite, the subdifferential of a convex
/// function (resolvent = proximal map), and the normal cone of a convex set
/// (resolvent = Euclidean projection, independent of lambda).
class MonotoneOperator {
  public:
    enum class Kind { Zero, Linear, Subdifferential, NormalCone };

    /// Zero operator on a 0-dimensional space; placeholder until a factory
    /// below assigns something meaningful.
    MonotoneOperator() = default;

    static MonotoneOperator zero(std::size_t dim);
    /// Monotonicity of the matrix is *not* verified here; audit_monotone
    /// exists to catch a non-PSD choice.
    static MonotoneOperator linear(Mat m);
    static MonotoneOperator subdifferential(ConvexFunction f);
    static MonotoneOperator normal_cone(ConvexSet set);

    Kind kind() const { return kind_; }
    std::size_t dim() const { return dim_; }

    /// Closure of the operator's domain.
    const ConvexSet& domain() const;

    /// J_lambda(x): the unique z with z + lambda A(z) containing x.
    void resolvent(double lambda, const Vec& x, Vec& out) const;
    Vec resolvent(double lambda, const Vec& x) const {
        Vec out;
        resolvent(lambda, x, out);
        return out;
    }

    /// Yosida approximation A_lambda(x) = (x - J_lambda(x)) / lambda;
    /// monotone and (1/lambda)-Lipschitz.
    void yosida(double lambda, const Vec& x, Vec& out) const;
    Vec yosida(double lambda, const Vec& x) const {
        Vec out;
        yosida(lambda, x, out);
        return out;
    }

  private:
    Kind kind_ = Kind::Zero;
    std::size_t dim_ = 0;
    Mat m_;                                      // linear
    std::shared_ptr<const ConvexFunction> f_;    // subdifferential
    std::shared_ptr<const ConvexSet> set_;       // normal cone / zero domain
};

/// Statistical monotonicity check through the Yosida approximation at small
/// lambda: samples `count` Gaussian pairs centered at the domain's interior
/// point and reports the most negative <x1-x2, A_l(x1)-A_l(x2)>.
MonotoneAuditReport audit_monotone(const MonotoneOperator& op, std::uint64_t seed,
                                   int count = 10000, double tol = 1e-9,
                                   double lambda = 1e-3);

}  // namespace mmsde
