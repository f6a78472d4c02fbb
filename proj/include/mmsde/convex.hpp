#pragma once

#include <limits>
#include <memory>
#include <vector>

#include "mmsde/errors.hpp"
#include "mmsde/linalg.hpp"

namespace mmsde {

/// Closed convex subset of R^n with nonempty interior, given in one of a
/// few parametric forms. Projections are closed-form except for the
/// polyhedron, which runs Dykstra's cyclic scheme (cap 200 sweeps,
/// stopping tolerance 1e-10).
class ConvexSet {
  public:
    enum class Kind { WholeSpace, Box, Ball, Halfspace, Polyhedron };

    static ConvexSet whole_space(std::size_t dim);
    /// Box with per-coordinate bounds; +-infinity makes a side unbounded.
    static ConvexSet box(Vec lower, Vec upper);
    static ConvexSet ball(Vec center, double radius);
    /// { x : <normal, x> <= offset }
    static ConvexSet halfspace(Vec normal, double offset);
    /// { x : A x <= b } with a strictly interior point supplied by the caller.
    static ConvexSet polyhedron(Mat rows, Vec rhs, Vec interior_point);

    /// Convenience for the half line [lo, +inf) in one dimension.
    static ConvexSet halfline(double lo);

    Kind kind() const { return kind_; }
    std::size_t dim() const { return dim_; }
    const Vec& interior_point() const { return interior_point_; }

    /// Euclidean projection; returns x unchanged when already inside.
    void project(const Vec& x, Vec& out) const;
    Vec project(const Vec& x) const {
        Vec out;
        project(x, out);
        return out;
    }

    /// Signed constraint violation: <= 0 inside, > 0 outside (distance-like
    /// for box/ball/halfspace, worst residual for polyhedra).
    double membership_margin(const Vec& x) const;

    bool contains(const Vec& x, double tol = 1e-9) const { return membership_margin(x) <= tol; }

  private:
    ConvexSet() = default;

    Kind kind_ = Kind::WholeSpace;
    std::size_t dim_ = 0;
    Vec lower_, upper_;   // box
    Vec center_;          // ball
    double radius_ = 0.0; // ball
    Vec normal_;          // halfspace
    double offset_ = 0.0; // halfspace
    Mat rows_;            // polyhedron
    Vec rhs_;             // polyhedron
    Vec interior_point_;
};

/// Lower semicontinuous convex function from a small catalog: weighted l1
/// norm, quadratic 1/2 x'Qx + q'x, indicator of a convex set, or a sum of
/// these. Proximal maps are composed only for the combinations with an
/// exact closed form; anything else raises CapabilityError.
class ConvexFunction {
  public:
    enum class Kind { AbsNorm, Quadratic, Indicator, Sum };

    static ConvexFunction abs_norm(std::size_t dim, double weight = 1.0);
    static ConvexFunction quadratic(Mat q_matrix, Vec q_linear);
    /// Isotropic quadratic (curvature/2)|x|^2.
    static ConvexFunction quadratic_iso(std::size_t dim, double curvature);
    static ConvexFunction indicator(ConvexSet set);
    static ConvexFunction sum(std::vector<ConvexFunction> parts);

    Kind kind() const { return kind_; }
    std::size_t dim() const { return dim_; }

    /// Function value (+infinity outside an indicator's set).
    double value(const Vec& x) const;

    /// prox_{lambda f}(x) = argmin_z 1/2|z-x|^2 + lambda f(z).
    void prox(double lambda, const Vec& x, Vec& out) const;

    /// Effective domain as a set (whole space unless an indicator is present).
    const ConvexSet& domain() const;

    /// Gradient of the smooth (quadratic) part; used by variational-
    /// inequality checks. Zero for nonsmooth-only functions.
    void smooth_gradient(const Vec& x, Vec& out) const;

  private:
    ConvexFunction() = default;
    void analyze_sum();

    Kind kind_ = Kind::AbsNorm;
    std::size_t dim_ = 0;
    double weight_ = 1.0; // abs-norm
    Mat q_matrix_;        // quadratic
    Vec q_linear_;        // quadratic
    bool q_isotropic_ = false;
    bool q_diagonal_ = false;
    double q_curvature_ = 0.0;
    std::shared_ptr<const ConvexSet> set_; // indicator / derived domain
    std::vector<ConvexFunction> parts_;    // sum
    // digested sum structure (indices into parts_, -1 when absent)
    int sum_abs_ = -1;
    int sum_quad_ = -1;
    int sum_ind_ = -1;
};

}  // namespace mmsde
