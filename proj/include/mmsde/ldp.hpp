#pragma once

#include <limits>
#include <string>

#include "mmsde/multiscale.hpp"

namespace mmsde {

/// Piecewise-constant element of L^2([0,T]; R^{d1+d2}) on `pieces` equal
/// intervals. norm_sq() is exactly sum |value_i|^2 * (T/pieces) in index
/// order; pi1/pi2 split a value into the first d1 and last d2 coordinates.
struct Control {
    double horizon = 0.0;
    int pieces = 0;
    int d1 = 0, d2 = 0;
    std::vector<double> values; // pieces x (d1+d2), row-major

    static Control zero(double horizon, int pieces, int d1, int d2);
    /// Constant-in-time control with the given R^{d1+d2} value.
    static Control constant(double horizon, int pieces, const Vec& value, int d1, int d2);
    /// Concatenation in time; both operands keep their own piece lengths.
    static Control concat(const Control& first, const Control& second);

    int total_dim() const { return d1 + d2; }
    double piece_length() const { return horizon / static_cast<double>(pieces); }
    double norm_sq() const;
    int piece_index(double t) const;
    void pi1_at(double t, Vec& out) const;
    void pi2_at(double t, Vec& out) const;
};

/// Deterministic controlled averaged equation
///   dX in -A1(X)dt + bbar1(X)dt + sigma1(X) pi1 h(t) dt.
struct SkeletonProblem {
    AveragedModel model;
    Vec x0;
    TimeGrid grid;

    static SkeletonProblem make(AveragedModel model, Vec x0, TimeGrid grid);
};

PathSample solve_skeleton(const SkeletonProblem& problem, const Control& control);

struct RateStageTrace {
    double mu = 0.0;
    int iterations = 0;
    double objective = 0.0;
    double residual = 0.0;
};

struct RateFunctionResult {
    double value = 0.0; // +infinity when infeasible
    bool infeasible = false;
    Control optimal_control;
    double residual = 0.0; // sup-norm distance of the steered path to the target
    std::vector<RateStageTrace> trace;

    std::string to_json() const;
};

struct RateOptions {
    int pieces = 64;
    int penalty_stages = 7;      // mu_k = 10^k, k = 0..stages-1
    double fd_step_rel = 1e-6;   // forward-difference step, relative
    int max_iterations = 200;    // quasi-Newton iterations per stage
    double residual_tol_scale = 1e-3; // tol = scale * (1 + sup|target|)
    double value_tolerance = 1e-6;    // declared optimizer tolerance on the value
};

/// I(target) = 1/2 inf ||h||^2 over controls steering the skeleton to the
/// target, approximated by an increasing-penalty quasi-Newton scheme over
/// piecewise-constant controls. Returns +infinity when the residual stalls
/// above tolerance across the penalty schedule.
RateFunctionResult rate_function(const PathSample& target, const SkeletonProblem& problem,
                                 const RateOptions& options = {});

/// Girsanov-controlled slow-fast pair: the slow drift gains sigma1(X) pi1 u(t),
/// the fast drift gains sigma2(X,Y) pi2 u(t) / sqrt(gamma*eps).
SlowFastPaths simulate_controlled(const SlowFastSystem& system, const Control& u,
                                  const TimeGrid& grid, const NoiseStream& w1,
                                  const NoiseStream& w2);

struct ProbeRow {
    double epsilon = 0.0;
    double gamma = 0.0;
    double error = 0.0;
    double ci_half = 0.0;
};

struct WeakConvergenceReport {
    std::vector<ProbeRow> rows;
    int replications = 0;
    std::uint64_t seed = 0;
    double control_norm_sq = 0.0;
    double norm_bound = 0.0; // N with ||u||^2 <= N
};

/// Per epsilon: E sup_t |X^{eps,gamma,u} - Xbar^u|^2 with CI, the skeleton
/// path re-solved deterministically on each epsilon's grid.
WeakConvergenceReport weak_convergence_probe(const SlowFastSystem& base,
                                             const SkeletonProblem& skeleton_problem,
                                             const Control& u,
                                             const std::vector<double>& eps_list,
                                             const std::function<double(double)>& gamma_rule,
                                             int replications, std::uint64_t seed, int jobs = 1);

struct TailEventSpec {
    double radius = 0.0;
    /// "upcross": sup_t (X_t[0] - ref_t[0]) > r; "abs": sup_t |X_t - ref_t| > r.
    bool one_sided = false;
};

struct TailRow {
    double epsilon = 0.0;
    std::int64_t budget = 0;
    std::int64_t hits = 0;
    double p_hat = 0.0;
    double ci_low = 0.0;
    double ci_high = 0.0;
    double neg_eps_log_p = std::numeric_limits<double>::quiet_NaN();
};

struct TailReport {
    std::vector<TailRow> rows;
    bool inconclusive = false; // zero hits at every epsilon
    double rate_value = 0.0;   // I* supplied by the caller
    std::string trend_note;
    std::uint64_t seed = 0;
};

struct TailOptions {
    TailEventSpec event;
    std::vector<std::int64_t> budgets; // per-eps; a single entry broadcasts
    double step_override = 0.0;        // used when the fast component decouples
};

/// Small-noise exceedance probabilities of the slow component around the
/// averaged path, with Wilson binomial CIs and the -eps*log(p) diagnostic
/// compared against the supplied rate value.
TailReport tail_probability_probe(const SlowFastSystem& base, const AveragedModel& model,
                                  const std::vector<double>& eps_list,
                                  const std::function<double(double)>& gamma_rule,
                                  const TailOptions& options, double rate_value,
                                  std::uint64_t seed, int jobs = 1);

}  // namespace mmsde
