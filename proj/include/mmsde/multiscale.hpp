#pragma once

#include <atomic>
#include <memory>
#include <optional>

#include "mmsde/paths.hpp"

namespace mmsde {

/// The four coefficient maps of a slow-fast system together with the
/// constants the scenario declares for them. alpha() = beta - 2*L_{b2,s2}
/// is the dissipativity margin the frozen-equation machinery relies on.
struct CoefficientSet {
    std::size_t dim_slow = 0, dim_fast = 0;
    int d1 = 0, d2 = 0; // noise dimensions of W1, W2
    std::function<void(const Vec& x, const Vec& y, Vec& out)> b1, b2;
    std::function<void(const Vec& x, const Vec& y, Mat& out)> sigma1, sigma2;
    bool sigma1_y_independent = false;
    bool b1_y_independent = false;
    double lip_b1s1 = 0.0;
    double lip_b2s2 = 0.0;
    double beta = 0.0;
    double sigma2_bound = 0.0;

    double alpha() const { return beta - 2.0 * lip_b2s2; }
};

struct SlowFastSystem {
    MonotoneOperator a1, a2;
    CoefficientSet coeffs;
    double epsilon = 0.0;
    double gamma = 0.0;
    Vec x0, y0;
    double horizon = 0.0;
    /// Fast-scale resolution rule: grid step must satisfy
    /// h <= gamma * max_step_fraction (default gamma/20).
    double max_step_fraction = 1.0 / 20.0;

    static SlowFastSystem make(MonotoneOperator a1, MonotoneOperator a2, CoefficientSet coeffs,
                               double epsilon, double gamma, Vec x0, Vec y0, double horizon);

    /// Smallest valid uniform grid obeying the step rule.
    TimeGrid default_grid() const;
};

struct SlowFastPaths {
    PathSample slow, fast;
};

/// Extra drift terms injected by a control: pi1 feeds the slow equation as
/// sigma1(X)*pi1(t), pi2 feeds the fast one as sigma2(X,Y)*pi2(t)/sqrt(gamma*eps).
struct ControlHook {
    std::function<void(double t, Vec& out)> pi1; // size d1
    std::function<void(double t, Vec& out)> pi2; // size d2
};

/// Coupled resolvent-Euler integration of the slow-fast pair: slow advances
/// with drift scale 1 and noise scale sqrt(eps), fast with drift scale
/// 1/gamma and noise scale 1/sqrt(gamma); both operators act at unit rate.
SlowFastPaths simulate_slow_fast(const SlowFastSystem& system, const TimeGrid& grid,
                                 const NoiseStream& w1, const NoiseStream& w2,
                                 const ControlHook* control = nullptr);

/// Storage-free variant; observer sees every node of both components.
void simulate_slow_fast_fold(
    const SlowFastSystem& system, const TimeGrid& grid, const NoiseStream& w1,
    const NoiseStream& w2, const ControlHook* control,
    const std::function<void(std::int64_t, double, const Vec& x, const Vec& y)>& observer);

// ---------------------------------------------------------------------------
// Frozen equation and invariant measure

/// Fast equation at natural speed with the slow variable pinned at x_frozen.
struct FrozenProblem {
    MonotoneOperator a2;
    Vec x_frozen;
    std::function<void(const Vec& y, Vec& out)> b2;
    std::function<void(const Vec& y, Mat& out)> sigma2;
    int d2 = 0;
    double alpha = 0.0;
    Vec y0;

    static FrozenProblem from_system(const SlowFastSystem& system, const Vec& x_frozen);
};

PathSample simulate_frozen(const FrozenProblem& problem, double horizon, double h,
                           const NoiseStream& noise);

struct InvariantMeasureEstimate {
    Vec mean;
    double second_moment = 0.0;
    std::int64_t sample_count = 0;
    double burn_in = 0.0;
    Vec se_mean;
    double se_second_moment = 0.0;
};

/// Time averages after burn-in, batch-means standard errors with 50 batches.
/// burn_in <= 0 selects the default 10/alpha; explicit values below 10/alpha
/// are rejected; alpha <= 0 is refused as an assumption violation.
InvariantMeasureEstimate estimate_invariant_measure(const FrozenProblem& problem, double burn_in,
                                                    double sample_time, double h,
                                                    const NoiseStream& noise);

struct DriftEstimate {
    Vec value;
    Vec ci_half; // 1.96 * batch-means SE per coordinate
};

struct EstimationConfig {
    double burn_in = -1.0; // <= 0: default 10/alpha
    double sample_time = 500.0;
    double h = 0.01;
};

/// bbar1(x): long-run average of b1(x, Y_s^x) after burn-in, with CI.
DriftEstimate estimate_averaged_drift(const Vec& x, const MonotoneOperator& a2,
                                      const CoefficientSet& coeffs, const EstimationConfig& config,
                                      const NoiseStream& noise);

// ---------------------------------------------------------------------------
// Averaged model

struct AveragedModel {
    enum class Provenance { ClosedForm, Estimated };

    MonotoneOperator a1;
    std::function<void(const Vec&, Vec&)> bbar1;
    std::function<void(const Vec&, Mat&)> sigma1; // x-only; empty if unavailable
    int d1 = 0;
    bool sigma1_available = false;
    Provenance provenance = Provenance::ClosedForm;

    // estimated-table metadata (1-d slow state)
    Vec table_x;
    std::vector<Vec> table_values;
    Vec table_ci_half;
    double lipschitz_estimate = 0.0;
    std::shared_ptr<std::atomic<bool>> extrapolated; // set when interpolation leaves the table

    static AveragedModel closed_form(MonotoneOperator a1, std::function<void(const Vec&, Vec&)> bbar1,
                                     std::function<void(const Vec&, Mat&)> sigma1, int d1,
                                     bool sigma1_available);
};

/// Tabulates bbar1 on the given slow-state nodes (1-d slow states only) and
/// wraps linear interpolation around the table. Estimation noise streams are
/// derived from (seed, node index).
AveragedModel build_averaged_model(const SlowFastSystem& system, const Vec& x_nodes,
                                   const EstimationConfig& config, std::uint64_t seed);

/// Deterministic multivalued ODE dX in -A1(X)dt + bbar1(X)dt by resolvent Euler.
PathSample solve_averaged(const AveragedModel& model, const Vec& x0, const TimeGrid& grid);

// ---------------------------------------------------------------------------
// Khasminskii auxiliary construction

struct KhasminskiiConfig {
    double delta = 0.0; // block length; must be a multiple of the grid step
    double iota = 0.5;  // delta = gamma^iota when delta is not given explicitly

    static KhasminskiiConfig from_iota(double gamma, double iota);
};

struct KhasminskiiPaths {
    PathSample xhat, yhat;
};

/// Auxiliary processes on block-frozen slow states: Yhat is driven by
/// b2, sigma2 at X_{t(delta)} on the original W2 noise; Xhat is driven by
/// b1(X_{t(delta)}, Yhat) with the original sqrt(eps)*sigma1(X,Y) noise term.
KhasminskiiPaths khasminskii_paths(const SlowFastSystem& system, const KhasminskiiConfig& config,
                                   const TimeGrid& grid, const NoiseStream& w1,
                                   const NoiseStream& w2);

// ---------------------------------------------------------------------------
// Averaging error measurement

struct AveragingRow {
    double epsilon = 0.0;
    double gamma = 0.0;
    double error = 0.0;   // Monte Carlo estimate of E sup_t |X - Xbar|^2
    double ci_half = 0.0; // 1.96 * SE
};

struct AveragingReport {
    std::vector<AveragingRow> rows;
    int replications = 0;
    std::uint64_t seed = 0;
    std::string coupling_note;
};

/// Regime-1 guard shared by the trend experiments: eps strictly decreasing
/// in (0,1), gamma(eps) > 0, gamma/eps strictly decreasing when the list has
/// more than one entry. Throws RegimeError otherwise.
void require_regime1(const std::vector<double>& eps_list,
                     const std::function<double(double)>& gamma_rule);

/// Per epsilon: gamma = gamma_rule(eps), grid obeys the step rule, the same
/// deterministic averaged path serves every replication, and the error is
/// the discrete sup over grid nodes. The eps list must be strictly
/// decreasing with gamma/eps strictly decreasing (Regime 1 guard).
AveragingReport averaging_error(const SlowFastSystem& base, const AveragedModel& model,
                                const std::vector<double>& eps_list,
                                const std::function<double(double)>& gamma_rule, int replications,
                                std::uint64_t seed, int jobs = 1);

// ---------------------------------------------------------------------------
// Assumption audit and contraction fit

struct AssumptionAuditRow {
    std::string name;
    bool pass = false;
    double statistic = 0.0; // worst sampled value
    double threshold = 0.0; // declared bound it is compared against
};

/// Sampling audit of the declared coefficient constants: joint Lipschitz
/// ratios for (b1,sigma1) and (b2,sigma2), the dissipativity ratio against
/// -beta, boundedness of sigma2, and positivity of alpha.
std::vector<AssumptionAuditRow> audit_assumptions(const CoefficientSet& coeffs,
                                                  const ConvexSet& fast_domain, std::uint64_t seed,
                                                  int count = 10000, double tol = 1e-9);

struct ContractionFit {
    double fitted_rate = 0.0;
    double threshold = 0.0; // 0.8 * alpha
    bool passed = false;
};

/// Synchronous coupling: two frozen paths on the same noise from y1 != y2;
/// least-squares slope of log |dY_t|^2 over the initial decay window.
ContractionFit contraction_fit(const FrozenProblem& problem, const Vec& y1, const Vec& y2,
                               double horizon, double h, const NoiseStream& noise);

/// Deterministic parallel map: fills out[i] = fn(i) using `jobs` workers;
/// the result is independent of scheduling because slots are preassigned.
void parallel_for_indexed(std::int64_t n, int jobs, const std::function<void(std::int64_t)>& fn);

}  // namespace mmsde
