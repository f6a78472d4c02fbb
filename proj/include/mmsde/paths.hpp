#pragma once

#include <functional>
#include <iosfwd>
#include <string>

#include "mmsde/grid.hpp"
#include "mmsde/monotone.hpp"
#include "mmsde/rng.hpp"

namespace mmsde {

/// Discrete trajectory of one multivalued SDE: states at the grid nodes,
/// the per-step correction increments dK, and the running total variation
/// of K (sum of Euclidean norms of the increments).
struct PathSample {
    TimeGrid grid;
    std::size_t dim = 0;
    std::vector<double> states;       // (count+1) x dim, row-major
    std::vector<double> k_increments; // count x dim
    std::vector<double> k_cumvar;     // count+1, nondecreasing, starts at 0

    PathSample() = default;
    PathSample(const TimeGrid& g, std::size_t d)
        : grid(g),
          dim(d),
          states(static_cast<std::size_t>(g.count + 1) * d, 0.0),
          k_increments(static_cast<std::size_t>(g.count) * d, 0.0),
          k_cumvar(static_cast<std::size_t>(g.count + 1), 0.0) {}

    const double* state(std::int64_t i) const { return states.data() + static_cast<std::size_t>(i) * dim; }
    double* state(std::int64_t i) { return states.data() + static_cast<std::size_t>(i) * dim; }
    Vec state_vec(std::int64_t i) const {
        return Vec(state(i), state(i) + dim);
    }
    double k_variation() const { return k_cumvar.empty() ? 0.0 : k_cumvar.back(); }

    /// Worst membership margin of any node against the given set.
    double max_membership_violation(const ConvexSet& set) const;

    /// Columns: t, x0..x{dim-1}, k_var. Optional provenance comment line
    /// is written before the header.
    void write_csv(std::ostream& os, const std::string& provenance = "") const;
};

/// One multivalued SDE  dX in -A(X)dt + drift_scale*b(X)dt
///                      + noise_scale*sigma(X)dW
/// discretized by resolvent (backward) Euler with explicit drift and noise.
struct MvSdeProblem {
    MonotoneOperator op;
    std::function<void(const Vec&, Vec&)> drift;     // b(x)
    std::function<void(const Vec&, Mat&)> diffusion; // sigma(x); empty when noise_dim == 0
    int noise_dim = 0;
    double drift_scale = 1.0;
    double noise_scale = 1.0;
    Vec x0;

    /// Validates x0 against the operator domain (margin 1e-9) and the
    /// diffusion output shape at x0.
    static MvSdeProblem make(MonotoneOperator op, std::function<void(const Vec&, Vec&)> drift,
                             std::function<void(const Vec&, Mat&)> diffusion, int noise_dim, Vec x0,
                             double drift_scale = 1.0, double noise_scale = 1.0);
};

struct StepResult {
    Vec x_next;
    Vec k_increment;
};

/// Single resolvent-Euler step: x_next = J_{hA}(x + h*drift_scale*b(x)
/// + noise_scale*sigma(x)*dW), dK = pre-resolvent point minus x_next, so
/// x_next = x - dK + drift term + noise term holds identically.
StepResult backward_euler_step(const MvSdeProblem& problem, const Vec& x, double h, const Vec& dw);

/// Full trajectory; deterministic function of (problem, grid, noise).
PathSample simulate(const MvSdeProblem& problem, const TimeGrid& grid, const NoiseStream& noise);

/// Storage-free variant: observer(step_index, t, state) is called for every
/// node including the initial one (step_index 0 .. count).
void simulate_fold(const MvSdeProblem& problem, const TimeGrid& grid, const NoiseStream& noise,
                   const std::function<void(std::int64_t, double, const Vec&)>& observer);

/// i.i.d. Gaussian increments with variance h per coordinate, one vector per
/// step; identical output for identical (seed, stream, grid).
std::vector<Vec> brownian_increments(const NoiseStream& noise, const TimeGrid& grid);

}  // namespace mmsde
