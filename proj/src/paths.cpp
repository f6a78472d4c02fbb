#include "mmsde/paths.hpp"

#include <cmath>
#include <ostream>

#include "mmsde/errors.hpp"

namespace mmsde {

double PathSample::max_membership_violation(const ConvexSet& set) const {
    double worst = -std::numeric_limits<double>::infinity();
    for (std::int64_t i = 0; i <= grid.count; ++i)
        worst = std::max(worst, set.membership_margin(state_vec(i)));
    return worst;
}

void PathSample::write_csv(std::ostream& os, const std::string& provenance) const {
    if (!provenance.empty()) os << "# " << provenance << "\n";
    os << "t";
    for (std::size_t j = 0; j < dim; ++j) os << ",x" << j;
    os << ",k_var\n";
    os.precision(17);
    for (std::int64_t i = 0; i <= grid.count; ++i) {
        os << grid.node(i);
        const double* s = state(i);
        for (std::size_t j = 0; j < dim; ++j) os << "," << s[j];
        os << "," << k_cumvar[static_cast<std::size_t>(i)] << "\n";
    }
}

MvSdeProblem MvSdeProblem::make(MonotoneOperator op, std::function<void(const Vec&, Vec&)> drift,
                                std::function<void(const Vec&, Mat&)> diffusion, int noise_dim,
                                Vec x0, double drift_scale, double noise_scale) {
    if (x0.size() != op.dim()) throw ParameterError("MvSdeProblem: x0 dimension mismatch");
    if (!all_finite(x0)) throw ParameterError("MvSdeProblem: x0 must be finite");
    if (op.domain().membership_margin(x0) > 1e-9)
        throw ParameterError("MvSdeProblem: x0 outside the closure of the operator domain");
    if (noise_dim < 0) throw ParameterError("MvSdeProblem: negative noise dimension");
    if (noise_dim > 0) {
        if (!diffusion) throw ParameterError("MvSdeProblem: diffusion required when noise_dim > 0");
        Mat probe;
        diffusion(x0, probe);
        if (probe.rows != x0.size() || probe.cols != static_cast<std::size_t>(noise_dim))
            throw ParameterError("MvSdeProblem: diffusion shape mismatch at x0");
    }
    MvSdeProblem p;
    p.op = std::move(op);
    p.drift = std::move(drift);
    p.diffusion = std::move(diffusion);
    p.noise_dim = noise_dim;
    p.drift_scale = drift_scale;
    p.noise_scale = noise_scale;
    p.x0 = std::move(x0);
    return p;
}

namespace {

struct StepWork {
    Vec pre, b, dw, next;
    Mat sigma;
};

inline void advance(const MvSdeProblem& problem, double h, const Vec& x, const Vec& dw,
                    StepWork& w, Vec& x_next, Vec& dk) {
    const std::size_t n = x.size();
    w.pre = x;
    if (problem.drift) {
        problem.drift(x, w.b);
        const double hds = h * problem.drift_scale;
        for (std::size_t i = 0; i < n; ++i) w.pre[i] += hds * w.b[i];
    }
    if (problem.noise_dim > 0) {
        problem.diffusion(x, w.sigma);
        gemv_add(problem.noise_scale, w.sigma, dw, w.pre);
    }
    problem.op.resolvent(h, w.pre, x_next);
    dk.resize(n);
    for (std::size_t i = 0; i < n; ++i) dk[i] = w.pre[i] - x_next[i];
}

}  // namespace

StepResult backward_euler_step(const MvSdeProblem& problem, const Vec& x, double h, const Vec& dw) {
    if (!(h > 0.0)) throw ParameterError("backward_euler_step: h must be positive");
    if (problem.op.domain().membership_margin(x) > 1e-9)
        throw ParameterError("backward_euler_step: state outside domain closure");
    if (problem.noise_dim > 0 && dw.size() != static_cast<std::size_t>(problem.noise_dim))
        throw ParameterError("backward_euler_step: increment dimension mismatch");
    StepWork w;
    StepResult r;
    advance(problem, h, x, dw, w, r.x_next, r.k_increment);
    return r;
}

PathSample simulate(const MvSdeProblem& problem, const TimeGrid& grid, const NoiseStream& noise) {
    if (problem.noise_dim > 0 && noise.dimension() != problem.noise_dim)
        throw ParameterError("simulate: noise stream dimension mismatch");
    PathSample path(grid, problem.x0.size());
    const std::size_t n = problem.x0.size();
    for (std::size_t j = 0; j < n; ++j) path.state(0)[j] = problem.x0[j];

    StepWork w;
    Vec x = problem.x0, x_next(n), dk(n);
    const double sqrt_h = std::sqrt(grid.step);
    for (std::int64_t k = 0; k < grid.count; ++k) {
        if (problem.noise_dim > 0)
            noise.fill_increment(static_cast<std::uint64_t>(k), sqrt_h, w.dw);
        try {
            advance(problem, grid.step, x, w.dw, w, x_next, dk);
        } catch (const std::exception& e) {
            throw ParameterError("simulate: step failed at node " + std::to_string(k + 1) + ": " +
                                 e.what());
        }
        double* row = path.state(k + 1);
        double* krow = path.k_increments.data() + static_cast<std::size_t>(k) * n;
        for (std::size_t j = 0; j < n; ++j) {
            row[j] = x_next[j];
            krow[j] = dk[j];
        }
        path.k_cumvar[static_cast<std::size_t>(k + 1)] =
            path.k_cumvar[static_cast<std::size_t>(k)] + norm(dk);
        x.swap(x_next);
    }
    return path;
}

void simulate_fold(const MvSdeProblem& problem, const TimeGrid& grid, const NoiseStream& noise,
                   const std::function<void(std::int64_t, double, const Vec&)>& observer) {
    if (problem.noise_dim > 0 && noise.dimension() != problem.noise_dim)
        throw ParameterError("simulate_fold: noise stream dimension mismatch");
    const std::size_t n = problem.x0.size();
    StepWork w;
    Vec x = problem.x0, x_next(n), dk(n);
    observer(0, 0.0, x);
    const double sqrt_h = std::sqrt(grid.step);
    for (std::int64_t k = 0; k < grid.count; ++k) {
        if (problem.noise_dim > 0)
            noise.fill_increment(static_cast<std::uint64_t>(k), sqrt_h, w.dw);
        try {
            advance(problem, grid.step, x, w.dw, w, x_next, dk);
        } catch (const std::exception& e) {
            throw ParameterError("simulate: step failed at node " + std::to_string(k + 1) + ": " +
                                 e.what());
        }
        x.swap(x_next);
        observer(k + 1, grid.node(k + 1), x);
    }
}

std::vector<Vec> brownian_increments(const NoiseStream& noise, const TimeGrid& grid) {
    std::vector<Vec> out(static_cast<std::size_t>(grid.count));
    const double sqrt_h = std::sqrt(grid.step);
    for (std::int64_t k = 0; k < grid.count; ++k)
        noise.fill_increment(static_cast<std::uint64_t>(k), sqrt_h, out[static_cast<std::size_t>(k)]);
    return out;
}

}  // namespace mmsde
