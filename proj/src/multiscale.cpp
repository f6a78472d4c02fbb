#include "mmsde/multiscale.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <thread>

#include "mmsde/errors.hpp"

namespace mmsde {

void parallel_for_indexed(std::int64_t n, int jobs, const std::function<void(std::int64_t)>& fn) {
    if (jobs <= 1 || n <= 1) {
        for (std::int64_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::int64_t> next{0};
    auto worker = [&] {
        for (;;) {
            const std::int64_t i = next.fetch_add(1);
            if (i >= n) return;
            fn(i);
        }
    };
    std::vector<std::thread> pool;
    const int k = std::min<std::int64_t>(jobs, n);
    pool.reserve(static_cast<std::size_t>(k));
    for (int j = 0; j < k; ++j) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
}

// ---------------------------------------------------------------------------
// System construction

SlowFastSystem SlowFastSystem::make(MonotoneOperator a1, MonotoneOperator a2, CoefficientSet coeffs,
                                    double epsilon, double gamma, Vec x0, Vec y0, double horizon) {
    if (!(epsilon > 0.0 && epsilon < 1.0))
        throw ParameterError("SlowFastSystem: epsilon must lie in (0,1)");
    if (!(gamma > 0.0)) throw ParameterError("SlowFastSystem: gamma must be positive");
    if (!(horizon > 0.0)) throw ParameterError("SlowFastSystem: horizon must be positive");
    if (x0.size() != a1.dim() || y0.size() != a2.dim())
        throw ParameterError("SlowFastSystem: initial state dimension mismatch");
    if (a1.domain().membership_margin(x0) > 1e-9)
        throw ParameterError("SlowFastSystem: x0 outside closure of D(A1)");
    if (a2.domain().membership_margin(y0) > 1e-9)
        throw ParameterError("SlowFastSystem: y0 outside closure of D(A2)");
    if (coeffs.dim_slow != a1.dim() || coeffs.dim_fast != a2.dim())
        throw ParameterError("SlowFastSystem: coefficient dimensions mismatch operators");
    SlowFastSystem s;
    s.a1 = std::move(a1);
    s.a2 = std::move(a2);
    s.coeffs = std::move(coeffs);
    s.epsilon = epsilon;
    s.gamma = gamma;
    s.x0 = std::move(x0);
    s.y0 = std::move(y0);
    s.horizon = horizon;
    return s;
}

TimeGrid SlowFastSystem::default_grid() const {
    const double hmax = gamma * max_step_fraction;
    const auto steps = static_cast<std::int64_t>(std::ceil(horizon / hmax - 1e-12));
    return TimeGrid::from_count(horizon, std::max<std::int64_t>(steps, 1));
}

// ---------------------------------------------------------------------------
// Coupled engine

namespace {

struct PairWork {
    Vec bx, by, dw1, dw2, u1, u2, prex, prey, xn, yn, dkx, dky;
    Mat s1, s2;
};

void check_step_rule(const SlowFastSystem& sys, const TimeGrid& grid) {
    const double hmax = sys.gamma * sys.max_step_fraction;
    if (grid.step > hmax * (1.0 + 1e-9))
        throw ParameterError("slow-fast grid step " + std::to_string(grid.step) +
                             " violates the fast-scale resolution rule h <= gamma/" +
                             std::to_string(1.0 / sys.max_step_fraction) + " = " +
                             std::to_string(hmax));
}

template <class Observer>
void engine(const SlowFastSystem& sys, const TimeGrid& grid, const NoiseStream& w1,
            const NoiseStream& w2, const ControlHook* control, Observer&& observe) {
    check_step_rule(sys, grid);
    if (w1.dimension() != sys.coeffs.d1 || w2.dimension() != sys.coeffs.d2)
        throw ParameterError("simulate_slow_fast: noise stream dimensions mismatch coefficients");

    const double h = grid.step;
    const double sqrt_h = std::sqrt(h);
    const double sqrt_eps = std::sqrt(sys.epsilon);
    const double inv_sqrt_gamma = 1.0 / std::sqrt(sys.gamma);
    const double h_over_gamma = h / sys.gamma;
    const double ctrl_fast = h / std::sqrt(sys.gamma * sys.epsilon);

    PairWork w;
    Vec x = sys.x0, y = sys.y0;
    observe(std::int64_t{0}, x, y, Vec{}, Vec{});
    for (std::int64_t k = 0; k < grid.count; ++k) {
        const double t = grid.node(k);
        w1.fill_increment(static_cast<std::uint64_t>(k), sqrt_h, w.dw1);
        w2.fill_increment(static_cast<std::uint64_t>(k), sqrt_h, w.dw2);
        sys.coeffs.b1(x, y, w.bx);
        sys.coeffs.sigma1(x, y, w.s1);
        sys.coeffs.b2(x, y, w.by);
        sys.coeffs.sigma2(x, y, w.s2);

        w.prex = x;
        for (std::size_t i = 0; i < x.size(); ++i) w.prex[i] += h * w.bx[i];
        if (control) {
            control->pi1(t, w.u1);
            gemv_add(h, w.s1, w.u1, w.prex);
        }
        gemv_add(sqrt_eps, w.s1, w.dw1, w.prex);

        w.prey = y;
        for (std::size_t i = 0; i < y.size(); ++i) w.prey[i] += h_over_gamma * w.by[i];
        if (control) {
            control->pi2(t, w.u2);
            gemv_add(ctrl_fast, w.s2, w.u2, w.prey);
        }
        gemv_add(inv_sqrt_gamma, w.s2, w.dw2, w.prey);

        sys.a1.resolvent(h, w.prex, w.xn);
        sys.a2.resolvent(h, w.prey, w.yn);
        w.dkx.resize(x.size());
        for (std::size_t i = 0; i < x.size(); ++i) w.dkx[i] = w.prex[i] - w.xn[i];
        w.dky.resize(y.size());
        for (std::size_t i = 0; i < y.size(); ++i) w.dky[i] = w.prey[i] - w.yn[i];
        x.swap(w.xn);
        y.swap(w.yn);
        observe(k + 1, x, y, w.dkx, w.dky);
    }
}

}  // namespace

SlowFastPaths simulate_slow_fast(const SlowFastSystem& system, const TimeGrid& grid,
                                 const NoiseStream& w1, const NoiseStream& w2,
                                 const ControlHook* control) {
    SlowFastPaths out{PathSample(grid, system.x0.size()), PathSample(grid, system.y0.size())};
    engine(system, grid, w1, w2, control,
           [&](std::int64_t k, const Vec& x, const Vec& y, const Vec& dkx, const Vec& dky) {
               std::copy(x.begin(), x.end(), out.slow.state(k));
               std::copy(y.begin(), y.end(), out.fast.state(k));
               if (k > 0) {
                   const auto idx = static_cast<std::size_t>(k - 1);
                   std::copy(dkx.begin(), dkx.end(),
                             out.slow.k_increments.begin() + static_cast<std::ptrdiff_t>(idx * x.size()));
                   std::copy(dky.begin(), dky.end(),
                             out.fast.k_increments.begin() + static_cast<std::ptrdiff_t>(idx * y.size()));
                   out.slow.k_cumvar[static_cast<std::size_t>(k)] =
                       out.slow.k_cumvar[static_cast<std::size_t>(k - 1)] + norm(dkx);
                   out.fast.k_cumvar[static_cast<std::size_t>(k)] =
                       out.fast.k_cumvar[static_cast<std::size_t>(k - 1)] + norm(dky);
               }
           });
    return out;
}

void simulate_slow_fast_fold(
    const SlowFastSystem& system, const TimeGrid& grid, const NoiseStream& w1,
    const NoiseStream& w2, const ControlHook* control,
    const std::function<void(std::int64_t, double, const Vec&, const Vec&)>& observer) {
    engine(system, grid, w1, w2, control,
           [&](std::int64_t k, const Vec& x, const Vec& y, const Vec&, const Vec&) {
               observer(k, grid.node(k), x, y);
           });
}

// ---------------------------------------------------------------------------
// Frozen equation

FrozenProblem FrozenProblem::from_system(const SlowFastSystem& system, const Vec& x_frozen) {
    if (x_frozen.size() != system.coeffs.dim_slow)
        throw ParameterError("FrozenProblem: x_frozen dimension mismatch");
    FrozenProblem p;
    p.a2 = system.a2;
    p.x_frozen = x_frozen;
    const CoefficientSet& c = system.coeffs;
    Vec xf = x_frozen;
    p.b2 = [xf, b2 = c.b2](const Vec& y, Vec& out) { b2(xf, y, out); };
    p.sigma2 = [xf, s2 = c.sigma2](const Vec& y, Mat& out) { s2(xf, y, out); };
    p.d2 = c.d2;
    p.alpha = c.alpha();
    p.y0 = system.y0;
    return p;
}

namespace {
MvSdeProblem frozen_as_problem(const FrozenProblem& problem) {
    return MvSdeProblem::make(problem.a2, problem.b2,
                              [s2 = problem.sigma2](const Vec& y, Mat& out) { s2(y, out); },
                              problem.d2, problem.y0, 1.0, 1.0);
}
}  // namespace

PathSample simulate_frozen(const FrozenProblem& problem, double horizon, double h,
                           const NoiseStream& noise) {
    return simulate(frozen_as_problem(problem), TimeGrid::from_step(horizon, h), noise);
}

namespace {

constexpr int kBatches = 50;

struct BatchAccumulator {
    std::int64_t n = 0;                 // usable samples (kBatches * batch_size)
    std::int64_t batch_size = 0;
    std::vector<Vec> batch_sums;        // per batch, per coordinate
    Vec total;                          // over usable samples

    explicit BatchAccumulator(std::int64_t samples, std::size_t dim) {
        batch_size = samples / kBatches;
        if (batch_size < 1) throw ParameterError("batch means need at least 50 samples");
        n = batch_size * kBatches;
        batch_sums.assign(kBatches, Vec(dim, 0.0));
        total.assign(dim, 0.0);
    }

    void add(std::int64_t sample_index, const Vec& v) {
        if (sample_index >= n) return;
        auto b = static_cast<std::size_t>(sample_index / batch_size);
        axpy(1.0, v, batch_sums[b]);
        axpy(1.0, v, total);
    }

    Vec mean() const {
        Vec m = total;
        for (auto& v : m) v /= static_cast<double>(n);
        return m;
    }

    Vec standard_error() const {
        const Vec m = mean();
        Vec se(m.size(), 0.0);
        for (std::size_t c = 0; c < m.size(); ++c) {
            double s2 = 0.0;
            for (const auto& bs : batch_sums) {
                const double bm = bs[c] / static_cast<double>(batch_size);
                s2 += (bm - m[c]) * (bm - m[c]);
            }
            s2 /= static_cast<double>(kBatches - 1);
            se[c] = std::sqrt(s2 / static_cast<double>(kBatches));
        }
        return se;
    }
};

}  // namespace

InvariantMeasureEstimate estimate_invariant_measure(const FrozenProblem& problem, double burn_in,
                                                    double sample_time, double h,
                                                    const NoiseStream& noise) {
    if (!(problem.alpha > 0.0))
        throw AssumptionError("estimate_invariant_measure: alpha = beta - 2*L <= 0");
    const double default_burn = 10.0 / problem.alpha;
    if (burn_in <= 0.0) burn_in = default_burn;
    if (burn_in < default_burn * (1.0 - 1e-9))
        throw ParameterError("estimate_invariant_measure: burn_in below the default 10/alpha");
    if (!(sample_time > 0.0)) throw ParameterError("estimate_invariant_measure: sample_time <= 0");
    if (!(h > 0.0)) throw ParameterError("estimate_invariant_measure: h <= 0");

    const auto burn_steps = static_cast<std::int64_t>(std::ceil(burn_in / h - 1e-12));
    const auto sample_steps = static_cast<std::int64_t>(std::llround(sample_time / h));
    const std::int64_t total = burn_steps + sample_steps;
    TimeGrid grid{h * static_cast<double>(total), h, total};

    const std::size_t dim = problem.y0.size();
    BatchAccumulator mean_acc(sample_steps, dim);
    BatchAccumulator sq_acc(sample_steps, 1);
    Vec sq(1);
    simulate_fold(frozen_as_problem(problem), grid, noise,
                  [&](std::int64_t k, double, const Vec& y) {
                      if (k <= burn_steps) return;
                      const std::int64_t s = k - burn_steps - 1;
                      mean_acc.add(s, y);
                      sq[0] = dot(y, y);
                      sq_acc.add(s, sq);
                  });

    InvariantMeasureEstimate est;
    est.mean = mean_acc.mean();
    est.second_moment = sq_acc.mean()[0];
    est.sample_count = mean_acc.n;
    est.burn_in = burn_in;
    est.se_mean = mean_acc.standard_error();
    est.se_second_moment = sq_acc.standard_error()[0];
    return est;
}

DriftEstimate estimate_averaged_drift(const Vec& x, const MonotoneOperator& a2,
                                      const CoefficientSet& coeffs, const EstimationConfig& config,
                                      const NoiseStream& noise) {
    const double alpha = coeffs.alpha();
    if (!(alpha > 0.0)) throw AssumptionError("estimate_averaged_drift: alpha = beta - 2*L <= 0");
    double burn_in = config.burn_in;
    if (burn_in <= 0.0) burn_in = 10.0 / alpha;
    if (burn_in < 10.0 / alpha * (1.0 - 1e-9))
        throw ParameterError("estimate_averaged_drift: burn_in below the default 10/alpha");
    const double h = config.h;
    if (!(h > 0.0) || !(config.sample_time > 0.0))
        throw ParameterError("estimate_averaged_drift: bad estimation config");

    if (coeffs.b1_y_independent) {
        // zero-variance path: the average is the integrand itself
        DriftEstimate est;
        est.value.resize(coeffs.dim_slow);
        coeffs.b1(x, a2.domain().interior_point(), est.value);
        est.ci_half.assign(coeffs.dim_slow, 0.0);
        return est;
    }

    FrozenProblem frozen;
    frozen.a2 = a2;
    frozen.x_frozen = x;
    frozen.b2 = [x, b2 = coeffs.b2](const Vec& y, Vec& out) { b2(x, y, out); };
    frozen.sigma2 = [x, s2 = coeffs.sigma2](const Vec& y, Mat& out) { s2(x, y, out); };
    frozen.d2 = coeffs.d2;
    frozen.alpha = alpha;
    frozen.y0 = a2.domain().interior_point();

    const auto burn_steps = static_cast<std::int64_t>(std::ceil(burn_in / h - 1e-12));
    const auto sample_steps = static_cast<std::int64_t>(std::llround(config.sample_time / h));
    const std::int64_t total = burn_steps + sample_steps;
    TimeGrid grid{h * static_cast<double>(total), h, total};

    BatchAccumulator acc(sample_steps, coeffs.dim_slow);
    Vec sample(coeffs.dim_slow);
    simulate_fold(frozen_as_problem(frozen), grid, noise,
                  [&](std::int64_t k, double, const Vec& y) {
                      if (k <= burn_steps) return;
                      coeffs.b1(x, y, sample);
                      acc.add(k - burn_steps - 1, sample);
                  });

    DriftEstimate est;
    est.value = acc.mean();
    est.ci_half = acc.standard_error();
    for (auto& v : est.ci_half) v *= 1.96;
    return est;
}

// ---------------------------------------------------------------------------
// Averaged model

AveragedModel AveragedModel::closed_form(MonotoneOperator a1,
                                         std::function<void(const Vec&, Vec&)> bbar1,
                                         std::function<void(const Vec&, Mat&)> sigma1, int d1,
                                         bool sigma1_available) {
    AveragedModel m;
    m.a1 = std::move(a1);
    m.bbar1 = std::move(bbar1);
    m.sigma1 = std::move(sigma1);
    m.d1 = d1;
    m.sigma1_available = sigma1_available;
    m.provenance = Provenance::ClosedForm;
    m.extrapolated = std::make_shared<std::atomic<bool>>(false);
    return m;
}

AveragedModel build_averaged_model(const SlowFastSystem& system, const Vec& x_nodes,
                                   const EstimationConfig& config, std::uint64_t seed) {
    if (system.coeffs.dim_slow != 1)
        throw CapabilityError(
            "build_averaged_model: tabulation supports 1-d slow states; declare a closed form");
    if (x_nodes.size() < 2) throw ParameterError("build_averaged_model: need at least two nodes");
    Vec xs = x_nodes;
    std::sort(xs.begin(), xs.end());

    AveragedModel m;
    m.a1 = system.a1;
    m.d1 = system.coeffs.d1;
    m.provenance = AveragedModel::Provenance::Estimated;
    m.extrapolated = std::make_shared<std::atomic<bool>>(false);
    m.table_x = xs;
    m.table_values.resize(xs.size());
    m.table_ci_half.resize(xs.size());
    for (std::size_t i = 0; i < xs.size(); ++i) {
        NoiseStream stream(seed, make_stream_id(6, 0, i, 1), system.coeffs.d2);
        const DriftEstimate est =
            estimate_averaged_drift({xs[i]}, system.a2, system.coeffs, config, stream);
        m.table_values[i] = est.value;
        m.table_ci_half[i] = est.ci_half[0];
    }
    m.lipschitz_estimate = 0.0;
    for (std::size_t i = 0; i + 1 < xs.size(); ++i) {
        const double slope =
            std::abs(m.table_values[i + 1][0] - m.table_values[i][0]) / (xs[i + 1] - xs[i]);
        m.lipschitz_estimate = std::max(m.lipschitz_estimate, slope);
    }

    auto xs_ptr = std::make_shared<Vec>(m.table_x);
    auto vals = std::make_shared<std::vector<Vec>>(m.table_values);
    auto flag = m.extrapolated;
    m.bbar1 = [xs_ptr, vals, flag](const Vec& x, Vec& out) {
        const Vec& nodes = *xs_ptr;
        const double v = x[0];
        if (v < nodes.front() || v > nodes.back()) flag->store(true, std::memory_order_relaxed);
        std::size_t hi = 1;
        while (hi + 1 < nodes.size() && nodes[hi] < v) ++hi;
        const std::size_t lo = hi - 1;
        const double t = (v - nodes[lo]) / (nodes[hi] - nodes[lo]);
        const Vec& a = (*vals)[lo];
        const Vec& b = (*vals)[hi];
        out.resize(a.size());
        for (std::size_t j = 0; j < a.size(); ++j) out[j] = a[j] + t * (b[j] - a[j]);
    };

    if (system.coeffs.sigma1_y_independent) {
        Vec y_ref = system.a2.domain().interior_point();
        m.sigma1 = [y_ref, s1 = system.coeffs.sigma1](const Vec& x, Mat& out) { s1(x, y_ref, out); };
        m.sigma1_available = true;
    }
    return m;
}

PathSample solve_averaged(const AveragedModel& model, const Vec& x0, const TimeGrid& grid) {
    MvSdeProblem p = MvSdeProblem::make(model.a1, model.bbar1, nullptr, 0, x0, 1.0, 0.0);
    return simulate(p, grid, NoiseStream(0, 0, 0));
}

// ---------------------------------------------------------------------------
// Khasminskii auxiliaries

KhasminskiiConfig KhasminskiiConfig::from_iota(double gamma, double iota) {
    if (!(iota > 0.0 && iota < 1.0)) throw ParameterError("KhasminskiiConfig: iota must lie in (0,1)");
    return KhasminskiiConfig{std::pow(gamma, iota), iota};
}

KhasminskiiPaths khasminskii_paths(const SlowFastSystem& sys, const KhasminskiiConfig& config,
                                   const TimeGrid& grid, const NoiseStream& w1,
                                   const NoiseStream& w2) {
    check_step_rule(sys, grid);
    if (w1.dimension() != sys.coeffs.d1 || w2.dimension() != sys.coeffs.d2)
        throw ParameterError("khasminskii_paths: noise stream dimensions mismatch coefficients");
    if (config.delta < grid.step * (1.0 - 1e-9))
        throw ParameterError("khasminskii_paths: delta must be at least the grid step");
    const double ratio = config.delta / grid.step;
    const auto steps_per_block = static_cast<std::int64_t>(std::llround(ratio));
    if (steps_per_block < 1 || std::abs(ratio - static_cast<double>(steps_per_block)) > 1e-9)
        throw ParameterError("khasminskii_paths: delta must be an integer multiple of the grid step");

    const double h = grid.step;
    const double sqrt_h = std::sqrt(h);
    const double sqrt_eps = std::sqrt(sys.epsilon);
    const double inv_sqrt_gamma = 1.0 / std::sqrt(sys.gamma);
    const double h_over_gamma = h / sys.gamma;

    KhasminskiiPaths out{PathSample(grid, sys.x0.size()), PathSample(grid, sys.y0.size())};
    Vec x = sys.x0, y = sys.y0, xhat = sys.x0, yhat = sys.y0, xblock = sys.x0;
    std::copy(xhat.begin(), xhat.end(), out.xhat.state(0));
    std::copy(yhat.begin(), yhat.end(), out.yhat.state(0));

    PairWork w;
    Vec bxh(sys.x0.size()), byh(sys.y0.size()), prexh, preyh, xhn, yhn, dk(sys.x0.size());
    Mat s2h;
    for (std::int64_t k = 0; k < grid.count; ++k) {
        if (k % steps_per_block == 0) xblock = x;
        w1.fill_increment(static_cast<std::uint64_t>(k), sqrt_h, w.dw1);
        w2.fill_increment(static_cast<std::uint64_t>(k), sqrt_h, w.dw2);

        // auxiliary pair: coefficients at the block-frozen slow state, the
        // slow noise coefficient at the original pair
        sys.coeffs.b1(xblock, yhat, bxh);
        sys.coeffs.sigma1(x, y, w.s1);
        sys.coeffs.b2(xblock, yhat, byh);
        sys.coeffs.sigma2(xblock, yhat, s2h);
        prexh = xhat;
        for (std::size_t i = 0; i < xhat.size(); ++i) prexh[i] += h * bxh[i];
        gemv_add(sqrt_eps, w.s1, w.dw1, prexh);
        preyh = yhat;
        for (std::size_t i = 0; i < yhat.size(); ++i) preyh[i] += h_over_gamma * byh[i];
        gemv_add(inv_sqrt_gamma, s2h, w.dw2, preyh);
        sys.a1.resolvent(h, prexh, xhn);
        sys.a2.resolvent(h, preyh, yhn);

        // original pair advances exactly as in simulate_slow_fast
        sys.coeffs.b1(x, y, w.bx);
        sys.coeffs.b2(x, y, w.by);
        sys.coeffs.sigma2(x, y, w.s2);
        w.prex = x;
        for (std::size_t i = 0; i < x.size(); ++i) w.prex[i] += h * w.bx[i];
        gemv_add(sqrt_eps, w.s1, w.dw1, w.prex);
        w.prey = y;
        for (std::size_t i = 0; i < y.size(); ++i) w.prey[i] += h_over_gamma * w.by[i];
        gemv_add(inv_sqrt_gamma, w.s2, w.dw2, w.prey);
        sys.a1.resolvent(h, w.prex, w.xn);
        sys.a2.resolvent(h, w.prey, w.yn);
        x.swap(w.xn);
        y.swap(w.yn);

        const auto idx = static_cast<std::size_t>(k);
        dk.resize(xhat.size());
        for (std::size_t i = 0; i < xhat.size(); ++i) dk[i] = prexh[i] - xhn[i];
        std::copy(dk.begin(), dk.end(),
                  out.xhat.k_increments.begin() + static_cast<std::ptrdiff_t>(idx * xhat.size()));
        out.xhat.k_cumvar[idx + 1] = out.xhat.k_cumvar[idx] + norm(dk);
        dk.resize(yhat.size());
        for (std::size_t i = 0; i < yhat.size(); ++i) dk[i] = preyh[i] - yhn[i];
        std::copy(dk.begin(), dk.end(),
                  out.yhat.k_increments.begin() + static_cast<std::ptrdiff_t>(idx * yhat.size()));
        out.yhat.k_cumvar[idx + 1] = out.yhat.k_cumvar[idx] + norm(dk);

        xhat.swap(xhn);
        yhat.swap(yhn);
        std::copy(xhat.begin(), xhat.end(), out.xhat.state(k + 1));
        std::copy(yhat.begin(), yhat.end(), out.yhat.state(k + 1));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Averaging error

void require_regime1(const std::vector<double>& eps_list,
                     const std::function<double(double)>& gamma_rule) {
    if (eps_list.empty()) throw ParameterError("require_regime1: empty epsilon list");
    double prev_eps = 2.0, prev_ratio = std::numeric_limits<double>::infinity();
    for (double eps : eps_list) {
        if (!(eps > 0.0 && eps < 1.0)) throw RegimeError("epsilon values must lie in (0,1)");
        if (eps >= prev_eps) throw RegimeError("epsilon list must be strictly decreasing");
        const double gamma = gamma_rule(eps);
        if (!(gamma > 0.0)) throw RegimeError("gamma(eps) must be positive");
        const double ratio = gamma / eps;
        if (eps_list.size() > 1 && ratio >= prev_ratio)
            throw RegimeError("gamma/eps fails to decrease toward 0: only Regime 1 "
                              "(gamma/eps -> 0) is supported");
        prev_eps = eps;
        prev_ratio = ratio;
    }
}

AveragingReport averaging_error(const SlowFastSystem& base, const AveragedModel& model,
                                const std::vector<double>& eps_list,
                                const std::function<double(double)>& gamma_rule, int replications,
                                std::uint64_t seed, int jobs) {
    if (replications < 50) throw ParameterError("averaging_error: need at least 50 replications");
    require_regime1(eps_list, gamma_rule);

    AveragingReport report;
    report.replications = replications;
    report.seed = seed;
    report.coupling_note =
        "one deterministic averaged path per epsilon, shared by all replications";

    for (std::size_t ei = 0; ei < eps_list.size(); ++ei) {
        SlowFastSystem sys = base;
        sys.epsilon = eps_list[ei];
        sys.gamma = gamma_rule(sys.epsilon);
        const TimeGrid grid = sys.default_grid();
        const PathSample xbar = solve_averaged(model, sys.x0, grid);

        std::vector<double> errs(static_cast<std::size_t>(replications), 0.0);
        parallel_for_indexed(replications, jobs, [&](std::int64_t r) {
            NoiseStream w1(seed, make_stream_id(1, ei, static_cast<std::uint64_t>(r), 0),
                           sys.coeffs.d1);
            NoiseStream w2(seed, make_stream_id(1, ei, static_cast<std::uint64_t>(r), 1),
                           sys.coeffs.d2);
            double worst = 0.0;
            simulate_slow_fast_fold(sys, grid, w1, w2, nullptr,
                                    [&](std::int64_t k, double, const Vec& x, const Vec&) {
                                        const double* ref = xbar.state(k);
                                        double d2 = 0.0;
                                        for (std::size_t j = 0; j < x.size(); ++j) {
                                            const double d = x[j] - ref[j];
                                            d2 += d * d;
                                        }
                                        worst = std::max(worst, d2);
                                    });
            errs[static_cast<std::size_t>(r)] = worst;
        });

        double mean = 0.0;
        for (double e : errs) mean += e;
        mean /= static_cast<double>(replications);
        double var = 0.0;
        for (double e : errs) var += (e - mean) * (e - mean);
        var /= static_cast<double>(replications - 1);
        const double ci = 1.96 * std::sqrt(var / static_cast<double>(replications));
        report.rows.push_back({sys.epsilon, sys.gamma, mean, ci});
    }
    if (model.provenance == AveragedModel::Provenance::Estimated && model.extrapolated &&
        model.extrapolated->load())
        report.coupling_note += "; warning: averaged-drift table extrapolated beyond its x-range";
    return report;
}

// ---------------------------------------------------------------------------
// Assumption audit

std::vector<AssumptionAuditRow> audit_assumptions(const CoefficientSet& coeffs,
                                                  const ConvexSet& fast_domain, std::uint64_t seed,
                                                  int count, double tol) {
    if (count < 1) throw ParameterError("audit_assumptions: count must be >= 1");
    NoiseStream stream(seed, 0x41554454, 1);
    std::uint64_t ctr = 0;
    auto draw = [&](std::size_t dim, const Vec& center) {
        Vec v(dim);
        for (std::size_t i = 0; i < dim; ++i) v[i] = center[i] + stream.normal(ctr++);
        return v;
    };
    const Vec x_center(coeffs.dim_slow, 0.0);
    const Vec& y_center = fast_domain.interior_point();

    double worst_h1a = 0.0, worst_h1b = 0.0;
    double worst_h2 = -std::numeric_limits<double>::infinity();
    double worst_h3 = 0.0;
    Vec b1a(coeffs.dim_slow), b1b(coeffs.dim_slow), b2a(coeffs.dim_fast), b2b(coeffs.dim_fast);
    Mat s1a, s1b, s2a, s2b;
    for (int k = 0; k < count; ++k) {
        const Vec x1 = draw(coeffs.dim_slow, x_center);
        const Vec x2 = draw(coeffs.dim_slow, x_center);
        const Vec y1 = draw(coeffs.dim_fast, y_center);
        const Vec y2 = draw(coeffs.dim_fast, y_center);
        const double dxy = dist(x1, x2) * dist(x1, x2) + dist(y1, y2) * dist(y1, y2);
        if (dxy > 1e-14) {
            coeffs.b1(x1, y1, b1a);
            coeffs.b1(x2, y2, b1b);
            coeffs.sigma1(x1, y1, s1a);
            coeffs.sigma1(x2, y2, s1b);
            double num = dist(b1a, b1b) * dist(b1a, b1b);
            for (std::size_t i = 0; i < s1a.a.size(); ++i)
                num += (s1a.a[i] - s1b.a[i]) * (s1a.a[i] - s1b.a[i]);
            worst_h1a = std::max(worst_h1a, num / dxy);

            coeffs.b2(x1, y1, b2a);
            coeffs.b2(x2, y2, b2b);
            coeffs.sigma2(x1, y1, s2a);
            coeffs.sigma2(x2, y2, s2b);
            num = dist(b2a, b2b) * dist(b2a, b2b);
            for (std::size_t i = 0; i < s2a.a.size(); ++i)
                num += (s2a.a[i] - s2b.a[i]) * (s2a.a[i] - s2b.a[i]);
            worst_h1b = std::max(worst_h1b, num / dxy);
        }

        // dissipativity at a shared slow state
        const double dy2 = dist(y1, y2) * dist(y1, y2);
        if (dy2 > 1e-14) {
            coeffs.b2(x1, y1, b2a);
            coeffs.b2(x1, y2, b2b);
            coeffs.sigma2(x1, y1, s2a);
            coeffs.sigma2(x1, y2, s2b);
            double val = 0.0;
            for (std::size_t i = 0; i < coeffs.dim_fast; ++i)
                val += 2.0 * (y1[i] - y2[i]) * (b2a[i] - b2b[i]);
            for (std::size_t i = 0; i < s2a.a.size(); ++i)
                val += (s2a.a[i] - s2b.a[i]) * (s2a.a[i] - s2b.a[i]);
            worst_h2 = std::max(worst_h2, val / dy2);
        }

        coeffs.sigma2(x1, y1, s2a);
        worst_h3 = std::max(worst_h3, frob_norm(s2a));
    }

    std::vector<AssumptionAuditRow> rows;
    rows.push_back({"H1_b1_sigma1", worst_h1a <= coeffs.lip_b1s1 + tol, worst_h1a, coeffs.lip_b1s1});
    rows.push_back({"H1_b2_sigma2", worst_h1b <= coeffs.lip_b2s2 + tol, worst_h1b, coeffs.lip_b2s2});
    rows.push_back({"H2_b2_sigma2", worst_h2 <= -coeffs.beta + tol, worst_h2, -coeffs.beta});
    rows.push_back({"H3_sigma2", worst_h3 <= coeffs.sigma2_bound + tol, worst_h3, coeffs.sigma2_bound});
    rows.push_back({"alpha_positive", coeffs.alpha() > 0.0, coeffs.alpha(), 0.0});
    return rows;
}

// ---------------------------------------------------------------------------
// Contraction fit

ContractionFit contraction_fit(const FrozenProblem& problem, const Vec& y1, const Vec& y2,
                               double horizon, double h, const NoiseStream& noise) {
    if (y1 == y2)
        throw ParameterError("contraction_fit: y1 == y2 leaves the fit undefined");
    const TimeGrid grid = TimeGrid::from_step(horizon, h);

    FrozenProblem p1 = problem, p2 = problem;
    p1.y0 = y1;
    p2.y0 = y2;
    const MvSdeProblem a = frozen_as_problem(p1);
    const MvSdeProblem b = frozen_as_problem(p2);

    // synchronous coupling: identical increments for both paths
    const std::size_t n = y1.size();
    Vec xa = y1, xb = y2, xan(n), xbn(n), dka(n), dkb(n), dw;
    std::vector<double> ts, logs;
    const double g0 = dist(xa, xb) * dist(xa, xb);
    ts.push_back(0.0);
    logs.push_back(std::log(g0));
    const double sqrt_h = std::sqrt(h);
    const double floor_g = g0 * 1e-8;
    for (std::int64_t k = 0; k < grid.count; ++k) {
        noise.fill_increment(static_cast<std::uint64_t>(k), sqrt_h, dw);
        StepResult ra = backward_euler_step(a, xa, h, dw);
        StepResult rb = backward_euler_step(b, xb, h, dw);
        xa = std::move(ra.x_next);
        xb = std::move(rb.x_next);
        const double g = dist(xa, xb) * dist(xa, xb);
        if (g <= floor_g || g == 0.0) break;
        ts.push_back(grid.node(k + 1));
        logs.push_back(std::log(g));
    }
    if (ts.size() < 3) throw ParameterError("contraction_fit: gap collapsed before a fit was possible");

    // least squares slope of log gap^2 against t
    double tm = 0.0, lm = 0.0;
    for (std::size_t i = 0; i < ts.size(); ++i) {
        tm += ts[i];
        lm += logs[i];
    }
    tm /= static_cast<double>(ts.size());
    lm /= static_cast<double>(ts.size());
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < ts.size(); ++i) {
        num += (ts[i] - tm) * (logs[i] - lm);
        den += (ts[i] - tm) * (ts[i] - tm);
    }
    ContractionFit fit;
    fit.fitted_rate = -num / den;
    fit.threshold = 0.8 * problem.alpha;
    fit.passed = fit.fitted_rate >= fit.threshold;
    return fit;
}

}  // namespace mmsde
