// Acceptance suite: one pass/fail line per criterion, nonzero exit when any
// criterion fails. Tolerances and budgets are pinned here, not configurable.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <string>
#include <thread>
#include <vector>

#include "mmsde/harness.hpp"

using namespace mmsde;

namespace {

int g_failures = 0;
std::int64_t g_paths_checked = 0;
std::int64_t g_domain_violations = 0;

struct Criterion {
    const char* label;
    double limit_seconds; // <= 0: no stated bound
    std::function<bool(std::string&)> body;
};

void check_path_domain(const PathSample& path, const ConvexSet& domain) {
    ++g_paths_checked;
    if (path.max_membership_violation(domain) > 1e-9) ++g_domain_violations;
}

double prox_oracle_abs(double lambda, double x) {
    auto objective = [&](double z) { return 0.5 * (z - x) * (z - x) + lambda * std::abs(z); };
    double lo = x - 10.0, hi = x + 10.0;
    double best = lo, best_val = objective(lo);
    for (int refine = 0; refine < 3; ++refine) {
        const int cells = 20000;
        const double step = (hi - lo) / cells;
        for (int i = 0; i <= cells; ++i) {
            const double z = lo + i * step;
            const double v = objective(z);
            if (v < best_val) {
                best_val = v;
                best = z;
            }
        }
        lo = best - 2.0 * step;
        hi = best + 2.0 * step;
    }
    return best;
}

CoefficientSet worked_coeffs(double m, bool b1_square = false) {
    CoefficientSet c;
    c.dim_slow = 1;
    c.dim_fast = 1;
    c.d1 = 1;
    c.d2 = 1;
    if (b1_square)
        c.b1 = [](const Vec&, const Vec& y, Vec& out) { out = {y[0] * y[0]}; };
    else
        c.b1 = [](const Vec&, const Vec& y, Vec& out) { out = y; };
    c.sigma1 = [](const Vec&, const Vec&, Mat& out) { out = Mat(1, 1, 1.0); };
    c.sigma1_y_independent = true;
    c.b2 = [m](const Vec&, const Vec& y, Vec& out) { out = {m - 0.5 * y[0]}; };
    c.sigma2 = [](const Vec&, const Vec&, Mat& out) { out = Mat(1, 1, 1.0); };
    c.lip_b1s1 = 1.0;
    c.lip_b2s2 = 0.25;
    c.beta = 1.0;
    c.sigma2_bound = 1.0;
    return c;
}

FrozenProblem frozen_worked(double m) {
    FrozenProblem p;
    p.a2 = MonotoneOperator::zero(1);
    p.x_frozen = {0.0};
    p.b2 = [m](const Vec& y, Vec& out) { out = {m - 0.5 * y[0]}; };
    p.sigma2 = [](const Vec&, Mat& out) { out = Mat(1, 1, 1.0); };
    p.d2 = 1;
    p.alpha = 0.5;
    p.y0 = {1.0};
    return p;
}

int hardware_jobs() {
    const unsigned n = std::thread::hardware_concurrency();
    return n == 0 ? 1 : static_cast<int>(n);
}

// -------------------------------------------------------------------------
// criterion bodies

bool criterion_operator_calculus(std::string& detail) {
    std::vector<MonotoneOperator> ops;
    ops.push_back(MonotoneOperator::zero(2));
    Mat psd(2, 2);
    psd(0, 0) = 2.0;
    psd(0, 1) = 0.5;
    psd(1, 0) = 0.5;
    psd(1, 1) = 1.0;
    ops.push_back(MonotoneOperator::linear(psd));
    ops.push_back(MonotoneOperator::subdifferential(ConvexFunction::abs_norm(2, 1.0)));
    ops.push_back(MonotoneOperator::subdifferential(
        ConvexFunction::indicator(ConvexSet::ball({0.3, -0.2}, 1.2))));
    ops.push_back(MonotoneOperator::normal_cone(ConvexSet::box({0.0, -1.0}, {1.0, 1.0})));
    ops.push_back(MonotoneOperator::normal_cone(ConvexSet::halfspace({1.0, 2.0}, 1.5)));
    Mat rows(3, 2);
    rows(0, 0) = -1.0;
    rows(1, 1) = -1.0;
    rows(2, 0) = 1.0;
    rows(2, 1) = 1.0;
    ops.push_back(
        MonotoneOperator::normal_cone(ConvexSet::polyhedron(rows, {0.0, 0.0, 1.0}, {0.2, 0.2})));

    NoiseStream stream(90210, 1, 1);
    std::uint64_t ctr = 0;
    double worst_nonexp = 0.0, worst_firm = 0.0;
    for (const auto& op : ops) {
        for (int k = 0; k < 10000; ++k) {
            Vec x1{2.0 * stream.normal(ctr++), 2.0 * stream.normal(ctr++)};
            Vec x2{2.0 * stream.normal(ctr++), 2.0 * stream.normal(ctr++)};
            const double lambda = 0.1 + 2.0 * stream.uniform(ctr++);
            const Vec j1 = op.resolvent(lambda, x1);
            const Vec j2 = op.resolvent(lambda, x2);
            worst_nonexp = std::max(worst_nonexp, dist(j1, j2) - dist(x1, x2));
            double inner = 0.0;
            for (std::size_t i = 0; i < 2; ++i) inner += (j1[i] - j2[i]) * (x1[i] - x2[i]);
            worst_firm = std::max(worst_firm, dist(j1, j2) * dist(j1, j2) - inner);
        }
    }

    auto abs_op = MonotoneOperator::subdifferential(ConvexFunction::abs_norm(1, 1.0));
    double worst_prox = 0.0;
    for (double x : {-4.2, -1.0, -0.3, 0.0, 0.4, 1.0, 3.0, 7.5}) {
        for (double lambda : {0.25, 1.0, 2.5}) {
            const double oracle = prox_oracle_abs(lambda, x);
            worst_prox = std::max(worst_prox, std::abs(abs_op.resolvent(lambda, {x})[0] - oracle));
        }
    }

    char buf[160];
    std::snprintf(buf, sizeof buf,
                  "worst nonexpansiveness %.2e, worst firmness %.2e, prox-vs-oracle %.2e",
                  worst_nonexp, worst_firm, worst_prox);
    detail = buf;
    return worst_nonexp <= 1e-9 && worst_firm <= 1e-9 && worst_prox <= 1e-6;
}

bool criterion_domain_preservation(std::string& detail) {
    // reflected and soft-threshold dynamics exercised across operators
    std::vector<MonotoneOperator> ops;
    ops.push_back(MonotoneOperator::normal_cone(ConvexSet::halfline(0.0)));
    ops.push_back(MonotoneOperator::normal_cone(ConvexSet::box({-0.3, -0.3}, {0.3, 0.3})));
    ops.push_back(MonotoneOperator::subdifferential(
        ConvexFunction::indicator(ConvexSet::ball({0.0}, 0.8))));
    for (std::size_t i = 0; i < ops.size(); ++i) {
        const auto& op = ops[i];
        const std::size_t n = op.dim();
        auto p = MvSdeProblem::make(
            op, [](const Vec& x, Vec& out) { out.assign(x.size(), -0.4); },
            [n](const Vec&, Mat& out) { out = Mat(n, n); for (std::size_t d = 0; d < n; ++d) out(d, d) = 1.0; },
            static_cast<int>(n), op.domain().interior_point());
        for (int rep = 0; rep < 20; ++rep) {
            const PathSample path =
                simulate(p, TimeGrid::from_step(2.0, 0.01),
                         NoiseStream(321, make_stream_id(7, i, static_cast<std::uint64_t>(rep), 0),
                                     static_cast<int>(n)));
            check_path_domain(path, op.domain());
        }
    }
    // plus the coupled reflected system
    auto sys = SlowFastSystem::make(MonotoneOperator::normal_cone(ConvexSet::halfline(0.0)),
                                    MonotoneOperator::normal_cone(ConvexSet::halfline(0.0)),
                                    worked_coeffs(1.0), 0.2, 0.02, {0.5}, {0.0}, 1.0);
    const TimeGrid grid = sys.default_grid();
    for (int rep = 0; rep < 20; ++rep) {
        const auto paths = simulate_slow_fast(
            sys, grid, NoiseStream(321, make_stream_id(8, 0, static_cast<std::uint64_t>(rep), 0), 1),
            NoiseStream(321, make_stream_id(8, 0, static_cast<std::uint64_t>(rep), 1), 1));
        check_path_domain(paths.slow, sys.a1.domain());
        check_path_domain(paths.fast, sys.a2.domain());
    }
    char buf[120];
    std::snprintf(buf, sizeof buf, "%lld paths checked, %lld violations",
                  static_cast<long long>(g_paths_checked),
                  static_cast<long long>(g_domain_violations));
    detail = buf;
    return g_domain_violations == 0;
}

bool criterion_frozen_ergodicity(std::string& detail) {
    const auto est = estimate_invariant_measure(frozen_worked(1.0), 20.0, 2000.0, 0.01,
                                                NoiseStream(555001, 17, 1));
    const bool mean_ok = std::abs(est.mean[0] - 2.0) <= 3.0 * est.se_mean[0];
    const bool second_ok = std::abs(est.second_moment - 5.0) <= 3.0 * est.se_second_moment;
    const auto fit =
        contraction_fit(frozen_worked(1.0), {1.0}, {2.0}, 10.0, 0.01, NoiseStream(555002, 18, 1));
    char buf[200];
    std::snprintf(buf, sizeof buf,
                  "mean %.4f (3SE %.4f), second moment %.4f (3SE %.4f), fit %.3f >= %.3f",
                  est.mean[0], 3.0 * est.se_mean[0], est.second_moment,
                  3.0 * est.se_second_moment, fit.fitted_rate, fit.threshold);
    detail = buf;
    return mean_ok && second_ok && fit.passed;
}

bool criterion_averaged_drift(std::string& detail) {
    const MonotoneOperator a2 = MonotoneOperator::zero(1);
    EstimationConfig config;
    config.sample_time = 2000.0;
    const auto linear =
        estimate_averaged_drift({0.0}, a2, worked_coeffs(1.0), config, NoiseStream(555003, 19, 1));
    const bool linear_ok = std::abs(linear.value[0] - 2.0) <= linear.ci_half[0];
    const auto square = estimate_averaged_drift({0.0}, a2, worked_coeffs(0.0, true), config,
                                                NoiseStream(555004, 20, 1));
    const bool square_ok = std::abs(square.value[0] - 1.0) <= square.ci_half[0];
    char buf[160];
    std::snprintf(buf, sizeof buf, "b1=y: %.4f +- %.4f (want 2); b1=y^2: %.4f +- %.4f (want 1)",
                  linear.value[0], linear.ci_half[0], square.value[0], square.ci_half[0]);
    detail = buf;
    return linear_ok && square_ok;
}

bool criterion_averaging_trend(std::string& detail) {
    const ScenarioSpec spec = resolve_scenario("reflected-ou");
    auto sys = spec.make_system();
    const AveragedModel model = spec.make_model();
    const AveragingReport report = averaging_error(sys, model, {0.2, 0.1, 0.05}, spec.gamma_rule(),
                                                   200, spec.seed, hardware_jobs());
    bool decreasing = true;
    for (std::size_t i = 1; i < report.rows.size(); ++i)
        decreasing = decreasing && report.rows[i].error < report.rows[i - 1].error;
    const bool halved = report.rows.back().error < 0.5 * report.rows.front().error;
    char buf[160];
    std::snprintf(buf, sizeof buf, "errors %.4g -> %.4g -> %.4g (delta = gamma^(1/2) config)",
                  report.rows[0].error, report.rows[1].error, report.rows[2].error);
    detail = buf;
    return decreasing && halved;
}

bool criterion_rate_oracle(std::string& detail) {
    // straight line through free space
    auto model = AveragedModel::closed_form(
        MonotoneOperator::zero(1), [](const Vec&, Vec& out) { out = {0.0}; },
        [](const Vec&, Mat& out) { out = Mat(1, 1, 1.0); }, 1, true);
    const TimeGrid grid = TimeGrid::from_count(1.0, 200);
    const auto problem = SkeletonProblem::make(model, {0.0}, grid);
    const double v = 0.8;
    PathSample line(grid, 1);
    for (std::int64_t k = 0; k <= grid.count; ++k) line.state(k)[0] = v * grid.node(k);
    const auto ramp = rate_function(line, problem);
    const double oracle = 0.5 * v * v * 1.0;
    const bool ramp_ok = !ramp.infeasible && std::abs(ramp.value - oracle) <= 0.05 * oracle;

    const PathSample averaged = solve_averaged(model, {0.0}, grid);
    const auto zero = rate_function(averaged, problem);
    const bool zero_ok = !zero.infeasible && zero.value <= 1e-6;

    auto dead_model = AveragedModel::closed_form(
        MonotoneOperator::zero(1), [](const Vec&, Vec& out) { out = {0.0}; },
        [](const Vec&, Mat& out) { out = Mat(1, 1, 0.0); }, 1, true);
    const auto dead_problem = SkeletonProblem::make(dead_model, {0.0}, grid);
    const auto infeasible = rate_function(line, dead_problem);
    const bool infeasible_ok = infeasible.infeasible && std::isinf(infeasible.value);

    char buf[160];
    std::snprintf(buf, sizeof buf, "line %.4f vs oracle %.4f; averaged %.2e; sigma1=0 -> %s",
                  ramp.value, oracle, zero.value, infeasible.infeasible ? "+inf" : "finite");
    detail = buf;
    return ramp_ok && zero_ok && infeasible_ok;
}

bool criterion_weak_convergence(std::string& detail) {
    const ScenarioSpec spec = resolve_scenario("reflected-ou");
    auto sys = spec.make_system();
    const AveragedModel model = spec.make_model();
    const auto problem =
        SkeletonProblem::make(model, spec.x0, TimeGrid::from_count(spec.horizon, 256));
    const Control u = Control::constant(spec.horizon, 64, {1.0, 0.0}, 1, 1);
    const auto report = weak_convergence_probe(sys, problem, u, {0.2, 0.1, 0.05},
                                               spec.gamma_rule(), 200, spec.seed, hardware_jobs());
    bool decreasing = true;
    for (std::size_t i = 1; i < report.rows.size(); ++i)
        decreasing = decreasing && report.rows[i].error < report.rows[i - 1].error;
    char buf[160];
    std::snprintf(buf, sizeof buf, "errors %.4g -> %.4g -> %.4g (||u||^2 = %.3f)",
                  report.rows[0].error, report.rows[1].error, report.rows[2].error,
                  report.control_norm_sq);
    detail = buf;
    return decreasing;
}

bool criterion_tail_probe(std::string& detail) {
    const ScenarioSpec spec = resolve_scenario("brownian-1d");
    auto sys = spec.make_system();
    const AveragedModel model = spec.make_model();
    TailOptions options;
    options.event.radius = 1.0;
    options.event.one_sided = true;
    options.budgets = {100000, 1000000, 10000000};
    options.step_override = spec.slow_step;
    const double i_star = 0.5; // r^2 / (2T)
    const auto report = tail_probability_probe(sys, model, {0.2, 0.1, 0.05}, spec.gamma_rule(),
                                               options, i_star, spec.seed, hardware_jobs());
    const TailRow& last = report.rows.back();
    const double closed_form = std::erfc((1.0 / std::sqrt(0.05)) / std::sqrt(2.0)); // 2*Phibar
    const bool ci_ok = last.hits > 0 && last.ci_low <= closed_form && closed_form <= last.ci_high;
    const bool rate_ok =
        last.hits > 0 && std::abs(last.neg_eps_log_p - i_star) <= 0.25 * i_star;
    char buf[220];
    std::snprintf(buf, sizeof buf,
                  "p_hat %.3e (CI [%.3e, %.3e]) vs 2*Phibar %.3e; -eps log p = %.3f vs %.2f",
                  last.p_hat, last.ci_low, last.ci_high, closed_form, last.neg_eps_log_p, i_star);
    detail = buf;
    return ci_ok && rate_ok && !report.inconclusive;
}

bool criterion_determinism(std::string& detail) {
    const ScenarioSpec spec = resolve_scenario("reflected-ou");
    auto sys = spec.make_system();
    const AveragedModel model = spec.make_model();
    const auto a =
        averaging_error(sys, model, {0.2, 0.1}, spec.gamma_rule(), 50, spec.seed, 1);
    const auto b =
        averaging_error(sys, model, {0.2, 0.1}, spec.gamma_rule(), 50, spec.seed, 4);
    bool same = a.rows.size() == b.rows.size();
    for (std::size_t i = 0; same && i < a.rows.size(); ++i)
        same = a.rows[i].error == b.rows[i].error && a.rows[i].ci_half == b.rows[i].ci_half;

    TailOptions options;
    options.event.radius = 0.4;
    options.event.one_sided = true;
    options.budgets = {20000};
    options.step_override = 0.005;
    const ScenarioSpec bspec = resolve_scenario("brownian-1d");
    auto bsys = bspec.make_system();
    const AveragedModel bmodel = bspec.make_model();
    const auto t1 = tail_probability_probe(bsys, bmodel, {0.2, 0.1}, bspec.gamma_rule(), options,
                                           0.08, bspec.seed, 1);
    const auto t2 = tail_probability_probe(bsys, bmodel, {0.2, 0.1}, bspec.gamma_rule(), options,
                                           0.08, bspec.seed, 3);
    bool tails_same = t1.rows.size() == t2.rows.size();
    for (std::size_t i = 0; tails_same && i < t1.rows.size(); ++i)
        tails_same = t1.rows[i].hits == t2.rows[i].hits && t1.rows[i].p_hat == t2.rows[i].p_hat;

    detail = same && tails_same ? "jobs=1 vs jobs=4 and reruns agree bitwise"
                                : "worker count changed the numbers";
    return same && tails_same;
}

}  // namespace

int main() {
    std::vector<Criterion> criteria = {
        {"1 operator calculus (nonexpansive/firm within 1e-9, prox oracle 1e-6)", 5.0,
         criterion_operator_calculus},
        {"2 domain preservation (margin <= 1e-9, zero violations)", 0.0,
         criterion_domain_preservation},
        {"3 frozen-equation ergodicity (mean 2, second moment 5, fit >= 0.4)", 60.0,
         criterion_frozen_ergodicity},
        {"4 averaged drift (2m and 1 within own 95% CI)", 60.0, criterion_averaged_drift},
        {"5 averaging theorem trend (strictly decreasing, final < half initial)", 600.0,
         criterion_averaging_trend},
        {"6 rate-function oracle (5% line, <=1e-6 averaged, +inf infeasible)", 120.0,
         criterion_rate_oracle},
        {"7 controlled weak convergence (strictly decreasing errors)", 600.0,
         criterion_weak_convergence},
        {"8 tail probe vs closed form (CI containment, 25% rate match)", 0.0,
         criterion_tail_probe},
        {"9 determinism across seeds and worker counts", 0.0, criterion_determinism},
    };

    for (auto& criterion : criteria) {
        const auto start = std::chrono::steady_clock::now();
        std::string detail;
        bool ok = false;
        try {
            ok = criterion.body(detail);
        } catch (const std::exception& e) {
            detail = std::string("exception: ") + e.what();
        }
        const double seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        const bool within_time = criterion.limit_seconds <= 0.0 || seconds <= criterion.limit_seconds;
        if (!within_time) ok = false;
        std::printf("[%s] criterion %s — %s (%.1fs%s)\n", ok ? "PASS" : "FAIL", criterion.label,
                    detail.c_str(), seconds,
                    within_time ? "" : ", OVER the stated runtime limit");
        std::fflush(stdout);
        if (!ok) ++g_failures;
    }

    if (g_failures == 0) {
        std::printf("acceptance: all %zu criteria passed\n", criteria.size());
        return 0;
    }
    std::printf("acceptance: %d criteria FAILED\n", g_failures);
    return 1;
}
