#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "mmsde/errors.hpp"
#include "mmsde/multiscale.hpp"

using namespace mmsde;

namespace {

// the worked fast mean-reverting pair: b2 = m - y/2, sigma2 = 1
CoefficientSet ou_coeffs(double m, bool b1_is_y = true) {
    CoefficientSet c;
    c.dim_slow = 1;
    c.dim_fast = 1;
    c.d1 = 1;
    c.d2 = 1;
    if (b1_is_y) {
        c.b1 = [](const Vec&, const Vec& y, Vec& out) { out = y; };
    } else {
        c.b1 = [](const Vec& x, const Vec&, Vec& out) { out = x; };
        c.b1_y_independent = true;
    }
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

SlowFastSystem ou_system(double m, double eps, double gamma) {
    return SlowFastSystem::make(MonotoneOperator::normal_cone(ConvexSet::halfline(0.0)),
                                MonotoneOperator::zero(1), ou_coeffs(m), eps, gamma, {0.5}, {1.0},
                                1.0);
}

FrozenProblem frozen_ou(double m, const Vec& y0) {
    FrozenProblem p;
    p.a2 = MonotoneOperator::zero(1);
    p.x_frozen = {0.0};
    p.b2 = [m](const Vec& y, Vec& out) { out = {m - 0.5 * y[0]}; };
    p.sigma2 = [](const Vec&, Mat& out) { out = Mat(1, 1, 1.0); };
    p.d2 = 1;
    p.alpha = 0.5;
    p.y0 = y0;
    return p;
}

}  // namespace

TEST_CASE("slow-fast simulation basics") {
    SUBCASE("decoupled noiseless slow component equals the averaged path") {
        CoefficientSet c = ou_coeffs(1.0, /*b1_is_y=*/false); // b1(x,y) = x
        c.sigma1 = [](const Vec&, const Vec&, Mat& out) { out = Mat(1, 1, 0.0); };
        auto sys = SlowFastSystem::make(MonotoneOperator::zero(1), MonotoneOperator::zero(1), c,
                                        0.2, 0.01, {0.5}, {1.0}, 1.0);
        const TimeGrid grid = sys.default_grid();
        const auto paths = simulate_slow_fast(sys, grid, NoiseStream(1, 0, 1), NoiseStream(1, 1, 1));
        const auto model = AveragedModel::closed_form(
            MonotoneOperator::zero(1), [](const Vec& x, Vec& out) { out = x; }, nullptr, 1, false);
        const PathSample avg = solve_averaged(model, {0.5}, grid);
        CHECK(paths.slow.states == avg.states);
    }
    SUBCASE("same seed replays bitwise") {
        auto sys = ou_system(1.0, 0.2, 0.05);
        const TimeGrid grid = sys.default_grid();
        const auto a = simulate_slow_fast(sys, grid, NoiseStream(9, 0, 1), NoiseStream(9, 1, 1));
        const auto b = simulate_slow_fast(sys, grid, NoiseStream(9, 0, 1), NoiseStream(9, 1, 1));
        CHECK(a.slow.states == b.slow.states);
        CHECK(a.fast.states == b.fast.states);
    }
    SUBCASE("step rule violations are named") {
        auto sys = ou_system(1.0, 0.2, 0.05);
        const TimeGrid grid = TimeGrid::from_step(1.0, 0.01); // 0.01 > gamma/20 = 0.0025
        CHECK_THROWS_WITH_AS(
            static_cast<void>(simulate_slow_fast(sys, grid, NoiseStream(1, 0, 1), NoiseStream(1, 1, 1))),
            doctest::Contains("gamma/20"), ParameterError);
    }
    SUBCASE("reflected fast component stays in its domain") {
        CoefficientSet c = ou_coeffs(1.0);
        auto sys = SlowFastSystem::make(MonotoneOperator::normal_cone(ConvexSet::halfline(0.0)),
                                        MonotoneOperator::normal_cone(ConvexSet::halfline(0.0)), c,
                                        0.2, 0.02, {0.5}, {0.0}, 1.0); // y0 on the boundary
        const TimeGrid grid = sys.default_grid();
        const auto paths = simulate_slow_fast(sys, grid, NoiseStream(3, 0, 1), NoiseStream(3, 1, 1));
        CHECK(paths.fast.max_membership_violation(sys.a2.domain()) <= 1e-9);
        CHECK(paths.slow.max_membership_violation(sys.a1.domain()) <= 1e-9);
    }
}

TEST_CASE("frozen equation") {
    SUBCASE("deterministic contraction to zero") {
        FrozenProblem p = frozen_ou(0.0, {1.0});
        p.b2 = [](const Vec& y, Vec& out) { out = {-y[0]}; };
        p.sigma2 = [](const Vec&, Mat& out) { out = Mat(1, 1, 0.0); };
        const PathSample path = simulate_frozen(p, 1.0, 1e-3, NoiseStream(0, 0, 1));
        CHECK(std::abs(path.state(path.grid.count)[0] - std::exp(-1.0)) < 2e-3);
    }
    SUBCASE("boundary start stays in the closure") {
        FrozenProblem p = frozen_ou(0.0, {0.0});
        p.a2 = MonotoneOperator::normal_cone(ConvexSet::halfline(0.0));
        const PathSample path = simulate_frozen(p, 5.0, 0.01, NoiseStream(8, 2, 1));
        CHECK(path.max_membership_violation(p.a2.domain()) <= 1e-9);
    }
}

TEST_CASE("invariant measure estimation") {
    SUBCASE("worked example, psi = 0, m = 1: stationary N(2,1)") {
        const auto est = estimate_invariant_measure(frozen_ou(1.0, {1.0}), 20.0, 2000.0, 0.01,
                                                    NoiseStream(41, 0, 1));
        CHECK(std::abs(est.mean[0] - 2.0) <= 3.0 * est.se_mean[0]);
        CHECK(std::abs(est.second_moment - 5.0) <= 3.0 * est.se_second_moment);
        CHECK(est.second_moment >= dot(est.mean, est.mean));
        CHECK(est.sample_count > 0);
    }
    SUBCASE("half-Gaussian stationary law of the reflected pair") {
        FrozenProblem p = frozen_ou(0.0, {0.5});
        p.a2 = MonotoneOperator::normal_cone(ConvexSet::halfline(0.0));
        const auto est = estimate_invariant_measure(p, 20.0, 2000.0, 0.002, NoiseStream(42, 0, 1));
        CHECK(std::abs(est.mean[0] - std::sqrt(2.0 / M_PI)) <= 3.0 * est.se_mean[0]);
    }
    SUBCASE("deterministic contraction gives a point mass") {
        FrozenProblem p = frozen_ou(0.0, {1.0});
        p.b2 = [](const Vec& y, Vec& out) { out = {-y[0]}; };
        p.sigma2 = [](const Vec&, Mat& out) { out = Mat(1, 1, 0.0); };
        p.alpha = 0.1; // declared margin; the law is a point mass at 0
        const auto est = estimate_invariant_measure(p, 110.0, 200.0, 0.01, NoiseStream(5, 0, 1));
        CHECK(std::abs(est.mean[0]) < 1e-12);
        CHECK(est.second_moment < 1e-12);
    }
    SUBCASE("alpha <= 0 is refused") {
        FrozenProblem p = frozen_ou(0.0, {1.0});
        p.alpha = 0.0;
        CHECK_THROWS_AS(
            static_cast<void>(estimate_invariant_measure(p, 20.0, 100.0, 0.01, NoiseStream(0, 0, 1))),
            AssumptionError);
    }
    SUBCASE("burn-in below 10/alpha is refused") {
        CHECK_THROWS_AS(static_cast<void>(estimate_invariant_measure(frozen_ou(1.0, {1.0}), 5.0,
                                                                     100.0, 0.01,
                                                                     NoiseStream(0, 0, 1))),
                        ParameterError);
    }
    SUBCASE("moment bound against the closed-form constant") {
        // frozen law of b2 = x - y/2 is N(2x, 1): second moment 4x^2 + 1.
        // Calibrate C = 1.25 * sup_x (4x^2+1)/(1+x^2) = 5 from the closed form,
        // then require every estimate to obey it.
        const double big_c = 1.25 * 4.0;
        for (double x : {0.0, 1.0, 3.0}) {
            FrozenProblem p = frozen_ou(0.0, {0.0});
            p.x_frozen = {x};
            p.b2 = [x](const Vec& y, Vec& out) { out = {x - 0.5 * y[0]}; };
            const auto est =
                estimate_invariant_measure(p, 20.0, 500.0, 0.01, NoiseStream(77, 0, 1));
            CHECK(est.second_moment <= big_c * (1.0 + x * x));
        }
    }
}

TEST_CASE("averaged drift estimation") {
    const MonotoneOperator a2 = MonotoneOperator::zero(1);
    SUBCASE("b1 = y averages to 2m") {
        const auto est = estimate_averaged_drift({0.0}, a2, ou_coeffs(1.0), {}, NoiseStream(11, 0, 1));
        CHECK(std::abs(est.value[0] - 2.0) <= 3.0 * est.ci_half[0]);
        CHECK(est.ci_half[0] > 0.0);
    }
    SUBCASE("y-independent b1 is returned exactly with zero-width CI") {
        const auto est =
            estimate_averaged_drift({0.7}, a2, ou_coeffs(1.0, false), {}, NoiseStream(11, 0, 1));
        CHECK(est.value[0] == 0.7);
        CHECK(est.ci_half[0] == 0.0);
    }
    SUBCASE("b1 = y^2 at m = 0 averages to the Gaussian second moment") {
        CoefficientSet c = ou_coeffs(0.0);
        c.b1 = [](const Vec&, const Vec& y, Vec& out) { out = {y[0] * y[0]}; };
        EstimationConfig config;
        config.sample_time = 1500.0;
        const auto est = estimate_averaged_drift({0.0}, a2, c, config, NoiseStream(12, 0, 1));
        CHECK(std::abs(est.value[0] - 1.0) <= 3.0 * est.ci_half[0]);
    }
}

TEST_CASE("averaged model") {
    SUBCASE("closed form short-circuits the table") {
        auto sys = ou_system(1.0, 0.2, 0.05);
        const auto model = AveragedModel::closed_form(
            sys.a1, [](const Vec&, Vec& out) { out = {2.0}; }, nullptr, 1, false);
        CHECK(model.provenance == AveragedModel::Provenance::ClosedForm);
        Vec out;
        model.bbar1({0.3}, out);
        CHECK(out[0] == 2.0);
    }
    SUBCASE("x-independent fast dynamics tabulate a constant drift") {
        auto sys = ou_system(1.0, 0.2, 0.05);
        EstimationConfig config;
        config.sample_time = 400.0;
        const AveragedModel model = build_averaged_model(sys, {0.0, 0.5, 1.0, 1.5}, config, 314);
        CHECK(model.provenance == AveragedModel::Provenance::Estimated);
        double max_gap = 0.0, max_ci = 0.0;
        for (std::size_t i = 0; i + 1 < model.table_values.size(); ++i) {
            max_gap = std::max(max_gap,
                               std::abs(model.table_values[i + 1][0] - model.table_values[i][0]));
            max_ci = std::max(max_ci, model.table_ci_half[i]);
        }
        CHECK(max_gap <= 2.0 * std::max(max_ci, model.table_ci_half.back()) + 1e-12);
        CHECK(std::isfinite(model.lipschitz_estimate));
        CHECK_FALSE(model.extrapolated->load());
        Vec probe;
        model.bbar1({5.0}, probe); // outside the table range
        CHECK(model.extrapolated->load());
    }
}

TEST_CASE("averaged equation solver") {
    SUBCASE("reflected ramp") {
        const auto model = AveragedModel::closed_form(
            MonotoneOperator::normal_cone(ConvexSet::halfline(0.0)),
            [](const Vec&, Vec& out) { out = {-1.0}; }, nullptr, 1, false);
        const double h = 1e-3;
        const PathSample path = solve_averaged(model, {0.5}, TimeGrid::from_step(1.0, h));
        for (std::int64_t k = 0; k <= path.grid.count; ++k)
            CHECK(std::abs(path.state(k)[0] - std::max(0.5 - path.grid.node(k), 0.0)) <= 2.0 * h);
    }
    SUBCASE("zero drift keeps the path constant") {
        const auto model = AveragedModel::closed_form(
            MonotoneOperator::zero(1), [](const Vec&, Vec& out) { out = {0.0}; }, nullptr, 1, false);
        const PathSample path = solve_averaged(model, {0.3}, TimeGrid::from_step(1.0, 0.01));
        CHECK(path.state(path.grid.count)[0] == 0.3);
    }
    SUBCASE("linear decay") {
        const auto model = AveragedModel::closed_form(
            MonotoneOperator::zero(1), [](const Vec& x, Vec& out) { out = {-x[0]}; }, nullptr, 1,
            false);
        const double h = 1e-3;
        const PathSample path = solve_averaged(model, {1.0}, TimeGrid::from_step(1.0, h));
        for (std::int64_t k = 0; k <= path.grid.count; ++k)
            CHECK(std::abs(path.state(k)[0] - std::exp(-path.grid.node(k))) <= 2.0 * h);
    }
}

TEST_CASE("khasminskii auxiliary processes") {
    SUBCASE("x-independent fast coefficients make Yhat track Y bitwise") {
        auto sys = ou_system(1.0, 0.2, 0.05);
        const TimeGrid grid = sys.default_grid();
        KhasminskiiConfig config = KhasminskiiConfig::from_iota(sys.gamma, 0.5);
        config.delta = grid.step * std::max<std::int64_t>(1, std::llround(config.delta / grid.step));
        const auto hat = khasminskii_paths(sys, config, grid, NoiseStream(21, 0, 1),
                                           NoiseStream(21, 1, 1));
        const auto direct = simulate_slow_fast(sys, grid, NoiseStream(21, 0, 1), NoiseStream(21, 1, 1));
        CHECK(hat.yhat.states == direct.fast.states);
    }
    SUBCASE("a single block freezes the slow argument at x0") {
        CoefficientSet c = ou_coeffs(1.0);
        c.b2 = [](const Vec& x, const Vec&, Vec& out) { out = x; }; // fast drift reads the slow state
        c.sigma2 = [](const Vec&, const Vec&, Mat& out) { out = Mat(1, 1, 0.0); };
        auto sys = SlowFastSystem::make(MonotoneOperator::zero(1), MonotoneOperator::zero(1), c,
                                        0.2, 0.05, {0.5}, {0.0}, 1.0);
        const TimeGrid grid = sys.default_grid();
        KhasminskiiConfig config;
        config.delta = sys.horizon; // one block
        const auto hat =
            khasminskii_paths(sys, config, grid, NoiseStream(22, 0, 1), NoiseStream(22, 1, 1));
        // Yhat integrates b2(x0)/gamma exactly
        const double expected = 0.0 + 0.5 * sys.horizon / sys.gamma;
        CHECK(hat.yhat.state(grid.count)[0] == doctest::Approx(expected).epsilon(1e-12));
    }
    SUBCASE("delta must align with the grid") {
        auto sys = ou_system(1.0, 0.2, 0.05);
        const TimeGrid grid = sys.default_grid();
        KhasminskiiConfig config;
        config.delta = 1.7 * grid.step;
        CHECK_THROWS_AS(static_cast<void>(khasminskii_paths(sys, config, grid, NoiseStream(0, 0, 1),
                                                            NoiseStream(0, 1, 1))),
                        ParameterError);
        config.delta = 0.5 * grid.step;
        CHECK_THROWS_AS(static_cast<void>(khasminskii_paths(sys, config, grid, NoiseStream(0, 0, 1),
                                                            NoiseStream(0, 1, 1))),
                        ParameterError);
    }
    SUBCASE("sup_t E|Y - Yhat|^2 shrinks with gamma (two-point check)") {
        auto make_sys = [](double gamma) {
            CoefficientSet c = ou_coeffs(1.0);
            c.b2 = [](const Vec& x, const Vec& y, Vec& out) {
                out = {1.0 + 0.3 * x[0] - 0.5 * y[0]};
            };
            return SlowFastSystem::make(MonotoneOperator::zero(1), MonotoneOperator::zero(1), c,
                                        0.1, gamma, {0.5}, {1.0}, 1.0);
        };
        auto sup_gap = [&](double gamma) {
            auto sys = make_sys(gamma);
            const TimeGrid grid = sys.default_grid();
            KhasminskiiConfig config;
            config.delta = grid.step * std::max<std::int64_t>(
                                           1, std::llround(std::sqrt(gamma) / grid.step));
            const int reps = 60;
            std::vector<double> sup_mean(static_cast<std::size_t>(grid.count + 1), 0.0);
            for (int r = 0; r < reps; ++r) {
                NoiseStream w1(500, make_stream_id(5, 0, static_cast<std::uint64_t>(r), 0), 1);
                NoiseStream w2(500, make_stream_id(5, 0, static_cast<std::uint64_t>(r), 1), 1);
                const auto hat = khasminskii_paths(sys, config, grid, w1, w2);
                const auto direct = simulate_slow_fast(sys, grid, w1, w2);
                for (std::int64_t k = 0; k <= grid.count; ++k) {
                    const double d = hat.yhat.state(k)[0] - direct.fast.state(k)[0];
                    sup_mean[static_cast<std::size_t>(k)] += d * d / reps;
                }
            }
            double sup = 0.0;
            for (double v : sup_mean) sup = std::max(sup, v);
            return sup;
        };
        const double coarse = sup_gap(1e-2);
        const double fine = sup_gap(1e-3);
        CHECK(fine < coarse);
    }
}

TEST_CASE("averaging error report") {
    SUBCASE("decoupled noiseless systems coincide up to discretization") {
        CoefficientSet c = ou_coeffs(1.0, false); // b1(x,y) = x
        c.sigma1 = [](const Vec&, const Vec&, Mat& out) { out = Mat(1, 1, 0.0); };
        auto sys = SlowFastSystem::make(MonotoneOperator::zero(1), MonotoneOperator::zero(1), c,
                                        0.2, 0.01, {0.5}, {1.0}, 1.0);
        const auto model = AveragedModel::closed_form(
            MonotoneOperator::zero(1), [](const Vec& x, Vec& out) { out = x; }, nullptr, 1, false);
        const auto report = averaging_error(sys, model, {0.2, 0.1}, [](double e) { return e * e; },
                                            50, 99, 1);
        for (const auto& row : report.rows) {
            const double h = row.gamma / 20.0;
            CHECK(row.error <= 4.0 * h * h);
        }
        CHECK(report.coupling_note.find("averaged path") != std::string::npos);
    }
    SUBCASE("errors decrease on the worked example") {
        auto sys = ou_system(1.0, 0.2, 0.05);
        const auto model = AveragedModel::closed_form(
            sys.a1, [](const Vec&, Vec& out) { out = {2.0}; }, nullptr, 1, false);
        const auto report = averaging_error(
            sys, model, {0.2, 0.1}, [](double e) { return std::pow(e, 1.5); }, 60, 2024, 2);
        REQUIRE(report.rows.size() == 2);
        CHECK(report.rows[1].error < report.rows[0].error);
        for (const auto& row : report.rows) CHECK(row.ci_half > 0.0);
    }
    SUBCASE("regime guard") {
        auto sys = ou_system(1.0, 0.2, 0.05);
        const auto model = AveragedModel::closed_form(
            sys.a1, [](const Vec&, Vec& out) { out = {2.0}; }, nullptr, 1, false);
        CHECK_THROWS_AS(static_cast<void>(averaging_error(sys, model, {0.2, 0.1},
                                                          [](double e) { return e; }, 50, 1, 1)),
                        RegimeError);
        CHECK_THROWS_AS(static_cast<void>(averaging_error(sys, model, {0.1, 0.2},
                                                          [](double e) { return e * e; }, 50, 1, 1)),
                        RegimeError);
        CHECK_THROWS_AS(static_cast<void>(averaging_error(sys, model, {0.2, 0.1},
                                                          [](double e) { return e * e; }, 10, 1, 1)),
                        ParameterError);
    }
    SUBCASE("single epsilon row carries no trend claim") {
        auto sys = ou_system(1.0, 0.2, 0.05);
        const auto model = AveragedModel::closed_form(
            sys.a1, [](const Vec&, Vec& out) { out = {2.0}; }, nullptr, 1, false);
        const auto report =
            averaging_error(sys, model, {0.2}, [](double e) { return e * e; }, 50, 7, 1);
        CHECK(report.rows.size() == 1);
    }
}

TEST_CASE("assumption audit") {
    SUBCASE("worked example passes with beta = 1, L = 1/4") {
        const auto rows = audit_assumptions(ou_coeffs(1.0), ConvexSet::whole_space(1), 1234, 4000);
        for (const auto& row : rows) CHECK(row.pass);
    }
    SUBCASE("explosive fast drift fails the dissipativity audit") {
        CoefficientSet c = ou_coeffs(1.0);
        c.b2 = [](const Vec&, const Vec& y, Vec& out) { out = y; };
        const auto rows = audit_assumptions(c, ConvexSet::whole_space(1), 1234, 2000);
        bool h2_failed = false;
        for (const auto& row : rows)
            if (row.name == "H2_b2_sigma2") {
                h2_failed = !row.pass;
                CHECK(row.statistic == doctest::Approx(2.0).epsilon(1e-6));
            }
        CHECK(h2_failed);
    }
    SUBCASE("constant sigma2 meets its declared bound") {
        const auto rows = audit_assumptions(ou_coeffs(0.0), ConvexSet::whole_space(1), 99, 2000);
        for (const auto& row : rows)
            if (row.name == "H3_sigma2") {
                CHECK(row.pass);
                CHECK(row.statistic == doctest::Approx(1.0));
            }
    }
}

TEST_CASE("synchronous-coupling contraction fit") {
    SUBCASE("worked example decays at rate one") {
        const auto fit = contraction_fit(frozen_ou(1.0, {1.0}), {1.0}, {2.0}, 10.0, 0.01,
                                         NoiseStream(70, 0, 1));
        CHECK(fit.fitted_rate == doctest::Approx(1.0).epsilon(0.02));
        CHECK(fit.threshold == doctest::Approx(0.4));
        CHECK(fit.passed);
    }
    SUBCASE("general linear drift recovers its own rate") {
        FrozenProblem p = frozen_ou(0.0, {1.0});
        const double rate = 1.6;
        p.b2 = [rate](const Vec& y, Vec& out) { out = {-0.5 * rate * y[0]}; };
        p.alpha = 0.3;
        const auto fit = contraction_fit(p, {0.5}, {1.5}, 6.0, 0.005, NoiseStream(71, 0, 1));
        CHECK(fit.fitted_rate == doctest::Approx(rate).epsilon(0.02));
    }
    SUBCASE("equal starts are rejected") {
        CHECK_THROWS_AS(static_cast<void>(contraction_fit(frozen_ou(1.0, {1.0}), {1.0}, {1.0}, 5.0,
                                                          0.01, NoiseStream(0, 0, 1))),
                        ParameterError);
    }
}

TEST_CASE("deterministic parallel fold") {
    auto sys = ou_system(1.0, 0.2, 0.05);
    const auto model = AveragedModel::closed_form(
        sys.a1, [](const Vec&, Vec& out) { out = {2.0}; }, nullptr, 1, false);
    const auto rule = [](double e) { return std::pow(e, 1.5); };
    const auto serial = averaging_error(sys, model, {0.2, 0.1}, rule, 50, 555, 1);
    const auto threaded = averaging_error(sys, model, {0.2, 0.1}, rule, 50, 555, 4);
    REQUIRE(serial.rows.size() == threaded.rows.size());
    for (std::size_t i = 0; i < serial.rows.size(); ++i) {
        CHECK(serial.rows[i].error == threaded.rows[i].error);
        CHECK(serial.rows[i].ci_half == threaded.rows[i].ci_half);
    }
}
