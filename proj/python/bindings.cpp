#include <pybind11/functional.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "mmsde/harness.hpp"

namespace py = pybind11;
using namespace mmsde;

namespace {

Mat mat_from_rows(const std::vector<std::vector<double>>& rows) {
    if (rows.empty()) return Mat();
    Mat m(rows.size(), rows.front().size());
    for (std::size_t i = 0; i < m.rows; ++i) {
        if (rows[i].size() != m.cols) throw ParameterError("ragged matrix");
        for (std::size_t j = 0; j < m.cols; ++j) m(i, j) = rows[i][j];
    }
    return m;
}

std::function<void(const Vec&, Vec&)> wrap_vec_fn(const py::function& f) {
    return [f](const Vec& x, Vec& out) { out = f(x).cast<Vec>(); };
}

std::function<void(const Vec&, Mat&)> wrap_mat_fn(const py::function& f) {
    return [f](const Vec& x, Mat& out) {
        out = mat_from_rows(f(x).cast<std::vector<std::vector<double>>>());
    };
}

std::vector<std::vector<double>> states_of(const PathSample& p) {
    std::vector<std::vector<double>> out;
    out.reserve(static_cast<std::size_t>(p.grid.count + 1));
    for (std::int64_t k = 0; k <= p.grid.count; ++k) out.push_back(p.state_vec(k));
    return out;
}

}  // namespace

PYBIND11_MODULE(_mmsde, m) {
    m.doc() = "multiscale multivalued SDE engine";

    py::register_exception<ParameterError>(m, "ParameterError", PyExc_ValueError);
    py::register_exception<CapabilityError>(m, "CapabilityError", PyExc_RuntimeError);
    py::register_exception<AssumptionError>(m, "AssumptionError", PyExc_RuntimeError);
    py::register_exception<RegimeError>(m, "RegimeError", PyExc_ValueError);

    py::class_<ConvexSet>(m, "ConvexSet")
        .def_static("whole_space", &ConvexSet::whole_space)
        .def_static("halfline", &ConvexSet::halfline)
        .def_static("box", &ConvexSet::box)
        .def_static("ball", &ConvexSet::ball)
        .def_static("halfspace", &ConvexSet::halfspace)
        .def("project", py::overload_cast<const Vec&>(&ConvexSet::project, py::const_))
        .def("membership_margin", &ConvexSet::membership_margin)
        .def("interior_point", &ConvexSet::interior_point);

    py::class_<ConvexFunction>(m, "ConvexFunction")
        .def_static("abs_norm", &ConvexFunction::abs_norm, py::arg("dim"), py::arg("weight") = 1.0)
        .def_static("quadratic_iso", &ConvexFunction::quadratic_iso)
        .def_static("indicator", &ConvexFunction::indicator)
        .def_static("sum", &ConvexFunction::sum)
        .def("value", &ConvexFunction::value)
        .def("prox", [](const ConvexFunction& f, double lambda, const Vec& x) {
            Vec out;
            f.prox(lambda, x, out);
            return out;
        });

    py::class_<MonotoneOperator>(m, "MonotoneOperator")
        .def_static("zero", &MonotoneOperator::zero)
        .def_static("linear",
                    [](const std::vector<std::vector<double>>& rows) {
                        return MonotoneOperator::linear(mat_from_rows(rows));
                    })
        .def_static("subdifferential", &MonotoneOperator::subdifferential)
        .def_static("normal_cone", &MonotoneOperator::normal_cone)
        .def("resolvent",
             py::overload_cast<double, const Vec&>(&MonotoneOperator::resolvent, py::const_))
        .def("yosida", py::overload_cast<double, const Vec&>(&MonotoneOperator::yosida, py::const_))
        .def("dim", &MonotoneOperator::dim);

    m.def("audit_monotone", &audit_monotone, py::arg("op"), py::arg("seed"),
          py::arg("count") = 10000, py::arg("tol") = 1e-9, py::arg("lambda_") = 1e-3);
    py::class_<MonotoneAuditReport>(m, "MonotoneAuditReport")
        .def_readonly("passed", &MonotoneAuditReport::pass)
        .def_readonly("worst_violation", &MonotoneAuditReport::worst_violation);

    py::class_<TimeGrid>(m, "TimeGrid")
        .def_static("from_step", &TimeGrid::from_step)
        .def_static("from_count", &TimeGrid::from_count)
        .def_readonly("horizon", &TimeGrid::horizon)
        .def_readonly("step", &TimeGrid::step)
        .def_readonly("count", &TimeGrid::count);

    py::class_<NoiseStream>(m, "NoiseStream")
        .def(py::init<std::uint64_t, std::uint64_t, int>(), py::arg("master_seed"),
             py::arg("stream_id"), py::arg("dimension"))
        .def("normal", &NoiseStream::normal)
        .def("uniform", &NoiseStream::uniform);

    py::class_<PathSample>(m, "PathSample")
        .def("states", &states_of)
        .def("k_variation", &PathSample::k_variation)
        .def_property_readonly("grid", [](const PathSample& p) { return p.grid; });

    py::class_<MvSdeProblem>(m, "MvSdeProblem")
        .def_static(
            "make",
            [](MonotoneOperator op, py::object drift, py::object diffusion, int noise_dim, Vec x0,
               double drift_scale, double noise_scale) {
                std::function<void(const Vec&, Vec&)> b;
                if (!drift.is_none()) b = wrap_vec_fn(drift.cast<py::function>());
                std::function<void(const Vec&, Mat&)> s;
                if (!diffusion.is_none()) s = wrap_mat_fn(diffusion.cast<py::function>());
                return MvSdeProblem::make(std::move(op), b, s, noise_dim, std::move(x0),
                                          drift_scale, noise_scale);
            },
            py::arg("op"), py::arg("drift"), py::arg("diffusion"), py::arg("noise_dim"),
            py::arg("x0"), py::arg("drift_scale") = 1.0, py::arg("noise_scale") = 1.0);

    m.def("simulate", &simulate);

    py::class_<FrozenProblem>(m, "FrozenProblem")
        .def_static(
            "make",
            [](MonotoneOperator a2, Vec x_frozen, const py::function& b2,
               const py::function& sigma2, int d2, double alpha, Vec y0) {
                FrozenProblem p;
                p.a2 = std::move(a2);
                p.x_frozen = std::move(x_frozen);
                p.b2 = wrap_vec_fn(b2);
                p.sigma2 = wrap_mat_fn(sigma2);
                p.d2 = d2;
                p.alpha = alpha;
                p.y0 = std::move(y0);
                return p;
            },
            py::arg("a2"), py::arg("x_frozen"), py::arg("b2"), py::arg("sigma2"), py::arg("d2"),
            py::arg("alpha"), py::arg("y0"));

    m.def("simulate_frozen", &simulate_frozen);
    m.def("estimate_invariant_measure", &estimate_invariant_measure, py::arg("problem"),
          py::arg("burn_in"), py::arg("sample_time"), py::arg("h"), py::arg("noise"));
    py::class_<InvariantMeasureEstimate>(m, "InvariantMeasureEstimate")
        .def_readonly("mean", &InvariantMeasureEstimate::mean)
        .def_readonly("second_moment", &InvariantMeasureEstimate::second_moment)
        .def_readonly("sample_count", &InvariantMeasureEstimate::sample_count)
        .def_readonly("se_mean", &InvariantMeasureEstimate::se_mean)
        .def_readonly("se_second_moment", &InvariantMeasureEstimate::se_second_moment);

    py::class_<AveragedModel>(m, "AveragedModel")
        .def_static(
            "closed_form",
            [](MonotoneOperator a1, const py::function& bbar1, py::object sigma1, int d1) {
                std::function<void(const Vec&, Mat&)> s;
                bool available = false;
                if (!sigma1.is_none()) {
                    s = wrap_mat_fn(sigma1.cast<py::function>());
                    available = true;
                }
                return AveragedModel::closed_form(std::move(a1), wrap_vec_fn(bbar1), s, d1,
                                                  available);
            },
            py::arg("a1"), py::arg("bbar1"), py::arg("sigma1"), py::arg("d1"));

    m.def("solve_averaged", &solve_averaged);

    py::class_<Control>(m, "Control")
        .def_static("zero", &Control::zero)
        .def_static("constant", &Control::constant)
        .def_static("concat", &Control::concat)
        .def_readwrite("values", &Control::values)
        .def("norm_sq", &Control::norm_sq);

    py::class_<SkeletonProblem>(m, "SkeletonProblem")
        .def_static("make", &SkeletonProblem::make, py::arg("model"), py::arg("x0"),
                    py::arg("grid"));

    m.def("solve_skeleton", &solve_skeleton);

    py::class_<RateOptions>(m, "RateOptions")
        .def(py::init<>())
        .def_readwrite("pieces", &RateOptions::pieces)
        .def_readwrite("max_iterations", &RateOptions::max_iterations);
    py::class_<RateFunctionResult>(m, "RateFunctionResult")
        .def_readonly("value", &RateFunctionResult::value)
        .def_readonly("infeasible", &RateFunctionResult::infeasible)
        .def_readonly("residual", &RateFunctionResult::residual)
        .def_readonly("optimal_control", &RateFunctionResult::optimal_control)
        .def("to_json", &RateFunctionResult::to_json);
    m.def("rate_function", &rate_function, py::arg("target"), py::arg("problem"),
          py::arg("options") = RateOptions{});

    py::class_<ScenarioSpec>(m, "ScenarioSpec")
        .def_readonly("name", &ScenarioSpec::name)
        .def_readonly("seed", &ScenarioSpec::seed)
        .def_readonly("eps_list", &ScenarioSpec::eps_list)
        .def("document", [](const ScenarioSpec& s) { return s.document.dump(2); });

    m.def("load_scenario", &load_scenario);
    m.def("resolve_scenario", &resolve_scenario);
    m.def("builtin_scenario_names", &builtin_scenario_names);
    m.def("builtin_scenario_document", &builtin_scenario_document);

    m.def(
        "run_experiment",
        [](const ScenarioSpec& spec, const std::string& task, const std::string& out_dir,
           py::object seed, py::object budget, int jobs) {
            RunOverrides ov;
            ov.out_dir = out_dir;
            ov.jobs = jobs;
            if (!seed.is_none()) ov.seed = seed.cast<std::uint64_t>();
            if (!budget.is_none()) ov.budget = budget.cast<int>();
            const ExperimentResult result = run_experiment(spec, parse_task(task), ov);
            py::dict out;
            out["payload"] = result.payload.dump(2);
            out["files"] = result.files_written;
            out["pass"] = result.pass;
            return out;
        },
        py::arg("spec"), py::arg("task"), py::arg("out_dir") = "out", py::arg("seed") = py::none(),
        py::arg("budget") = py::none(), py::arg("jobs") = 1);
}
