#include "mmsde/harness.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <algorithm>
#include <set>
#include <sstream>

#include "mmsde/errors.hpp"

namespace mmsde {

using nlohmann::json;

std::uint64_t fnv1a64(const std::string& text) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : text) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

namespace {

[[noreturn]] void fail(const std::string& what) { throw ParameterError("scenario: " + what); }

void require_object(const json& j, const std::string& ctx) {
    if (!j.is_object()) fail(ctx + " must be an object");
}

void check_keys(const json& obj, const std::vector<std::string>& required,
                const std::set<std::string>& optional, const std::string& ctx) {
    for (const auto& key : required) // declaration order: the first gap is reported
        if (!obj.contains(key)) fail(ctx + ": missing required field '" + key + "'");
    for (auto it = obj.begin(); it != obj.end(); ++it)
        if (std::find(required.begin(), required.end(), it.key()) == required.end() &&
            !optional.count(it.key()))
            fail(ctx + ": unknown field '" + it.key() + "'");
}

Vec parse_vec(const json& j, const std::string& ctx) {
    if (!j.is_array()) fail(ctx + " must be an array of numbers");
    Vec v;
    for (const auto& e : j) {
        if (e.is_null()) {
            v.push_back(std::numeric_limits<double>::infinity());
        } else if (e.is_number()) {
            v.push_back(e.get<double>());
        } else if (e.is_string()) {
            const std::string s = e.get<std::string>();
            if (s == "inf" || s == "+inf")
                v.push_back(std::numeric_limits<double>::infinity());
            else if (s == "-inf")
                v.push_back(-std::numeric_limits<double>::infinity());
            else
                fail(ctx + ": bad entry '" + s + "'");
        } else {
            fail(ctx + " must contain numbers");
        }
    }
    return v;
}

Mat parse_mat(const json& j, const std::string& ctx) {
    if (!j.is_array() || j.empty()) fail(ctx + " must be a nonempty array of rows");
    Mat m;
    m.rows = j.size();
    Vec first = parse_vec(j[0], ctx);
    m.cols = first.size();
    m.a.reserve(m.rows * m.cols);
    for (const auto& row : j) {
        Vec r = parse_vec(row, ctx);
        if (r.size() != m.cols) fail(ctx + ": ragged matrix");
        m.a.insert(m.a.end(), r.begin(), r.end());
    }
    return m;
}

ConvexSet parse_set(const json& j, const std::string& ctx) {
    require_object(j, ctx);
    const std::string kind = j.value("kind", "");
    if (kind == "halfline") {
        check_keys(j, {"kind", "lower"}, {}, ctx);
        return ConvexSet::halfline(j.at("lower").get<double>());
    }
    if (kind == "box") {
        check_keys(j, {"kind", "lower", "upper"}, {}, ctx);
        return ConvexSet::box(parse_vec(j.at("lower"), ctx + ".lower"),
                              parse_vec(j.at("upper"), ctx + ".upper"));
    }
    if (kind == "ball") {
        check_keys(j, {"kind", "center", "radius"}, {}, ctx);
        return ConvexSet::ball(parse_vec(j.at("center"), ctx + ".center"),
                               j.at("radius").get<double>());
    }
    if (kind == "halfspace") {
        check_keys(j, {"kind", "normal", "offset"}, {}, ctx);
        return ConvexSet::halfspace(parse_vec(j.at("normal"), ctx + ".normal"),
                                    j.at("offset").get<double>());
    }
    if (kind == "polyhedron") {
        check_keys(j, {"kind", "rows", "rhs", "interior"}, {}, ctx);
        return ConvexSet::polyhedron(parse_mat(j.at("rows"), ctx + ".rows"),
                                     parse_vec(j.at("rhs"), ctx + ".rhs"),
                                     parse_vec(j.at("interior"), ctx + ".interior"));
    }
    if (kind == "whole-space") {
        check_keys(j, {"kind", "dim"}, {}, ctx);
        return ConvexSet::whole_space(j.at("dim").get<std::size_t>());
    }
    fail(ctx + ": unknown set kind '" + kind + "'");
}

ConvexFunction parse_function(const json& j, const std::string& ctx) {
    require_object(j, ctx);
    const std::string kind = j.value("kind", "");
    if (kind == "abs-norm") {
        check_keys(j, {"kind", "dim"}, {"weight"}, ctx);
        return ConvexFunction::abs_norm(j.at("dim").get<std::size_t>(), j.value("weight", 1.0));
    }
    if (kind == "quadratic") {
        check_keys(j, {"kind", "matrix"}, {"linear"}, ctx);
        Mat q = parse_mat(j.at("matrix"), ctx + ".matrix");
        Vec lin = j.contains("linear") ? parse_vec(j.at("linear"), ctx + ".linear")
                                       : Vec(q.rows, 0.0);
        return ConvexFunction::quadratic(std::move(q), std::move(lin));
    }
    if (kind == "indicator") {
        check_keys(j, {"kind", "set"}, {}, ctx);
        return ConvexFunction::indicator(parse_set(j.at("set"), ctx + ".set"));
    }
    if (kind == "sum") {
        check_keys(j, {"kind", "parts"}, {}, ctx);
        std::vector<ConvexFunction> parts;
        for (const auto& p : j.at("parts")) parts.push_back(parse_function(p, ctx + ".parts"));
        return ConvexFunction::sum(std::move(parts));
    }
    fail(ctx + ": unknown function kind '" + kind + "'");
}

MonotoneOperator parse_operator(const json& j, const std::string& ctx) {
    require_object(j, ctx);
    const std::string kind = j.value("kind", "");
    if (kind == "zero") {
        check_keys(j, {"kind", "dim"}, {}, ctx);
        return MonotoneOperator::zero(j.at("dim").get<std::size_t>());
    }
    if (kind == "linear-psd") {
        check_keys(j, {"kind", "matrix"}, {}, ctx);
        return MonotoneOperator::linear(parse_mat(j.at("matrix"), ctx + ".matrix"));
    }
    if (kind == "normal-cone") {
        check_keys(j, {"kind", "set"}, {}, ctx);
        return MonotoneOperator::normal_cone(parse_set(j.at("set"), ctx + ".set"));
    }
    if (kind == "subdifferential") {
        check_keys(j, {"kind", "function"}, {}, ctx);
        return MonotoneOperator::subdifferential(parse_function(j.at("function"), ctx + ".function"));
    }
    fail(ctx + ": unknown operator kind '" + kind + "'");
}

struct DriftSpec {
    std::function<void(const Vec&, const Vec&, Vec&)> fn;
    bool y_independent = false;
};

DriftSpec parse_drift(const json& j, std::size_t dim_out, std::size_t dim_x, std::size_t dim_y,
                      const std::string& ctx) {
    require_object(j, ctx);
    const std::string kind = j.value("kind", "");
    if (kind == "constant") {
        check_keys(j, {"kind", "value"}, {}, ctx);
        Vec v = parse_vec(j.at("value"), ctx + ".value");
        if (v.size() != dim_out) fail(ctx + ": value dimension mismatch");
        return {[v](const Vec&, const Vec&, Vec& out) { out = v; }, true};
    }
    if (kind == "linear") {
        check_keys(j, {"kind"}, {"a_x", "a_y", "offset"}, ctx);
        Mat ax = j.contains("a_x") ? parse_mat(j.at("a_x"), ctx + ".a_x") : Mat(dim_out, dim_x);
        Mat ay = j.contains("a_y") ? parse_mat(j.at("a_y"), ctx + ".a_y") : Mat(dim_out, dim_y);
        Vec off = j.contains("offset") ? parse_vec(j.at("offset"), ctx + ".offset")
                                       : Vec(dim_out, 0.0);
        if (ax.rows != dim_out || ax.cols != dim_x) fail(ctx + ".a_x: shape mismatch");
        if (ay.rows != dim_out || ay.cols != dim_y) fail(ctx + ".a_y: shape mismatch");
        if (off.size() != dim_out) fail(ctx + ".offset: shape mismatch");
        bool y_indep = true;
        for (double v : ay.a)
            if (v != 0.0) y_indep = false;
        return {[ax, ay, off](const Vec& x, const Vec& y, Vec& out) {
                    out = off;
                    gemv_add(1.0, ax, x, out);
                    gemv_add(1.0, ay, y, out);
                },
                y_indep};
    }
    fail(ctx + ": unknown drift kind '" + kind + "' (constant | linear)");
}

struct SigmaSpec {
    std::function<void(const Vec&, const Vec&, Mat&)> fn;
    bool y_independent = false;
};

SigmaSpec parse_sigma(const json& j, std::size_t rows, std::size_t cols, const std::string& ctx) {
    require_object(j, ctx);
    const std::string kind = j.value("kind", "");
    if (kind == "constant") {
        check_keys(j, {"kind", "value"}, {}, ctx);
        Mat m = parse_mat(j.at("value"), ctx + ".value");
        if (m.rows != rows || m.cols != cols) fail(ctx + ".value: shape mismatch");
        return {[m](const Vec&, const Vec&, Mat& out) { out = m; }, true};
    }
    fail(ctx + ": unknown diffusion kind '" + kind + "' (constant)");
}

std::function<void(const Vec&, Vec&)> parse_averaged_drift(const json& j, std::size_t dim_slow,
                                                           const std::string& ctx) {
    require_object(j, ctx);
    const std::string kind = j.value("kind", "");
    if (kind == "constant") {
        check_keys(j, {"kind", "value"}, {}, ctx);
        Vec v = parse_vec(j.at("value"), ctx + ".value");
        if (v.size() != dim_slow) fail(ctx + ": value dimension mismatch");
        return [v](const Vec&, Vec& out) { out = v; };
    }
    if (kind == "linear") {
        check_keys(j, {"kind"}, {"a_x", "offset"}, ctx);
        Mat ax = j.contains("a_x") ? parse_mat(j.at("a_x"), ctx + ".a_x") : Mat(dim_slow, dim_slow);
        Vec off = j.contains("offset") ? parse_vec(j.at("offset"), ctx + ".offset")
                                       : Vec(dim_slow, 0.0);
        if (ax.rows != dim_slow || ax.cols != dim_slow || off.size() != dim_slow)
            fail(ctx + ": shape mismatch");
        return [ax, off](const Vec& x, Vec& out) {
            out = off;
            gemv_add(1.0, ax, x, out);
        };
    }
    fail(ctx + ": unknown averaged-drift kind '" + kind + "'");
}

}  // namespace

// ---------------------------------------------------------------------------
// Built-in scenarios

namespace {

const char* kReflectedOu = R"json({
  "schema": "mmsde-scenario/1",
  "name": "reflected-ou",
  "operators": {
    "A1": {"kind": "normal-cone", "set": {"kind": "halfline", "lower": 0.0}},
    "A2": {"kind": "zero", "dim": 1}
  },
  "coefficients": {
    "dim_slow": 1, "dim_fast": 1, "d1": 1, "d2": 1,
    "b1": {"kind": "linear", "a_y": [[1.0]]},
    "sigma1": {"kind": "constant", "value": [[1.0]]},
    "b2": {"kind": "linear", "a_y": [[-0.5]], "offset": [1.0]},
    "sigma2": {"kind": "constant", "value": [[1.0]]},
    "constants": {"lip_b1_sigma1": 1.0, "lip_b2_sigma2": 0.25, "beta": 1.0, "sigma2_bound": 1.0}
  },
  "averaged_drift": {"kind": "constant", "value": [2.0]},
  "initial": {"x0": [0.5], "y0": [1.0]},
  "horizon": 1.0,
  "scales": {"eps_list": [0.2, 0.1, 0.05], "gamma_power": 1.5},
  "khasminskii": {"iota": 0.5},
  "monte_carlo": {"replications": 200, "tail_budgets": [20000]},
  "ldp": {"pieces": 64, "grid_steps": 256, "target": {"kind": "averaged"}},
  "tail": {"radius": 1.0, "mode": "abs"},
  "weak_probe": {"control": [1.0, 0.0]},
  "seed": 20240901
})json";

const char* kBox2d = R"json({
  "schema": "mmsde-scenario/1",
  "name": "box-2d",
  "operators": {
    "A1": {"kind": "normal-cone", "set": {"kind": "box", "lower": [0.0, 0.0], "upper": [1.0, 1.0]}},
    "A2": {"kind": "zero", "dim": 1}
  },
  "coefficients": {
    "dim_slow": 2, "dim_fast": 1, "d1": 2, "d2": 1,
    "b1": {"kind": "linear", "a_x": [[-1.0, 0.0], [0.0, -1.0]], "a_y": [[1.0], [0.0]], "offset": [0.0, 0.5]},
    "sigma1": {"kind": "constant", "value": [[1.0, 0.0], [0.0, 1.0]]},
    "b2": {"kind": "linear", "a_y": [[-0.5]], "offset": [1.0]},
    "sigma2": {"kind": "constant", "value": [[1.0]]},
    "constants": {"lip_b1_sigma1": 2.0, "lip_b2_sigma2": 0.25, "beta": 1.0, "sigma2_bound": 1.0}
  },
  "averaged_drift": {"kind": "linear", "a_x": [[-1.0, 0.0], [0.0, -1.0]], "offset": [2.0, 0.5]},
  "initial": {"x0": [0.5, 0.5], "y0": [1.0]},
  "horizon": 1.0,
  "scales": {"eps_list": [0.2, 0.1, 0.05], "gamma_power": 1.5},
  "khasminskii": {"iota": 0.5},
  "monte_carlo": {"replications": 200, "tail_budgets": [20000]},
  "ldp": {"pieces": 64, "grid_steps": 256, "target": {"kind": "averaged"}},
  "tail": {"radius": 0.8, "mode": "abs"},
  "weak_probe": {"control": [1.0, 0.0, 0.0]},
  "seed": 20240902
})json";

const char* kSoftThreshold = R"json({
  "schema": "mmsde-scenario/1",
  "name": "soft-threshold",
  "operators": {
    "A1": {"kind": "subdifferential", "function": {"kind": "abs-norm", "dim": 1, "weight": 1.0}},
    "A2": {"kind": "normal-cone", "set": {"kind": "halfline", "lower": 0.0}}
  },
  "coefficients": {
    "dim_slow": 1, "dim_fast": 1, "d1": 1, "d2": 1,
    "b1": {"kind": "linear", "a_y": [[1.0]]},
    "sigma1": {"kind": "constant", "value": [[1.0]]},
    "b2": {"kind": "linear", "a_y": [[-0.5]]},
    "sigma2": {"kind": "constant", "value": [[1.0]]},
    "constants": {"lip_b1_sigma1": 1.0, "lip_b2_sigma2": 0.25, "beta": 1.0, "sigma2_bound": 1.0}
  },
  "averaged_drift": {"kind": "constant", "value": [0.7978845608028654]},
  "initial": {"x0": [1.0], "y0": [0.5]},
  "horizon": 1.0,
  "scales": {"eps_list": [0.2, 0.1, 0.05], "gamma_power": 1.5},
  "khasminskii": {"iota": 0.5},
  "monte_carlo": {"replications": 200, "tail_budgets": [20000]},
  "ldp": {"pieces": 64, "grid_steps": 256, "target": {"kind": "averaged"}},
  "tail": {"radius": 0.8, "mode": "abs"},
  "weak_probe": {"control": [1.0, 0.0]},
  "seed": 20240903
})json";

const char* kBrownian1d = R"json({
  "schema": "mmsde-scenario/1",
  "name": "brownian-1d",
  "operators": {
    "A1": {"kind": "zero", "dim": 1},
    "A2": {"kind": "zero", "dim": 1}
  },
  "coefficients": {
    "dim_slow": 1, "dim_fast": 1, "d1": 1, "d2": 1,
    "b1": {"kind": "constant", "value": [0.0]},
    "sigma1": {"kind": "constant", "value": [[1.0]]},
    "b2": {"kind": "linear", "a_y": [[-0.5]]},
    "sigma2": {"kind": "constant", "value": [[1.0]]},
    "constants": {"lip_b1_sigma1": 0.0, "lip_b2_sigma2": 0.25, "beta": 1.0, "sigma2_bound": 1.0}
  },
  "averaged_drift": {"kind": "constant", "value": [0.0]},
  "initial": {"x0": [0.0], "y0": [0.0]},
  "horizon": 1.0,
  "scales": {"eps_list": [0.2, 0.1, 0.05], "gamma_power": 1.5},
  "steps": {"fast_substeps": 20, "slow_step": 0.001},
  "khasminskii": {"iota": 0.5},
  "monte_carlo": {"replications": 200, "tail_budgets": [100000, 1000000, 10000000]},
  "ldp": {"pieces": 64, "grid_steps": 200, "target": {"kind": "ramp", "velocity": [0.8]}},
  "tail": {"radius": 1.0, "mode": "upcross", "rate_value": 0.5},
  "weak_probe": {"control": [1.0, 0.0]},
  "seed": 20240904
})json";

}  // namespace

std::vector<std::string> builtin_scenario_names() {
    return {"reflected-ou", "box-2d", "soft-threshold", "brownian-1d"};
}

std::string builtin_scenario_document(const std::string& name) {
    if (name == "reflected-ou") return kReflectedOu;
    if (name == "box-2d") return kBox2d;
    if (name == "soft-threshold") return kSoftThreshold;
    if (name == "brownian-1d") return kBrownian1d;
    throw ParameterError("unknown built-in scenario '" + name + "'");
}

// ---------------------------------------------------------------------------
// Loading

ScenarioSpec load_scenario(const std::string& json_text) {
    json doc;
    try {
        doc = json::parse(json_text);
    } catch (const json::parse_error& e) {
        throw ParameterError(std::string("scenario: parse error: ") + e.what());
    }
    require_object(doc, "scenario document");
    check_keys(doc,
               {"schema", "name", "operators", "coefficients", "initial", "horizon", "scales",
                "monte_carlo", "seed"},
               {"steps", "khasminskii", "averaged_drift", "averaged_table", "ldp", "tail",
                "weak_probe"},
               "scenario");

    ScenarioSpec spec;
    spec.document = doc;
    spec.document_hash = fnv1a64(doc.dump());
    if (doc.at("schema").get<std::string>() != "mmsde-scenario/1")
        fail("unsupported schema identifier (want mmsde-scenario/1)");
    spec.name = doc.at("name").get<std::string>();

    const json& ops = doc.at("operators");
    check_keys(ops, {"A1", "A2"}, {}, "operators");
    spec.a1 = parse_operator(ops.at("A1"), "operators.A1");
    spec.a2 = parse_operator(ops.at("A2"), "operators.A2");

    const json& co = doc.at("coefficients");
    check_keys(co, {"dim_slow", "dim_fast", "d1", "d2", "b1", "sigma1", "b2", "sigma2", "constants"},
               {}, "coefficients");
    CoefficientSet& c = spec.coeffs;
    c.dim_slow = co.at("dim_slow").get<std::size_t>();
    c.dim_fast = co.at("dim_fast").get<std::size_t>();
    c.d1 = co.at("d1").get<int>();
    c.d2 = co.at("d2").get<int>();
    auto b1 = parse_drift(co.at("b1"), c.dim_slow, c.dim_slow, c.dim_fast, "coefficients.b1");
    c.b1 = b1.fn;
    c.b1_y_independent = b1.y_independent;
    auto b2 = parse_drift(co.at("b2"), c.dim_fast, c.dim_slow, c.dim_fast, "coefficients.b2");
    c.b2 = b2.fn;
    auto s1 = parse_sigma(co.at("sigma1"), c.dim_slow, static_cast<std::size_t>(c.d1),
                          "coefficients.sigma1");
    c.sigma1 = s1.fn;
    c.sigma1_y_independent = s1.y_independent;
    auto s2 = parse_sigma(co.at("sigma2"), c.dim_fast, static_cast<std::size_t>(c.d2),
                          "coefficients.sigma2");
    c.sigma2 = s2.fn;
    const json& constants = co.at("constants");
    check_keys(constants, {"lip_b1_sigma1", "lip_b2_sigma2", "beta", "sigma2_bound"}, {},
               "coefficients.constants");
    c.lip_b1s1 = constants.at("lip_b1_sigma1").get<double>();
    c.lip_b2s2 = constants.at("lip_b2_sigma2").get<double>();
    c.beta = constants.at("beta").get<double>();
    c.sigma2_bound = constants.at("sigma2_bound").get<double>();

    const json& init = doc.at("initial");
    check_keys(init, {"x0", "y0"}, {}, "initial");
    spec.x0 = parse_vec(init.at("x0"), "initial.x0");
    spec.y0 = parse_vec(init.at("y0"), "initial.y0");
    spec.horizon = doc.at("horizon").get<double>();

    const json& scales = doc.at("scales");
    check_keys(scales, {"eps_list", "gamma_power"}, {}, "scales");
    spec.eps_list = parse_vec(scales.at("eps_list"), "scales.eps_list");
    spec.gamma_power = scales.at("gamma_power").get<double>();
    if (!(spec.gamma_power > 1.0))
        throw RegimeError("scenario: gamma rule must be eps^p with p > 1 (Regime 1, gamma/eps -> 0); "
                          "got p = " + std::to_string(spec.gamma_power));
    require_regime1(spec.eps_list, spec.gamma_rule());

    if (doc.contains("steps")) {
        const json& st = doc.at("steps");
        check_keys(st, {}, {"fast_substeps", "slow_step"}, "steps");
        spec.fast_substeps = st.value("fast_substeps", 20.0);
        spec.slow_step = st.value("slow_step", 0.0);
        if (!(spec.fast_substeps >= 1.0)) fail("steps.fast_substeps must be >= 1");
    }
    if (doc.contains("khasminskii")) {
        const json& kh = doc.at("khasminskii");
        check_keys(kh, {"iota"}, {}, "khasminskii");
        spec.iota = kh.at("iota").get<double>();
        if (!(spec.iota > 0.0 && spec.iota < 1.0)) fail("khasminskii.iota must lie in (0,1)");
    }

    const json& mc = doc.at("monte_carlo");
    check_keys(mc, {"replications"}, {"tail_budgets"}, "monte_carlo");
    spec.replications = mc.at("replications").get<int>();
    if (mc.contains("tail_budgets"))
        for (const auto& b : mc.at("tail_budgets"))
            spec.tail_budgets.push_back(b.get<std::int64_t>());
    if (spec.tail_budgets.empty()) spec.tail_budgets.push_back(10000);

    spec.seed = doc.at("seed").get<std::uint64_t>();

    if (doc.contains("averaged_drift")) {
        spec.closed_form_drift =
            parse_averaged_drift(doc.at("averaged_drift"), c.dim_slow, "averaged_drift");
        spec.has_closed_form_drift = true;
    }
    if (doc.contains("ldp")) {
        const json& l = doc.at("ldp");
        check_keys(l, {}, {"pieces", "grid_steps", "target"}, "ldp");
        spec.ldp_pieces = l.value("pieces", 64);
        spec.ldp_grid_steps = l.value("grid_steps", std::int64_t{256});
        if (l.contains("target")) {
            const json& t = l.at("target");
            check_keys(t, {"kind"}, {"velocity"}, "ldp.target");
            spec.ldp_target_kind = t.at("kind").get<std::string>();
            if (spec.ldp_target_kind == "ramp")
                spec.ldp_ramp_velocity = parse_vec(t.at("velocity"), "ldp.target.velocity");
            else if (spec.ldp_target_kind != "averaged")
                fail("ldp.target.kind must be 'averaged' or 'ramp'");
        }
    }
    if (doc.contains("tail")) {
        const json& t = doc.at("tail");
        check_keys(t, {"radius"}, {"mode", "rate_value"}, "tail");
        spec.tail_radius = t.at("radius").get<double>();
        spec.tail_rate_value = t.value("rate_value", 0.0);
        const std::string mode = t.value("mode", "abs");
        if (mode == "upcross")
            spec.tail_one_sided = true;
        else if (mode == "abs")
            spec.tail_one_sided = false;
        else
            fail("tail.mode must be 'abs' or 'upcross'");
    }
    if (doc.contains("weak_probe")) {
        const json& w = doc.at("weak_probe");
        check_keys(w, {"control"}, {}, "weak_probe");
        spec.weak_control = parse_vec(w.at("control"), "weak_probe.control");
        if (spec.weak_control.size() != static_cast<std::size_t>(c.d1 + c.d2))
            fail("weak_probe.control must have d1+d2 entries");
    }

    // structural validation through a system instance
    (void)spec.make_system();

    // assumption audit gates every load
    const auto rows = audit_assumptions(spec.coeffs, spec.a2.domain(), spec.seed, 4000);
    std::string failures;
    for (const auto& row : rows)
        if (!row.pass) {
            failures += (failures.empty() ? "" : "; ") + row.name +
                        " (stat " + std::to_string(row.statistic) + " vs " +
                        std::to_string(row.threshold) + ")";
        }
    if (!failures.empty())
        throw AssumptionError("scenario '" + spec.name + "' fails the assumption audit: " + failures);
    return spec;
}

ScenarioSpec load_scenario_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ParameterError("cannot open scenario file '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return load_scenario(ss.str());
}

ScenarioSpec resolve_scenario(const std::string& name_or_path) {
    for (const auto& name : builtin_scenario_names())
        if (name == name_or_path) return load_scenario(builtin_scenario_document(name));
    if (std::filesystem::exists(name_or_path)) return load_scenario_file(name_or_path);
    throw ParameterError("'" + name_or_path + "' is neither a built-in scenario nor a file");
}

std::function<double(double)> ScenarioSpec::gamma_rule() const {
    const double p = gamma_power;
    return [p](double eps) { return std::pow(eps, p); };
}

SlowFastSystem ScenarioSpec::make_system(double epsilon) const {
    SlowFastSystem sys = SlowFastSystem::make(a1, a2, coeffs, epsilon, gamma_rule()(epsilon), x0,
                                              y0, horizon);
    sys.max_step_fraction = 1.0 / fast_substeps;
    return sys;
}

AveragedModel ScenarioSpec::make_model() const {
    std::function<void(const Vec&, Mat&)> sigma1_x;
    if (coeffs.sigma1_y_independent) {
        Vec y_ref = a2.domain().interior_point();
        sigma1_x = [y_ref, s1 = coeffs.sigma1](const Vec& x, Mat& out) { s1(x, y_ref, out); };
    }
    if (has_closed_form_drift)
        return AveragedModel::closed_form(a1, closed_form_drift, sigma1_x, coeffs.d1,
                                          coeffs.sigma1_y_independent);
    EstimationConfig config;
    Vec nodes;
    const double lo = x0[0] - 2.0, hi = x0[0] + 2.0;
    for (int i = 0; i < 9; ++i) nodes.push_back(lo + (hi - lo) * i / 8.0);
    return build_averaged_model(make_system(), nodes, config, seed);
}

// ---------------------------------------------------------------------------
// Experiments

Task parse_task(const std::string& name) {
    if (name == "simulate") return Task::Simulate;
    if (name == "average") return Task::Average;
    if (name == "ldp-rate") return Task::LdpRate;
    if (name == "ldp-probe") return Task::LdpProbe;
    if (name == "weak-probe") return Task::WeakProbe;
    if (name == "audit") return Task::Audit;
    throw ParameterError("unknown task '" + name + "'");
}

namespace {

std::string task_name_of(Task task) {
    switch (task) {
        case Task::Simulate: return "simulate";
        case Task::Average: return "average";
        case Task::LdpRate: return "ldp-rate";
        case Task::LdpProbe: return "ldp-probe";
        case Task::WeakProbe: return "weak-probe";
        case Task::Audit: return "audit";
    }
    return "?";
}

std::string fmt(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

std::string hash_hex(std::uint64_t h) {
    std::ostringstream os;
    os << std::hex << h;
    return os.str();
}

void write_file(const std::string& dir, const std::string& name, const std::string& content,
                std::vector<std::string>& files) {
    std::filesystem::create_directories(dir);
    const std::string path = dir + "/" + name;
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ParameterError("cannot write '" + path + "'");
    out << content;
    files.push_back(path);
}

std::string provenance_line(const ScenarioSpec& spec, std::uint64_t seed) {
    return "# scenario=" + spec.name + " hash=" + hash_hex(spec.document_hash) +
           " seed=" + std::to_string(seed);
}

}  // namespace

ExperimentResult run_experiment(const ScenarioSpec& spec, Task task, const RunOverrides& ov) {
    const auto start = std::chrono::steady_clock::now();

    ScenarioSpec run = spec;
    if (ov.seed) run.seed = *ov.seed;
    if (ov.eps_list) run.eps_list = *ov.eps_list;
    if (ov.gamma_power) {
        if (!(*ov.gamma_power > 1.0))
            throw RegimeError("gamma rule must be eps^p with p > 1 (Regime 1)");
        run.gamma_power = *ov.gamma_power;
    }
    require_regime1(run.eps_list, run.gamma_rule()); // re-validate after overrides
    if (ov.budget) {
        if (*ov.budget < 1) throw ParameterError("budget override must be positive");
        run.replications = *ov.budget;
        run.tail_budgets.assign(1, *ov.budget);
    }

    ExperimentResult result;
    result.scenario_name = run.name;
    result.task_name = task_name_of(task);
    result.seed = run.seed;
    result.scenario_echo = run.document;

    const std::string prov = provenance_line(run, run.seed);
    json payload;
    payload["scenario"] = run.name;
    payload["scenario_hash"] = hash_hex(run.document_hash);
    payload["seed"] = run.seed;
    payload["task"] = result.task_name;

    switch (task) {
        case Task::Audit: {
            auto rows = audit_assumptions(run.coeffs, run.a2.domain(), run.seed, 10000);
            const auto a1r = audit_monotone(run.a1, run.seed);
            const auto a2r = audit_monotone(run.a2, run.seed + 1);
            rows.push_back({"monotone_A1", a1r.pass, a1r.worst_violation, -1e-9});
            rows.push_back({"monotone_A2", a2r.pass, a2r.worst_violation, -1e-9});
            std::ostringstream csv;
            csv << prov << "\nname,pass,statistic,threshold\n";
            auto jrows = json::array();
            bool all_pass = true;
            for (const auto& r : rows) {
                all_pass = all_pass && r.pass;
                csv << r.name << "," << (r.pass ? 1 : 0) << "," << fmt(r.statistic) << ","
                    << fmt(r.threshold) << "\n";
                jrows.push_back({{"name", r.name},
                                 {"pass", r.pass},
                                 {"statistic", r.statistic},
                                 {"threshold", r.threshold}});
            }
            payload["rows"] = jrows;
            payload["pass"] = all_pass;
            result.pass = all_pass;
            write_file(ov.out_dir, run.name + "_audit.csv", csv.str(), result.files_written);
            break;
        }
        case Task::Average: {
            const AveragedModel model = run.make_model();
            const AveragingReport report =
                averaging_error(run.make_system(), model, run.eps_list, run.gamma_rule(),
                                run.replications, run.seed, ov.jobs);
            std::ostringstream csv;
            csv << prov << "\nepsilon,gamma,error,ci_half_width,reps,seed\n";
            auto jrows = json::array();
            for (const auto& r : report.rows) {
                csv << fmt(r.epsilon) << "," << fmt(r.gamma) << "," << fmt(r.error) << ","
                    << fmt(r.ci_half) << "," << report.replications << "," << report.seed << "\n";
                jrows.push_back({{"epsilon", r.epsilon},
                                 {"gamma", r.gamma},
                                 {"error", r.error},
                                 {"ci_half_width", r.ci_half}});
            }
            payload["rows"] = jrows;
            payload["replications"] = report.replications;
            payload["coupling_note"] = report.coupling_note;
            payload["trend_claimed"] = report.rows.size() > 1;
            write_file(ov.out_dir, run.name + "_averaging.csv", csv.str(), result.files_written);
            write_file(ov.out_dir, run.name + "_averaging.json",
                       json({{"payload", payload}, {"scenario", run.document}}).dump(2),
                       result.files_written);
            break;
        }
        case Task::WeakProbe: {
            if (run.weak_control.empty())
                throw ParameterError("scenario has no weak_probe.control");
            const AveragedModel model = run.make_model();
            SlowFastSystem sys = run.make_system();
            const Control u = Control::constant(run.horizon, run.ldp_pieces, run.weak_control,
                                                run.coeffs.d1, run.coeffs.d2);
            SkeletonProblem sp = SkeletonProblem::make(
                model, run.x0, TimeGrid::from_count(run.horizon, run.ldp_grid_steps));
            const WeakConvergenceReport report =
                weak_convergence_probe(sys, sp, u, run.eps_list, run.gamma_rule(),
                                       run.replications, run.seed, ov.jobs);
            std::ostringstream csv;
            csv << prov << "\nepsilon,gamma,error,ci_half_width,reps,seed,u_norm_sq,n_bound\n";
            auto jrows = json::array();
            for (const auto& r : report.rows) {
                csv << fmt(r.epsilon) << "," << fmt(r.gamma) << "," << fmt(r.error) << ","
                    << fmt(r.ci_half) << "," << report.replications << "," << report.seed << ","
                    << fmt(report.control_norm_sq) << "," << fmt(report.norm_bound) << "\n";
                jrows.push_back({{"epsilon", r.epsilon},
                                 {"gamma", r.gamma},
                                 {"error", r.error},
                                 {"ci_half_width", r.ci_half}});
            }
            payload["rows"] = jrows;
            payload["replications"] = report.replications;
            payload["u_norm_sq"] = report.control_norm_sq;
            payload["n_bound"] = report.norm_bound;
            write_file(ov.out_dir, run.name + "_weak_probe.csv", csv.str(), result.files_written);
            write_file(ov.out_dir, run.name + "_weak_probe.json",
                       json({{"payload", payload}, {"scenario", run.document}}).dump(2),
                       result.files_written);
            break;
        }
        case Task::LdpRate: {
            const AveragedModel model = run.make_model();
            const TimeGrid grid = TimeGrid::from_count(run.horizon, run.ldp_grid_steps);
            SkeletonProblem sp = SkeletonProblem::make(model, run.x0, grid);
            PathSample target;
            if (run.ldp_target_kind == "averaged") {
                target = solve_averaged(model, run.x0, grid);
            } else {
                if (run.ldp_ramp_velocity.size() != run.x0.size())
                    throw ParameterError("ldp ramp velocity dimension mismatch");
                target = PathSample(grid, run.x0.size());
                for (std::int64_t k = 0; k <= grid.count; ++k)
                    for (std::size_t j = 0; j < run.x0.size(); ++j)
                        target.state(k)[j] = run.x0[j] + grid.node(k) * run.ldp_ramp_velocity[j];
            }
            RateOptions options;
            options.pieces = run.ldp_pieces;
            const RateFunctionResult rate = rate_function(target, sp, options);
            payload["rate"] = json::parse(rate.to_json());
            payload["target"] = run.ldp_target_kind;
            write_file(ov.out_dir, run.name + "_rate.json",
                       json({{"payload", payload}, {"scenario", run.document}}).dump(2),
                       result.files_written);
            break;
        }
        case Task::LdpProbe: {
            const AveragedModel model = run.make_model();
            TailOptions options;
            options.event.radius = run.tail_radius;
            options.event.one_sided = run.tail_one_sided;
            options.budgets = run.tail_budgets;
            options.step_override = run.slow_step;
            const double i_star = run.tail_rate_value;
            const TailReport report =
                tail_probability_probe(run.make_system(), model, run.eps_list, run.gamma_rule(),
                                       options, i_star, run.seed, ov.jobs);
            std::ostringstream csv;
            csv << prov << "\nepsilon,p_hat,ci_low,ci_high,neg_eps_log_p\n";
            auto jrows = json::array();
            for (const auto& r : report.rows) {
                csv << fmt(r.epsilon) << "," << fmt(r.p_hat) << "," << fmt(r.ci_low) << ","
                    << fmt(r.ci_high) << ",";
                if (r.hits > 0) csv << fmt(r.neg_eps_log_p);
                csv << "\n";
                json jr = {{"epsilon", r.epsilon}, {"budget", r.budget},   {"hits", r.hits},
                           {"p_hat", r.p_hat},     {"ci_low", r.ci_low},   {"ci_high", r.ci_high}};
                if (r.hits > 0)
                    jr["neg_eps_log_p"] = r.neg_eps_log_p;
                else
                    jr["neg_eps_log_p"] = nullptr;
                jrows.push_back(jr);
            }
            payload["rows"] = jrows;
            payload["inconclusive"] = report.inconclusive;
            payload["trend_note"] = report.trend_note;
            payload["rate_value"] = report.rate_value;
            write_file(ov.out_dir, run.name + "_tail_probe.csv", csv.str(), result.files_written);
            write_file(ov.out_dir, run.name + "_tail_probe.json",
                       json({{"payload", payload}, {"scenario", run.document}}).dump(2),
                       result.files_written);
            break;
        }
        case Task::Simulate: {
            const int reps = ov.budget.value_or(1);
            SlowFastSystem sys = run.make_system();
            const TimeGrid grid = sys.default_grid();
            auto jrows = json::array();
            for (int r = 0; r < reps; ++r) {
                NoiseStream w1(run.seed, make_stream_id(4, 0, static_cast<std::uint64_t>(r), 0),
                               run.coeffs.d1);
                NoiseStream w2(run.seed, make_stream_id(4, 0, static_cast<std::uint64_t>(r), 1),
                               run.coeffs.d2);
                const SlowFastPaths paths = simulate_slow_fast(sys, grid, w1, w2);
                std::ostringstream slow_csv, fast_csv;
                paths.slow.write_csv(slow_csv, prov.substr(2));
                paths.fast.write_csv(fast_csv, prov.substr(2));
                std::ostringstream base;
                base << run.name << "_rep" << r;
                write_file(ov.out_dir, base.str() + "_slow.csv", slow_csv.str(),
                           result.files_written);
                write_file(ov.out_dir, base.str() + "_fast.csv", fast_csv.str(),
                           result.files_written);
                jrows.push_back({{"replication", r},
                                 {"slow_k_variation", paths.slow.k_variation()},
                                 {"fast_k_variation", paths.fast.k_variation()}});
            }
            payload["replications"] = reps;
            payload["rows"] = jrows;
            break;
        }
    }

    result.payload = payload;
    result.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() -
                                                               start)
                         .count();
    return result;
}

std::string summarize(const std::vector<ExperimentResult>& results) {
    std::ostringstream csv;
    if (results.empty()) {
        csv << "scenario,epsilon,gamma,error,ci_half_width,reps,seed\n";
        return csv.str();
    }
    const std::string task = results.front().task_name;
    for (const auto& r : results)
        if (r.task_name != task)
            throw ParameterError("summarize: mixed task types ('" + task + "' vs '" + r.task_name +
                                 "')");

    if (task == "average" || task == "weak-probe") {
        csv << "scenario,epsilon,gamma,error,ci_half_width,reps,seed\n";
        for (const auto& r : results)
            for (const auto& row : r.payload.at("rows"))
                csv << r.scenario_name << "," << fmt(row.at("epsilon").get<double>()) << ","
                    << fmt(row.at("gamma").get<double>()) << ","
                    << fmt(row.at("error").get<double>()) << ","
                    << fmt(row.at("ci_half_width").get<double>()) << ","
                    << r.payload.at("replications").get<int>() << "," << r.seed << "\n";
        return csv.str();
    }
    if (task == "ldp-probe") {
        csv << "scenario,epsilon,p_hat,ci_low,ci_high,neg_eps_log_p,seed\n";
        for (const auto& r : results)
            for (const auto& row : r.payload.at("rows")) {
                csv << r.scenario_name << "," << fmt(row.at("epsilon").get<double>()) << ","
                    << fmt(row.at("p_hat").get<double>()) << ","
                    << fmt(row.at("ci_low").get<double>()) << ","
                    << fmt(row.at("ci_high").get<double>()) << ",";
                if (!row.at("neg_eps_log_p").is_null())
                    csv << fmt(row.at("neg_eps_log_p").get<double>());
                csv << "," << r.seed << "\n";
            }
        return csv.str();
    }
    if (task == "audit") {
        csv << "scenario,name,pass,statistic,threshold\n";
        for (const auto& r : results)
            for (const auto& row : r.payload.at("rows"))
                csv << r.scenario_name << "," << row.at("name").get<std::string>() << ","
                    << (row.at("pass").get<bool>() ? 1 : 0) << ","
                    << fmt(row.at("statistic").get<double>()) << ","
                    << fmt(row.at("threshold").get<double>()) << "\n";
        return csv.str();
    }
    if (task == "ldp-rate") {
        csv << "scenario,value,residual,infeasible,seed\n";
        for (const auto& r : results) {
            const auto& rate = r.payload.at("rate");
            csv << r.scenario_name << ",";
            if (rate.at("infeasible").get<bool>())
                csv << "inf";
            else
                csv << fmt(rate.at("value").get<double>());
            csv << "," << fmt(rate.at("residual").get<double>()) << ","
                << (rate.at("infeasible").get<bool>() ? 1 : 0) << "," << r.seed << "\n";
        }
        return csv.str();
    }
    csv << "scenario,replications,seed\n";
    for (const auto& r : results)
        csv << r.scenario_name << "," << r.payload.at("replications").get<int>() << "," << r.seed
            << "\n";
    return csv.str();
}

}  // namespace mmsde
