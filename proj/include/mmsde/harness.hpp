#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mmsde/ldp.hpp"

namespace mmsde {

/// Fully validated scenario: operators, coefficients with declared
/// constants, scale lists, budgets and the master seed. Loading re-derives
/// everything deterministically from the JSON document; the document's
/// FNV-1a hash is embedded in every output file.
struct ScenarioSpec {
    std::string name;
    nlohmann::json document;
    std::uint64_t document_hash = 0;

    MonotoneOperator a1, a2;
    CoefficientSet coeffs;
    Vec x0, y0;
    double horizon = 0.0;

    std::vector<double> eps_list;
    double gamma_power = 0.0; // gamma = eps^p, p > 1

    double fast_substeps = 20.0;
    double slow_step = 0.0; // optional override for decoupled probes

    double iota = 0.5;
    int replications = 200;
    std::vector<std::int64_t> tail_budgets;
    std::uint64_t seed = 0;

    // optional closed-form averaged drift
    bool has_closed_form_drift = false;
    std::function<void(const Vec&, Vec&)> closed_form_drift;

    // ldp task configuration
    int ldp_pieces = 64;
    std::int64_t ldp_grid_steps = 256;
    std::string ldp_target_kind = "averaged"; // averaged | ramp
    Vec ldp_ramp_velocity;

    // tail probe configuration
    double tail_radius = 1.0;
    bool tail_one_sided = false;
    // I* for the declared event, typically produced by an ldp-rate run
    // against the least-cost target reaching the event boundary
    double tail_rate_value = 0.0;

    // weak probe control (constant in time)
    Vec weak_control;

    std::function<double(double)> gamma_rule() const;
    SlowFastSystem make_system(double epsilon) const;
    SlowFastSystem make_system() const { return make_system(eps_list.front()); }
    AveragedModel make_model() const;
};

/// Parses and validates a scenario document (strict: unknown keys are
/// errors), checks the Regime-1 gamma rule, and runs the assumption audit
/// on the declared constants before returning.
ScenarioSpec load_scenario(const std::string& json_text);
ScenarioSpec load_scenario_file(const std::string& path);

std::vector<std::string> builtin_scenario_names();
/// Built-in scenario document by name; throws ParameterError for unknown names.
std::string builtin_scenario_document(const std::string& name);
/// Loads a built-in name or, when `name_or_path` names a file, that file.
ScenarioSpec resolve_scenario(const std::string& name_or_path);

enum class Task { Simulate, Average, LdpRate, LdpProbe, WeakProbe, Audit };
Task parse_task(const std::string& name);

struct RunOverrides {
    std::optional<std::uint64_t> seed;
    std::optional<int> budget;
    std::optional<std::vector<double>> eps_list;
    std::optional<double> gamma_power;
    int jobs = 1;
    std::string out_dir = "out";
    bool to_stdout = false;
};

struct ExperimentResult {
    std::string scenario_name;
    std::string task_name;
    std::uint64_t seed = 0;
    nlohmann::json payload;       // deterministic data (bitwise reproducible)
    nlohmann::json scenario_echo; // full scenario document
    std::vector<std::string> files_written;
    double wall_ms = 0.0;         // provenance only, excluded from payload
    bool pass = true;             // audit tasks: all assumptions green
};

/// Dispatches a task over the scenario, writes CSV/JSON outputs under
/// overrides.out_dir, and returns the deterministic payload. Flag overrides
/// are applied before re-validation (a flag cannot smuggle in a Regime
/// violation).
ExperimentResult run_experiment(const ScenarioSpec& spec, Task task,
                                const RunOverrides& overrides = {});

/// Merges homogeneous experiment results into one CSV table (header only
/// for an empty list); mixed task types are an error.
std::string summarize(const std::vector<ExperimentResult>& results);

std::uint64_t fnv1a64(const std::string& text);

}  // namespace mmsde
