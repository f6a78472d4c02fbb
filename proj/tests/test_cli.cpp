#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

namespace {

struct RunResult {
    int exit_code = -1;
    std::string stdout_text;
};

RunResult run_cli(const std::string& args, const std::string& tag) {
    const std::string out = "cli_test_out/" + tag + ".stdout";
    std::filesystem::create_directories("cli_test_out");
    const std::string cmd = std::string(MMSDE_CLI_PATH) + " " + args + " > " + out + " 2> " +
                            "cli_test_out/" + tag + ".stderr";
    const int status = std::system(cmd.c_str());
    RunResult r;
    r.exit_code = WEXITSTATUS(status);
    std::ifstream in(out);
    std::stringstream ss;
    ss << in.rdbuf();
    r.stdout_text = ss.str();
    return r;
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

TEST_CASE("audit subcommand succeeds on the built-in scenario") {
    std::filesystem::remove_all("cli_test_out/audit");
    const RunResult r = run_cli("audit reflected-ou --out cli_test_out/audit", "audit");
    CHECK(r.exit_code == 0);
    CHECK(std::filesystem::exists("cli_test_out/audit/reflected-ou_audit.csv"));
    CHECK(r.stdout_text.empty()); // data goes to files, not stdout
}

TEST_CASE("usage errors exit with 2") {
    CHECK(run_cli("frobnicate reflected-ou", "unknown_sub").exit_code == 2);
    CHECK(run_cli("average", "missing_scenario").exit_code == 2);
    CHECK(run_cli("", "no_sub").exit_code == 2);
}

TEST_CASE("validation failures exit with 1") {
    CHECK(run_cli("audit no-such-scenario --out cli_test_out/x", "bad_name").exit_code == 1);
    CHECK(run_cli("average reflected-ou --gamma-pow 1.0 --budget 50 --out cli_test_out/x",
                  "bad_regime")
              .exit_code == 1);
}

TEST_CASE("averaging run produces the three-row trend table") {
    std::filesystem::remove_all("cli_test_out/avg");
    const RunResult r =
        run_cli("average reflected-ou --eps 0.2,0.1,0.05 --gamma-pow 1.5 --budget 50 "
                "--out cli_test_out/avg",
                "avg3");
    CHECK(r.exit_code == 0);
    const std::string csv = slurp("cli_test_out/avg/reflected-ou_averaging.csv");
    int lines = 0;
    for (char ch : csv)
        if (ch == '\n') ++lines;
    CHECK(lines == 5); // provenance + header + 3 rows
    CHECK(csv.find("epsilon,gamma,error,ci_half_width,reps,seed") != std::string::npos);
}

TEST_CASE("seed determinism across worker counts") {
    std::filesystem::remove_all("cli_test_out/det1");
    std::filesystem::remove_all("cli_test_out/det2");
    const std::string base =
        "average reflected-ou --eps 0.2,0.1 --budget 50 --seed 4242 ";
    CHECK(run_cli(base + "--jobs 1 --out cli_test_out/det1", "det1").exit_code == 0);
    CHECK(run_cli(base + "--jobs 4 --out cli_test_out/det2", "det2").exit_code == 0);
    CHECK(slurp("cli_test_out/det1/reflected-ou_averaging.csv") ==
          slurp("cli_test_out/det2/reflected-ou_averaging.csv"));
}

TEST_CASE("list-scenarios prints one name per line") {
    const RunResult r = run_cli("list-scenarios", "list");
    CHECK(r.exit_code == 0);
    CHECK(r.stdout_text.find("reflected-ou\n") != std::string::npos);
    CHECK(r.stdout_text.find("box-2d\n") != std::string::npos);
    CHECK(r.stdout_text.find("soft-threshold\n") != std::string::npos);
    CHECK(r.stdout_text.find("brownian-1d\n") != std::string::npos);
}

TEST_CASE("--stdout mirrors the payload") {
    const RunResult r =
        run_cli("audit reflected-ou --stdout --out cli_test_out/audit2", "audit_stdout");
    CHECK(r.exit_code == 0);
    CHECK(r.stdout_text.find("\"task\": \"audit\"") != std::string::npos);
}

TEST_CASE("scenario files load from disk") {
    std::filesystem::create_directories("cli_test_out");
    {
        const RunResult doc = run_cli("list-scenarios", "names");
        REQUIRE(doc.exit_code == 0);
    }
    // write the built-in document to a file and point the CLI at it
    const RunResult dump = run_cli("audit reflected-ou --stdout --out cli_test_out/tmp", "dump");
    REQUIRE(dump.exit_code == 0);
    std::ofstream f("cli_test_out/copy.json");
    // a scenario with a different name but identical structure
    std::string doc = R"({
      "schema": "mmsde-scenario/1",
      "name": "copy-of-ou",
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
      "scales": {"eps_list": [0.2, 0.1], "gamma_power": 1.5},
      "monte_carlo": {"replications": 50},
      "seed": 7
    })";
    f << doc;
    f.close();
    const RunResult r = run_cli("audit cli_test_out/copy.json --out cli_test_out/copy", "copy");
    CHECK(r.exit_code == 0);
    CHECK(std::filesystem::exists("cli_test_out/copy/copy-of-ou_audit.csv"));
}
