#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "doctest.h"
#include "json.hpp"

namespace fs = std::filesystem;

namespace {

std::string cli_path() {
  const char* p = std::getenv("FLMKT_CLI");
  REQUIRE_MESSAGE(p != nullptr, "FLMKT_CLI must point at the built binary");
  return p;
}

struct CliResult {
  int exit_code = -1;
  std::string out;
  std::string err;
};

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE_MESSAGE(in.good(), "missing file: " << path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

CliResult run_cli(const std::string& args, const fs::path& scratch) {
  const fs::path out_file = scratch / "stdout.txt";
  const fs::path err_file = scratch / "stderr.txt";
  const std::string cmd =
      cli_path() + " " + args + " > " + out_file.string() + " 2> " + err_file.string();
  const int status = std::system(cmd.c_str());
  CliResult r;
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp(out_file);
  r.err = slurp(err_file);
  return r;
}

fs::path fresh_scratch(const std::string& name) {
  const fs::path dir = fs::current_path() / ("cli_scratch_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

fs::path write_small_config(const fs::path& scratch, const std::string& allocator) {
  nlohmann::json j;
  j["n_clients"] = 5;
  j["copies_k"] = 2;
  j["seller_ratio"] = 0.7;
  j["train_rounds"] = 4;
  j["test_rounds"] = 3;
  j["pretrain_epochs"] = 3;
  j["repr_dim"] = 4;
  j["allocator"] = allocator;
  j["synthetic"] = {{"dim", 4}};
  const fs::path path = scratch / "config.json";
  std::ofstream(path) << j.dump(2);
  return path;
}

int count_lines(const std::string& text) {
  int n = 0;
  for (char c : text)
    if (c == '\n') ++n;
  return n;
}

}  // namespace

TEST_CASE("usage errors exit with 2, help with 0") {
  const fs::path scratch = fresh_scratch("usage");
  CHECK(run_cli("", scratch).exit_code == 2);
  CHECK(run_cli("frobnicate", scratch).exit_code == 2);
  CHECK(run_cli("--help", scratch).exit_code == 0);
  CHECK(run_cli("run --no-such-flag", scratch).exit_code == 2);
}

TEST_CASE("run writes the full artifact set") {
  const fs::path scratch = fresh_scratch("run");
  const fs::path config = write_small_config(scratch, "rl");
  const fs::path out = scratch / "out";
  const CliResult r = run_cli("run --config " + config.string() + " --out " + out.string(),
                              scratch);
  CHECK(r.exit_code == 0);
  CHECK(r.err.empty());

  const nlohmann::json resolved = nlohmann::json::parse(slurp(out / "config.json"));
  CHECK(resolved["n_clients"] == 5);
  CHECK(resolved["allocator"] == "rl");
  CHECK(resolved.contains("seeds"));
  CHECK(resolved["eta"] == 0.005);  // defaults resolved into the record

  CHECK(count_lines(slurp(out / "metrics_train.csv")) == 5);  // header + 4 rounds
  CHECK(count_lines(slurp(out / "metrics_test.csv")) == 4);
  CHECK(count_lines(slurp(out / "ledger_train.jsonl")) == 4);

  const std::string test_ledger = slurp(out / "ledger_test.jsonl");
  CHECK(count_lines(test_ledger) == 3);
  std::istringstream lines(test_ledger);
  std::string line;
  int expected_round = 0;
  while (std::getline(lines, line)) {
    const nlohmann::json rec = nlohmann::json::parse(line);
    CHECK(rec["round"] == expected_round++);
    for (const char* key :
         {"bids", "scores", "winners", "unit_prices", "transfers", "deltas", "revenues"})
      CHECK(rec.contains(key));
  }

  const nlohmann::json summary = nlohmann::json::parse(slurp(out / "summary.json"));
  CHECK(summary["schema_version"] == 1);
  CHECK(summary["test"]["rounds_run"] == 3);
  CHECK(fs::exists(out / "allocator.json"));
  CHECK(!fs::exists(out / "partition.json"));  // synthetic world, nothing partitioned
}

TEST_CASE("identical configs produce byte-identical artifacts") {
  const fs::path scratch = fresh_scratch("determinism");
  const fs::path config = write_small_config(scratch, "rl");
  const fs::path a = scratch / "a", b = scratch / "b";
  CHECK(run_cli("run --config " + config.string() + " --out " + a.string(), scratch).exit_code ==
        0);
  CHECK(run_cli("run --config " + config.string() + " --out " + b.string(), scratch).exit_code ==
        0);
  for (const char* name : {"config.json", "metrics_train.csv", "metrics_test.csv",
                           "ledger_train.jsonl", "ledger_test.jsonl", "summary.json",
                           "allocator.json"})
    CHECK(slurp(a / name) == slurp(b / name));
}

TEST_CASE("seed overrides land in the resolved config") {
  const fs::path scratch = fresh_scratch("seeds");
  const fs::path config = write_small_config(scratch, "gsp");
  const fs::path out = scratch / "out";
  const CliResult r = run_cli(
      "run --config " + config.string() + " --seeds 7,8,9 --out " + out.string(), scratch);
  CHECK(r.exit_code == 0);
  const nlohmann::json resolved = nlohmann::json::parse(slurp(out / "config.json"));
  CHECK(resolved["seeds"]["train"] == 7);
  CHECK(resolved["seeds"]["eval"] == 8);
  CHECK(resolved["seeds"]["test"] == 9);

  CHECK(run_cli("run --config " + config.string() + " --seeds 1,2", scratch).exit_code == 2);
  CHECK(run_cli("run --config " + config.string() + " --seeds 1,2,zebra", scratch).exit_code ==
        2);
  // An empty override (unset shell variable) must not fall back to the config seeds.
  CHECK(run_cli("run --config " + config.string() + " --seeds \"\"", scratch).exit_code == 2);
}

TEST_CASE("config mistakes exit with 2 and name the problem") {
  const fs::path scratch = fresh_scratch("config_errors");
  CHECK(run_cli("run --config " + (scratch / "nope.json").string(), scratch).exit_code == 2);

  const fs::path bad_key = scratch / "bad_key.json";
  std::ofstream(bad_key) << R"({"n_client": 5})";
  const CliResult r1 = run_cli("run --config " + bad_key.string(), scratch);
  CHECK(r1.exit_code == 2);
  CHECK(r1.err.find("n_client") != std::string::npos);

  const fs::path bad_k = scratch / "bad_k.json";
  std::ofstream(bad_k) << R"({"n_clients": 5, "copies_k": 5})";
  const CliResult r2 = run_cli("run --config " + bad_k.string(), scratch);
  CHECK(r2.exit_code == 2);
  CHECK(r2.err.find("copies_k") != std::string::npos);

  const fs::path not_json = scratch / "not_json.json";
  std::ofstream(not_json) << "{ this is not json";
  CHECK(run_cli("run --config " + not_json.string(), scratch).exit_code == 2);
}

TEST_CASE("runtime failures exit with 3") {
  const fs::path scratch = fresh_scratch("runtime");
  // One class only: the learner cannot be built, which is a runtime failure
  // rather than a config spelling mistake.
  const fs::path csv = scratch / "one_class.csv";
  {
    std::ofstream out(csv);
    for (int i = 0; i < 12; ++i) out << "0,0." << i << ",0.5\n";
  }
  nlohmann::json j;
  j["n_clients"] = 2;
  j["copies_k"] = 1;
  j["seller_ratio"] = 0.5;
  j["train_rounds"] = 0;
  j["test_rounds"] = 2;
  j["pretrain_epochs"] = 1;
  j["allocator"] = "gsp";
  j["learner"] = "real_mlp";
  j["dataset"] = {{"csv", csv.string()}};
  const fs::path config = scratch / "config.json";
  std::ofstream(config) << j.dump();
  const CliResult r = run_cli("run --config " + config.string(), scratch);
  CHECK(r.exit_code == 3);
  CHECK(!r.err.empty());
}

TEST_CASE("repeat derives fresh seeds and aggregates a report") {
  const fs::path scratch = fresh_scratch("repeat");
  const fs::path config = write_small_config(scratch, "gsp");
  const fs::path out = scratch / "out";
  const CliResult r = run_cli(
      "run --config " + config.string() + " --repeat 2 --out " + out.string(), scratch);
  CHECK(r.exit_code == 0);
  CHECK(fs::exists(out / "rep_0" / "summary.json"));
  CHECK(fs::exists(out / "rep_1" / "summary.json"));
  CHECK(fs::exists(out / "report.csv"));
  CHECK(fs::exists(out / "report.txt"));

  // Derived seeds differ between repetitions.
  const nlohmann::json c0 = nlohmann::json::parse(slurp(out / "rep_0" / "config.json"));
  const nlohmann::json c1 = nlohmann::json::parse(slurp(out / "rep_1" / "config.json"));
  CHECK(c0["seeds"] != c1["seeds"]);

  const std::string report = slurp(out / "report.csv");
  CHECK(report.find("metric,mean,std,runs") == 0);
  CHECK(report.find("test_cumulative_volume") != std::string::npos);

  // The standalone report subcommand accepts the same directories.
  const fs::path rep2 = scratch / "rep2";
  const CliResult again = run_cli("report " + (out / "rep_0").string() + " " +
                                      (out / "rep_1").string() + " --out " + rep2.string(),
                                  scratch);
  CHECK(again.exit_code == 0);
  CHECK(slurp(rep2 / "report.csv") == report);
}

TEST_CASE("report refuses runs with different configurations") {
  const fs::path scratch = fresh_scratch("report_mixed");
  const fs::path config = write_small_config(scratch, "gsp");
  const fs::path a = scratch / "a";
  CHECK(run_cli("run --config " + config.string() + " --out " + a.string(), scratch).exit_code ==
        0);

  nlohmann::json j = nlohmann::json::parse(slurp(config));
  j["copies_k"] = 3;
  const fs::path config2 = scratch / "config2.json";
  std::ofstream(config2) << j.dump();
  const fs::path b = scratch / "b";
  CHECK(run_cli("run --config " + config2.string() + " --out " + b.string(), scratch).exit_code ==
        0);

  const CliResult r = run_cli(
      "report " + a.string() + " " + b.string() + " --out " + (scratch / "rep").string(),
      scratch);
  CHECK(r.exit_code == 2);
  CHECK(r.err.find("copies_k") != std::string::npos);
}

TEST_CASE("sweep runs the grid and validates it up front") {
  const fs::path scratch = fresh_scratch("sweep");
  const fs::path config = write_small_config(scratch, "gsp");
  const fs::path out = scratch / "out";
  const CliResult r = run_cli("sweep --config " + config.string() + " --grid copies_k=2,3" +
                                  " --out " + out.string(),
                              scratch);
  CHECK(r.exit_code == 0);
  CHECK(fs::exists(out / "cell_copies_k=2" / "summary.json"));
  CHECK(fs::exists(out / "cell_copies_k=3" / "summary.json"));
  const std::string combined = slurp(out / "combined.csv");
  CHECK(count_lines(combined) == 3);
  CHECK(combined.find("cell,copies_k,") == 0);

  // An invalid cell anywhere in the grid aborts before any cell runs.
  const fs::path out2 = scratch / "out2";
  const CliResult bad = run_cli("sweep --config " + config.string() + " --grid copies_k=2,9" +
                                    " --out " + out2.string(),
                                scratch);
  CHECK(bad.exit_code == 2);
  CHECK(!fs::exists(out2 / "cell_copies_k=2"));

  CHECK(run_cli("sweep --config " + config.string(), scratch).exit_code == 2);
}

TEST_CASE("compare lines up the three allocators on shared seeds") {
  const fs::path scratch = fresh_scratch("compare");
  const fs::path config = write_small_config(scratch, "rl");
  const fs::path out = scratch / "out";
  const CliResult r = run_cli("compare --config " + config.string() + " --out " + out.string(),
                              scratch);
  CHECK(r.exit_code == 0);
  const std::string csv = slurp(out / "comparison.csv");
  CHECK(count_lines(csv) == 4);
  CHECK(csv.find("rl,") != std::string::npos);
  CHECK(csv.find("gsp,") != std::string::npos);
  CHECK(csv.find("random,") != std::string::npos);
  for (const char* name : {"rl", "gsp", "random"}) {
    const nlohmann::json c = nlohmann::json::parse(slurp(out / name / "config.json"));
    CHECK(c["allocator"] == name);
    CHECK(c["seeds"] == nlohmann::json::parse(slurp(out / "rl" / "config.json"))["seeds"]);
  }
}
