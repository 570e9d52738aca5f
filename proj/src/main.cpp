#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "flmkt/errors.hpp"
#include "flmkt/rng.hpp"
#include "flmkt/sim_engine.hpp"

namespace fs = std::filesystem;
using flmkt::ConfigError;
using flmkt::SimConfig;

namespace {

void write_text_file(const fs::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << content;
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> parts;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, sep)) parts.push_back(item);
  return parts;
}

flmkt::Seeds parse_seeds(const std::string& spec) {
  const auto parts = split(spec, ',');
  if (parts.size() != 3) throw ConfigError("--seeds expects three integers: train,eval,test");
  try {
    return {std::stoull(parts[0]), std::stoull(parts[1]), std::stoull(parts[2])};
  } catch (const std::exception&) {
    throw ConfigError("--seeds expects three integers: train,eval,test");
  }
}

SimConfig load_or_default(const std::string& config_path) {
  if (config_path.empty()) {
    SimConfig c;
    c.validate();
    return c;
  }
  return SimConfig::load(config_path);
}

flmkt::Seeds repeat_seeds(const flmkt::Seeds& base, int rep) {
  if (rep == 0) return base;
  const auto tag = static_cast<std::uint64_t>(flmkt::rng::Stream::kRepeat);
  const auto r = static_cast<std::uint64_t>(rep);
  return {flmkt::rng::derive(base.train, {tag, r}), flmkt::rng::derive(base.eval, {tag, r}),
          flmkt::rng::derive(base.test, {tag, r})};
}

void run_one(const SimConfig& config, const fs::path& dir) {
  const auto output = flmkt::run_experiment(config);
  fs::create_directories(dir);
  write_text_file(dir / "config.json", output.resolved_config.dump(2) + "\n");
  write_text_file(dir / "metrics_train.csv", flmkt::metrics_to_csv(output.train_metrics));
  write_text_file(dir / "metrics_test.csv", flmkt::metrics_to_csv(output.test_metrics));
  std::string train_lines, test_lines;
  for (const auto& line : output.train_ledger) train_lines += line + "\n";
  for (const auto& line : output.test_ledger) test_lines += line + "\n";
  write_text_file(dir / "ledger_train.jsonl", train_lines);
  write_text_file(dir / "ledger_test.jsonl", test_lines);
  write_text_file(dir / "summary.json",
                  flmkt::summary_to_json(config, output.train_metrics, output.test_metrics)
                          .dump(2) +
                      "\n");
  if (!output.allocator_checkpoint.is_null())
    write_text_file(dir / "allocator.json", output.allocator_checkpoint.dump() + "\n");
  if (!output.partition.is_null())
    write_text_file(dir / "partition.json", output.partition.dump(2) + "\n");
}

struct RunSummary {
  nlohmann::json config;  // seeds stripped
  std::map<std::string, double> metrics;
};

RunSummary read_run(const fs::path& dir) {
  std::ifstream cfg(dir / "config.json");
  std::ifstream sum(dir / "summary.json");
  if (!cfg || !sum)
    throw ConfigError("report: " + dir.string() + " lacks config.json or summary.json");
  RunSummary rs;
  nlohmann::json config_json, summary_json;
  cfg >> config_json;
  sum >> summary_json;
  config_json.erase("seeds");
  rs.config = std::move(config_json);
  const auto& test = summary_json.at("test");
  rs.metrics["test_cumulative_volume"] = test.at("cumulative_volume").get<double>();
  rs.metrics["test_final_accuracy"] = test.at("final_mean_accuracy").get<double>();
  rs.metrics["test_bottom_decile_accuracy"] = test.at("bottom_decile_accuracy").get<double>();
  rs.metrics["test_bottom_decile_revenue"] = test.at("bottom_decile_revenue").get<double>();
  const auto& train = summary_json.at("train");
  rs.metrics["train_cumulative_volume"] = train.at("cumulative_volume").get<double>();
  rs.metrics["train_final_accuracy"] = train.at("final_mean_accuracy").get<double>();
  return rs;
}

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::vector<std::string> differing_keys(const nlohmann::json& a, const nlohmann::json& b) {
  std::vector<std::string> diff;
  for (auto it = a.begin(); it != a.end(); ++it) {
    if (!b.contains(it.key()) || b.at(it.key()) != it.value()) diff.push_back(it.key());
  }
  for (auto it = b.begin(); it != b.end(); ++it)
    if (!a.contains(it.key())) diff.push_back(it.key());
  return diff;
}

void write_report(const std::vector<fs::path>& dirs, const fs::path& out_dir) {
  if (dirs.empty()) throw ConfigError("report: need at least one run directory");
  std::vector<RunSummary> runs;
  for (const auto& d : dirs) runs.push_back(read_run(d));
  for (std::size_t i = 1; i < runs.size(); ++i) {
    const auto diff = differing_keys(runs[0].config, runs[i].config);
    if (!diff.empty()) {
      std::string fields;
      for (const auto& k : diff) fields += (fields.empty() ? "" : ", ") + k;
      throw ConfigError("report: run " + dirs[i].string() +
                        " differs from the first run in: " + fields);
    }
  }

  std::ostringstream csv, text;
  csv << "metric,mean,std,runs\n";
  text << "metric                          mean +- std   (" << runs.size() << " runs)\n";
  for (const auto& [name, first_value] : runs.front().metrics) {
    (void)first_value;
    double mean = 0.0;
    for (const auto& r : runs) mean += r.metrics.at(name);
    mean /= static_cast<double>(runs.size());
    double var = 0.0;
    for (const auto& r : runs) {
      const double d = r.metrics.at(name) - mean;
      var += d * d;
    }
    const double sd = runs.size() > 1 ? std::sqrt(var / static_cast<double>(runs.size() - 1)) : 0.0;
    csv << name << ',' << fmt_double(mean) << ',' << fmt_double(sd) << ',' << runs.size() << '\n';
    char line[160];
    std::snprintf(line, sizeof(line), "%-30s %12.6g +- %-10.6g\n", name.c_str(), mean, sd);
    text << line;
  }
  fs::create_directories(out_dir);
  write_text_file(out_dir / "report.csv", csv.str());
  write_text_file(out_dir / "report.txt", text.str());
  std::cout << text.str();
}

struct GridAxis {
  std::string key;
  std::vector<std::string> values;
};

GridAxis parse_grid(const std::string& spec) {
  const auto eq = spec.find('=');
  if (eq == std::string::npos || eq == 0 || eq + 1 >= spec.size())
    throw ConfigError("--grid expects KEY=v1,v2,...");
  GridAxis axis;
  axis.key = spec.substr(0, eq);
  axis.values = split(spec.substr(eq + 1), ',');
  if (axis.values.empty()) throw ConfigError("--grid " + axis.key + " has no values");
  return axis;
}

nlohmann::json typed_value(const std::string& raw) {
  try {
    std::size_t used = 0;
    const int as_int = std::stoi(raw, &used);
    if (used == raw.size()) return as_int;
  } catch (const std::exception&) {
  }
  try {
    std::size_t used = 0;
    const double as_double = std::stod(raw, &used);
    if (used == raw.size()) return as_double;
  } catch (const std::exception&) {
  }
  return raw;
}

SimConfig apply_cell(const SimConfig& base, const std::vector<std::pair<std::string, std::string>>& cell) {
  nlohmann::json j = base.to_json();
  for (const auto& [key, value] : cell) j[key] = typed_value(value);
  return SimConfig::from_json(j);
}

int cmd_run(const std::string& config_path, const std::string& out_dir,
            const std::optional<flmkt::Seeds>& seeds, int repeat) {
  SimConfig config = load_or_default(config_path);
  if (seeds) config.seeds = *seeds;
  config.validate();
  if (repeat < 1) throw ConfigError("--repeat must be at least 1");
  if (repeat == 1) {
    run_one(config, out_dir);
    std::cout << "run complete: " << out_dir << "\n";
    return 0;
  }
  std::vector<fs::path> dirs;
  for (int rep = 0; rep < repeat; ++rep) {
    SimConfig c = config;
    c.seeds = repeat_seeds(config.seeds, rep);
    c.validate();
    const fs::path dir = fs::path(out_dir) / ("rep_" + std::to_string(rep));
    run_one(c, dir);
    dirs.push_back(dir);
  }
  write_report(dirs, out_dir);
  std::cout << "runs complete: " << out_dir << "\n";
  return 0;
}

int cmd_compare(const std::string& config_path, const std::string& out_dir,
                const std::optional<flmkt::Seeds>& seeds) {
  SimConfig config = load_or_default(config_path);
  if (seeds) config.seeds = *seeds;
  config.validate();
  std::ostringstream csv;
  csv << "allocator,test_cumulative_volume,test_final_accuracy,test_bottom_decile_accuracy,"
         "test_bottom_decile_revenue\n";
  for (const auto& [kind, name] :
       {std::pair{flmkt::AllocatorKind::kRl, "rl"}, {flmkt::AllocatorKind::kGsp, "gsp"},
        {flmkt::AllocatorKind::kRandom, "random"}}) {
    SimConfig c = config;
    c.allocator = kind;
    const fs::path dir = fs::path(out_dir) / name;
    run_one(c, dir);
    std::ifstream sum(dir / "summary.json");
    nlohmann::json summary;
    sum >> summary;
    const auto& test = summary.at("test");
    csv << name << ',' << fmt_double(test.at("cumulative_volume").get<double>()) << ','
        << fmt_double(test.at("final_mean_accuracy").get<double>()) << ','
        << fmt_double(test.at("bottom_decile_accuracy").get<double>()) << ','
        << fmt_double(test.at("bottom_decile_revenue").get<double>()) << '\n';
  }
  fs::create_directories(out_dir);
  write_text_file(fs::path(out_dir) / "comparison.csv", csv.str());
  std::cout << csv.str();
  return 0;
}

int cmd_sweep(const std::string& config_path, const std::string& out_dir,
              const std::vector<std::string>& grid_specs,
              const std::optional<flmkt::Seeds>& seeds) {
  SimConfig base = load_or_default(config_path);
  if (seeds) base.seeds = *seeds;
  if (grid_specs.empty()) throw ConfigError("sweep: need at least one --grid KEY=v1,v2");
  std::vector<GridAxis> axes;
  for (const auto& spec : grid_specs) axes.push_back(parse_grid(spec));

  std::vector<std::vector<std::pair<std::string, std::string>>> cells{{}};
  for (const auto& axis : axes) {
    std::vector<std::vector<std::pair<std::string, std::string>>> next;
    for (const auto& cell : cells) {
      for (const auto& value : axis.values) {
        auto grown = cell;
        grown.emplace_back(axis.key, value);
        next.push_back(std::move(grown));
      }
    }
    cells = std::move(next);
  }

  // Validate the whole grid before starting any cell.
  std::vector<SimConfig> configs;
  for (const auto& cell : cells) configs.push_back(apply_cell(base, cell));

  std::ostringstream csv;
  csv << "cell";
  for (const auto& axis : axes) csv << ',' << axis.key;
  csv << ",test_cumulative_volume,test_final_accuracy,test_bottom_decile_accuracy,"
         "test_bottom_decile_revenue\n";
  for (std::size_t i = 0; i < cells.size(); ++i) {
    std::string cell_name;
    for (const auto& [key, value] : cells[i])
      cell_name += (cell_name.empty() ? "" : "_") + key + "=" + value;
    const fs::path dir = fs::path(out_dir) / ("cell_" + cell_name);
    run_one(configs[i], dir);
    std::ifstream sum(dir / "summary.json");
    nlohmann::json summary;
    sum >> summary;
    const auto& test = summary.at("test");
    csv << cell_name;
    for (const auto& [key, value] : cells[i]) {
      (void)key;
      csv << ',' << value;
    }
    csv << ',' << fmt_double(test.at("cumulative_volume").get<double>()) << ','
        << fmt_double(test.at("final_mean_accuracy").get<double>()) << ','
        << fmt_double(test.at("bottom_decile_accuracy").get<double>()) << ','
        << fmt_double(test.at("bottom_decile_revenue").get<double>()) << '\n';
  }
  fs::create_directories(out_dir);
  write_text_file(fs::path(out_dir) / "combined.csv", csv.str());
  std::cout << csv.str();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"auction-based federated learning model marketplace simulator"};
  app.require_subcommand(1);

  std::string config_path, out_dir = "out", seeds_str;
  int repeat = 1;
  std::vector<std::string> grid_specs;
  std::vector<std::string> report_dirs;

  auto* run = app.add_subcommand("run", "run one experiment (train phase + test phase)");
  run->add_option("--config", config_path, "JSON config; defaults apply when omitted");
  run->add_option("--out", out_dir, "output directory");
  run->add_option("--seeds", seeds_str, "override seed triple: train,eval,test");
  run->add_option("--repeat", repeat, "repeat with derived seed triples and aggregate");

  auto* compare = app.add_subcommand("compare", "run rl, gsp and random on shared seeds");
  compare->add_option("--config", config_path, "JSON config; defaults apply when omitted");
  compare->add_option("--out", out_dir, "output directory");
  compare->add_option("--seeds", seeds_str, "override seed triple: train,eval,test");

  auto* sweep = app.add_subcommand("sweep", "grid over config keys");
  sweep->add_option("--config", config_path, "JSON config; defaults apply when omitted");
  sweep->add_option("--out", out_dir, "output directory");
  sweep->add_option("--seeds", seeds_str, "override seed triple: train,eval,test");
  sweep->add_option("--grid", grid_specs, "KEY=v1,v2 (repeatable)");

  auto* report = app.add_subcommand("report", "aggregate run directories into mean +- std");
  report->add_option("dirs", report_dirs, "completed run directories")->required();
  report->add_option("--out", out_dir, "output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    // An explicitly passed empty --seeds (say from an unset shell variable) must fail
    // loudly instead of silently running on the config seeds.
    std::optional<flmkt::Seeds> seeds;
    for (const auto* sub : {run, compare, sweep})
      if (sub->parsed() && sub->count("--seeds") > 0) seeds = parse_seeds(seeds_str);
    if (*run) return cmd_run(config_path, out_dir, seeds, repeat);
    if (*compare) return cmd_compare(config_path, out_dir, seeds);
    if (*sweep) return cmd_sweep(config_path, out_dir, grid_specs, seeds);
    if (*report) {
      std::vector<fs::path> dirs(report_dirs.begin(), report_dirs.end());
      write_report(dirs, out_dir);
      return 0;
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
