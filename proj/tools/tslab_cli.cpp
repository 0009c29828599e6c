// Command-line front end: one subcommand per experiment kind.
//
// Exit codes: 0 success, 2 configuration error, 3 a built-in check failed,
// 4 I/O error, 1 anything else.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "tslab/experiment.hpp"

namespace {

struct Options {
  std::string config;
  std::string out;
  std::string seeds;
  std::string mode;
  std::string ablation;
  bool plots = false;
  int workers = 1;
};

tslab::Json read_document(const std::string& path) {
  if (path.empty()) return tslab::Json::object();
  std::ifstream in(path);
  if (!in) throw tslab::IoError("cannot read config '" + path + "'");
  try {
    return tslab::Json::parse(in);
  } catch (const tslab::Json::parse_error& e) {
    throw tslab::ConfigError("config '" + path + "' is not valid JSON: " + e.what());
  }
}

std::vector<std::uint64_t> parse_seeds(const std::string& text) {
  std::vector<std::uint64_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      if (item.empty() || item[0] == '-') throw std::invalid_argument(item);
      out.push_back(std::stoull(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::logic_error&) {
      throw tslab::ConfigError("--seeds expects comma-separated non-negative integers, got '" + text + "'");
    }
  }
  if (out.empty()) throw tslab::ConfigError("--seeds is empty");
  return out;
}

int run(const std::string& command, const Options& o) {
  tslab::Json doc = read_document(o.config);
  if (!doc.is_object()) throw tslab::ConfigError("config root must be an object");
  std::string kind = command;
  if (command == "ablate") {
    kind = doc.contains("kind") && doc["kind"].is_string() ? doc["kind"].get<std::string>()
                                                           : "ablate_" + (o.ablation.empty() ? "size" : o.ablation);
    if (!o.ablation.empty() && kind != "ablate_" + o.ablation)
      throw tslab::ConfigError("--arms " + o.ablation + " conflicts with config kind '" + kind + "'");
    if (!tslab::is_ablation(tslab::parse_kind(kind)))
      throw tslab::ConfigError("ablate needs an ablation kind, config has '" + kind + "'");
  } else if (doc.contains("kind") && doc["kind"] != kind) {
    throw tslab::ConfigError("subcommand '" + command + "' does not match config kind " + doc["kind"].dump());
  }
  doc["kind"] = kind;
  if (!o.mode.empty()) doc["thm5"]["mode"] = o.mode;
  tslab::ExperimentConfig c = tslab::config_from_json(doc);
  if (!o.seeds.empty()) c.seeds = parse_seeds(o.seeds);
  if (!o.out.empty()) c.output = o.out;

  const tslab::RunLog log = tslab::run_experiment(c, o.workers);
  tslab::emit_reports(log, c.output, o.plots);
  std::printf("%s: %zu summary rows written to %s (%.1f s)\n", kind.c_str(), log.summary.rows.size(),
              c.output.c_str(), log.wall_seconds);
  if (!log.checks_passed) {
    std::fprintf(stderr, "%s: built-in check failed, see %s/summary.csv\n", kind.c_str(), c.output.c_str());
    return 3;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Teacher-student ReLU network experiments"};
  app.require_subcommand(1);
  Options o;
  const std::vector<std::pair<std::string, std::string>> commands = {
      {"verify-thm1", "check the gradient decomposition on random networks"},
      {"train", "train students against a teacher and track node correlations"},
      {"thm5-grid", "two-layer projected dynamics over an overparameterization grid"},
      {"ablate", "train over a set of configuration arms"},
      {"lottery", "retrain the winning sub-networks"},
      {"bn-audit", "train with BatchNorm and audit the sign of its biases"},
      {"psi-check", "Monte-Carlo overlap functions against planar references"},
      {"falloff", "probe the quadratic fall-off of the diagonal correlation"}};
  std::map<CLI::App*, std::string> kinds;
  for (const auto& [name, help] : commands) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("--config", o.config, "JSON configuration file")->check(CLI::ExistingFile);
    sub->add_option("--out", o.out, "output directory (overrides the config)");
    sub->add_option("--seeds", o.seeds, "comma-separated seed list (overrides the config)");
    sub->add_flag("--plots", o.plots, "write SVG plots");
    sub->add_option("--workers", o.workers, "worker threads")->check(CLI::PositiveNumber);
    if (name == "thm5-grid")
      sub->add_option("--mode", o.mode, "free-run or guaranteed")->check(CLI::IsMember({"free-run", "guaranteed"}));
    if (name == "ablate")
      sub->add_option("--arms", o.ablation, "default arm set")->check(CLI::IsMember({"size", "overparam", "finite"}));
    std::string kind = name;
    std::replace(kind.begin(), kind.end(), '-', '_');
    if (name == "falloff") kind = "falloff_probe";
    kinds[sub] = kind;
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }
  const std::string kind = kinds.at(app.get_subcommands().front());
  try {
    return run(kind == "ablate" ? "ablate" : kind, o);
  } catch (const tslab::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const tslab::IoError& e) {
    std::fprintf(stderr, "i/o error: %s\n", e.what());
    return 4;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
