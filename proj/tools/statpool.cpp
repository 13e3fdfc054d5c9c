// Command-line runner for the pooling experiments.
//
//   statpool <subcommand> --config <path> [--out <dir>] [--seed <u64>]
//            [--systems <csv>]
//
// Subcommands: synth train extract score eval fuse probe report run.

#include <CLI11.hpp>

#include <cstdint>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "statpool.hpp"

namespace {

std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == ',') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else if (c != ' ') {
      cur += c;
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Statistical temporal pooling experiments on synthetic speakers"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir;
  std::uint64_t seed = 0;
  std::string systems;

  const std::vector<std::pair<std::string, std::string>> commands = {
      {"synth", "Generate the benchmark and training corpora and the trial list"},
      {"train", "Train one encoder per pooling system"},
      {"extract", "Extract centered embeddings of the benchmark corpus"},
      {"score", "Cosine-score the trial list for every system"},
      {"eval", "Compute EER and minDCF per system and fusion recipe"},
      {"fuse", "Write equal-weight fused score files"},
      {"probe", "Train probing classifiers on the embeddings"},
      {"report", "Render the results and probe tables"},
      {"run", "Run every stage in order"}};
  std::vector<CLI::App*> subs;
  std::vector<CLI::Option*> seed_opts;
  for (const auto& [name, help] : commands) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("--config", config_path, "JSON experiment config")->required();
    sub->add_option("--out", out_dir, "Output directory (overrides output_dir)");
    seed_opts.push_back(sub->add_option("--seed", seed, "Master seed (overrides seed)"));
    sub->add_option("--systems", systems, "Comma-separated pooling systems, e.g. max,mean-std");
    subs.push_back(sub);
  }

  CLI11_PARSE(app, argc, argv);

  try {
    auto cfg = statpool::parse_config(statpool::read_file(config_path));
    for (auto* o : seed_opts)
      if (o->count()) cfg.seed = seed;
    if (!out_dir.empty()) cfg.output_dir = out_dir;
    if (!systems.empty()) {
      cfg.systems = split_csv(systems);
      // Drop recipes and probe systems that refer to deselected systems.
      std::vector<std::vector<std::string>> fusions;
      for (const auto& f : cfg.fusions) {
        bool ok = true;
        for (const auto& s : f)
          ok = ok && std::find(cfg.systems.begin(), cfg.systems.end(), s) != cfg.systems.end();
        if (ok) fusions.push_back(f);
      }
      cfg.fusions = fusions;
      std::vector<std::string> probed;
      for (const auto& s : cfg.probe_systems)
        if (std::find(cfg.systems.begin(), cfg.systems.end(), s) != cfg.systems.end())
          probed.push_back(s);
      if (!cfg.probe_systems.empty() && probed.empty()) probed = cfg.systems;
      cfg.probe_systems = probed;
    }
    statpool::Experiment exp(cfg);

    const std::string cmd = app.get_subcommands().front()->get_name();
    if (cmd == "synth") exp.synth();
    else if (cmd == "train") exp.train();
    else if (cmd == "extract") exp.extract();
    else if (cmd == "score") exp.score();
    else if (cmd == "eval") exp.eval();
    else if (cmd == "fuse") exp.fuse_stage();
    else if (cmd == "probe") exp.probe();
    else if (cmd == "report") std::cout << exp.report();
    else if (cmd == "run") std::cout << exp.run();
  } catch (const statpool::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
