#include <CLI11.hpp>

#include "reachplan/cli.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Reachability value functions and multi-agent planning"};
  app.require_subcommand(1);
  app.set_version_flag("--version", reachplan::cli::kVersion);

  reachplan::cli::CommandOptions opt;
  std::uint64_t seed = 0;
  int workers = 0;
  const std::pair<const char*, const char*> commands[] = {
      {"solve-grid", "Solve the reach-avoid value on a grid"},
      {"train", "Train a value network"},
      {"eval-value", "Compare a value network with a grid solution"},
      {"bench", "Run multi-agent benchmark scenarios"},
      {"plot", "Export traces and value slices as CSV"},
  };
  for (const auto& [name, help] : commands) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("--config", opt.config_path, "JSON config, or a manifest.json from an earlier run")->required()->check(CLI::ExistingFile);
    sub->add_option("--out", opt.out_dir, "Output directory")->required();
    sub->add_option("--seed", seed, "Master seed");
    sub->add_option("--workers", workers, "Worker threads")->check(CLI::PositiveNumber);
    sub->add_flag("--deterministic", opt.deterministic, "One worker, no wall-clock timing or timeouts");
    sub->callback([&opt, &seed, &workers, sub, name = std::string(name)] {
      opt.command = name;
      if (sub->count("--seed") > 0) opt.seed = seed;
      if (sub->count("--workers") > 0) opt.workers = workers;
    });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : reachplan::cli::kConfigError;
  }
  return reachplan::cli::run(opt);
}
