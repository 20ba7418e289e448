#pragma once

// Command implementations behind the reachplan executable. Each command reads a
// JSON config, writes its outputs plus manifest.json into the output directory,
// and maps failures onto exit codes.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "reachplan/grid_oracle.hpp"
#include "reachplan/neural_value.hpp"
#include "reachplan/planner.hpp"
#include "reachplan/sim_harness.hpp"

namespace reachplan::cli {

inline constexpr const char* kVersion = "0.1.0";
inline constexpr int kManifestVersion = 1;

enum ExitCode : int { kOk = 0, kConfigError = 2, kRuntimeFault = 3, kRefused = 4 };

struct CommandOptions {
  std::string command;
  std::string config_path;
  std::string out_dir;
  std::optional<std::uint64_t> seed;
  std::optional<int> workers;
  bool deterministic = false;
};

/// What a command needs after flags and config are merged; this is what the manifest stores.
struct Resolved {
  std::string command;
  nlohmann::json config;
  std::uint64_t seed = 0;
  int workers = 1;
  bool deterministic = false;
};

namespace fs = std::filesystem;

inline std::string read_text(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw InvalidInput("cannot read '" + path + "'");
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw InvalidInput("cannot write '" + path.string() + "'");
  os << text;
}

inline std::string dump(const nlohmann::json& j) { return j.dump(2) + "\n"; }

/// System from a config entry: a name ("air3d"), or an object with "kind" plus overrides.
inline SystemSpec system_from_config(const nlohmann::json& j) {
  SystemSpec s = j.is_string() ? SystemSpec::make(parse_system_kind(j.get<std::string>())) : j.get<SystemSpec>();
  s.validate();
  return s;
}

inline int default_workers(const std::string& command) {
  if (command == "train") return 1;
  return static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
}

/// Merges flags into the config. A manifest given as --config replays its resolved run.
inline Resolved resolve(const CommandOptions& opt) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_text(opt.config_path));
  } catch (const nlohmann::json::parse_error& e) {
    throw InvalidInput("config '" + opt.config_path + "' is not valid JSON: " + e.what());
  }
  Resolved r;
  r.command = opt.command;
  if (j.contains("manifest_version")) {
    if (j.value("command", "") != opt.command)
      throw InvalidInput("manifest was written by '" + j.value("command", "") + "', not '" + opt.command + "'");
    r.config = j.at("config");
    r.seed = j.at("seed").get<std::uint64_t>();
    r.workers = j.at("workers").get<int>();
    r.deterministic = j.at("deterministic").get<bool>();
  } else {
    r.config = j;
    r.seed = j.value("seed", std::uint64_t{0});
    r.workers = default_workers(opt.command);
  }
  if (opt.seed) r.seed = *opt.seed;
  if (opt.workers) r.workers = *opt.workers;
  if (opt.deterministic) r.deterministic = true;
  if (r.deterministic) r.workers = 1;
  if (r.workers < 1) throw InvalidInput("--workers must be at least 1");
  r.config["seed"] = r.seed;
  return r;
}

inline void write_manifest(const fs::path& out, const Resolved& r, const std::vector<std::string>& outputs) {
  nlohmann::json m{{"manifest_version", kManifestVersion},
                   {"tool_version", kVersion},
                   {"eigen_version", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                                         std::to_string(EIGEN_MINOR_VERSION)},
                   {"command", r.command},
                   {"seed", r.seed},
                   {"workers", r.workers},
                   {"deterministic", r.deterministic},
                   {"config", r.config},
                   {"outputs", outputs}};
  write_text(out / "manifest.json", dump(m));
}

class Stopwatch {
 public:
  explicit Stopwatch(bool enabled) : enabled_(enabled), start_(std::chrono::steady_clock::now()) {}
  double seconds() const {
    return enabled_ ? std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count() : 0.0;
  }

 private:
  bool enabled_;
  std::chrono::steady_clock::time_point start_;
};

// ---------------------------------------------------------------------------
// solve-grid

inline int cmd_solve_grid(const Resolved& r, const fs::path& out) {
  const auto& c = r.config;
  const SystemSpec sys = system_from_config(c.at("system"));
  const auto counts = c.at("resolution").get<std::vector<int>>();
  const double cfl = c.value("cfl", 0.5);
  const int stride = c.value("store_stride", 0);
  const double cap_mb = c.value("memory_cap_mb", 4096.0);
  const Grid grid = Grid::for_system(sys, counts);
  const double need_mb = static_cast<double>(estimate_solve_bytes(sys, grid, cfl, stride)) / (1024.0 * 1024.0);
  if (need_mb > cap_mb) {
    std::ostringstream msg;
    msg << std::fixed << std::setprecision(1) << "solve-grid: needs " << need_mb << " MiB, cap is " << cap_mb
        << " MiB (raise memory_cap_mb or store_stride, or lower the resolution)";
    throw ResourceRefused(msg.str());
  }
  Stopwatch clock(!r.deterministic);
  SolveStats stats;
  const ValueField field = solve_brt(sys, grid, cfl, stride, r.workers, &stats);
  const double runtime = clock.seconds();
  write_field(field, (out / "field.bin").string());

  nlohmann::json summary{{"system", to_string(sys.kind)},
                         {"resolution", counts},
                         {"steps", stats.steps},
                         {"dt", stats.dt},
                         {"stored_slices", field.times.size()},
                         {"runtime_s", runtime},
                         {"brt_volume_fraction_t0", brt_volume_fraction(field, 0)}};
  if (sys.kind == SystemKind::Particle) {
    double worst = 0.0;
    const auto& v0 = field.slices.front();
    for (std::size_t k = 0; k < v0.size(); ++k)
      worst = std::max(worst, std::abs(v0[k] - boundary_value(sys, grid.node(k))));
    summary["max_deviation_from_l"] = worst;
  }
  write_text(out / "summary.json", dump(summary));
  write_manifest(out, r, {"field.bin", "summary.json"});
  return kOk;
}

// ---------------------------------------------------------------------------
// train

inline int cmd_train(const Resolved& r, const fs::path& out) {
  const auto& c = r.config;
  const SystemSpec sys = system_from_config(c.at("system"));
  TrainConfig base = c.value("train", nlohmann::json::object()).get<TrainConfig>();
  base.workers = r.workers;
  base.record_wall_time = !r.deterministic;
  std::vector<std::uint64_t> seeds = c.value("seeds", std::vector<std::uint64_t>{r.seed});
  if (seeds.empty()) throw InvalidInput("train: seeds must not be empty");

  std::optional<ValueField> field;
  if (c.contains("field")) {
    field = read_field(c.at("field").get<std::string>());
    if (!(field->sys == sys)) throw InvalidInput("train: field was solved for a different system");
  }
  const int val_n = c.value("validation_samples", 2000);
  std::optional<ValueNetwork> resume;
  std::uint64_t resume_step = 0;
  if (c.contains("resume")) {
    CheckpointInfo info;
    resume = load_checkpoint(c.at("resume").get<std::string>(), &sys, &info);
    resume_step = c.value("resume_step", info.step);
  }

  std::vector<std::string> outputs;
  nlohmann::json runs = nlohmann::json::array();
  for (std::size_t k = 0; k < seeds.size(); ++k) {
    TrainConfig cfg = base;
    cfg.seed = seeds[k];
    const std::string tag = seeds.size() == 1 ? "" : "_seed" + std::to_string(seeds[k]);
    Validator validator;
    if (field) validator = [&](const ValueNetwork& n) { return validate_against_oracle(n, *field, val_n, cfg.seed).mean_abs_error; };
    const TrainResult res = train(sys, cfg, validator, resume ? &*resume : nullptr, resume_step);
    save_checkpoint(res.net, (out / ("checkpoint" + tag + ".bin")).string(), {res.steps, res.samples});
    write_text(out / ("train_log" + tag + ".csv"), train_log_csv(res.log));
    outputs.push_back("checkpoint" + tag + ".bin");
    outputs.push_back("train_log" + tag + ".csv");
    nlohmann::json run{{"seed", cfg.seed}, {"steps", res.steps}, {"samples", res.samples}};
    if (!res.log.empty()) run["final_loss"] = res.log.back().loss;
    if (field) {
      const auto rep = validate_against_oracle(res.net, *field, c.value("report_samples", 10000), derive_seed(cfg.seed, 9));
      run["mean_abs_error"] = rep.mean_abs_error;
      run["mean_abs_error_t0"] = rep.mean_abs_error_t0;
    }
    runs.push_back(run);
  }
  nlohmann::json summary{{"system", to_string(sys.kind)}, {"variant", to_string(base.variant)}, {"train", base}, {"runs", runs}};
  write_text(out / "summary.json", dump(summary));
  outputs.push_back("summary.json");
  write_manifest(out, r, outputs);
  return kOk;
}

// ---------------------------------------------------------------------------
// eval-value

inline int cmd_eval_value(const Resolved& r, const fs::path& out) {
  const auto& c = r.config;
  const int n = c.value("samples", 10000);
  if (n <= 0) throw InvalidInput("eval-value: samples must be positive");
  const ValueField field = read_field(c.at("field").get<std::string>());
  const ValueNetwork net = load_checkpoint(c.at("checkpoint").get<std::string>(), &field.sys);
  const auto rep = validate_against_oracle(net, field, n, r.seed);
  std::ostringstream csv;
  csv.precision(10);
  csv << "system,variant,samples,mean_abs_error,mean_abs_error_t0\n"
      << to_string(field.sys.kind) << ',' << to_string(net.variant()) << ',' << rep.samples << ',' << rep.mean_abs_error
      << ',' << rep.mean_abs_error_t0 << '\n';
  write_text(out / "eval.csv", csv.str());
  write_manifest(out, r, {"eval.csv"});
  return kOk;
}

// ---------------------------------------------------------------------------
// bench

inline int cmd_bench(const Resolved& r, const fs::path& out) {
  const auto& c = r.config;
  BenchmarkConfig cfg = c.get<BenchmarkConfig>();
  cfg.seed = r.seed;
  cfg.workers = r.workers;
  if (r.deterministic) {
    cfg.planner.timeout = 0.0;
    cfg.trial.record_wall_time = false;
    cfg.trial.delay_by_wall_time = false;
  }
  const bool traces = c.value("traces", false);
  cfg.trial.record_trace = traces;

  BenchmarkResult res;
  if (cfg.system == SystemKind::Particle) {
    res = run_benchmark(cfg, [](const SystemSpec& s) { return AnalyticValue(s); });
  } else {
    if (!c.contains("checkpoint")) throw InvalidInput("bench: a learned value ('checkpoint') is required for this system");
    const ValueNetwork net = load_checkpoint(c.at("checkpoint").get<std::string>());
    const SystemSpec sys = net.system();
    if (sys.kind != cfg.system) throw InvalidInput("bench: checkpoint system differs from the benchmark system");
    res = run_benchmark(cfg, [&](const SystemSpec&) -> const ValueNetwork& { return net; }, &sys);
  }
  write_text(out / "metrics.csv", metrics_csv(res.rows));
  write_text(out / "trials.csv", trials_csv(res.trials));
  std::vector<std::string> outputs{"metrics.csv", "trials.csv"};
  if (traces) {
    fs::create_directories(out / "traces");
    for (const auto& t : res.trials) {
      const std::string name = "traces/" + t.method + "_m" + std::to_string(t.agents) + "_s" + std::to_string(t.scenario) + ".jsonl";
      write_text(out / name, trace_jsonl(t.result.trace));
      outputs.push_back(name);
    }
  }
  write_manifest(out, r, outputs);
  return kOk;
}

// ---------------------------------------------------------------------------
// plot

/// Per-agent trajectory CSVs from a JSON-lines trace: t followed by the state coordinates.
inline std::vector<std::string> trace_to_csvs(const std::string& trace_path, const fs::path& out) {
  std::ifstream is(trace_path);
  if (!is) throw InvalidInput("plot: missing trace '" + trace_path + "'");
  std::map<int, std::ostringstream> per_agent;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    auto& os = per_agent[j.at("agent").get<int>()];
    os.precision(10);
    const auto state = j.at("state").get<std::vector<double>>();
    if (os.tellp() == 0) {
      os << 't';
      for (std::size_t i = 0; i < state.size(); ++i) os << ",x" << i;
      os << '\n';
    }
    os << j.at("t").get<double>();
    for (double s : state) os << ',' << s;
    os << '\n';
  }
  if (per_agent.empty()) throw InvalidInput("plot: trace '" + trace_path + "' is empty");
  std::vector<std::string> names;
  for (auto& [agent, os] : per_agent) {
    const std::string name = "agent_" + std::to_string(agent) + ".csv";
    write_text(out / name, os.str());
    names.push_back(name);
  }
  return names;
}

/// Rectangular CSV of V(t, .) over two free dimensions with the rest fixed.
/// First row: blank cell then the column coordinates; each later row: its coordinate then values.
template <ValueModel M>
std::string value_slice_csv(const M& model, double t, int di, int dj, const Vec& fixed, int ni, int nj) {
  const SystemSpec& sys = model.system();
  if (di == dj || di < 0 || dj < 0 || di >= sys.joint_dim || dj >= sys.joint_dim) throw InvalidInput("plot: bad slice dimensions");
  if (ni < 2 || nj < 2) throw InvalidInput("plot: slice resolution must be at least 2");
  auto coord = [&](int d, int k, int n) {
    const auto& b = sys.state_bounds[static_cast<std::size_t>(d)];
    return b.lo + (b.hi - b.lo) * k / (n - 1);
  };
  std::ostringstream os;
  os.precision(10);
  for (int b = 0; b < nj; ++b) os << ',' << coord(dj, b, nj);
  os << '\n';
  for (int a = 0; a < ni; ++a) {
    os << coord(di, a, ni);
    for (int b = 0; b < nj; ++b) {
      Vec x = fixed;
      x[di] = coord(di, a, ni);
      x[dj] = coord(dj, b, nj);
      os << ',' << model.evaluate(t, x).value;
    }
    os << '\n';
  }
  return os.str();
}

inline int cmd_plot(const Resolved& r, const fs::path& out) {
  const auto& c = r.config;
  std::vector<std::string> outputs;
  if (c.contains("trace")) {
    const auto names = trace_to_csvs(c.at("trace").get<std::string>(), out);
    outputs.insert(outputs.end(), names.begin(), names.end());
  }
  if (c.contains("slice")) {
    const auto& s = c.at("slice");
    const auto dims = s.at("dims").get<std::vector<int>>();
    if (dims.size() != 2) throw InvalidInput("plot: slice dims must name two dimensions");
    const auto res = s.value("resolution", std::vector<int>{101, 101});
    if (res.size() != 2) throw InvalidInput("plot: slice resolution must have two entries");
    const double t = s.value("time", 0.0);
    auto emit = [&](const auto& model) {
      const SystemSpec& sys = model.system();
      Vec fixed = Vec::Zero(sys.joint_dim);
      const auto fx = s.value("fixed", std::vector<double>(static_cast<std::size_t>(sys.joint_dim), 0.0));
      if (static_cast<int>(fx.size()) != sys.joint_dim) throw InvalidInput("plot: 'fixed' needs one entry per dimension");
      for (int i = 0; i < sys.joint_dim; ++i) fixed[i] = fx[static_cast<std::size_t>(i)];
      write_text(out / "value_slice.csv", value_slice_csv(model, t, dims[0], dims[1], fixed, res[0], res[1]));
    };
    if (s.contains("field")) {
      const ValueField field = read_field(s.at("field").get<std::string>());
      emit(FieldValue(field));
    } else if (s.contains("checkpoint")) {
      emit(load_checkpoint(s.at("checkpoint").get<std::string>()));
    } else {
      throw InvalidInput("plot: slice needs a 'field' or a 'checkpoint'");
    }
    outputs.push_back("value_slice.csv");
  }
  if (outputs.empty()) throw InvalidInput("plot: config needs 'trace' and/or 'slice'");
  write_manifest(out, r, outputs);
  return kOk;
}

// ---------------------------------------------------------------------------

/// Runs one command; errors are reported on `err` and mapped to exit codes.
inline int run(const CommandOptions& opt, std::ostream& err = std::cerr) {
  try {
    const Resolved r = resolve(opt);
    const fs::path out(opt.out_dir);
    std::error_code ec;
    fs::create_directories(out, ec);
    if (ec) throw InvalidInput("cannot create output directory '" + opt.out_dir + "': " + ec.message());
    if (r.command == "solve-grid") return cmd_solve_grid(r, out);
    if (r.command == "train") return cmd_train(r, out);
    if (r.command == "eval-value") return cmd_eval_value(r, out);
    if (r.command == "bench") return cmd_bench(r, out);
    if (r.command == "plot") return cmd_plot(r, out);
    throw InvalidInput("unknown command '" + r.command + "'");
  } catch (const ResourceRefused& e) {
    err << "refused: " << e.what() << '\n';
    return kRefused;
  } catch (const NumericalFault& e) {
    err << "fault: " << e.what() << '\n';
    return kRuntimeFault;
  } catch (const InvalidInput& e) {
    err << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const FormatError& e) {
    err << "bad input file: " << e.what() << '\n';
    return kConfigError;
  } catch (const nlohmann::json::exception& e) {
    err << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const std::exception& e) {
    err << "fault: " << e.what() << '\n';
    return kRuntimeFault;
  }
}

}  // namespace reachplan::cli
