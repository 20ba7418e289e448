#pragma once

// Scenario sampling, the synchronous closed-loop simulation of decentralized
// planners, the naive baseline, and the SR/CR/Time/PL metrics pipeline.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "reachplan/planner.hpp"

namespace reachplan {

// ---------------------------------------------------------------------------
// Scenarios

struct Scenario {
  SystemSpec system;  // particle systems carry the workspace as their state bounds
  int agents = 0;
  std::vector<Vec> starts;
  std::vector<Vec> goals;
  std::uint64_t seed = 0;
};

/// Workspace side for m particles: 0.5 m per agent.
inline double particle_workspace_side(int m) { return 0.5 * m; }

/// SimpleArm agents alternate bases: agent 0 on the left base (role 0), agent 1 on the right.
inline int agent_role(const SystemSpec& sys, int agent) { return sys.kind == SystemKind::SimpleArm ? agent % 2 : 0; }

inline double agents_boundary(const SystemSpec& sys, int a, const Vec& sa, int b, const Vec& sb) {
  (void)b;
  return pair_boundary_value(sys, agent_role(sys, a), sa, sb);
}

inline double default_clearance(SystemKind) { return 0.05; }

/// Rejection-samples starts, then goals, until every pair has l > clearance.
inline Scenario sample_scenario(SystemKind kind, int m, std::uint64_t seed, double clearance = 0.05,
                                const SystemSpec* arm_spec = nullptr) {
  if (m < 2) throw InvalidInput("sample_scenario: need at least two agents");
  Scenario sc;
  sc.agents = m;
  sc.seed = seed;
  switch (kind) {
    case SystemKind::Particle: sc.system = SystemSpec::particle_in_workspace(0.0, particle_workspace_side(m)); break;
    case SystemKind::SimpleArm:
      if (m != 2) throw InvalidInput("sample_scenario: arm scenarios are dual-arm (m = 2)");
      sc.system = arm_spec ? *arm_spec : SystemSpec::make(SystemKind::SimpleArm);
      break;
    case SystemKind::Air3D:
      throw InvalidInput("sample_scenario: Air3D is a relative-coordinate system with no shared workspace");
  }
  const SystemSpec& sys = sc.system;
  const auto bounds = agent_bounds(sys);
  Rng rng(seed);
  int attempts = 0;
  auto fill = [&](std::vector<Vec>& out) {
    while (static_cast<int>(out.size()) < m) {
      if (++attempts > 100000) throw InvalidInput("sample_scenario: workspace too crowded (no scenario after 1e5 attempts)");
      Vec s(sys.agent_dim);
      for (int i = 0; i < sys.agent_dim; ++i) s[i] = rng.uniform(bounds[static_cast<std::size_t>(i)].lo, bounds[static_cast<std::size_t>(i)].hi);
      const int a = static_cast<int>(out.size());
      bool ok = true;
      for (int b = 0; b < a && ok; ++b) ok = agents_boundary(sys, b, out[static_cast<std::size_t>(b)], a, s) > clearance;
      if (ok) out.push_back(s);
    }
  };
  fill(sc.starts);
  fill(sc.goals);
  return sc;
}

// ---------------------------------------------------------------------------
// Trials

enum class PlannerKind { NeHMO, Naive };

inline std::string to_string(PlannerKind k) { return k == PlannerKind::NeHMO ? "nehmo" : "naive"; }

inline PlannerKind parse_planner(std::string_view name) {
  if (name == "nehmo") return PlannerKind::NeHMO;
  if (name == "naive") return PlannerKind::Naive;
  throw InvalidInput("unknown planner '" + std::string(name) + "'");
}

enum class Outcome { Success, Collision, Timeout, Fault };

inline std::string to_string(Outcome o) {
  switch (o) {
    case Outcome::Success: return "success";
    case Outcome::Collision: return "collision";
    case Outcome::Timeout: return "timeout";
    case Outcome::Fault: return "fault";
  }
  return "?";
}

struct TrialConfig {
  double sim_dt = 0.01;
  double time_limit = 30.0;
  double naive_gain = 10.0;        // naive baseline: u = clip(gain * (goal - x))
  bool delay_by_wall_time = false; // apply a new control only after its measured planning time
  bool record_wall_time = true;
  bool record_trace = false;
};

inline void to_json(nlohmann::json& j, const TrialConfig& c) {
  j = {{"sim_dt", c.sim_dt},
       {"time_limit", c.time_limit},
       {"naive_gain", c.naive_gain},
       {"delay_by_wall_time", c.delay_by_wall_time},
       {"record_wall_time", c.record_wall_time},
       {"record_trace", c.record_trace}};
}

inline void from_json(const nlohmann::json& j, TrialConfig& c) {
  const TrialConfig d;
  c.sim_dt = j.value("sim_dt", d.sim_dt);
  c.time_limit = j.value("time_limit", d.time_limit);
  c.naive_gain = j.value("naive_gain", d.naive_gain);
  c.delay_by_wall_time = j.value("delay_by_wall_time", d.delay_by_wall_time);
  c.record_wall_time = j.value("record_wall_time", d.record_wall_time);
  c.record_trace = j.value("record_trace", d.record_trace);
}

struct TraceRow {
  int step = 0;
  double t = 0.0;
  int agent = 0;
  Vec state;
  Control u;
  std::vector<double> margins;
  std::string status;
};

struct TrialResult {
  Outcome outcome = Outcome::Timeout;
  std::vector<double> path_length;    // per agent
  std::vector<double> straight_line;  // per agent, start to goal
  std::vector<double> plan_seconds;   // one per plan_step call
  int plan_calls = 0;
  std::map<std::string, int> status_counts;
  double min_clearance = 0.0;  // smallest pairwise l seen
  double sim_time = 0.0;
  std::string fault;
  std::vector<TraceRow> trace;
};

/// Clipped proportional control toward the goal, blind to other agents.
inline Control naive_planner(const SystemSpec& sys, const Vec& x, const Vec& goal, double gain = 10.0) {
  const Vec e = goal_error(sys, x, goal);
  Control u(sys.control_dim);
  for (int j = 0; j < sys.control_dim; ++j) u[j] = -gain * e[j];
  return clip_control(sys, u);
}

/// Distance between two per-agent states, angles wrapped.
inline double state_distance(const SystemSpec& sys, const Vec& a, const Vec& b) { return goal_error(sys, a, b).norm(); }

inline bool at_goal(const SystemSpec& sys, const Vec& x, const Vec& goal, double tol) {
  const Vec e = goal_error(sys, x, goal);
  return sys.kind == SystemKind::SimpleArm ? e.cwiseAbs().maxCoeff() <= tol : e.norm() <= tol;
}

/// Synchronous closed loop: every t_plan each unfinished agent replans from the perceived
/// states and holds its control until the next replan; collisions are checked every sim dt.
template <ValueModel M>
TrialResult run_trial(const M& model, const Scenario& sc, PlannerKind planner, const PlanConfig& plan_cfg,
                      const TrialConfig& cfg) {
  const SystemSpec& sys = sc.system;
  if (!(model.system() == sys)) throw InvalidInput("run_trial: value model and scenario systems differ");
  plan_cfg.validate(sys);
  if (!(cfg.sim_dt > 0.0) || cfg.sim_dt > plan_cfg.dt + 1e-12) throw InvalidInput("run_trial: sim dt must not exceed the planner dt");
  const int per_plan = static_cast<int>(std::lround(plan_cfg.t_plan / cfg.sim_dt));
  if (std::abs(per_plan * cfg.sim_dt - plan_cfg.t_plan) > 1e-9) throw InvalidInput("run_trial: sim dt must divide t_plan");
  if (!(cfg.time_limit > 0.0)) throw InvalidInput("run_trial: time limit must be positive");

  const int m = sc.agents;
  const auto um = static_cast<std::size_t>(m);
  TrialResult res;
  res.path_length.assign(um, 0.0);
  for (int a = 0; a < m; ++a) res.straight_line.push_back(state_distance(sys, sc.starts[static_cast<std::size_t>(a)], sc.goals[static_cast<std::size_t>(a)]));

  std::vector<Vec> x = sc.starts;
  std::vector<Control> u(um, zero_control(sys)), pending(um, zero_control(sys));
  std::vector<int> pending_at(um, -1);
  std::vector<bool> done(um, false);
  auto min_pair = [&]() {
    double lo = std::numeric_limits<double>::infinity();
    for (int a = 0; a < m; ++a)
      for (int b = a + 1; b < m; ++b) lo = std::min(lo, agents_boundary(sys, a, x[static_cast<std::size_t>(a)], b, x[static_cast<std::size_t>(b)]));
    return lo;
  };
  res.min_clearance = min_pair();
  const int max_steps = static_cast<int>(std::ceil(cfg.time_limit / cfg.sim_dt - 1e-9));

  for (int step = 0;; ++step) {
    for (int a = 0; a < m; ++a) {
      const auto ua = static_cast<std::size_t>(a);
      if (!done[ua] && at_goal(sys, x[ua], sc.goals[ua], plan_cfg.goal_tolerance)) {
        done[ua] = true;
        u[ua] = zero_control(sys);
        pending_at[ua] = -1;
      }
    }
    if (std::all_of(done.begin(), done.end(), [](bool d) { return d; })) {
      res.outcome = Outcome::Success;
      break;
    }
    if (step >= max_steps) {
      res.outcome = Outcome::Timeout;
      break;
    }

    if (step % per_plan == 0) {
      const int plan_index = step / per_plan;
      for (int a = 0; a < m; ++a) {
        const auto ua = static_cast<std::size_t>(a);
        if (done[ua]) continue;
        Control next;
        std::vector<double> margins;
        std::string status = "naive";
        double seconds = 0.0;
        if (planner == PlannerKind::Naive) {
          next = naive_planner(sys, x[ua], sc.goals[ua], cfg.naive_gain);
        } else {
          PlanProblem pb;
          pb.own = x[ua];
          pb.own_role = agent_role(sys, a);
          pb.goal = sc.goals[ua];
          pb.config = plan_cfg;
          pb.config.seed = derive_seed(derive_seed(sc.seed, static_cast<std::uint64_t>(plan_index)), ua);
          for (int b = 0; b < m; ++b)
            if (b != a) pb.others.push_back(x[static_cast<std::size_t>(b)]);
          try {
            const PlanResult pr = plan_step(model, pb);
            next = pr.u;
            margins = pr.margins;
            status = to_string(pr.status);
            seconds = pr.wall_seconds;
          } catch (const NumericalFault& e) {
            res.outcome = Outcome::Fault;
            res.fault = e.what();
            res.sim_time = step * cfg.sim_dt;
            return res;
          }
          ++res.status_counts[status];
        }
        ++res.plan_calls;
        res.plan_seconds.push_back(cfg.record_wall_time ? seconds : 0.0);
        if (cfg.delay_by_wall_time && cfg.record_wall_time && seconds > 0.0) {
          pending[ua] = next;
          pending_at[ua] = step + static_cast<int>(std::ceil(seconds / cfg.sim_dt));
        } else {
          u[ua] = next;
          pending_at[ua] = -1;
        }
        if (cfg.record_trace) res.trace.push_back({plan_index, step * cfg.sim_dt, a, x[ua], next, margins, status});
      }
    }

    for (int a = 0; a < m; ++a) {
      const auto ua = static_cast<std::size_t>(a);
      if (pending_at[ua] >= 0 && step >= pending_at[ua]) {
        u[ua] = pending[ua];
        pending_at[ua] = -1;
      }
      if (done[ua]) continue;
      const Vec prev = x[ua];
      x[ua] = propagate(sys, x[ua], u[ua], cfg.sim_dt).state;
      res.path_length[ua] += state_distance(sys, prev, x[ua]);
    }
    const double lo = min_pair();
    res.min_clearance = std::min(res.min_clearance, lo);
    if (lo < 0.0) {
      res.outcome = Outcome::Collision;
      res.sim_time = (step + 1) * cfg.sim_dt;
      return res;
    }
    res.sim_time = (step + 1) * cfg.sim_dt;
  }
  return res;
}

inline std::string trace_jsonl(const std::vector<TraceRow>& rows) {
  std::ostringstream os;
  for (const auto& r : rows) {
    nlohmann::json j{{"step", r.step}, {"t", r.t}, {"agent", r.agent}, {"status", r.status}, {"margins", r.margins}};
    j["state"] = std::vector<double>(r.state.data(), r.state.data() + r.state.size());
    j["control"] = std::vector<double>(r.u.data(), r.u.data() + r.u.size());
    os << j.dump() << '\n';
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Benchmarks

struct BenchmarkConfig {
  SystemKind system = SystemKind::Particle;
  std::vector<std::string> methods{"nehmo", "naive"};
  std::vector<int> agent_counts{8};
  int scenarios = 100;
  std::uint64_t seed = 0;
  double clearance = 0.05;
  PlanConfig planner;
  TrialConfig trial;
  int workers = 1;

  void validate() const {
    if (methods.empty()) throw InvalidInput("benchmark: no methods");
    for (const auto& m : methods) parse_planner(m);
    if (agent_counts.empty() || scenarios < 1) throw InvalidInput("benchmark: need at least one agent count and scenario");
    for (int m : agent_counts)
      if (m < 2) throw InvalidInput("benchmark: agent counts must be at least 2");
    if (workers < 1) throw InvalidInput("benchmark: workers must be at least 1");
  }
};

inline void to_json(nlohmann::json& j, const BenchmarkConfig& c) {
  j = {{"system", to_string(c.system)}, {"methods", c.methods},     {"agent_counts", c.agent_counts},
       {"scenarios", c.scenarios},      {"seed", c.seed},           {"clearance", c.clearance},
       {"planner", c.planner},          {"trial", c.trial},         {"workers", c.workers}};
}

inline void from_json(const nlohmann::json& j, BenchmarkConfig& c) {
  const BenchmarkConfig d;
  c.system = parse_system_kind(j.value("system", to_string(d.system)));
  c.methods = j.value("methods", d.methods);
  c.agent_counts = j.value("agent_counts", d.agent_counts);
  c.scenarios = j.value("scenarios", d.scenarios);
  c.seed = j.value("seed", d.seed);
  c.clearance = j.value("clearance", d.clearance);
  c.planner = j.value("planner", d.planner);
  c.trial = j.value("trial", d.trial);
  c.workers = j.value("workers", d.workers);
}

/// Scenario k for m agents; shared by every method.
inline std::uint64_t scenario_seed(std::uint64_t master, int m, int k) {
  return derive_seed(derive_seed(master, static_cast<std::uint64_t>(m)), static_cast<std::uint64_t>(k));
}

struct TrialRecord {
  std::string method;
  int agents = 0;
  int scenario = 0;
  std::uint64_t seed = 0;
  TrialResult result;
};

struct MetricsRow {
  std::string method;
  int agents = 0;
  int trials = 0;
  int faults = 0;
  double success_pct = 0.0;
  double collision_pct = 0.0;
  double timeout_pct = 0.0;
  double time_mean = 0.0, time_sd = 0.0;  // seconds per plan_step call
  double pl_mean = 0.0, pl_sd = 0.0;      // per agent, successes only
  double straight_mean = 0.0;             // per agent, same successes
  double fail_safe_pct = 0.0;             // share of plan_step calls
};

struct BenchmarkResult {
  std::vector<MetricsRow> rows;
  std::vector<TrialRecord> trials;
};

namespace detail {

inline std::pair<double, double> mean_sd(const std::vector<double>& v) {
  if (v.empty()) return {0.0, 0.0};
  double s = 0.0;
  for (double x : v) s += x;
  const double mean = s / static_cast<double>(v.size());
  double q = 0.0;
  for (double x : v) q += (x - mean) * (x - mean);
  return {mean, v.size() > 1 ? std::sqrt(q / static_cast<double>(v.size() - 1)) : 0.0};
}

}  // namespace detail

inline MetricsRow aggregate(const std::string& method, int agents, const std::vector<const TrialResult*>& trials) {
  MetricsRow row;
  row.method = method;
  row.agents = agents;
  int ok = 0, hit = 0, late = 0, calls = 0, fail_safe = 0;
  std::vector<double> times, pls, straights;
  for (const auto* t : trials) {
    ++row.trials;
    switch (t->outcome) {
      case Outcome::Success: ++ok; break;
      case Outcome::Collision: ++hit; break;
      case Outcome::Timeout: ++late; break;
      case Outcome::Fault: ++row.faults; break;
    }
    if (t->outcome == Outcome::Fault) continue;
    times.insert(times.end(), t->plan_seconds.begin(), t->plan_seconds.end());
    calls += t->plan_calls;
    if (auto it = t->status_counts.find("fail_safe"); it != t->status_counts.end()) fail_safe += it->second;
    if (t->outcome == Outcome::Success) {
      pls.insert(pls.end(), t->path_length.begin(), t->path_length.end());
      straights.insert(straights.end(), t->straight_line.begin(), t->straight_line.end());
    }
  }
  const int counted = ok + hit + late;
  if (counted > 0) {
    row.success_pct = 100.0 * ok / counted;
    row.collision_pct = 100.0 * hit / counted;
    row.timeout_pct = 100.0 * late / counted;
  }
  std::tie(row.time_mean, row.time_sd) = detail::mean_sd(times);
  std::tie(row.pl_mean, row.pl_sd) = detail::mean_sd(pls);
  row.straight_mean = detail::mean_sd(straights).first;
  row.fail_safe_pct = calls > 0 ? 100.0 * fail_safe / calls : 0.0;
  return row;
}

/// Runs the scenario x method matrix. `model_for(system)` supplies the value model for a
/// scenario's system (an analytic value for particles, a network for arms).
template <class ModelFor>
BenchmarkResult run_benchmark(const BenchmarkConfig& cfg, ModelFor&& model_for, const SystemSpec* arm_spec = nullptr) {
  cfg.validate();
  BenchmarkResult out;
  for (int m : cfg.agent_counts) {
    std::vector<Scenario> scenarios;
    for (int k = 0; k < cfg.scenarios; ++k)
      scenarios.push_back(sample_scenario(cfg.system, m, scenario_seed(cfg.seed, m, k), cfg.clearance, arm_spec));
    const auto& model = model_for(scenarios.front().system);
    for (const auto& method : cfg.methods) {
      const PlannerKind kind = parse_planner(method);
      std::vector<TrialRecord> recs(scenarios.size());
      auto work = [&](std::size_t begin, std::size_t stride) {
        for (std::size_t k = begin; k < scenarios.size(); k += stride)
          recs[k] = {method, m, static_cast<int>(k), scenarios[k].seed, run_trial(model, scenarios[k], kind, cfg.planner, cfg.trial)};
      };
      const auto workers = static_cast<std::size_t>(std::min<int>(cfg.workers, cfg.scenarios));
      if (workers <= 1) {
        work(0, 1);
      } else {
        std::vector<std::jthread> pool;
        for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work, w, workers);
      }
      std::vector<const TrialResult*> ptrs;
      for (const auto& r : recs) ptrs.push_back(&r.result);
      out.rows.push_back(aggregate(method, m, ptrs));
      for (auto& r : recs) out.trials.push_back(std::move(r));
    }
  }
  return out;
}

inline std::string metrics_csv(const std::vector<MetricsRow>& rows) {
  std::ostringstream os;
  os.precision(10);
  os << "method,agents,trials,faults,sr_pct,cr_pct,timeout_pct,time_mean_s,time_sd_s,pl_mean,pl_sd,straight_mean,fail_safe_pct\n";
  for (const auto& r : rows)
    os << r.method << ',' << r.agents << ',' << r.trials << ',' << r.faults << ',' << r.success_pct << ','
       << r.collision_pct << ',' << r.timeout_pct << ',' << r.time_mean << ',' << r.time_sd << ',' << r.pl_mean << ','
       << r.pl_sd << ',' << r.straight_mean << ',' << r.fail_safe_pct << '\n';
  return os.str();
}

inline std::string trials_csv(const std::vector<TrialRecord>& trials) {
  std::ostringstream os;
  os.precision(10);
  os << "method,agents,scenario,seed,outcome,sim_time,mean_pl,mean_straight,plan_calls,mean_plan_s,min_clearance,fail_safe_calls,fault\n";
  for (const auto& t : trials) {
    const auto& r = t.result;
    const double pl = detail::mean_sd(r.path_length).first, sl = detail::mean_sd(r.straight_line).first;
    const double tm = detail::mean_sd(r.plan_seconds).first;
    const auto fs = r.status_counts.count("fail_safe") ? r.status_counts.at("fail_safe") : 0;
    os << t.method << ',' << t.agents << ',' << t.scenario << ',' << t.seed << ',' << to_string(r.outcome) << ','
       << r.sim_time << ',' << pl << ',' << sl << ',' << r.plan_calls << ',' << tm << ',' << r.min_clearance << ','
       << fs << ',' << '"' << r.fault << '"' << '\n';
  }
  return os.str();
}

}  // namespace reachplan
