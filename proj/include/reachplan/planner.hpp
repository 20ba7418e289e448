#pragma once

// One decentralized MPC step: constant-control rollout against inferred
// worst-case neighbours, a value-function safety constraint on the terminal
// state, multistart projected-gradient search, and the fail-safe fallback.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include <json.hpp>

#include "reachplan/dynamics.hpp"
#include "reachplan/value_model.hpp"

namespace reachplan {

enum class PlanStatus { Optimal, FeasibleSuboptimal, FailSafe };

inline std::string to_string(PlanStatus s) {
  switch (s) {
    case PlanStatus::Optimal: return "optimal";
    case PlanStatus::FeasibleSuboptimal: return "feasible_suboptimal";
    case PlanStatus::FailSafe: return "fail_safe";
  }
  return "?";
}

struct PlanConfig {
  double t_plan = 0.05;
  double t_safe = 0.5;
  double epsilon = 0.02;
  double dt = 0.01;
  double goal_weight = 1.0;
  double control_weight = 0.1;
  int max_iterations = 30;  // per start, across penalty rounds
  int random_starts = 4;
  double timeout = -1.0;    // wall seconds; negative = 0.8 * t_plan, 0 = no timeout
  double goal_tolerance = 0.05;
  bool per_substep_adversary = true;
  bool screening = true;
  double screening_slack = 0.05;
  double penalty_weight = 100.0;
  double penalty_growth = 10.0;
  int penalty_rounds = 3;
  double feasibility_slack = 1e-3;  // the penalty aims at margin >= epsilon + this
  double fd_step = 1e-4;            // fraction of the control bound
  std::uint64_t seed = 0;

  int substeps() const { return static_cast<int>(std::lround(t_plan / dt)); }
  double timeout_seconds() const { return timeout < 0.0 ? 0.8 * t_plan : timeout; }

  void validate(const SystemSpec& sys) const {
    auto fail = [](const std::string& m) { throw InvalidInput("PlanConfig: " + m); };
    if (!(t_plan > 0.0 && t_plan < sys.horizon)) fail("t_plan must lie in (0, T)");
    if (!(t_safe > 0.0 && t_safe < sys.horizon)) fail("t_safe must lie in (0, T)");
    if (!(epsilon >= 0.0)) fail("epsilon must be non-negative");
    if (!(dt > 0.0) || substeps() < 1 || std::abs(substeps() * dt - t_plan) > 1e-9 * t_plan)
      fail("dt must divide t_plan");
    if (!(goal_weight >= 0.0 && control_weight >= 0.0)) fail("cost weights must be non-negative");
    if (max_iterations < 1 || random_starts < 0 || penalty_rounds < 1) fail("bad optimizer budget");
    if (!(penalty_weight > 0.0 && penalty_growth >= 1.0 && feasibility_slack >= 0.0)) fail("bad penalty settings");
    if (!(fd_step > 0.0 && fd_step < 0.1)) fail("fd_step must lie in (0, 0.1)");
    if (!(goal_tolerance > 0.0) || !(screening_slack >= 0.0)) fail("bad tolerances");
  }
};

inline void to_json(nlohmann::json& j, const PlanConfig& c) {
  j = {{"t_plan", c.t_plan},
       {"t_safe", c.t_safe},
       {"epsilon", c.epsilon},
       {"dt", c.dt},
       {"goal_weight", c.goal_weight},
       {"control_weight", c.control_weight},
       {"max_iterations", c.max_iterations},
       {"random_starts", c.random_starts},
       {"timeout", c.timeout},
       {"goal_tolerance", c.goal_tolerance},
       {"per_substep_adversary", c.per_substep_adversary},
       {"screening", c.screening},
       {"screening_slack", c.screening_slack},
       {"penalty_weight", c.penalty_weight},
       {"penalty_growth", c.penalty_growth},
       {"penalty_rounds", c.penalty_rounds},
       {"feasibility_slack", c.feasibility_slack},
       {"fd_step", c.fd_step},
       {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, PlanConfig& c) {
  const PlanConfig d;
  c.t_plan = j.value("t_plan", d.t_plan);
  c.t_safe = j.value("t_safe", d.t_safe);
  c.epsilon = j.value("epsilon", d.epsilon);
  c.dt = j.value("dt", d.dt);
  c.goal_weight = j.value("goal_weight", d.goal_weight);
  c.control_weight = j.value("control_weight", d.control_weight);
  c.max_iterations = j.value("max_iterations", d.max_iterations);
  c.random_starts = j.value("random_starts", d.random_starts);
  c.timeout = j.value("timeout", d.timeout);
  c.goal_tolerance = j.value("goal_tolerance", d.goal_tolerance);
  c.per_substep_adversary = j.value("per_substep_adversary", d.per_substep_adversary);
  c.screening = j.value("screening", d.screening);
  c.screening_slack = j.value("screening_slack", d.screening_slack);
  c.penalty_weight = j.value("penalty_weight", d.penalty_weight);
  c.penalty_growth = j.value("penalty_growth", d.penalty_growth);
  c.penalty_rounds = j.value("penalty_rounds", d.penalty_rounds);
  c.feasibility_slack = j.value("feasibility_slack", d.feasibility_slack);
  c.fd_step = j.value("fd_step", d.fd_step);
  c.seed = j.value("seed", d.seed);
}

/// Agent states are per-agent (see agent_bounds). own_role is the SimpleArm base
/// index (0 left, 1 right); other systems ignore it.
struct PlanProblem {
  Vec own;
  int own_role = 0;
  std::vector<Vec> others;
  Vec goal;
  PlanConfig config;
};

struct PlanResult {
  Control u;
  PlanStatus status = PlanStatus::FailSafe;
  std::vector<int> constrained;  // indices into PlanProblem::others
  std::vector<double> margins;   // V(T - t_safe, terminal pair), one per constrained agent
  double cost = 0.0;
  double wall_seconds = 0.0;
  int rollouts = 0;
  bool timed_out = false;
};

// ---------------------------------------------------------------------------
// Small helpers

/// own - goal with angle differences wrapped.
inline Vec goal_error(const SystemSpec& sys, const Vec& s, const Vec& goal) {
  Vec e = s - goal;
  const auto per = agent_periodic(sys);
  for (int i = 0; i < sys.agent_dim; ++i)
    if (per[i]) e[i] = wrap_angle(e[i]);
  return e;
}

inline Control clip_control(const SystemSpec& sys, Control u) {
  for (int j = 0; j < sys.control_dim; ++j) u[j] = std::clamp(u[j], -sys.control_bound, sys.control_bound);
  return u;
}

inline Control zero_control(const SystemSpec& sys) { return Control::Zero(sys.control_dim); }

/// Clipped control heading straight for the goal over one planning horizon.
inline Control goal_control(const SystemSpec& sys, const Vec& own, const Vec& goal, double t_plan) {
  Control u(sys.control_dim);
  if (sys.kind == SystemKind::Air3D) {
    const double bearing = std::atan2(goal[1] - own[1], goal[0] - own[0]);
    u[0] = wrap_angle(bearing - own[2]) / t_plan;
  } else {
    const Vec e = goal_error(sys, own, goal);
    for (int j = 0; j < sys.control_dim; ++j) u[j] = -e[j] / t_plan;
  }
  return clip_control(sys, u);
}

inline void require_finite(const ValueEval& e, const char* what) {
  bool ok = std::isfinite(e.value) && std::isfinite(e.dvalue_dt);
  for (Eigen::Index i = 0; i < e.grad.size(); ++i) ok = ok && std::isfinite(e.grad[i]);
  if (!ok) throw NumericalFault(std::string(what) + ": value model returned a non-finite result");
}

/// Worst-case control of `other` against `own`, in the other agent's own frame.
inline Control adversary_from_eval(const SystemSpec& sys, int own_role, const Vec& joint, const ValueEval& e) {
  return frame_control_sign(sys, own_role) * optimal_controls(sys, joint, e.grad).d;
}

template <ValueModel M>
Control infer_adversary_control(const M& model, double tau, int own_role, const Vec& own, const Vec& other) {
  const SystemSpec& sys = model.system();
  const Vec x = joint_state(sys, own_role, own, other);
  const ValueEval e = model.evaluate(tau, x);
  require_finite(e, "infer_adversary_control");
  return adversary_from_eval(sys, own_role, x, e);
}

// ---------------------------------------------------------------------------
// Rollout

struct Rollout {
  Vec own;
  std::vector<Vec> others;
  double cost = 0.0;
};

inline double stage_cost(const SystemSpec& sys, const Vec& own, const Vec& goal, const Control& u, const PlanConfig& cfg) {
  return cfg.goal_weight * goal_error(sys, own, goal).squaredNorm() + cfg.control_weight * u.squaredNorm();
}

/// Constant u for t_plan with fixed adversary controls; cost is the dt-weighted sum at the substep ends.
inline Rollout rollout(const SystemSpec& sys, const Vec& own, const Control& u, const std::vector<Vec>& others,
                       const std::vector<Control>& ds, const Vec& goal, const PlanConfig& cfg) {
  if (ds.size() != others.size()) throw InvalidInput("rollout: one adversary control per other agent");
  Rollout r{own, others, 0.0};
  for (int k = 0; k < cfg.substeps(); ++k) {
    r.own = propagate(sys, r.own, u, cfg.dt).state;
    for (std::size_t i = 0; i < others.size(); ++i) r.others[i] = propagate(sys, r.others[i], ds[i], cfg.dt, true).state;
    r.cost += cfg.dt * stage_cost(sys, r.own, goal, u, cfg);
  }
  return r;
}

/// Rollouts of several candidate controls in lockstep against the agents in `active`,
/// re-inferring their worst-case controls at tau = T - t_plan (every substep, or once).
template <ValueModel M>
std::vector<Rollout> rollout_batch(const M& model, const PlanProblem& pb, const std::vector<int>& active,
                                   const std::vector<Control>& us) {
  const SystemSpec& sys = model.system();
  const PlanConfig& cfg = pb.config;
  const double tau = sys.horizon - cfg.t_plan;
  const std::size_t na = active.size();
  std::vector<Rollout> rs(us.size());
  for (auto& r : rs) {
    r.own = pb.own;
    for (int i : active) r.others.push_back(pb.others[static_cast<std::size_t>(i)]);
  }
  std::vector<Control> ds(us.size() * na);
  std::vector<Vec> xs(us.size() * na);
  for (int k = 0; k < cfg.substeps(); ++k) {
    if (na > 0 && (k == 0 || cfg.per_substep_adversary)) {
      for (std::size_t c = 0; c < us.size(); ++c)
        for (std::size_t i = 0; i < na; ++i) xs[c * na + i] = joint_state(sys, pb.own_role, rs[c].own, rs[c].others[i]);
      const auto evs = evaluate_many(model, tau, xs);
      for (std::size_t n = 0; n < xs.size(); ++n) {
        require_finite(evs[n], "rollout");
        ds[n] = adversary_from_eval(sys, pb.own_role, xs[n], evs[n]);
      }
    }
    for (std::size_t c = 0; c < us.size(); ++c) {
      auto& r = rs[c];
      r.own = propagate(sys, r.own, us[c], cfg.dt).state;
      for (std::size_t i = 0; i < na; ++i) r.others[i] = propagate(sys, r.others[i], ds[c * na + i], cfg.dt, true).state;
      r.cost += cfg.dt * stage_cost(sys, r.own, pb.goal, us[c], cfg);
    }
  }
  return rs;
}

// ---------------------------------------------------------------------------
// Constraint screening, fail-safe

/// Agents that can matter within t_plan + t_safe. Dropping the rest is sound for
/// the exact value, which satisfies V(tau, x) >= l(x) - L (T - tau).
inline std::vector<int> screen_agents(const SystemSpec& sys, const PlanProblem& pb) {
  const PlanConfig& cfg = pb.config;
  const double reach = boundary_rate_bound(sys) * (cfg.t_plan + cfg.t_safe);
  std::vector<int> active;
  for (std::size_t i = 0; i < pb.others.size(); ++i) {
    const double l = pair_boundary_value(sys, pb.own_role, pb.own, pb.others[i]);
    if (!cfg.screening || l - reach <= cfg.epsilon + cfg.screening_slack) active.push_back(static_cast<int>(i));
  }
  return active;
}

/// Pure evasion against the agent with the lowest V(T - t_safe, .); ties go to the lowest index.
template <ValueModel M>
Control fail_safe_control(const M& model, int own_role, const Vec& own, const std::vector<Vec>& others, double t_safe) {
  const SystemSpec& sys = model.system();
  if (others.empty()) return zero_control(sys);
  std::vector<Vec> xs;
  for (const auto& o : others) xs.push_back(joint_state(sys, own_role, own, o));
  const auto evs = evaluate_many(model, sys.horizon - t_safe, xs);
  std::size_t worst = 0;
  for (std::size_t i = 0; i < evs.size(); ++i) {
    require_finite(evs[i], "fail_safe_control");
    if (evs[i].value < evs[worst].value) worst = i;
  }
  return clip_control(sys, frame_control_sign(sys, own_role) * optimal_controls(sys, xs[worst], evs[worst].grad).u);
}

// ---------------------------------------------------------------------------
// Constrained solve

namespace detail {

struct Candidate {
  Control u;
  double cost = 0.0;
  double violation = 0.0;  // sum of max(0, epsilon + slack - margin)^2
  std::vector<double> margins;
  bool feasible = false;
  double objective(double mu) const { return cost + mu * violation; }
};

template <ValueModel M>
class OptContext {
 public:
  OptContext(const M& model, const PlanProblem& pb, std::vector<int> active)
      : model_(model), pb_(pb), active_(std::move(active)), start_(std::chrono::steady_clock::now()) {}

  std::vector<Candidate> evaluate(const std::vector<Control>& us) {
    const SystemSpec& sys = model_.system();
    const PlanConfig& cfg = pb_.config;
    const auto rs = rollout_batch(model_, pb_, active_, us);
    rollouts_ += static_cast<int>(us.size());
    const std::size_t na = active_.size();
    std::vector<Vec> xs;
    xs.reserve(us.size() * na);
    for (const auto& r : rs)
      for (const auto& o : r.others) xs.push_back(joint_state(sys, pb_.own_role, r.own, o));
    const auto vs = values_many(model_, sys.horizon - cfg.t_safe, xs);
    std::vector<Candidate> out(us.size());
    for (std::size_t c = 0; c < us.size(); ++c) {
      auto& cand = out[c];
      cand.u = us[c];
      cand.cost = rs[c].cost;
      cand.feasible = true;
      for (std::size_t i = 0; i < na; ++i) {
        const double m = vs[c * na + i];
        if (!std::isfinite(m)) throw NumericalFault("solve_opt: value model returned a non-finite margin");
        cand.margins.push_back(m);
        cand.feasible = cand.feasible && m > cfg.epsilon;
        const double gap = std::max(0.0, cfg.epsilon + cfg.feasibility_slack - m);
        cand.violation += gap * gap;
      }
      consider(cand);
    }
    return out;
  }

  Candidate evaluate(const Control& u) { return evaluate(std::vector<Control>{u}).front(); }

  bool out_of_time() {
    const double limit = pb_.config.timeout_seconds();
    if (limit <= 0.0) return false;
    timed_out_ = timed_out_ || seconds() > limit;
    return timed_out_;
  }

  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

  const Candidate* best() const { return has_best_ ? &best_ : nullptr; }
  int rollouts() const { return rollouts_; }
  bool timed_out() const { return timed_out_; }
  const std::vector<int>& active() const { return active_; }
  void mark_converged(const Control& u) { converged_.push_back(u); }
  bool is_converged_point(const Control& u) const {
    return std::any_of(converged_.begin(), converged_.end(), [&](const Control& c) { return c == u; });
  }

 private:
  // Best feasible point seen so far: lowest cost, first found on ties.
  void consider(const Candidate& c) {
    if (c.feasible && (!has_best_ || c.cost < best_.cost)) {
      best_ = c;
      has_best_ = true;
    }
  }

  const M& model_;
  const PlanProblem& pb_;
  std::vector<int> active_;
  std::chrono::steady_clock::time_point start_;
  Candidate best_;
  bool has_best_ = false;
  bool timed_out_ = false;
  int rollouts_ = 0;
  std::vector<Control> converged_;
};

/// Projected descent on cost + mu * violation from one start, with mu escalation.
/// Directions are diagonal Newton steps from the same central-difference probes
/// that give the gradient; a backtracking search keeps the box.
template <ValueModel M>
void descend(OptContext<M>& ctx, const SystemSpec& sys, const PlanConfig& cfg, Candidate cur) {
  const double ub = sys.control_bound;
  const double h = cfg.fd_step * ub;
  const int n = sys.control_dim;
  double mu = cfg.penalty_weight;
  int iterations = 0;
  for (int round = 0; round < cfg.penalty_rounds; ++round) {
    bool stationary = false;
    while (iterations < cfg.max_iterations && !stationary) {
      if (ctx.out_of_time()) return;
      ++iterations;
      // Probes sit inside the box; a centre pushed off u by a wall gives no curvature.
      std::vector<Control> probes;
      std::vector<bool> shifted(static_cast<std::size_t>(n));
      for (int j = 0; j < n; ++j) {
        const double c = std::clamp(cur.u[j], -ub + h, ub - h);
        shifted[static_cast<std::size_t>(j)] = c != cur.u[j];
        Control up = cur.u, dn = cur.u;
        up[j] = c + h;
        dn[j] = c - h;
        probes.push_back(up);
        probes.push_back(dn);
      }
      const auto pc = ctx.evaluate(probes);
      const double f0 = cur.objective(mu);
      Control g(n), curv(n);
      for (int j = 0; j < n; ++j) {
        const double fp = pc[2 * j].objective(mu), fm = pc[2 * j + 1].objective(mu);
        g[j] = (fp - fm) / (2 * h);
        curv[j] = shifted[static_cast<std::size_t>(j)] ? 0.0 : (fp - 2 * f0 + fm) / (h * h);
      }
      const double gmax = g.cwiseAbs().maxCoeff();
      if (gmax == 0.0) {
        stationary = true;
        break;
      }
      Control dir(n);
      for (int j = 0; j < n; ++j) dir[j] = -g[j] / (curv[j] > 1e-12 ? curv[j] : gmax / (0.25 * ub));

      bool moved = false;
      for (double alpha = 1.0; alpha > 1e-10; alpha *= 0.5) {
        const Control trial_u = clip_control(sys, cur.u + alpha * dir);
        const Control delta = trial_u - cur.u;
        if (delta.norm() <= 1e-12 * ub) break;
        const Candidate trial = ctx.evaluate(trial_u);
        if (trial.objective(mu) < f0 + 1e-4 * g.dot(delta)) {
          cur = trial;
          moved = true;
          break;
        }
        if (ctx.out_of_time()) return;
      }
      if (!moved) stationary = true;
    }
    if (stationary && (cur.feasible || round + 1 == cfg.penalty_rounds)) {
      ctx.mark_converged(cur.u);
      return;
    }
    if (cur.feasible || iterations >= cfg.max_iterations) return;
    mu *= cfg.penalty_growth;
  }
}

}  // namespace detail

/// Minimizes the rollout cost over the control box subject to
/// V(T - t_safe, terminal pair) > epsilon for every constrained agent.
template <ValueModel M>
PlanResult solve_opt(const M& model, const PlanProblem& pb) {
  const SystemSpec& sys = model.system();
  const PlanConfig& cfg = pb.config;
  const auto t0 = std::chrono::steady_clock::now();
  detail::OptContext<M> ctx(model, pb, screen_agents(sys, pb));

  const Control safe_u = fail_safe_control(model, pb.own_role, pb.own, pb.others, cfg.t_safe);
  std::vector<Control> seeds{goal_control(sys, pb.own, pb.goal, cfg.t_plan), safe_u};
  Rng rng(cfg.seed);
  for (int k = 0; k < cfg.random_starts; ++k) {
    Control u(sys.control_dim);
    for (int j = 0; j < sys.control_dim; ++j) u[j] = rng.uniform(-sys.control_bound, sys.control_bound);
    seeds.push_back(u);
  }
  const auto starts = ctx.evaluate(seeds);
  for (const auto& s : starts) {
    if (ctx.out_of_time()) break;
    detail::descend(ctx, sys, cfg, s);
  }

  PlanResult res;
  res.constrained = ctx.active();
  res.rollouts = ctx.rollouts();
  res.timed_out = ctx.timed_out();
  if (const auto* best = ctx.best()) {
    res.u = best->u;
    res.cost = best->cost;
    res.margins = best->margins;
    res.status = ctx.is_converged_point(best->u) ? PlanStatus::Optimal : PlanStatus::FeasibleSuboptimal;
  } else {
    res.u = safe_u;
    res.status = PlanStatus::FailSafe;
    const auto fs = ctx.evaluate(safe_u);
    res.cost = fs.cost;
    res.margins = fs.margins;
  }
  res.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return res;
}

/// One planning step: checks the perceived states, solves, falls back to the fail-safe control.
template <ValueModel M>
PlanResult plan_step(const M& model, const PlanProblem& pb) {
  const SystemSpec& sys = model.system();
  pb.config.validate(sys);
  if (sys.kind == SystemKind::SimpleArm && pb.own_role != 0 && pb.own_role != 1)
    throw InvalidInput("plan_step: arm role must be 0 or 1");
  const auto bounds = agent_bounds(sys);
  auto check = [&](const Vec& s, const char* what) {
    require_dim(s, sys.agent_dim, what);
    for (int i = 0; i < sys.agent_dim; ++i)
      if (!(s[i] >= bounds[static_cast<std::size_t>(i)].lo && s[i] <= bounds[static_cast<std::size_t>(i)].hi))
        throw InvalidInput(std::string(what) + ": state outside the workspace");
  };
  check(pb.own, "plan_step own state");
  check(pb.goal, "plan_step goal");
  for (const auto& o : pb.others) check(o, "plan_step other state");
  return solve_opt(model, pb);
}

}  // namespace reachplan
