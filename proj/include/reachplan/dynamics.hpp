#pragma once

// Benchmark two-agent systems: flows, boundary (collision) functions,
// closed-form Hamiltonians and optimal controls, symmetry maps, and the
// per-agent propagation used by the planner.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numbers>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>

#include "reachplan/errors.hpp"
#include "reachplan/rng.hpp"
#include "reachplan/segment_distance.hpp"

namespace reachplan {

inline constexpr int kMaxJointDim = 4;
inline constexpr int kMaxControlDim = 2;
inline constexpr double kPi = std::numbers::pi;

/// Joint (or relative) state, costate, or per-agent state. Fixed capacity, no heap.
using Vec = Eigen::Matrix<double, Eigen::Dynamic, 1, 0, kMaxJointDim, 1>;
using Control = Eigen::Matrix<double, Eigen::Dynamic, 1, 0, kMaxControlDim, 1>;

enum class SystemKind { Particle, Air3D, SimpleArm };

inline std::string to_string(SystemKind kind) {
  switch (kind) {
    case SystemKind::Particle: return "particle";
    case SystemKind::Air3D: return "air3d";
    case SystemKind::SimpleArm: return "simple_arm";
  }
  return "unknown";
}

inline SystemKind parse_system_kind(std::string_view name) {
  if (name == "particle") return SystemKind::Particle;
  if (name == "air3d") return SystemKind::Air3D;
  if (name == "simple_arm") return SystemKind::SimpleArm;
  throw InvalidInput("unknown system kind '" + std::string(name) + "'");
}

struct Interval {
  double lo = 0.0;
  double hi = 0.0;
  double width() const { return hi - lo; }
  bool operator==(const Interval&) const = default;
};

struct ParticleParams {
  double radius = 0.1;
  bool operator==(const ParticleParams&) const = default;
};

/// Relative-frame Dubins pursuit-evasion. Evader turn rate u, pursuer turn rate d.
struct Air3DParams {
  double evader_speed = 0.75;
  double pursuer_speed = 0.75;
  double turn_bound = 3.0;
  double collision_radius = 0.25;
  bool operator==(const Air3DParams&) const = default;
};

/// Two planar 2-link arms on fixed bases. Links are capsules of radius capsule_radius.
struct ArmParams {
  std::array<double, 2> left_base{-0.5, 0.0};
  std::array<double, 2> right_base{0.5, 0.0};
  double link1 = 0.4;
  double link2 = 0.4;
  double capsule_radius = 0.05;
  bool operator==(const ArmParams&) const = default;
};

struct SystemSpec {
  SystemKind kind = SystemKind::Particle;
  int joint_dim = 4;
  int control_dim = 2;
  int agent_dim = 2;
  double control_bound = 1.0;
  std::vector<Interval> state_bounds;
  std::vector<bool> periodic;
  double horizon = 1.0;
  ParticleParams particle;
  Air3DParams air3d;
  ArmParams arm;

  bool operator==(const SystemSpec&) const = default;

  static SystemSpec make(SystemKind kind) {
    SystemSpec s;
    s.kind = kind;
    switch (kind) {
      case SystemKind::Particle:
        s.joint_dim = 4;
        s.control_dim = 2;
        s.agent_dim = 2;
        s.control_bound = 1.0;
        s.state_bounds.assign(4, Interval{-1.0, 1.0});
        s.periodic.assign(4, false);
        break;
      case SystemKind::Air3D:
        s.joint_dim = 3;
        s.control_dim = 1;
        s.agent_dim = 3;
        s.control_bound = s.air3d.turn_bound;
        s.state_bounds = {{-1.0, 1.0}, {-1.0, 1.0}, {-kPi, kPi}};
        s.periodic = {false, false, true};
        break;
      case SystemKind::SimpleArm:
        s.joint_dim = 4;
        s.control_dim = 2;
        s.agent_dim = 2;
        s.control_bound = 1.0;
        s.state_bounds.assign(4, Interval{-kPi, kPi});
        s.periodic.assign(4, true);
        break;
    }
    return s;
  }

  /// Particle system whose agents live in the square [lo, hi]^2.
  static SystemSpec particle_in_workspace(double lo, double hi) {
    SystemSpec s = make(SystemKind::Particle);
    s.state_bounds.assign(4, Interval{lo, hi});
    return s;
  }

  void validate() const {
    auto fail = [](const std::string& m) { throw InvalidInput("SystemSpec: " + m); };
    if (!(control_bound > 0.0 && std::isfinite(control_bound))) fail("control bound must be positive and finite");
    if (!(horizon > 0.0 && std::isfinite(horizon))) fail("horizon must be positive and finite");
    if (static_cast<int>(state_bounds.size()) != joint_dim || static_cast<int>(periodic.size()) != joint_dim)
      fail("state_bounds/periodic size must equal joint_dim");
    for (int i = 0; i < joint_dim; ++i) {
      if (periodic[i]) {
        if (state_bounds[i].lo != -kPi || state_bounds[i].hi != kPi) fail("periodic dimensions must span [-pi, pi]");
      } else if (!(state_bounds[i].hi > state_bounds[i].lo)) {
        fail("state bounds must be non-empty");
      }
    }
    switch (kind) {
      case SystemKind::Particle:
        if (!(particle.radius > 0.0)) fail("particle radius must be positive");
        break;
      case SystemKind::Air3D:
        if (!(air3d.evader_speed > 0.0 && air3d.pursuer_speed > 0.0 && air3d.turn_bound > 0.0 &&
              air3d.collision_radius > 0.0))
          fail("air3d parameters must be positive");
        if (control_bound != air3d.turn_bound) fail("air3d control bound must equal the turn bound");
        break;
      case SystemKind::SimpleArm:
        if (!(arm.link1 > 0.0 && arm.link2 > 0.0 && arm.capsule_radius > 0.0)) fail("arm geometry must be positive");
        break;
    }
  }
};

// ---------------------------------------------------------------------------
// JSON (explicit keys, defaults filled from SystemSpec::make)

inline void to_json(nlohmann::json& j, const SystemSpec& s) {
  nlohmann::json bounds = nlohmann::json::array();
  for (const auto& b : s.state_bounds) bounds.push_back({b.lo, b.hi});
  j = nlohmann::json{{"kind", to_string(s.kind)}, {"control_bound", s.control_bound}, {"horizon", s.horizon},
                     {"state_bounds", bounds}};
  switch (s.kind) {
    case SystemKind::Particle: j["particle"] = {{"radius", s.particle.radius}}; break;
    case SystemKind::Air3D:
      j["air3d"] = {{"evader_speed", s.air3d.evader_speed},
                    {"pursuer_speed", s.air3d.pursuer_speed},
                    {"turn_bound", s.air3d.turn_bound},
                    {"collision_radius", s.air3d.collision_radius}};
      break;
    case SystemKind::SimpleArm:
      j["arm"] = {{"left_base", s.arm.left_base},
                  {"right_base", s.arm.right_base},
                  {"link1", s.arm.link1},
                  {"link2", s.arm.link2},
                  {"capsule_radius", s.arm.capsule_radius}};
      break;
  }
}

inline void from_json(const nlohmann::json& j, SystemSpec& s) {
  try {
    s = SystemSpec::make(parse_system_kind(j.at("kind").get<std::string>()));
    if (j.contains("horizon")) s.horizon = j["horizon"].get<double>();
    if (j.contains("state_bounds")) {
      const auto& b = j["state_bounds"];
      if (b.size() != static_cast<std::size_t>(s.joint_dim)) throw InvalidInput("state_bounds has wrong length");
      for (int i = 0; i < s.joint_dim; ++i) s.state_bounds[i] = {b[i].at(0).get<double>(), b[i].at(1).get<double>()};
    }
    switch (s.kind) {
      case SystemKind::Particle:
        if (j.contains("control_bound")) s.control_bound = j["control_bound"].get<double>();
        if (j.contains("particle")) s.particle.radius = j["particle"].value("radius", s.particle.radius);
        break;
      case SystemKind::Air3D:
        if (j.contains("air3d")) {
          const auto& a = j["air3d"];
          s.air3d.evader_speed = a.value("evader_speed", s.air3d.evader_speed);
          s.air3d.pursuer_speed = a.value("pursuer_speed", s.air3d.pursuer_speed);
          s.air3d.turn_bound = a.value("turn_bound", s.air3d.turn_bound);
          s.air3d.collision_radius = a.value("collision_radius", s.air3d.collision_radius);
        }
        s.control_bound = j.value("control_bound", s.air3d.turn_bound);
        break;
      case SystemKind::SimpleArm:
        if (j.contains("control_bound")) s.control_bound = j["control_bound"].get<double>();
        if (j.contains("arm")) {
          const auto& a = j["arm"];
          s.arm.left_base = a.value("left_base", s.arm.left_base);
          s.arm.right_base = a.value("right_base", s.arm.right_base);
          s.arm.link1 = a.value("link1", s.arm.link1);
          s.arm.link2 = a.value("link2", s.arm.link2);
          s.arm.capsule_radius = a.value("capsule_radius", s.arm.capsule_radius);
        }
        break;
    }
  } catch (const nlohmann::json::exception& e) {
    throw InvalidInput(std::string("SystemSpec JSON: ") + e.what());
  }
  s.validate();
}

// ---------------------------------------------------------------------------
// Angles and bounds

/// Wrap into [-pi, pi). Values already in range are returned unchanged (bit-exact).
inline double wrap_angle(double a) {
  if (a >= -kPi && a < kPi) return a;
  double r = std::fmod(a + kPi, 2.0 * kPi);
  if (r < 0.0) r += 2.0 * kPi;
  const double w = r - kPi;
  return w >= kPi ? -kPi : w;
}

inline Vec wrap_state(const SystemSpec& sys, Vec x) {
  for (int i = 0; i < sys.joint_dim; ++i)
    if (sys.periodic[i]) x[i] = wrap_angle(x[i]);
  return x;
}

inline void require_dim(const Vec& x, int dim, const char* what) {
  if (x.size() != dim) throw InvalidInput(std::string(what) + ": expected dimension " + std::to_string(dim));
}

inline void require_in_bounds(const SystemSpec& sys, const Vec& x, const char* what) {
  require_dim(x, sys.joint_dim, what);
  for (int i = 0; i < sys.joint_dim; ++i) {
    if (!std::isfinite(x[i])) throw InvalidInput(std::string(what) + ": non-finite state");
    if (sys.periodic[i]) continue;
    const auto& b = sys.state_bounds[i];
    const double tol = 1e-9 * b.width();
    if (x[i] < b.lo - tol || x[i] > b.hi + tol)
      throw InvalidInput(std::string(what) + ": coordinate " + std::to_string(i) + " outside state bounds");
  }
}

inline void require_controls(const SystemSpec& sys, const Control& u, const Control& d) {
  if (u.size() != sys.control_dim || d.size() != sys.control_dim) throw InvalidInput("control has wrong dimension");
  const double lim = sys.control_bound * (1.0 + 1e-12);
  for (int j = 0; j < sys.control_dim; ++j)
    if (!(std::abs(u[j]) <= lim) || !(std::abs(d[j]) <= lim)) throw InvalidInput("control outside the bound box");
}

/// Uniform sample over the joint state box (periodic dims in [-pi, pi)).
inline Vec sample_state(const SystemSpec& sys, Rng& rng) {
  Vec x(sys.joint_dim);
  for (int i = 0; i < sys.joint_dim; ++i) x[i] = rng.uniform(sys.state_bounds[i].lo, sys.state_bounds[i].hi);
  return x;
}

// ---------------------------------------------------------------------------
// Flow

inline Vec flow_unchecked(const SystemSpec& sys, const Vec& x, const Control& u, const Control& d) {
  Vec dx(sys.joint_dim);
  switch (sys.kind) {
    case SystemKind::Particle:
    case SystemKind::SimpleArm:
      dx << u[0], u[1], d[0], d[1];
      break;
    case SystemKind::Air3D: {
      const auto& a = sys.air3d;
      dx[0] = -a.evader_speed + a.pursuer_speed * std::cos(x[2]) + u[0] * x[1];
      dx[1] = a.pursuer_speed * std::sin(x[2]) - u[0] * x[0];
      dx[2] = d[0] - u[0];
      break;
    }
  }
  return dx;
}

/// Joint dynamics x' = g(x, u, d); u is the evader control, d the pursuer control.
inline Vec flow(const SystemSpec& sys, const Vec& x, const Control& u, const Control& d) {
  require_dim(x, sys.joint_dim, "flow");
  require_controls(sys, u, d);
  return flow_unchecked(sys, x, u, d);
}

// ---------------------------------------------------------------------------
// Arm kinematics

struct ArmPose {
  Point2 base;
  Point2 elbow;
  Point2 tip;
  Eigen::Matrix2d d_elbow;  // columns: d/dq1, d/dq2
  Eigen::Matrix2d d_tip;
};

inline ArmPose arm_pose(const std::array<double, 2>& base, double link1, double link2, double q1, double q2) {
  ArmPose p;
  p.base = Point2(base[0], base[1]);
  const double c1 = std::cos(q1), s1 = std::sin(q1);
  const double c12 = std::cos(q1 + q2), s12 = std::sin(q1 + q2);
  p.elbow = p.base + link1 * Point2(c1, s1);
  p.tip = p.elbow + link2 * Point2(c12, s12);
  p.d_elbow.col(0) = link1 * Point2(-s1, c1);
  p.d_elbow.col(1).setZero();
  p.d_tip.col(1) = link2 * Point2(-s12, c12);
  p.d_tip.col(0) = p.d_elbow.col(0) + p.d_tip.col(1);
  return p;
}

struct BoundaryEval {
  double value = 0.0;
  Vec grad;
};

namespace detail {

inline BoundaryEval arm_boundary(const SystemSpec& sys, const Vec& x) {
  const auto& a = sys.arm;
  const ArmPose left = arm_pose(a.left_base, a.link1, a.link2, x[0], x[1]);
  const ArmPose right = arm_pose(a.right_base, a.link1, a.link2, x[2], x[3]);

  struct Link {
    Point2 p0, p1;
    Eigen::Matrix2d d0, d1;
  };
  const Eigen::Matrix2d zero = Eigen::Matrix2d::Zero();
  const std::array<Link, 2> ll{Link{left.base, left.elbow, zero, left.d_elbow},
                               Link{left.elbow, left.tip, left.d_elbow, left.d_tip}};
  const std::array<Link, 2> rl{Link{right.base, right.elbow, zero, right.d_elbow},
                               Link{right.elbow, right.tip, right.d_elbow, right.d_tip}};

  // Active pair: strictly lowest distance, ties to the first pair index.
  double best = std::numeric_limits<double>::infinity();
  SegmentClosest best_c{};
  int bi = 0, bj = 0;
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j) {
      const SegmentClosest c = closest_points_segments(ll[i].p0, ll[i].p1, rl[j].p0, rl[j].p1);
      if (c.distance < best) {
        best = c.distance;
        best_c = c;
        bi = i;
        bj = j;
      }
    }

  BoundaryEval out;
  out.value = best - 2.0 * a.capsule_radius;
  out.grad = Vec::Zero(4);
  if (best > 0.0) {
    const Point2 n = (best_c.on_first - best_c.on_second) / best;
    const Eigen::Matrix2d dp = (1.0 - best_c.s) * ll[bi].d0 + best_c.s * ll[bi].d1;
    const Eigen::Matrix2d dq = (1.0 - best_c.t) * rl[bj].d0 + best_c.t * rl[bj].d1;
    out.grad.head<2>() = dp.transpose() * n;
    out.grad.tail<2>() = -(dq.transpose() * n);
  }
  return out;
}

}  // namespace detail

/// l(x) and its gradient without the bounds check.
inline BoundaryEval boundary_with_gradient_unchecked(const SystemSpec& sys, const Vec& x) {
  require_dim(x, sys.joint_dim, "boundary_value");
  BoundaryEval out;
  switch (sys.kind) {
    case SystemKind::Particle: {
      const Eigen::Vector2d diff(x[0] - x[2], x[1] - x[3]);
      const double dist = diff.norm();
      out.value = dist - 2.0 * sys.particle.radius;
      out.grad = Vec::Zero(4);
      if (dist > 0.0) {
        out.grad << diff[0] / dist, diff[1] / dist, -diff[0] / dist, -diff[1] / dist;
      }
      break;
    }
    case SystemKind::Air3D: {
      const double dist = std::hypot(x[0], x[1]);
      out.value = dist - sys.air3d.collision_radius;
      out.grad = Vec::Zero(3);
      if (dist > 0.0) {
        out.grad[0] = x[0] / dist;
        out.grad[1] = x[1] / dist;
      }
      break;
    }
    case SystemKind::SimpleArm: out = detail::arm_boundary(sys, x); break;
  }
  return out;
}

/// l(x) and its gradient. Negative iff x is in the collision set. At the
/// non-differentiable points (coincident agents, intersecting links) the
/// gradient returned is zero.
inline BoundaryEval boundary_with_gradient(const SystemSpec& sys, const Vec& x) {
  require_in_bounds(sys, x, "boundary_value");
  return boundary_with_gradient_unchecked(sys, x);
}

inline double boundary_value(const SystemSpec& sys, const Vec& x) { return boundary_with_gradient(sys, x).value; }

/// Upper bound on |dl/dt| along any admissible joint trajectory.
inline double boundary_rate_bound(const SystemSpec& sys) {
  switch (sys.kind) {
    case SystemKind::Particle: return 2.0 * std::sqrt(2.0) * sys.control_bound;
    case SystemKind::Air3D: return sys.air3d.evader_speed + sys.air3d.pursuer_speed;
    case SystemKind::SimpleArm: return 2.0 * sys.control_bound * (sys.arm.link1 + 2.0 * sys.arm.link2);
  }
  return 0.0;
}

// ---------------------------------------------------------------------------
// Hamiltonian and optimal controls

inline double hamiltonian(const SystemSpec& sys, const Vec& x, const Vec& p) {
  const double ub = sys.control_bound;
  switch (sys.kind) {
    case SystemKind::Particle:
    case SystemKind::SimpleArm:
      return ub * (std::abs(p[0]) + std::abs(p[1])) - ub * (std::abs(p[2]) + std::abs(p[3]));
    case SystemKind::Air3D: {
      const auto& a = sys.air3d;
      const double drift = p[0] * (-a.evader_speed + a.pursuer_speed * std::cos(x[2])) + p[1] * a.pursuer_speed * std::sin(x[2]);
      return drift + a.turn_bound * std::abs(x[1] * p[0] - x[0] * p[1] - p[2]) - a.turn_bound * std::abs(p[2]);
    }
  }
  return 0.0;
}

struct OptimalControls {
  Control u;  // evader: maximizes <p, g>
  Control d;  // pursuer: minimizes <p, g>
};

inline double sign_or_zero(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

/// Bang-bang controls attaining the Hamiltonian. Zero coefficient gives zero control.
inline OptimalControls optimal_controls(const SystemSpec& sys, const Vec& x, const Vec& p) {
  const double ub = sys.control_bound;
  OptimalControls oc{Control(sys.control_dim), Control(sys.control_dim)};
  switch (sys.kind) {
    case SystemKind::Particle:
    case SystemKind::SimpleArm:
      oc.u << ub * sign_or_zero(p[0]), ub * sign_or_zero(p[1]);
      oc.d << -ub * sign_or_zero(p[2]), -ub * sign_or_zero(p[3]);
      break;
    case SystemKind::Air3D:
      oc.u[0] = ub * sign_or_zero(x[1] * p[0] - x[0] * p[1] - p[2]);
      oc.d[0] = -ub * sign_or_zero(p[2]);
      break;
  }
  return oc;
}

/// dH/dp; equals the flow at the optimal controls (Danskin), with the zero tie-break.
inline Vec hamiltonian_gradient(const SystemSpec& sys, const Vec& x, const Vec& p) {
  const OptimalControls oc = optimal_controls(sys, x, p);
  return flow_unchecked(sys, x, oc.u, oc.d);
}

// ---------------------------------------------------------------------------
// Symmetry

/// Diagonal of the Jacobian of the symmetry map f (entries +-1).
inline Vec symmetry_signs(const SystemSpec& sys) {
  Vec s = Vec::Ones(sys.joint_dim);
  switch (sys.kind) {
    case SystemKind::Particle: break;
    case SystemKind::Air3D: s[1] = s[2] = -1.0; break;
    case SystemKind::SimpleArm: s.setConstant(-1.0); break;
  }
  return s;
}

/// f(x): Air3D (x1, -x2, -x3); SimpleArm -x; Particle identity. An involution.
inline Vec symmetry_map(const SystemSpec& sys, const Vec& x) {
  const Vec s = symmetry_signs(sys);
  Vec y(sys.joint_dim);
  for (int i = 0; i < sys.joint_dim; ++i) {
    y[i] = s[i] * x[i];
    if (sys.periodic[i]) y[i] = wrap_angle(y[i]);
  }
  return y;
}

/// X_train: first sign-flipped coordinate that is not a fixed point of f decides by sign.
inline bool in_train_region(const SystemSpec& sys, const Vec& x) {
  const Vec s = symmetry_signs(sys);
  for (int i = 0; i < sys.joint_dim; ++i) {
    if (s[i] > 0.0) continue;
    const double v = sys.periodic[i] ? wrap_angle(x[i]) : x[i];
    if (sys.periodic[i] && v == -kPi) continue;
    if (v > 0.0) return true;
    if (v < 0.0) return false;
  }
  return true;
}

struct SymmetryReport {
  double max_boundary_violation = 0.0;
  double max_hamiltonian_violation = 0.0;
  bool symmetric = true;
  int samples = 0;
};

using StateMap = std::function<Vec(const Vec&)>;

/// Checks the premises l(x) = l(f(x)) and H(x, p) = H(f(x), J_f^{-T} p) on random samples.
inline SymmetryReport validate_symmetry(const SystemSpec& sys, int n, std::uint64_t seed, const StateMap& map,
                                        const Vec& jacobian_signs, double tol = 1e-9) {
  if (n < 1) throw InvalidInput("validate_symmetry: n must be >= 1");
  Rng rng(seed);
  SymmetryReport r;
  r.samples = n;
  for (int k = 0; k < n; ++k) {
    const Vec x = sample_state(sys, rng);
    Vec p(sys.joint_dim);
    for (int i = 0; i < sys.joint_dim; ++i) p[i] = rng.uniform(-1.0, 1.0);
    const Vec fx = map(x);
    // J_f is diagonal +-1, so J_f^{-T} p = signs * p.
    const Vec fp = jacobian_signs.cwiseProduct(p);
    r.max_boundary_violation = std::max(r.max_boundary_violation, std::abs(boundary_value(sys, x) - boundary_value(sys, fx)));
    r.max_hamiltonian_violation =
        std::max(r.max_hamiltonian_violation, std::abs(hamiltonian(sys, x, p) - hamiltonian(sys, fx, fp)));
  }
  r.symmetric = r.max_boundary_violation <= tol && r.max_hamiltonian_violation <= tol;
  return r;
}

inline SymmetryReport validate_symmetry(const SystemSpec& sys, int n, std::uint64_t seed) {
  return validate_symmetry(sys, n, seed, [&sys](const Vec& x) { return symmetry_map(sys, x); }, symmetry_signs(sys));
}

// ---------------------------------------------------------------------------
// Per-agent states, pair frames, and propagation

/// Bounds of a single agent's state: particle position, arm joint angles, or Dubins (x, y, heading).
inline std::vector<Interval> agent_bounds(const SystemSpec& sys) {
  switch (sys.kind) {
    case SystemKind::Particle: return {sys.state_bounds[0], sys.state_bounds[1]};
    case SystemKind::SimpleArm: return {{-kPi, kPi}, {-kPi, kPi}};
    case SystemKind::Air3D: return {sys.state_bounds[0], sys.state_bounds[1], {-kPi, kPi}};
  }
  return {};
}

inline std::vector<bool> agent_periodic(const SystemSpec& sys) {
  switch (sys.kind) {
    case SystemKind::Particle: return {false, false};
    case SystemKind::SimpleArm: return {true, true};
    case SystemKind::Air3D: return {false, false, true};
  }
  return {};
}

inline Vec agent_flow(const SystemSpec& sys, const Vec& s, const Control& u, double speed) {
  Vec ds(sys.agent_dim);
  switch (sys.kind) {
    case SystemKind::Particle:
    case SystemKind::SimpleArm: ds << u[0], u[1]; break;
    case SystemKind::Air3D: ds << speed * std::cos(s[2]), speed * std::sin(s[2]), u[0]; break;
  }
  return ds;
}

struct Propagated {
  Vec state;
  bool clamped = false;
};

/// One explicit Euler step of a single agent; wraps angles and clamps positions to the bounds.
/// `pursuer` selects the pursuer speed for Air3D agents.
inline Propagated propagate(const SystemSpec& sys, const Vec& s, const Control& u, double dt, bool pursuer = false) {
  if (!(dt > 0.0)) throw InvalidInput("propagate: dt must be positive");
  require_dim(s, sys.agent_dim, "propagate");
  if (u.size() != sys.control_dim) throw InvalidInput("propagate: control has wrong dimension");
  for (int j = 0; j < sys.control_dim; ++j)
    if (!(std::abs(u[j]) <= sys.control_bound * (1.0 + 1e-12))) throw InvalidInput("propagate: control outside the bound box");
  const double speed = pursuer ? sys.air3d.pursuer_speed : sys.air3d.evader_speed;
  Propagated out{s + dt * agent_flow(sys, s, u, speed), false};
  const auto bounds = agent_bounds(sys);
  const auto per = agent_periodic(sys);
  for (int i = 0; i < sys.agent_dim; ++i) {
    if (per[i]) {
      out.state[i] = wrap_angle(out.state[i]);
    } else if (out.state[i] < bounds[i].lo || out.state[i] > bounds[i].hi) {
      out.state[i] = std::clamp(out.state[i], bounds[i].lo, bounds[i].hi);
      out.clamped = true;
    }
  }
  return out;
}

/// Arm mirror across the vertical axis: maps a right-base arm onto the left-base role.
inline Vec mirror_arm(const Vec& q) {
  Vec m(2);
  m << wrap_angle(kPi - q[0]), -q[1];
  m[1] = wrap_angle(m[1]);
  return m;
}

/// Sign relating a control in the planning agent's canonical frame to the agent's own control.
inline double frame_control_sign(const SystemSpec& sys, int own_role) {
  return (sys.kind == SystemKind::SimpleArm && own_role == 1) ? -1.0 : 1.0;
}

/// Joint state seen by the agent in `own_role` (it plays the evader) against another agent.
/// Particle: concatenation. SimpleArm: concatenation in the canonical frame of own_role
/// (role 0 = left base; role 1 is mirrored). Air3D: other agent in the own agent's body frame.
inline Vec joint_state(const SystemSpec& sys, int own_role, const Vec& own, const Vec& other) {
  Vec x(sys.joint_dim);
  switch (sys.kind) {
    case SystemKind::Particle: x << own[0], own[1], other[0], other[1]; break;
    case SystemKind::SimpleArm:
      if (own_role == 0) {
        x << own[0], own[1], other[0], other[1];
      } else {
        const Vec a = mirror_arm(own), b = mirror_arm(other);
        x << a[0], a[1], b[0], b[1];
      }
      break;
    case SystemKind::Air3D: {
      const double dx = other[0] - own[0], dy = other[1] - own[1];
      const double c = std::cos(own[2]), s = std::sin(own[2]);
      x << c * dx + s * dy, -s * dx + c * dy, wrap_angle(other[2] - own[2]);
      break;
    }
  }
  return x;
}

/// Pairwise l between two agents, independent of which one is treated as the evader.
inline double pair_boundary_value(const SystemSpec& sys, int role_a, const Vec& a, const Vec& b) {
  return boundary_with_gradient_unchecked(sys, joint_state(sys, role_a, a, b)).value;
}

}  // namespace reachplan
