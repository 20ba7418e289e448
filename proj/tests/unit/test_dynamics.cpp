#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "reachplan/dynamics.hpp"

using namespace reachplan;

namespace {

Vec vec(std::initializer_list<double> v) {
  Vec x(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double e : v) x[i++] = e;
  return x;
}

Control ctl(std::initializer_list<double> v) {
  Control u(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double e : v) u[i++] = e;
  return u;
}

Vec random_costate(int n, Rng& rng) {
  Vec p(n);
  for (int i = 0; i < n; ++i) p[i] = rng.uniform(-2.0, 2.0);
  return p;
}

// Distance between two segments by dense point sampling on both.
double sampled_segment_distance(const Point2& a0, const Point2& a1, const Point2& b0, const Point2& b1, int n = 600) {
  double best = std::numeric_limits<double>::infinity();
  for (int i = 0; i <= n; ++i) {
    const Point2 a = a0 + (a1 - a0) * (static_cast<double>(i) / n);
    // Exact point-to-segment distance on the inner loop keeps the oracle at O(n).
    const Point2 d = b1 - b0;
    const double len2 = d.squaredNorm();
    const double s = len2 > 0.0 ? std::clamp((a - b0).dot(d) / len2, 0.0, 1.0) : 0.0;
    best = std::min(best, (a - (b0 + s * d)).norm());
  }
  for (int i = 0; i <= n; ++i) {
    const Point2 b = b0 + (b1 - b0) * (static_cast<double>(i) / n);
    const Point2 d = a1 - a0;
    const double len2 = d.squaredNorm();
    const double s = len2 > 0.0 ? std::clamp((b - a0).dot(d) / len2, 0.0, 1.0) : 0.0;
    best = std::min(best, (b - (a0 + s * d)).norm());
  }
  return best;
}

// Pure point-sampling along both segments; independent of any projection formula.
double brute_segment_distance(const Point2& a0, const Point2& a1, const Point2& b0, const Point2& b1, int n) {
  double best = std::numeric_limits<double>::infinity();
  for (int i = 0; i <= n; ++i) {
    const Point2 a = a0 + (a1 - a0) * (static_cast<double>(i) / n);
    for (int j = 0; j <= n; ++j) best = std::min(best, (a - (b0 + (b1 - b0) * (static_cast<double>(j) / n))).norm());
  }
  return best;
}

// Arm l from first principles: forward kinematics, brute-force segment distances, capsule offset.
double brute_arm_boundary(const SystemSpec& sys, const Vec& x) {
  const auto& a = sys.arm;
  auto links = [&](const std::array<double, 2>& base, double q1, double q2) {
    const Point2 b(base[0], base[1]);
    const Point2 e = b + a.link1 * Point2(std::cos(q1), std::sin(q1));
    const Point2 t = e + a.link2 * Point2(std::cos(q1 + q2), std::sin(q1 + q2));
    return std::array<std::array<Point2, 2>, 2>{{{b, e}, {e, t}}};
  };
  const auto l = links(a.left_base, x[0], x[1]);
  const auto r = links(a.right_base, x[2], x[3]);
  double best = std::numeric_limits<double>::infinity();
  for (const auto& s1 : l)
    for (const auto& s2 : r) best = std::min(best, brute_segment_distance(s1[0], s1[1], s2[0], s2[1], 400));
  return best - 2.0 * a.capsule_radius;
}

}  // namespace

TEST(SystemSpec, DefaultsValidateAndRoundTripJson) {
  for (auto kind : {SystemKind::Particle, SystemKind::Air3D, SystemKind::SimpleArm}) {
    const auto s = SystemSpec::make(kind);
    EXPECT_NO_THROW(s.validate());
    nlohmann::json j = s;
    EXPECT_EQ(j.get<SystemSpec>(), s);
    EXPECT_EQ(parse_system_kind(to_string(kind)), kind);
  }
  EXPECT_THROW(parse_system_kind("quadrotor"), InvalidInput);
}

TEST(SystemSpec, RejectsBadParameters) {
  auto s = SystemSpec::make(SystemKind::Particle);
  s.control_bound = 0.0;
  EXPECT_THROW(s.validate(), InvalidInput);
  auto a = SystemSpec::make(SystemKind::Air3D);
  a.air3d.collision_radius = -1.0;
  EXPECT_THROW(a.validate(), InvalidInput);
}

TEST(Flow, RejectsWrongShapesAndOutOfBoxControls) {
  const auto s = SystemSpec::make(SystemKind::Particle);
  EXPECT_THROW(flow(s, vec({0, 0, 0}), ctl({0, 0}), ctl({0, 0})), InvalidInput);
  EXPECT_THROW(flow(s, vec({0, 0, 0, 0}), ctl({2, 0}), ctl({0, 0})), InvalidInput);
  const Vec dx = flow(s, vec({0, 0, 0, 0}), ctl({1, -1}), ctl({0.5, 0}));
  EXPECT_EQ(dx, vec({1, -1, 0.5, 0}));
}

TEST(Boundary, ParticleExample) {
  const auto s = SystemSpec::make(SystemKind::Particle);
  EXPECT_NEAR(boundary_value(s, vec({0, 0, 0.5, 0})), 0.3, 1e-15);
}

TEST(Boundary, Air3DOnTargetBoundaryForAnyHeading) {
  const auto s = SystemSpec::make(SystemKind::Air3D);
  for (double th : {-3.0, -1.0, 0.0, 0.7, 3.1}) EXPECT_NEAR(boundary_value(s, vec({0.25, 0, th})), 0.0, 1e-15);
}

TEST(Boundary, OutOfBoundsRejected) {
  const auto s = SystemSpec::make(SystemKind::Particle);
  EXPECT_THROW(boundary_value(s, vec({1.5, 0, 0, 0})), InvalidInput);
}

TEST(SegmentDistance, MatchesPointSamplingOracle) {
  Rng rng(11);
  for (int k = 0; k < 300; ++k) {
    Point2 p[4];
    for (auto& q : p) q = Point2(rng.uniform(-1, 1), rng.uniform(-1, 1));
    const double n = 600.0;
    const double exact = closest_points_segments(p[0], p[1], p[2], p[3]).distance;
    const double sampled = sampled_segment_distance(p[0], p[1], p[2], p[3], static_cast<int>(n));
    // The sampled estimate is an upper bound within one sample spacing.
    EXPECT_LE(exact, sampled + 1e-12);
    EXPECT_LE(sampled - exact, 3.0 / n);
  }
}

TEST(SegmentDistance, DegenerateAndParallel) {
  const Point2 o(0, 0), a(1, 0);
  EXPECT_NEAR(closest_points_segments(o, a, Point2(0.5, 1), Point2(0.5, 1)).distance, 1.0, 1e-15);
  EXPECT_NEAR(closest_points_segments(o, a, Point2(2, 0.5), Point2(3, 0.5)).distance, std::hypot(1.0, 0.5), 1e-15);
  EXPECT_NEAR(closest_points_segments(o, a, Point2(0.2, 0.3), Point2(0.8, 0.3)).distance, 0.3, 1e-15);
  EXPECT_NEAR(closest_points_segments(o, o, Point2(0, 2), Point2(0, 2)).distance, 2.0, 1e-15);
}

TEST(Boundary, SimpleArmInterlockingMatchesBruteForce) {
  const auto s = SystemSpec::make(SystemKind::SimpleArm);
  // Left arm reaches right, right arm reaches left: forearms overlap on the x axis.
  const Vec x = vec({0.0, 0.0, kPi - 1e-9, 0.0});
  const double l = boundary_value(s, x);
  EXPECT_LT(l, 0.0);
  EXPECT_NEAR(l, brute_arm_boundary(s, x), 2e-3);
  // Crossed links at an angle.
  const Vec y = vec({0.6, -1.2, 2.4, 1.3});
  EXPECT_LT(boundary_value(s, y), 0.0);
  EXPECT_NEAR(boundary_value(s, y), brute_arm_boundary(s, y), 2e-3);
  Rng rng(5);
  for (int k = 0; k < 40; ++k) {
    const Vec z = sample_state(s, rng);
    EXPECT_NEAR(boundary_value(s, z), brute_arm_boundary(s, z), 2e-3);
  }
}

TEST(Boundary, GradientMatchesFiniteDifferences) {
  Rng rng(3);
  for (auto kind : {SystemKind::Particle, SystemKind::Air3D, SystemKind::SimpleArm}) {
    const auto s = SystemSpec::make(kind);
    int checked = 0;
    for (int k = 0; k < 200; ++k) {
      Vec x = sample_state(s, rng);
      for (int i = 0; i < s.joint_dim; ++i)
        if (!s.periodic[i]) x[i] = std::clamp(x[i], s.state_bounds[i].lo + 1e-3, s.state_bounds[i].hi - 1e-3);
      const auto b = boundary_with_gradient(s, x);
      const double h = 1e-6;
      Vec fd(s.joint_dim);
      for (int i = 0; i < s.joint_dim; ++i) {
        Vec xp = x, xm = x;
        xp[i] += h;
        xm[i] -= h;
        fd[i] = (boundary_value(s, xp) - boundary_value(s, xm)) / (2 * h);
      }
      // Skip the rare samples that straddle a kink of the min over link pairs.
      if ((fd - b.grad).norm() > 1e-3 && kind == SystemKind::SimpleArm) continue;
      EXPECT_LE((fd - b.grad).norm(), 1e-6 * std::max(1.0, b.grad.norm())) << to_string(kind);
      ++checked;
    }
    EXPECT_GE(checked, 180);
  }
}

TEST(Boundary, LipschitzInPositions) {
  Rng rng(8);
  const auto p = SystemSpec::make(SystemKind::Particle);
  const auto a = SystemSpec::make(SystemKind::Air3D);
  for (int k = 0; k < 1000; ++k) {
    Vec x = sample_state(p, rng), y = x;
    y[0] = rng.uniform(-1, 1);
    y[1] = rng.uniform(-1, 1);
    EXPECT_LE(std::abs(boundary_value(p, x) - boundary_value(p, y)), (x - y).norm() + 1e-12);
    Vec u = sample_state(a, rng), v = sample_state(a, rng);
    v[2] = u[2];
    EXPECT_LE(std::abs(boundary_value(a, u) - boundary_value(a, v)), (u - v).norm() + 1e-12);
  }
}

TEST(Hamiltonian, ParticleExamples) {
  const auto s = SystemSpec::make(SystemKind::Particle);
  const Vec x = Vec::Zero(4);
  EXPECT_EQ(hamiltonian(s, x, vec({1, 0, -1, 0})), 0.0);
  EXPECT_EQ(hamiltonian(s, x, vec({1, 0, 0, 0})), 1.0);
}

TEST(Hamiltonian, Air3DMatchesControlGridEnumeration) {
  const auto s = SystemSpec::make(SystemKind::Air3D);
  const Vec x = vec({0.5, 0.0, kPi});
  const Vec p = boundary_with_gradient(s, x).grad;
  double best = -std::numeric_limits<double>::infinity();
  for (int i = 0; i <= 100; ++i) {
    const double u = -s.control_bound + 2.0 * s.control_bound * i / 100.0;
    double worst = std::numeric_limits<double>::infinity();
    for (int j = 0; j <= 100; ++j) {
      const double d = -s.control_bound + 2.0 * s.control_bound * j / 100.0;
      worst = std::min(worst, p.dot(flow_unchecked(s, x, ctl({u}), ctl({d}))));
    }
    best = std::max(best, worst);
  }
  EXPECT_NEAR(hamiltonian(s, x, p), best, 1e-3);

  // Same enumeration on random states and costates.
  Rng rng(21);
  for (int k = 0; k < 50; ++k) {
    const Vec y = sample_state(s, rng);
    const Vec q = random_costate(3, rng);
    double b = -std::numeric_limits<double>::infinity();
    for (int i = 0; i <= 100; ++i) {
      const double u = -s.control_bound + 2.0 * s.control_bound * i / 100.0;
      double w = std::numeric_limits<double>::infinity();
      for (int j = 0; j <= 100; ++j) {
        const double d = -s.control_bound + 2.0 * s.control_bound * j / 100.0;
        w = std::min(w, q.dot(flow_unchecked(s, y, ctl({u}), ctl({d}))));
      }
      b = std::max(b, w);
    }
    EXPECT_NEAR(hamiltonian(s, y, q), b, 1e-9);
  }
}

TEST(OptimalControls, SignRules) {
  const auto s = SystemSpec::make(SystemKind::Particle);
  const auto oc = optimal_controls(s, Vec::Zero(4), vec({1, -1, 1, -1}));
  EXPECT_EQ(oc.u, ctl({1, -1}));
  EXPECT_EQ(oc.d, ctl({-1, 1}));
  const auto z = optimal_controls(s, Vec::Zero(4), vec({0, 0, 0, 0}));
  EXPECT_EQ(z.u, ctl({0, 0}));

  const auto a = SystemSpec::make(SystemKind::Air3D);
  const Vec x = vec({0.3, 0.5, 0.1});
  const Vec p = vec({1.0, 0.0, -0.2});  // x2 p1 - x1 p2 - p3 = 0.7 > 0
  EXPECT_EQ(optimal_controls(a, x, p).u[0], a.air3d.turn_bound);
}

TEST(OptimalControls, AttainHamiltonianAndItsGradient) {
  Rng rng(4);
  for (auto kind : {SystemKind::Particle, SystemKind::Air3D, SystemKind::SimpleArm}) {
    const auto s = SystemSpec::make(kind);
    for (int k = 0; k < 1000; ++k) {
      const Vec x = sample_state(s, rng);
      const Vec p = random_costate(s.joint_dim, rng);
      const auto oc = optimal_controls(s, x, p);
      const double h = hamiltonian(s, x, p);
      EXPECT_NEAR(p.dot(flow(s, x, oc.u, oc.d)), h, 1e-12);
      // Positive homogeneity of degree one.
      EXPECT_NEAR(hamiltonian(s, x, 2.5 * p), 2.5 * h, 1e-12);
      EXPECT_NEAR(hamiltonian_gradient(s, x, p).dot(p), h, 1e-12);
    }
  }
}

TEST(Hamiltonian, ParticleAndArmIndependentOfState) {
  Rng rng(6);
  for (auto kind : {SystemKind::Particle, SystemKind::SimpleArm}) {
    const auto s = SystemSpec::make(kind);
    for (int k = 0; k < 200; ++k) {
      const Vec p = random_costate(4, rng);
      EXPECT_EQ(hamiltonian(s, sample_state(s, rng), p), hamiltonian(s, sample_state(s, rng), p));
    }
  }
}

TEST(Hamiltonian, ParticleVanishesOnBoundaryGradient) {
  const auto s = SystemSpec::make(SystemKind::Particle);
  Rng rng(7);
  for (int k = 0; k < 1000; ++k) {
    const Vec x = sample_state(s, rng);
    EXPECT_NEAR(hamiltonian(s, x, boundary_with_gradient(s, x).grad), 0.0, 1e-14);
  }
}

TEST(Symmetry, ReflectionExamples) {
  const auto a = SystemSpec::make(SystemKind::Air3D);
  EXPECT_EQ(symmetry_map(a, vec({0.3, 0.2, -1.0})), vec({0.3, -0.2, 1.0}));
  const auto s = SystemSpec::make(SystemKind::SimpleArm);
  EXPECT_EQ(symmetry_map(s, vec({0.1, -0.4, 2.0, 3.0})), vec({-0.1, 0.4, -2.0, -3.0}));
  // -pi is its own image under the wrap convention.
  EXPECT_EQ(symmetry_map(s, vec({-kPi, 0, 0, 0}))[0], -kPi);
  const auto p = SystemSpec::make(SystemKind::Particle);
  const Vec x = vec({0.1, 0.2, 0.3, 0.4});
  EXPECT_EQ(symmetry_map(p, x), x);
}

TEST(Symmetry, InvolutionAndTrainRegionPartition) {
  Rng rng(9);
  for (auto kind : {SystemKind::Particle, SystemKind::Air3D, SystemKind::SimpleArm}) {
    const auto s = SystemSpec::make(kind);
    for (int k = 0; k < 1000; ++k) {
      const Vec x = sample_state(s, rng);
      const Vec fx = symmetry_map(s, x);
      EXPECT_EQ(symmetry_map(s, fx), x);
      if (kind == SystemKind::Particle) {
        EXPECT_TRUE(in_train_region(s, x));
      } else if (fx != x) {
        EXPECT_NE(in_train_region(s, x), in_train_region(s, fx));
      }
    }
  }
  const auto a = SystemSpec::make(SystemKind::Air3D);
  EXPECT_TRUE(in_train_region(a, vec({0.1, 0.2, -1.0})));
  EXPECT_FALSE(in_train_region(a, vec({0.1, -0.2, 1.0})));
  const auto s = SystemSpec::make(SystemKind::SimpleArm);
  EXPECT_TRUE(in_train_region(s, vec({0.5, -1, -1, -1})));
  EXPECT_FALSE(in_train_region(s, vec({-0.5, 1, 1, 1})));
}

TEST(Symmetry, InvarianceConditionsHold) {
  for (auto kind : {SystemKind::Air3D, SystemKind::SimpleArm}) {
    const auto r = validate_symmetry(SystemSpec::make(kind), 10000, 1);
    EXPECT_TRUE(r.symmetric) << to_string(kind);
    EXPECT_LE(r.max_boundary_violation, 1e-9);
    EXPECT_LE(r.max_hamiltonian_violation, 1e-9);
  }
}

TEST(Symmetry, CorruptedMapIsReported) {
  for (auto kind : {SystemKind::Air3D, SystemKind::SimpleArm}) {
    const auto s = SystemSpec::make(kind);
    Vec signs = symmetry_signs(s);
    signs[1] = -signs[1];  // flip a single coordinate's sign
    const auto map = [&](const Vec& x) {
      Vec y = signs.cwiseProduct(x);
      return wrap_state(s, y);
    };
    const auto r = validate_symmetry(s, 2000, 2, map, signs);
    EXPECT_FALSE(r.symmetric) << to_string(kind);
  }
}

TEST(Propagate, Examples) {
  const auto p = SystemSpec::make(SystemKind::Particle);
  const auto r = propagate(p, vec({0, 0}), ctl({1, 0}), 0.1);
  EXPECT_NEAR(r.state[0], 0.1, 1e-15);
  EXPECT_EQ(r.state[1], 0.0);
  EXPECT_FALSE(r.clamped);

  const auto s = SystemSpec::make(SystemKind::SimpleArm);
  const auto w = propagate(s, vec({3.1, 0}), ctl({1, 0}), 0.1);
  EXPECT_NEAR(w.state[0], 3.2 - 2 * kPi, 1e-12);
  EXPECT_NEAR(w.state[0], -3.083, 1e-3);

  const auto c = propagate(p, vec({0.95, 0}), ctl({1, 0}), 0.1);
  EXPECT_TRUE(c.clamped);
  EXPECT_EQ(c.state[0], 1.0);

  EXPECT_THROW(propagate(p, vec({0, 0}), ctl({1.5, 0}), 0.1), InvalidInput);
  EXPECT_THROW(propagate(p, vec({0, 0}), ctl({1, 0}), 0.0), InvalidInput);
}

TEST(Propagate, TwoHalfStepsEqualOneStep) {
  Rng rng(10);
  for (auto kind : {SystemKind::Particle, SystemKind::SimpleArm}) {
    const auto s = SystemSpec::make(kind);
    for (int k = 0; k < 200; ++k) {
      Vec x(2);
      x << rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5);
      const Control u = ctl({rng.uniform(-1, 1), rng.uniform(-1, 1)});
      const Vec one = propagate(s, x, u, 0.2).state;
      const Vec two = propagate(s, propagate(s, x, u, 0.1).state, u, 0.1).state;
      EXPECT_LE((one - two).norm(), 1e-14);
    }
  }
}

TEST(PairFrames, BoundaryIsSymmetricInTheAgents) {
  Rng rng(12);
  for (auto kind : {SystemKind::Particle, SystemKind::SimpleArm}) {
    const auto s = SystemSpec::make(kind);
    for (int k = 0; k < 500; ++k) {
      const Vec x = sample_state(s, rng);
      const Vec a = x.head(2), b = x.tail(2);
      EXPECT_NEAR(pair_boundary_value(s, 0, a, b), pair_boundary_value(s, 1, b, a), 1e-12);
    }
  }
  const auto air = SystemSpec::make(SystemKind::Air3D);
  const Vec e = vec({0.1, 0.2, 0.3}), q = vec({0.4, -0.2, -2.0});
  EXPECT_NEAR(pair_boundary_value(air, 0, e, q), (q.head(2) - e.head(2)).norm() - 0.25, 1e-12);
}
