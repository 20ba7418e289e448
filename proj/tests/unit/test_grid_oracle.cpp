#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>

#include "reachplan/grid_oracle.hpp"

using namespace reachplan;

namespace {

// Recorded from the first verified 61^3 run (agrees with the 91^3 solve to 3.5%).
constexpr double kAir3DVolumeFraction61 = 0.0800155;

const ValueField& air3d_61() {
  static const ValueField f = [] {
    const auto s = SystemSpec::make(SystemKind::Air3D);
    return solve_brt(s, Grid::for_system(s, {61, 61, 61}));
  }();
  return f;
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("reachplan_" + name)).string();
}

std::string slurp(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

void spit(const std::string& path, const std::string& bytes) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace

TEST(Grid, ShapeAndSpacing) {
  const auto s = SystemSpec::make(SystemKind::Air3D);
  const auto g = Grid::for_system(s, {5, 5, 8});
  EXPECT_EQ(g.size(), 200u);
  EXPECT_DOUBLE_EQ(g.spacing(0), 0.5);
  EXPECT_DOUBLE_EQ(g.spacing(2), 2 * kPi / 8);  // no duplicate endpoint
  EXPECT_EQ(g.node(g.size() - 1)[0], 1.0);
  EXPECT_THROW(Grid::for_system(s, {2, 5, 5}), InvalidInput);
  EXPECT_THROW(Grid::for_system(s, {5, 5}), InvalidInput);
}

TEST(SolveBrt, RejectsBadArguments) {
  const auto s = SystemSpec::make(SystemKind::Particle);
  const auto g = Grid::for_system(s, {5, 5, 5, 5});
  EXPECT_THROW(solve_brt(s, g, 0.0), InvalidInput);
  EXPECT_THROW(solve_brt(s, g, 1.5), InvalidInput);
  const auto a = SystemSpec::make(SystemKind::Air3D);
  EXPECT_THROW(solve_brt(s, Grid::for_system(a, {5, 5, 5})), InvalidInput);
}

TEST(SolveBrt, NonFiniteValuesAreDetected) {
  const auto s = SystemSpec::make(SystemKind::Particle);
  const auto g = Grid::for_system(s, {5, 5, 5, 5});
  const detail::StepContext ctx(s, g);
  std::vector<double> v(g.size(), 1.0), out(g.size());
  EXPECT_TRUE(detail::lf_step_range(ctx, v, out, 0.01, 0, g.size()));
  v[17] = std::nan("");
  EXPECT_FALSE(detail::lf_step_range(ctx, v, out, 0.01, 0, g.size()));
}

TEST(SolveBrt, TerminalSliceIsBoundaryExactly) {
  const auto& f = air3d_61();
  EXPECT_EQ(f.times.front(), 0.0);
  EXPECT_EQ(f.times.back(), f.sys.horizon);
  for (std::size_t k = 0; k < f.grid.size(); ++k) ASSERT_EQ(f.slices.back()[k], boundary_value(f.sys, f.grid.node(k)));
}

TEST(SolveBrt, StoresRequestedStride) {
  const auto s = SystemSpec::make(SystemKind::Air3D);
  const auto g = Grid::for_system(s, {21, 21, 21});
  SolveStats st;
  const auto f = solve_brt(s, g, 0.5, 7, 1, &st);
  EXPECT_EQ(f.times.size(), stored_slice_count(st.steps, 7));
  for (std::size_t j = 1; j < f.times.size(); ++j) EXPECT_LT(f.times[j - 1], f.times[j]);
  EXPECT_NEAR(st.steps * st.dt, s.horizon, 1e-12);
  EXPECT_LE(st.dt, 0.5 / (st.dissipation[0] / g.spacing(0) + st.dissipation[1] / g.spacing(1) +
                          st.dissipation[2] / g.spacing(2)) + 1e-15);
}

TEST(SolveBrt, BackwardMonotone) {
  const auto& f = air3d_61();
  for (std::size_t j = 1; j < f.slices.size(); ++j)
    for (std::size_t k = 0; k < f.grid.size(); ++k) ASSERT_LE(f.slices[j - 1][k], f.slices[j][k]);
}

TEST(SolveBrt, Air3DSymmetricGridGivesSymmetricValues) {
  const auto& f = air3d_61();
  const auto& g = f.grid;
  const int n1 = g.count(1), n2 = g.count(2);
  double worst = 0.0;
  for (const auto& s : f.slices) {
    for (int a = 0; a < g.count(0); ++a)
      for (int b = 0; b < n1; ++b)
        for (int c = 0; c < n2; ++c) {
          // f(x1, x2, x3) = (x1, -x2, -x3): index b -> n1-1-b, c -> (n2-c) mod n2.
          const std::size_t k = a * g.stride(0) + b * g.stride(1) + c;
          const std::size_t m = a * g.stride(0) + (n1 - 1 - b) * g.stride(1) + (n2 - c) % n2;
          worst = std::max(worst, std::abs(s[k] - s[m]));
        }
  }
  EXPECT_LE(worst, 1e-9);
}

TEST(SolveBrt, Air3DVolumeFractionRegression) {
  EXPECT_NEAR(brt_volume_fraction(air3d_61(), 0), kAir3DVolumeFraction61, 1e-6);
  // The BRT only grows backward from the collision set.
  EXPECT_GT(brt_volume_fraction(air3d_61(), 0), brt_volume_fraction(air3d_61(), air3d_61().slices.size() - 1));
}

TEST(SolveBrt, Air3DVolumeFractionAgreesAcrossResolutions) {
  const auto s = SystemSpec::make(SystemKind::Air3D);
  const double fine = brt_volume_fraction(solve_brt(s, Grid::for_system(s, {91, 91, 91})), 0);
  const double coarse = brt_volume_fraction(air3d_61(), 0);
  EXPECT_LE(std::abs(coarse - fine), 0.05 * fine);
}

TEST(SolveBrt, WorkersGiveIdenticalResults) {
  const auto s = SystemSpec::make(SystemKind::Air3D);
  const auto g = Grid::for_system(s, {21, 23, 20});
  const auto a = solve_brt(s, g, 0.5, 0, 1);
  const auto b = solve_brt(s, g, 0.5, 0, 3);
  EXPECT_EQ(a.slices, b.slices);
}

TEST(SolveBrt, ParticleValueIsTimeIndependent) {
  const auto s = SystemSpec::make(SystemKind::Particle);
  const auto g = Grid::for_system(s, {11, 11, 11, 11});
  const auto f = solve_brt(s, g);
  double worst = 0.0;
  for (std::size_t k = 0; k < g.size(); ++k) worst = std::max(worst, std::abs(f.slices[0][k] - boundary_value(s, g.node(k))));
  EXPECT_LE(worst, 2 * g.max_spacing());
}

TEST(SolveBrt, ParticleRefinementConvergence) {
  const auto s = SystemSpec::make(SystemKind::Particle);
  const auto coarse = solve_brt(s, Grid::for_system(s, {11, 11, 11, 11}));
  const auto fine = solve_brt(s, Grid::for_system(s, {21, 21, 21, 21}));
  Rng rng(31);
  double ec = 0.0, ef = 0.0;
  const int n = 20000;
  for (int k = 0; k < n; ++k) {
    const Vec x = sample_state(s, rng);
    const double l = boundary_value(s, x);
    ec += std::abs(sample_value(coarse, 0.0, x) - l);
    ef += std::abs(sample_value(fine, 0.0, x) - l);
  }
  EXPECT_GE(ec / ef, 1.5);
}

TEST(SampleValue, NodeQueriesAreBitExact) {
  const auto& f = air3d_61();
  Rng rng(2);
  for (int k = 0; k < 2000; ++k) {
    const std::size_t n = rng.below(f.grid.size());
    const std::size_t j = rng.below(f.times.size());
    ASSERT_EQ(sample_value(f, f.times[j], f.grid.node(n)), f.slices[j][n]);
  }
}

TEST(SampleValue, MidpointOfLinearSliceIsTheMean) {
  const auto s = SystemSpec::make(SystemKind::Air3D);
  ValueField f{Grid::for_system(s, {9, 9, 8}), s, {0.0, 1.0}, {}};
  std::vector<double> lin(f.grid.size());
  for (std::size_t k = 0; k < lin.size(); ++k) {
    const Vec x = f.grid.node(k);
    lin[k] = 0.7 * x[0] - 1.3 * x[1] + 0.25 * x[2];
  }
  f.slices = {lin, lin};
  Vec a(3), b(3);
  a << f.grid.coord(0, 2), f.grid.coord(1, 5), f.grid.coord(2, 3);
  b << f.grid.coord(0, 3), f.grid.coord(1, 5), f.grid.coord(2, 3);
  EXPECT_NEAR(sample_value(f, 0.3, 0.5 * (a + b)), 0.5 * (sample_value(f, 0.3, a) + sample_value(f, 0.3, b)), 1e-14);
  // Periodic wrap: the heading coordinate is queried modulo 2 pi.
  Vec c = a;
  c[2] += 2 * kPi;
  EXPECT_NEAR(sample_value(f, 0.0, c), sample_value(f, 0.0, a), 1e-12);
}

TEST(SampleValue, RejectsOutOfRangeQueries) {
  const auto& f = air3d_61();
  Vec x(3);
  x << 1.5, 0.0, 0.0;
  EXPECT_THROW(sample_value(f, 0.0, x), InvalidInput);
  x << 0.5, 0.0, 0.0;
  EXPECT_THROW(sample_value(f, -0.1, x), InvalidInput);
  EXPECT_THROW(sample_value(f, 1.1, x), InvalidInput);
}

TEST(SampleValue, RandomPointsConvergeUnderRefinement) {
  const auto s = SystemSpec::make(SystemKind::Air3D);
  const auto c = solve_brt(s, Grid::for_system(s, {21, 21, 21}));
  const auto m = solve_brt(s, Grid::for_system(s, {41, 41, 41}));
  const auto& f = air3d_61();
  Rng rng(17);
  double ec = 0.0, em = 0.0;
  for (int k = 0; k < 5000; ++k) {
    const Vec x = sample_state(s, rng);
    const double t = rng.uniform(0.0, s.horizon);
    const double ref = sample_value(f, t, x);
    ec += std::abs(sample_value(c, t, x) - ref);
    em += std::abs(sample_value(m, t, x) - ref);
  }
  EXPECT_LT(em, ec);
}

TEST(BrtMembership, TerminalCollisionAndFarStates) {
  const auto& f = air3d_61();
  Vec x(3);
  x << 0.1, 0.05, 1.0;
  EXPECT_FALSE(brt_membership(f, f.horizon(), x));
  // Behind the evader, moving the same way: cannot close the gap within the horizon.
  x << -1.0, 0.0, 0.0;
  EXPECT_TRUE(brt_membership(f, 0.0, x));
}

TEST(BrtMembership, OptimalRolloutsFromSafeStatesStaySafe) {
  const auto& f = air3d_61();
  const auto& s = f.sys;
  // Three grid spacings: the first-order scheme overestimates V near the BRT edge by O(dx).
  const double eps = 0.1, dt = 0.002;
  Rng rng(23);
  int checked = 0;
  while (checked < 200) {
    Vec x = sample_state(s, rng);
    const double v0 = sample_value(f, 0.0, x);
    if (!(v0 > eps && v0 < eps + 0.15)) continue;
    ++checked;
    double worst = boundary_value(s, x);
    for (double t = 0.0; t < s.horizon - 1e-12; t += dt) {
      const bool inside = std::abs(x[0]) <= 1.0 && std::abs(x[1]) <= 1.0;
      const Vec p = inside ? sample_value_with_derivatives(f, t, x).grad : boundary_with_gradient_unchecked(s, x).grad;
      const auto oc = optimal_controls(s, x, p);
      x = wrap_state(s, x + dt * flow_unchecked(s, x, oc.u, oc.d));
      worst = std::min(worst, std::hypot(x[0], x[1]) - s.air3d.collision_radius);
    }
    EXPECT_GT(worst, 0.0) << "V(0,x) = " << v0;
  }
}

TEST(FieldIo, RoundTripIsExactAndStable) {
  const auto s = SystemSpec::make(SystemKind::Air3D);
  const auto f = solve_brt(s, Grid::for_system(s, {11, 13, 12}));
  const auto p1 = temp_path("field1.bin"), p2 = temp_path("field2.bin");
  write_field(f, p1);
  const auto g = read_field(p1);
  EXPECT_EQ(g.grid, f.grid);
  EXPECT_EQ(g.sys, f.sys);
  EXPECT_EQ(g.times, f.times);
  EXPECT_EQ(g.slices, f.slices);
  write_field(g, p2);
  EXPECT_EQ(slurp(p1), slurp(p2));
}

TEST(FieldIo, DistinctErrorKinds) {
  const auto s = SystemSpec::make(SystemKind::Air3D);
  const auto f = solve_brt(s, Grid::for_system(s, {11, 11, 10}));
  const auto good = temp_path("field_good.bin"), bad = temp_path("field_bad.bin");
  write_field(f, good);
  const std::string bytes = slurp(good);
  auto kind_of = [&](const std::string& b) {
    spit(bad, b);
    try {
      read_field(bad);
    } catch (const FormatError& e) {
      return e.kind();
    }
    ADD_FAILURE() << "no error raised";
    return FormatError::Kind::Io;
  };
  std::string m = bytes;
  m[0] = 'X';
  EXPECT_EQ(kind_of(m), FormatError::Kind::BadMagic);
  EXPECT_EQ(kind_of(bytes.substr(0, bytes.size() - 9)), FormatError::Kind::TruncatedBlob);
  std::string h = bytes;
  h[17] = '#';  // inside the JSON header
  EXPECT_EQ(kind_of(h), FormatError::Kind::MalformedHeader);
  EXPECT_EQ(kind_of(bytes.substr(0, 12)), FormatError::Kind::MalformedHeader);

  ValueField wrong = f;
  wrong.grid = Grid::for_system(SystemSpec::make(SystemKind::Particle), {3, 3, 3, 3});
  wrong.slices.assign(f.times.size(), std::vector<double>(wrong.grid.size(), 0.0));
  write_field(wrong, bad);
  EXPECT_THROW(
      {
        try {
          read_field(bad);
        } catch (const FormatError& e) {
          EXPECT_EQ(e.kind(), FormatError::Kind::ShapeMismatch);
          throw;
        }
      },
      FormatError);
  EXPECT_THROW(read_field(temp_path("does_not_exist.bin")), FormatError);
}

TEST(Memory, EstimateCoversStoredSlices) {
  const auto s = SystemSpec::make(SystemKind::Particle);
  const auto g = Grid::for_system(s, {21, 21, 21, 21});
  const auto [steps, dt] = time_steps(s, g, 0.5);
  EXPECT_LE(stored_slice_count(steps, auto_store_stride(steps)), 51u);
  EXPECT_GE(estimate_solve_bytes(s, g, 0.5, 0), g.size() * sizeof(double) * 2);
}
