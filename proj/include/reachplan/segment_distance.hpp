#pragma once

#include <algorithm>
#include <cmath>

#include <Eigen/Core>

namespace reachplan {

using Point2 = Eigen::Vector2d;

struct SegmentClosest {
  double distance;
  double s;  // parameter on the first segment, in [0, 1]
  double t;  // parameter on the second segment, in [0, 1]
  Point2 on_first;
  Point2 on_second;
};

/// Closest points between segments [p0, p1] and [q0, q1] in the plane.
/// Handles degenerate (zero-length) segments and parallel pairs.
inline SegmentClosest closest_points_segments(const Point2& p0, const Point2& p1, const Point2& q0, const Point2& q1) {
  constexpr double kEps = 1e-14;
  const Point2 d1 = p1 - p0;
  const Point2 d2 = q1 - q0;
  const Point2 r = p0 - q0;
  const double a = d1.squaredNorm();
  const double e = d2.squaredNorm();
  const double f = d2.dot(r);

  double s = 0.0;
  double t = 0.0;
  if (a <= kEps && e <= kEps) {
    s = t = 0.0;
  } else if (a <= kEps) {
    t = std::clamp(f / e, 0.0, 1.0);
  } else {
    const double c = d1.dot(r);
    if (e <= kEps) {
      s = std::clamp(-c / a, 0.0, 1.0);
    } else {
      const double b = d1.dot(d2);
      const double denom = a * e - b * b;
      s = denom > kEps * a * e ? std::clamp((b * f - c * e) / denom, 0.0, 1.0) : 0.0;
      t = (b * s + f) / e;
      if (t < 0.0) {
        t = 0.0;
        s = std::clamp(-c / a, 0.0, 1.0);
      } else if (t > 1.0) {
        t = 1.0;
        s = std::clamp((b - c) / a, 0.0, 1.0);
      }
    }
  }
  const Point2 c1 = p0 + s * d1;
  const Point2 c2 = q0 + t * d2;
  return {(c1 - c2).norm(), s, t, c1, c2};
}

}  // namespace reachplan
