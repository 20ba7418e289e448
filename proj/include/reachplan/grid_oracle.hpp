#pragma once

// Grid level-set solver for the HJI backward reachable tube:
//   dV/dt + min{H(x, grad V), 0} = 0,  V(T, x) = l(x),
// integrated backward from T with a first-order Lax-Friedrichs scheme.

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "reachplan/dynamics.hpp"
#include "reachplan/errors.hpp"
#include "reachplan/value_model.hpp"

namespace reachplan {

class Grid {
 public:
  Grid() = default;

  Grid(std::vector<int> counts, std::vector<Interval> bounds, std::vector<bool> periodic)
      : counts_(std::move(counts)), bounds_(std::move(bounds)), periodic_(std::move(periodic)) {
    const std::size_t d = counts_.size();
    if (d == 0 || d > static_cast<std::size_t>(kMaxJointDim) || bounds_.size() != d || periodic_.size() != d)
      throw InvalidInput("Grid: inconsistent dimensions");
    spacing_.resize(d);
    strides_.assign(d, 1);
    for (std::size_t i = 0; i < d; ++i) {
      if (counts_[i] < 3) throw InvalidInput("Grid: need at least 3 nodes per dimension");
      const double w = bounds_[i].width();
      if (!(w > 0.0)) throw InvalidInput("Grid: empty bounds");
      // Periodic dims drop the duplicate endpoint.
      spacing_[i] = periodic_[i] ? w / counts_[i] : w / (counts_[i] - 1);
    }
    for (std::size_t i = d - 1; i-- > 0;) strides_[i] = strides_[i + 1] * static_cast<std::size_t>(counts_[i + 1]);
  }

  static Grid for_system(const SystemSpec& sys, const std::vector<int>& counts) {
    if (static_cast<int>(counts.size()) != sys.joint_dim) throw InvalidInput("Grid: counts must match joint_dim");
    return Grid(counts, sys.state_bounds, sys.periodic);
  }

  int dims() const { return static_cast<int>(counts_.size()); }
  int count(int i) const { return counts_[i]; }
  const std::vector<int>& counts() const { return counts_; }
  const std::vector<Interval>& bounds() const { return bounds_; }
  const std::vector<bool>& periodic() const { return periodic_; }
  double spacing(int i) const { return spacing_[i]; }
  double max_spacing() const { return *std::max_element(spacing_.begin(), spacing_.end()); }
  std::size_t stride(int i) const { return strides_[i]; }

  std::size_t size() const {
    std::size_t n = 1;
    for (int c : counts_) n *= static_cast<std::size_t>(c);
    return n;
  }

  // Written so that nodes mirrored about the centre of the box are exact negatives of each other.
  double coord(int i, int k) const {
    const auto& b = bounds_[i];
    const double n = periodic_[i] ? counts_[i] : counts_[i] - 1;
    const double c = 0.5 * (b.lo + b.hi), r = 0.5 * b.width();
    return c + r * ((2.0 * k - n) / n);
  }

  Vec node(std::size_t flat) const {
    Vec x(dims());
    for (int i = 0; i < dims(); ++i) {
      const int k = static_cast<int>((flat / strides_[i]) % static_cast<std::size_t>(counts_[i]));
      x[i] = coord(i, k);
    }
    return x;
  }

  bool operator==(const Grid&) const = default;

 private:
  std::vector<int> counts_;
  std::vector<Interval> bounds_;
  std::vector<bool> periodic_;
  std::vector<double> spacing_;
  std::vector<std::size_t> strides_;
};

/// Stored time slices of V on a grid, in ascending time order (t_0 = 0, t_K = T).
struct ValueField {
  Grid grid;
  SystemSpec sys;
  std::vector<double> times;
  std::vector<std::vector<double>> slices;

  double horizon() const { return times.back(); }
};

struct SolveStats {
  int steps = 0;
  double dt = 0.0;
  std::vector<double> dissipation;  // alpha_i
};

/// Per-dimension bounds on |dH/dp_i| over the grid; these set the time step.
inline std::vector<double> dissipation_coefficients(const SystemSpec& sys, const Grid& grid) {
  const double ub = sys.control_bound;
  switch (sys.kind) {
    case SystemKind::Particle:
    case SystemKind::SimpleArm: return std::vector<double>(sys.joint_dim, ub);
    case SystemKind::Air3D: {
      const auto& a = sys.air3d;
      auto max_abs = [&](int i) { return std::max(std::abs(grid.bounds()[i].lo), std::abs(grid.bounds()[i].hi)); };
      return {a.evader_speed + a.pursuer_speed + a.turn_bound * max_abs(1), a.pursuer_speed + a.turn_bound * max_abs(0),
              2.0 * a.turn_bound};
    }
  }
  return {};
}

/// Number of backward steps and the step size for a given CFL number.
inline std::pair<int, double> time_steps(const SystemSpec& sys, const Grid& grid, double cfl) {
  const auto alpha = dissipation_coefficients(sys, grid);
  double rate = 0.0;
  for (int i = 0; i < grid.dims(); ++i) rate += alpha[i] / grid.spacing(i);
  const double dt_cfl = cfl / rate;
  const int steps = std::max(1, static_cast<int>(std::ceil(sys.horizon / dt_cfl - 1e-12)));
  return {steps, sys.horizon / steps};
}

/// Default stride keeping at most 50 stored slices.
inline int auto_store_stride(int steps) { return std::max(1, (steps + 48) / 49); }

inline std::size_t stored_slice_count(int steps, int stride) {
  return static_cast<std::size_t>(steps / stride + 1 + (steps % stride != 0 ? 1 : 0));
}

/// Bytes held by a solve: stored slices plus two working arrays.
inline std::size_t estimate_solve_bytes(const SystemSpec& sys, const Grid& grid, double cfl, int store_stride) {
  const auto [steps, dt] = time_steps(sys, grid, cfl);
  const int stride = store_stride > 0 ? store_stride : auto_store_stride(steps);
  return (stored_slice_count(steps, stride) + 2) * grid.size() * sizeof(double);
}

namespace detail {

// Per-solve constants. For Air3D the heading-dependent drift (-v_e + v_p cos x3, v_p sin x3)
// is tabulated per heading node.
struct StepContext {
  const SystemSpec& sys;
  const Grid& grid;
  std::vector<std::array<double, 2>> drift;

  StepContext(const SystemSpec& s, const Grid& g) : sys(s), grid(g) {
    if (s.kind != SystemKind::Air3D) return;
    const auto& a = s.air3d;
    for (int k = 0; k < g.count(2); ++k) {
      const double th = g.coord(2, k);
      drift.push_back({-a.evader_speed + a.pursuer_speed * std::cos(th), a.pursuer_speed * std::sin(th)});
    }
  }
};

// Air3D: max |dH/dp_i| with p_i ranging over {p-, avg, p+} and the other components at the average.
inline double air3d_dissipation(const Air3DParams& a, const std::array<double, 2>& f, const Vec& x, const Vec& p,
                                const Vec& pm, const Vec& pp, int i) {
  const double w = a.turn_bound;
  // u* = w sign(c) with c = x2 p1 - x1 p2 - p3, affine in p_i.
  const double c0 = x[1] * p[0] - x[0] * p[1] - p[2];
  const double slope = i == 0 ? x[1] : (i == 1 ? -x[0] : -1.0);
  const double c[3] = {c0, c0 + slope * (pm[i] - p[i]), c0 + slope * (pp[i] - p[i])};
  double best = 0.0;
  if (i == 2) {
    const double p3[3] = {p[2], pm[2], pp[2]};
    for (int j = 0; j < 3; ++j) best = std::max(best, std::abs(-w * sign_or_zero(p3[j]) - w * sign_or_zero(c[j])));
    return best;
  }
  for (double cj : c) {
    const double u = w * sign_or_zero(cj);
    best = std::max(best, std::abs(i == 0 ? f[0] + u * x[1] : f[1] - u * x[0]));
  }
  return best;
}

// One backward step over nodes [begin, end). Returns false if a non-finite value appeared.
// Dissipation is local (per node and dimension), which keeps the mirror symmetry of the scheme.
// For Particle and SimpleArm |dH/dp_i| = u_bar wherever p_i != 0, so local and global coincide.
inline bool lf_step_range(const StepContext& ctx, const std::vector<double>& v, std::vector<double>& out, double dt,
                          std::size_t begin, std::size_t end) {
  const auto& g = ctx.grid;
  const auto& sys = ctx.sys;
  const bool air = sys.kind == SystemKind::Air3D;
  const int d = g.dims();
  int idx[kMaxJointDim];
  for (int i = 0; i < d; ++i) idx[i] = static_cast<int>((begin / g.stride(i)) % static_cast<std::size_t>(g.count(i)));
  Vec x(d), p(d), pm(d), pp(d);
  bool finite = true;
  for (std::size_t n = begin; n < end; ++n) {
    const double vn = v[n];
    for (int i = 0; i < d; ++i) {
      x[i] = g.coord(i, idx[i]);
      const std::size_t s = g.stride(i);
      const int c = g.count(i);
      const double h = g.spacing(i);
      if (idx[i] > 0 && idx[i] < c - 1) {
        pm[i] = (vn - v[n - s]) / h;
        pp[i] = (v[n + s] - vn) / h;
      } else if (g.periodic()[i]) {
        const std::size_t left = idx[i] > 0 ? n - s : n + (c - 1) * s;
        const std::size_t right = idx[i] < c - 1 ? n + s : n - (c - 1) * s;
        pm[i] = (vn - v[left]) / h;
        pp[i] = (v[right] - vn) / h;
      } else if (idx[i] == 0) {
        pp[i] = (v[n + s] - vn) / h;  // linear extrapolation: one-sided on both sides
        pm[i] = pp[i];
      } else {
        pm[i] = (vn - v[n - s]) / h;
        pp[i] = pm[i];
      }
      p[i] = 0.5 * (pm[i] + pp[i]);
    }
    double ham, diss = 0.0;
    if (air) {
      const auto& f = ctx.drift[idx[2]];
      const double w = sys.air3d.turn_bound;
      ham = p[0] * f[0] + p[1] * f[1] + w * std::abs(x[1] * p[0] - x[0] * p[1] - p[2]) - w * std::abs(p[2]);
      for (int i = 0; i < d; ++i) diss += air3d_dissipation(sys.air3d, f, x, p, pm, pp, i) * 0.5 * (pp[i] - pm[i]);
    } else {
      ham = hamiltonian(sys, x, p);
      for (int i = 0; i < d; ++i) diss += sys.control_bound * 0.5 * (pp[i] - pm[i]);
    }
    const double next = vn + dt * std::min(ham + diss, 0.0);
    finite = finite && std::isfinite(next);
    out[n] = next;
    for (int i = d - 1; i >= 0; --i) {
      if (++idx[i] < g.count(i)) break;
      idx[i] = 0;
    }
  }
  return finite;
}

}  // namespace detail

/// Backward-in-time BRT solve. Stores every `store_stride`-th step plus t = 0 and t = T
/// (store_stride <= 0 picks a stride keeping at most 50 slices).
inline ValueField solve_brt(const SystemSpec& sys, const Grid& grid, double cfl = 0.5, int store_stride = 0,
                            int workers = 1, SolveStats* stats = nullptr) {
  sys.validate();
  if (!(cfl > 0.0 && cfl <= 1.0)) throw InvalidInput("solve_brt: cfl must be in (0, 1]");
  if (grid.dims() != sys.joint_dim) throw InvalidInput("solve_brt: grid/system dimension mismatch");
  for (int i = 0; i < grid.dims(); ++i)
    if (grid.periodic()[i] != sys.periodic[i]) throw InvalidInput("solve_brt: periodic mask mismatch");

  const auto alpha = dissipation_coefficients(sys, grid);
  const auto [steps, dt] = time_steps(sys, grid, cfl);
  const int stride = store_stride > 0 ? store_stride : auto_store_stride(steps);
  const std::size_t n = grid.size();
  workers = std::max(1, workers);

  const detail::StepContext ctx(sys, grid);
  ValueField field{grid, sys, {}, {}};
  std::vector<double> v(n), next(n);
  for (std::size_t k = 0; k < n; ++k) v[k] = boundary_value(sys, grid.node(k));
  field.slices.push_back(v);
  field.times.push_back(sys.horizon);

  for (int step = 1; step <= steps; ++step) {
    bool finite = true;
    if (workers == 1) {
      finite = detail::lf_step_range(ctx, v, next, dt, 0, n);
    } else {
      std::vector<char> ok(workers, 1);
      std::vector<std::jthread> pool;
      const std::size_t chunk = (n + workers - 1) / workers;
      for (int w = 0; w < workers; ++w) {
        const std::size_t b = std::min(n, w * chunk), e = std::min(n, b + chunk);
        pool.emplace_back([&, w, b, e] { ok[w] = detail::lf_step_range(ctx, v, next, dt, b, e); });
      }
      pool.clear();
      for (char c : ok) finite = finite && c;
    }
    const double t = step == steps ? 0.0 : sys.horizon - step * dt;
    if (!finite) {
      std::ostringstream os;
      os << "solve_brt: non-finite value at t = " << t;
      throw NumericalFault(os.str());
    }
    v.swap(next);
    if (step % stride == 0 || step == steps) {
      field.slices.push_back(v);
      field.times.push_back(t);
    }
  }
  std::reverse(field.slices.begin(), field.slices.end());
  std::reverse(field.times.begin(), field.times.end());
  if (stats) *stats = {steps, dt, alpha};
  return field;
}

// ---------------------------------------------------------------------------
// Interpolation

namespace detail {

struct Cell {
  std::size_t base[kMaxJointDim];
  std::size_t next[kMaxJointDim];  // flat offset of the upper neighbour in each dim
  double frac[kMaxJointDim];
};

inline Cell locate(const Grid& g, const Vec& x) {
  Cell c{};
  for (int i = 0; i < g.dims(); ++i) {
    double xi = x[i];
    const auto& b = g.bounds()[i];
    const int cnt = g.count(i);
    if (g.periodic()[i]) {
      xi = wrap_angle(xi);
    } else {
      const double tol = 1e-9 * b.width();
      if (!std::isfinite(xi) || xi < b.lo - tol || xi > b.hi + tol)
        throw InvalidInput("sample_value: coordinate " + std::to_string(i) + " outside grid bounds");
      xi = std::clamp(xi, b.lo, b.hi);
    }
    const double u = (xi - b.lo) / g.spacing(i);
    double k = std::floor(u);
    double f = u - k;
    const double r = std::round(u);
    if (std::abs(u - r) < 1e-9) {  // snap onto nodes so node queries are exact
      k = r;
      f = 0.0;
    }
    int ki = static_cast<int>(k);
    if (g.periodic()[i]) {
      ki = ((ki % cnt) + cnt) % cnt;
      c.base[i] = static_cast<std::size_t>(ki);
      c.next[i] = static_cast<std::size_t>((ki + 1) % cnt);
    } else {
      if (ki >= cnt - 1) {
        ki = cnt - 2;
        f = 1.0;
      }
      if (ki < 0) {
        ki = 0;
        f = 0.0;
      }
      c.base[i] = static_cast<std::size_t>(ki);
      c.next[i] = static_cast<std::size_t>(ki + 1);
    }
    c.frac[i] = f;
  }
  return c;
}

// Multilinear value and spatial gradient from one slice.
inline double interp(const Grid& g, const std::vector<double>& v, const Cell& c, Vec* grad) {
  const int d = g.dims();
  // Recursive lerp order: dim 0 outermost. Corners enumerated by bit mask.
  double corner[1 << kMaxJointDim];
  for (int m = 0; m < (1 << d); ++m) {
    std::size_t flat = 0;
    for (int i = 0; i < d; ++i) flat += ((m >> (d - 1 - i)) & 1 ? c.next[i] : c.base[i]) * g.stride(i);
    corner[m] = v[flat];
  }
  if (grad) {
    grad->setZero(d);
    for (int i = 0; i < d; ++i) {
      double acc = 0.0;
      for (int m = 0; m < (1 << d); ++m) {
        double w = 1.0;
        for (int j = 0; j < d; ++j) {
          if (j == i) continue;
          const bool up = (m >> (d - 1 - j)) & 1;
          w *= up ? c.frac[j] : 1.0 - c.frac[j];
        }
        const bool up = (m >> (d - 1 - i)) & 1;
        acc += (up ? w : -w) * corner[m];
      }
      (*grad)[i] = acc / g.spacing(i);
    }
  }
  // Collapse the last dimension first; a zero fraction reproduces the lower value exactly.
  int count = 1 << d;
  for (int i = d - 1; i >= 0; --i) {
    count >>= 1;
    for (int m = 0; m < count; ++m) corner[m] = corner[2 * m] + c.frac[i] * (corner[2 * m + 1] - corner[2 * m]);
  }
  return corner[0];
}

inline std::pair<std::size_t, double> locate_time(const ValueField& f, double t) {
  const double tol = 1e-12 * f.horizon();
  if (!std::isfinite(t) || t < -tol || t > f.horizon() + tol) throw InvalidInput("sample_value: t outside [0, T]");
  t = std::clamp(t, 0.0, f.horizon());
  const auto it = std::upper_bound(f.times.begin(), f.times.end(), t);
  std::size_t j = it == f.times.begin() ? 0 : static_cast<std::size_t>(it - f.times.begin()) - 1;
  if (j + 1 >= f.times.size()) j = f.times.size() - 2;
  const double w = (t - f.times[j]) / (f.times[j + 1] - f.times[j]);
  return {j, w};
}

}  // namespace detail

/// Multilinear in space, linear in time between stored slices.
inline double sample_value(const ValueField& f, double t, const Vec& x) {
  require_dim(x, f.grid.dims(), "sample_value");
  const auto [j, w] = detail::locate_time(f, t);
  const auto cell = detail::locate(f.grid, x);
  const double a = detail::interp(f.grid, f.slices[j], cell, nullptr);
  if (w == 0.0) return a;
  const double b = detail::interp(f.grid, f.slices[j + 1], cell, nullptr);
  return a + w * (b - a);
}

/// Interpolated value with the derivatives of the interpolant (piecewise).
inline ValueEval sample_value_with_derivatives(const ValueField& f, double t, const Vec& x) {
  require_dim(x, f.grid.dims(), "sample_value");
  const auto [j, w] = detail::locate_time(f, t);
  const auto cell = detail::locate(f.grid, x);
  Vec ga, gb;
  const double a = detail::interp(f.grid, f.slices[j], cell, &ga);
  const double b = detail::interp(f.grid, f.slices[j + 1], cell, &gb);
  return {a + w * (b - a), (b - a) / (f.times[j + 1] - f.times[j]), ga + w * (gb - ga)};
}

/// x belongs to the safe set {V(t, x) > 0}.
inline bool brt_membership(const ValueField& f, double t, const Vec& x) { return sample_value(f, t, x) > 0.0; }

/// Fraction of grid nodes in {V <= 0} at the stored slice `index` (collision cannot be avoided).
inline double brt_volume_fraction(const ValueField& f, std::size_t index = 0) {
  const auto& s = f.slices.at(index);
  std::size_t inside = 0;
  for (double v : s) inside += v <= 0.0 ? 1 : 0;
  return static_cast<double>(inside) / static_cast<double>(s.size());
}

/// Oracle interpolant exposed through the value-model interface.
class FieldValue {
 public:
  explicit FieldValue(const ValueField& field) : field_(&field) {}
  ValueEval evaluate(double t, const Vec& x) const { return sample_value_with_derivatives(*field_, t, x); }
  const SystemSpec& system() const { return field_->sys; }

 private:
  const ValueField* field_;
};

// ---------------------------------------------------------------------------
// Serialization: "RPFIELD1", u64 LE header length, JSON header, f64 LE blob.

namespace detail {

inline constexpr char kFieldMagic[8] = {'R', 'P', 'F', 'I', 'E', 'L', 'D', '1'};

static_assert(std::endian::native == std::endian::little, "blob I/O assumes a little-endian host");

inline void write_u64(std::ostream& os, std::uint64_t v) { os.write(reinterpret_cast<const char*>(&v), sizeof v); }

inline bool read_u64(std::istream& is, std::uint64_t& v) {
  is.read(reinterpret_cast<char*>(&v), sizeof v);
  return static_cast<bool>(is);
}

}  // namespace detail

inline nlohmann::json grid_to_json(const Grid& g) {
  nlohmann::json lo = nlohmann::json::array(), hi = nlohmann::json::array();
  for (const auto& b : g.bounds()) {
    lo.push_back(b.lo);
    hi.push_back(b.hi);
  }
  return {{"counts", g.counts()}, {"lo", lo}, {"hi", hi}, {"periodic", g.periodic()}};
}

inline Grid grid_from_json(const nlohmann::json& j) {
  const auto counts = j.at("counts").get<std::vector<int>>();
  const auto lo = j.at("lo").get<std::vector<double>>();
  const auto hi = j.at("hi").get<std::vector<double>>();
  const auto per = j.at("periodic").get<std::vector<bool>>();
  if (lo.size() != counts.size() || hi.size() != counts.size()) throw InvalidInput("grid JSON: length mismatch");
  std::vector<Interval> b;
  for (std::size_t i = 0; i < counts.size(); ++i) b.push_back({lo[i], hi[i]});
  return Grid(counts, b, per);
}

inline void write_field(const ValueField& f, const std::string& path) {
  nlohmann::json header{{"format", "reachplan.value_field"}, {"version", 1}, {"dtype", "f64le"},
                        {"grid", grid_to_json(f.grid)},      {"system", f.sys}, {"times", f.times}};
  const std::string h = header.dump();
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError(FormatError::Kind::Io, "cannot open " + path + " for writing");
  os.write(detail::kFieldMagic, sizeof detail::kFieldMagic);
  detail::write_u64(os, h.size());
  os.write(h.data(), static_cast<std::streamsize>(h.size()));
  for (const auto& s : f.slices) os.write(reinterpret_cast<const char*>(s.data()), static_cast<std::streamsize>(s.size() * sizeof(double)));
  if (!os) throw FormatError(FormatError::Kind::Io, "write failed for " + path);
}

inline ValueField read_field(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError(FormatError::Kind::Io, "cannot open " + path);
  char magic[8];
  is.read(magic, sizeof magic);
  if (!is || std::memcmp(magic, detail::kFieldMagic, sizeof magic) != 0)
    throw FormatError(FormatError::Kind::BadMagic, path + ": not a value-field file");
  std::uint64_t hlen = 0;
  if (!detail::read_u64(is, hlen) || hlen > (1u << 26)) throw FormatError(FormatError::Kind::MalformedHeader, path + ": bad header length");
  std::string h(hlen, '\0');
  is.read(h.data(), static_cast<std::streamsize>(hlen));
  if (!is) throw FormatError(FormatError::Kind::MalformedHeader, path + ": truncated header");
  ValueField f;
  try {
    const auto header = nlohmann::json::parse(h);
    if (header.at("format") != "reachplan.value_field") throw InvalidInput("wrong format tag");
    f.grid = grid_from_json(header.at("grid"));
    f.sys = header.at("system").get<SystemSpec>();
    f.times = header.at("times").get<std::vector<double>>();
  } catch (const std::exception& e) {
    throw FormatError(FormatError::Kind::MalformedHeader, path + ": " + e.what());
  }
  if (f.times.size() < 2 || f.grid.dims() != f.sys.joint_dim)
    throw FormatError(FormatError::Kind::ShapeMismatch, path + ": header shapes are inconsistent");
  const std::size_t n = f.grid.size();
  f.slices.assign(f.times.size(), std::vector<double>(n));
  for (auto& s : f.slices) {
    is.read(reinterpret_cast<char*>(s.data()), static_cast<std::streamsize>(n * sizeof(double)));
    if (!is) throw FormatError(FormatError::Kind::TruncatedBlob, path + ": value blob is truncated");
  }
  return f;
}

}  // namespace reachplan
