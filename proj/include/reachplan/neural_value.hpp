#pragma once

// Neural value function V_theta(t, x) trained on the HJI residual
//   |dV/dt + min{H(x, grad V), 0}|.
// The network is a sine MLP. Input derivatives are propagated forward as
// tangents, and parameter gradients of the residual loss are obtained by a
// reverse sweep through both the activations and the tangents.

#include <algorithm>
#include <array>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <exception>
#include <fstream>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>

#include "reachplan/dynamics.hpp"
#include "reachplan/errors.hpp"
#include "reachplan/grid_oracle.hpp"
#include "reachplan/rng.hpp"
#include "reachplan/value_model.hpp"

namespace reachplan {

enum class Variant { DeepReach, Bc, BcSym };

inline std::string to_string(Variant v) {
  switch (v) {
    case Variant::DeepReach: return "deepreach";
    case Variant::Bc: return "bc";
    case Variant::BcSym: return "bc_sym";
  }
  return "?";
}

inline Variant parse_variant(std::string_view name) {
  if (name == "deepreach") return Variant::DeepReach;
  if (name == "bc") return Variant::Bc;
  if (name == "bc_sym") return Variant::BcSym;
  throw InvalidInput("unknown variant '" + std::string(name) + "'");
}

struct NetworkArch {
  int hidden_width = 128;
  int hidden_layers = 3;
  double omega0 = 30.0;
  bool operator==(const NetworkArch&) const = default;
};

inline void to_json(nlohmann::json& j, const NetworkArch& a) {
  j = {{"hidden_width", a.hidden_width}, {"hidden_layers", a.hidden_layers}, {"omega0", a.omega0}};
}

inline void from_json(const nlohmann::json& j, NetworkArch& a) {
  a = NetworkArch{};
  a.hidden_width = j.value("hidden_width", a.hidden_width);
  a.hidden_layers = j.value("hidden_layers", a.hidden_layers);
  a.omega0 = j.value("omega0", a.omega0);
}

// ---------------------------------------------------------------------------
// Sine MLP with input tangents

using Mat = Eigen::MatrixXd;
using ColVec = Eigen::VectorXd;
using RowVec = Eigen::RowVectorXd;

/// Parameters (or a gradient with the same shapes): hidden layers, then a linear output row.
struct MlpParams {
  std::vector<Mat> W;
  std::vector<ColVec> b;

  std::size_t size() const {
    std::size_t n = 0;
    for (std::size_t k = 0; k < W.size(); ++k) n += W[k].size() + b[k].size();
    return n;
  }

  MlpParams zeros_like() const {
    MlpParams z;
    for (std::size_t k = 0; k < W.size(); ++k) {
      z.W.push_back(Mat::Zero(W[k].rows(), W[k].cols()));
      z.b.push_back(ColVec::Zero(b[k].size()));
    }
    return z;
  }

  MlpParams& operator+=(const MlpParams& o) {
    for (std::size_t k = 0; k < W.size(); ++k) {
      W[k] += o.W[k];
      b[k] += o.b[k];
    }
    return *this;
  }

  /// Flat copy: per layer, W row-major then b.
  ColVec flat() const {
    ColVec v(static_cast<Eigen::Index>(size()));
    Eigen::Index o = 0;
    for (std::size_t k = 0; k < W.size(); ++k) {
      for (Eigen::Index r = 0; r < W[k].rows(); ++r)
        for (Eigen::Index c = 0; c < W[k].cols(); ++c) v[o++] = W[k](r, c);
      for (Eigen::Index r = 0; r < b[k].size(); ++r) v[o++] = b[k][r];
    }
    return v;
  }

  void set_flat(const ColVec& v) {
    if (v.size() != static_cast<Eigen::Index>(size())) throw InvalidInput("parameter vector has wrong length");
    Eigen::Index o = 0;
    for (std::size_t k = 0; k < W.size(); ++k) {
      for (Eigen::Index r = 0; r < W[k].rows(); ++r)
        for (Eigen::Index c = 0; c < W[k].cols(); ++c) W[k](r, c) = v[o++];
      for (Eigen::Index r = 0; r < b[k].size(); ++r) b[k][r] = v[o++];
    }
  }

  bool all_finite() const {
    for (std::size_t k = 0; k < W.size(); ++k)
      if (!W[k].allFinite() || !b[k].allFinite()) return false;
    return true;
  }
};

/// Forward record for a batch (columns are samples).
struct MlpTape {
  int tangents = 0;
  std::vector<Mat> input;                 // activation entering hidden layer k
  std::vector<std::vector<Mat>> tin;      // tangents entering hidden layer k (k >= 1)
  std::vector<std::vector<Mat>> pre_tan;  // W_k * tangent, per hidden layer
  std::vector<Mat> sin_pre, cos_pre;
  Mat last;                               // final hidden activation
  std::vector<Mat> last_tan;
  RowVec out;                             // N
  Mat out_grad;                           // dN/dz, tangents x batch
};

class SineMlp {
 public:
  SineMlp() = default;

  SineMlp(int input_dim, const NetworkArch& arch, std::uint64_t seed) : input_dim_(input_dim), omega0_(arch.omega0) {
    if (arch.hidden_layers < 1) throw InvalidInput("network needs at least one hidden layer");
    if (arch.hidden_width < 1 || !(arch.omega0 > 0.0)) throw InvalidInput("bad network architecture");
    Rng rng(seed);
    int fan_in = input_dim;
    for (int k = 0; k <= arch.hidden_layers; ++k) {
      const int rows = k < arch.hidden_layers ? arch.hidden_width : 1;
      const double bound = k == 0 ? 1.0 / fan_in : std::sqrt(6.0 / fan_in) / omega0_;
      Mat w(rows, fan_in);
      for (Eigen::Index r = 0; r < w.rows(); ++r)
        for (Eigen::Index c = 0; c < w.cols(); ++c) w(r, c) = rng.uniform(-bound, bound);
      ColVec b(rows);
      for (Eigen::Index r = 0; r < rows; ++r) b[r] = rng.uniform(-bound, bound);
      p_.W.push_back(std::move(w));
      p_.b.push_back(std::move(b));
      fan_in = rows;
    }
  }

  int input_dim() const { return input_dim_; }
  int hidden_layers() const { return static_cast<int>(p_.W.size()) - 1; }
  int hidden_width() const { return static_cast<int>(p_.W[0].rows()); }
  double omega0() const { return omega0_; }
  const MlpParams& params() const { return p_; }
  MlpParams& params() { return p_; }

  /// Forward pass over a batch z (input_dim x B). With tangents, also dN/dz.
  void forward(const Mat& z, bool with_tangents, MlpTape& tape) const {
    const int L = hidden_layers();
    const Eigen::Index B = z.cols();
    const int nt = with_tangents ? input_dim_ : 0;
    tape.tangents = nt;
    tape.input.assign(L, Mat());
    tape.tin.assign(L, {});
    tape.pre_tan.assign(L, {});
    tape.sin_pre.assign(L, Mat());
    tape.cos_pre.assign(L, Mat());
    tape.input[0] = z;
    Mat x = z;
    std::vector<Mat> tx;
    for (int k = 0; k < L; ++k) {
      const Mat& W = p_.W[k];
      Mat pre = W * x;
      pre.colwise() += p_.b[k];
      pre *= omega0_;
      Mat s = pre.array().sin().matrix();
      Mat c = pre.array().cos().matrix();
      std::vector<Mat> u(nt), ty(nt);
      for (int j = 0; j < nt; ++j) {
        if (k == 0)
          u[j] = W.col(j).replicate(1, B);
        else
          u[j] = W * tx[j];
        ty[j] = (omega0_ * c.array() * u[j].array()).matrix();
      }
      tape.pre_tan[k] = std::move(u);
      tape.sin_pre[k] = s;
      tape.cos_pre[k] = std::move(c);
      if (k + 1 < L) {
        tape.input[k + 1] = s;
        tape.tin[k + 1] = ty;
      }
      x = std::move(s);
      tx = std::move(ty);
    }
    const Mat& Wo = p_.W[L];
    tape.out = ((Wo * x).array() + p_.b[L][0]).matrix();
    tape.out_grad.resize(nt, B);
    for (int j = 0; j < nt; ++j) tape.out_grad.row(j) = Wo * tx[j];
    tape.last = std::move(x);
    tape.last_tan = std::move(tx);
  }

  /// Reverse sweep: given dLoss/dN (1 x B) and dLoss/d(dN/dz) (tangents x B), accumulate dLoss/dtheta.
  void backward(const MlpTape& tape, const RowVec& sN, const Mat& sG, MlpParams& grad) const {
    const int L = hidden_layers();
    const int nt = tape.tangents;
    const Mat& Wo = p_.W[L];
    grad.W[L].noalias() += sN * tape.last.transpose();
    for (int j = 0; j < nt; ++j) grad.W[L].noalias() += sG.row(j) * tape.last_tan[j].transpose();
    grad.b[L][0] += sN.sum();

    Mat ay = Wo.transpose() * sN;
    std::vector<Mat> aty(nt);
    for (int j = 0; j < nt; ++j) aty[j] = Wo.transpose() * sG.row(j);

    for (int k = L - 1; k >= 0; --k) {
      const auto& s = tape.sin_pre[k].array();
      const auto& c = tape.cos_pre[k].array();
      const double w0 = omega0_;
      Mat P = (ay.array() * (w0 * c)).matrix();
      std::vector<Mat> Q(nt);
      for (int j = 0; j < nt; ++j) {
        P.array() -= aty[j].array() * (w0 * w0) * s * tape.pre_tan[k][j].array();
        Q[j] = (aty[j].array() * (w0 * c)).matrix();
      }
      // pre = omega0 * (W x + b): the omega0 factor is folded into P and Q above.
      grad.W[k].noalias() += P * tape.input[k].transpose();
      for (int j = 0; j < nt; ++j) {
        if (k == 0)
          grad.W[k].col(j) += Q[j].rowwise().sum();
        else
          grad.W[k].noalias() += Q[j] * tape.tin[k][j].transpose();
      }
      grad.b[k] += P.rowwise().sum();
      if (k > 0) {
        ay = p_.W[k].transpose() * P;
        for (int j = 0; j < nt; ++j) aty[j] = p_.W[k].transpose() * Q[j];
      }
    }
  }

 private:
  int input_dim_ = 0;
  double omega0_ = 30.0;
  MlpParams p_;
};

// ---------------------------------------------------------------------------
// Value network

/// Affine map of (t, x) into [-1, 1]^(1 + n).
struct InputNormalization {
  double t_span = 1.0;
  std::vector<double> lo, hi;

  static InputNormalization for_system(const SystemSpec& sys) {
    InputNormalization n;
    n.t_span = sys.horizon;
    for (const auto& b : sys.state_bounds) {
      n.lo.push_back(b.lo);
      n.hi.push_back(b.hi);
    }
    return n;
  }

  double t_scale() const { return 2.0 / t_span; }
  double x_scale(int i) const { return 2.0 / (hi[i] - lo[i]); }
  bool operator==(const InputNormalization&) const = default;
};

/// One query prepared for the network: the point actually fed to it and the
/// mirror signs that map its costate back to the caller's frame.
struct PreparedPoint {
  double t;
  Vec y;      // network-side state (f(x) when dispatched)
  Vec signs;  // +-1 per coordinate; all +1 unless dispatched
};

class ValueNetwork {
 public:
  ValueNetwork() = default;

  ValueNetwork(SystemSpec sys, Variant variant, const NetworkArch& arch, std::uint64_t seed)
      : sys_(std::move(sys)), variant_(variant), arch_(arch), seed_(seed),
        norm_(InputNormalization::for_system(sys_)), mlp_(1 + sys_.joint_dim, arch, seed) {
    sys_.validate();
  }

  const SystemSpec& system() const { return sys_; }
  Variant variant() const { return variant_; }
  const NetworkArch& arch() const { return arch_; }
  std::uint64_t seed() const { return seed_; }
  const InputNormalization& normalization() const { return norm_; }
  const SineMlp& mlp() const { return mlp_; }
  SineMlp& mlp() { return mlp_; }
  bool uses_boundary_form() const { return variant_ != Variant::DeepReach; }

  /// Checks the query and applies the symmetry dispatch.
  PreparedPoint prepare(double t, const Vec& x) const {
    const double tol = 1e-12 * sys_.horizon;
    if (!std::isfinite(t) || t < -tol || t > sys_.horizon + tol) throw InvalidInput("evaluate: t outside [0, T]");
    require_in_bounds(sys_, x, "evaluate");
    PreparedPoint q{std::clamp(t, 0.0, sys_.horizon), wrap_state(sys_, x), Vec::Ones(sys_.joint_dim)};
    if (variant_ == Variant::BcSym && !in_train_region(sys_, q.y)) {
      q.y = symmetry_map(sys_, q.y);
      q.signs = symmetry_signs(sys_);
    }
    return q;
  }

  /// Column of normalized network inputs for a prepared point.
  void write_input(const PreparedPoint& q, Eigen::Ref<ColVec> col) const {
    col[0] = (q.t / norm_.t_span) * 2.0 - 1.0;
    for (int i = 0; i < sys_.joint_dim; ++i) {
      const double y = std::clamp(q.y[i], norm_.lo[i], norm_.hi[i]);
      col[i + 1] = (y - norm_.lo[i]) * norm_.x_scale(i) - 1.0;
    }
  }

  /// Value, time derivative and costate at a batch of prepared points, given the network outputs.
  ValueEval compose(const PreparedPoint& q, double N, const Eigen::Ref<const ColVec>& G) const {
    ValueEval e;
    e.grad = Vec(sys_.joint_dim);
    if (variant_ == Variant::DeepReach) {
      e.value = N;
      e.dvalue_dt = norm_.t_scale() * G[0];
      for (int i = 0; i < sys_.joint_dim; ++i) e.grad[i] = q.signs[i] * norm_.x_scale(i) * G[i + 1];
      return e;
    }
    const double rem = sys_.horizon - q.t;
    const BoundaryEval l = boundary_with_gradient_unchecked(sys_, q.y);
    e.value = l.value + rem * N;
    e.dvalue_dt = -N + rem * norm_.t_scale() * G[0];
    for (int i = 0; i < sys_.joint_dim; ++i) e.grad[i] = q.signs[i] * (l.grad[i] + rem * norm_.x_scale(i) * G[i + 1]);
    return e;
  }

  /// V, dV/dt and grad_x V; exact derivatives of the composite expression.
  ValueEval evaluate(double t, const Vec& x) const {
    const PreparedPoint q = prepare(t, x);
    Mat z(1 + sys_.joint_dim, 1);
    write_input(q, z.col(0));
    MlpTape tape;
    mlp_.forward(z, true, tape);
    return compose(q, tape.out[0], tape.out_grad.col(0));
  }

  /// evaluate() at many states sharing one time.
  std::vector<ValueEval> evaluate_batch(double t, const std::vector<Vec>& xs) const {
    std::vector<ValueEval> out;
    out.reserve(xs.size());
    constexpr std::size_t kChunk = 256;
    MlpTape tape;
    for (std::size_t s = 0; s < xs.size(); s += kChunk) {
      const std::size_t e = std::min(xs.size(), s + kChunk);
      std::vector<PreparedPoint> qs;
      Mat z(1 + sys_.joint_dim, static_cast<Eigen::Index>(e - s));
      for (std::size_t k = s; k < e; ++k) {
        qs.push_back(prepare(t, xs[k]));
        write_input(qs.back(), z.col(static_cast<Eigen::Index>(k - s)));
      }
      mlp_.forward(z, true, tape);
      for (std::size_t k = s; k < e; ++k) {
        const auto c = static_cast<Eigen::Index>(k - s);
        out.push_back(compose(qs[k - s], tape.out[c], tape.out_grad.col(c)));
      }
    }
    return out;
  }

  /// Values only, for many points.
  std::vector<double> values(const std::vector<double>& ts, const std::vector<Vec>& xs) const {
    if (ts.size() != xs.size()) throw InvalidInput("values: ts and xs differ in length");
    std::vector<double> out(ts.size());
    constexpr std::size_t kChunk = 256;
    MlpTape tape;
    for (std::size_t s = 0; s < ts.size(); s += kChunk) {
      const std::size_t e = std::min(ts.size(), s + kChunk);
      std::vector<PreparedPoint> qs;
      Mat z(1 + sys_.joint_dim, static_cast<Eigen::Index>(e - s));
      for (std::size_t k = s; k < e; ++k) {
        qs.push_back(prepare(ts[k], xs[k]));
        write_input(qs.back(), z.col(static_cast<Eigen::Index>(k - s)));
      }
      mlp_.forward(z, false, tape);
      for (std::size_t k = s; k < e; ++k) {
        const double N = tape.out[static_cast<Eigen::Index>(k - s)];
        const auto& q = qs[k - s];
        out[k] = variant_ == Variant::DeepReach ? N
                                                : boundary_with_gradient_unchecked(sys_, q.y).value + (sys_.horizon - q.t) * N;
      }
    }
    return out;
  }

 private:
  SystemSpec sys_;
  Variant variant_ = Variant::Bc;
  NetworkArch arch_;
  std::uint64_t seed_ = 0;
  InputNormalization norm_;
  SineMlp mlp_;
};

static_assert(ValueModel<ValueNetwork>);

inline ValueNetwork init_network(const SystemSpec& sys, Variant variant, const NetworkArch& arch, std::uint64_t seed) {
  return ValueNetwork(sys, variant, arch, seed);
}

// ---------------------------------------------------------------------------
// Residual loss and its parameter gradient

struct ResidualBatch {
  std::vector<double> t;
  std::vector<Vec> x;
};

struct LossTerms {
  double loss = 0.0;           // pde mean + weighted boundary mean
  double pde = 0.0;
  double boundary = 0.0;
  std::vector<double> residuals;
};

namespace detail {

constexpr std::size_t kLossChunk = 128;

// Loss contribution and gradient for samples [s, e) of the pde batch, scaled by w_pde,
// and samples [bs, be) of the terminal batch scaled by w_bc.
inline double loss_chunk(const ValueNetwork& net, const ResidualBatch& pde, std::size_t s, std::size_t e, double w_pde,
                         const std::vector<Vec>& terminal, std::size_t bs, std::size_t be, double w_bc,
                         MlpParams* grad, std::vector<double>* residuals, double* pde_sum, double* bc_sum) {
  const auto& sys = net.system();
  const int n = sys.joint_dim;
  const auto& norm = net.normalization();
  const bool bc_form = net.uses_boundary_form();
  double total = 0.0;
  MlpTape tape;
  if (e > s) {
    const auto B = static_cast<Eigen::Index>(e - s);
    std::vector<PreparedPoint> qs;
    qs.reserve(e - s);
    Mat z(1 + n, B);
    for (std::size_t k = s; k < e; ++k) {
      qs.push_back(net.prepare(pde.t[k], pde.x[k]));
      net.write_input(qs.back(), z.col(static_cast<Eigen::Index>(k - s)));
    }
    net.mlp().forward(z, true, tape);
    RowVec sN = RowVec::Zero(B);
    Mat sG = Mat::Zero(1 + n, B);
    for (Eigen::Index c = 0; c < B; ++c) {
      const auto& q = qs[c];
      const ValueEval ev = net.compose(q, tape.out[c], tape.out_grad.col(c));
      const Vec& x = pde.x[s + c];
      const double H = hamiltonian(sys, x, ev.grad);
      const bool branch = H < 0.0;  // the 0-branch wins ties
      const double r = ev.dvalue_dt + (branch ? H : 0.0);
      if (!std::isfinite(r)) throw NumericalFault("non-finite residual");
      if (residuals) (*residuals)[s + c] = std::abs(r);
      *pde_sum += std::abs(r);
      total += w_pde * std::abs(r);
      if (!grad) continue;
      const double sr = w_pde * sign_or_zero(r);
      const double rem = bc_form ? sys.horizon - q.t : 1.0;
      if (bc_form) sN[c] = -sr;
      sG(0, c) = sr * rem * norm.t_scale();
      if (branch) {
        const Vec dh = hamiltonian_gradient(sys, x, ev.grad);
        for (int i = 0; i < n; ++i) sG(i + 1, c) = sr * dh[i] * q.signs[i] * rem * norm.x_scale(i);
      }
    }
    if (grad) net.mlp().backward(tape, sN, sG, *grad);
  }
  if (be > bs) {
    const auto B = static_cast<Eigen::Index>(be - bs);
    Mat z(1 + n, B);
    std::vector<double> l(be - bs);
    for (std::size_t k = bs; k < be; ++k) {
      const PreparedPoint q = net.prepare(sys.horizon, terminal[k]);
      net.write_input(q, z.col(static_cast<Eigen::Index>(k - bs)));
      l[k - bs] = boundary_value(sys, terminal[k]);
    }
    net.mlp().forward(z, false, tape);
    RowVec sN(B);
    for (Eigen::Index c = 0; c < B; ++c) {
      const double d = tape.out[c] - l[c];
      *bc_sum += std::abs(d);
      total += w_bc * std::abs(d);
      sN[c] = w_bc * sign_or_zero(d);
    }
    if (grad) net.mlp().backward(tape, sN, Mat(0, B), *grad);
  }
  return total;
}

}  // namespace detail

/// Mean residual loss (plus the weighted terminal term when `terminal` is non-empty) and,
/// if requested, its gradient. Work is split into fixed chunks summed in chunk order,
/// so the result does not depend on the worker count.
inline LossTerms loss_and_gradient(const ValueNetwork& net, const ResidualBatch& pde, const std::vector<Vec>& terminal,
                                   double bc_weight, MlpParams* grad, int workers = 1) {
  if (pde.t.size() != pde.x.size()) throw InvalidInput("residual batch: t and x differ in length");
  if (pde.t.empty() && terminal.empty()) throw InvalidInput("residual batch is empty");
  const double w_pde = pde.t.empty() ? 0.0 : 1.0 / static_cast<double>(pde.t.size());
  const double w_bc = terminal.empty() ? 0.0 : bc_weight / static_cast<double>(terminal.size());
  const std::size_t np = (pde.t.size() + detail::kLossChunk - 1) / detail::kLossChunk;
  const std::size_t nb = (terminal.size() + detail::kLossChunk - 1) / detail::kLossChunk;
  const std::size_t chunks = std::max(np, nb);

  LossTerms out;
  out.residuals.assign(pde.t.size(), 0.0);
  std::vector<double> totals(chunks, 0.0), psum(chunks, 0.0), bsum(chunks, 0.0);
  std::vector<MlpParams> grads(grad ? chunks : 0);
  auto run = [&](std::size_t c) {
    const std::size_t s = std::min(pde.t.size(), c * detail::kLossChunk);
    const std::size_t e = std::min(pde.t.size(), s + detail::kLossChunk);
    const std::size_t bs = std::min(terminal.size(), c * detail::kLossChunk);
    const std::size_t be = std::min(terminal.size(), bs + detail::kLossChunk);
    MlpParams* g = nullptr;
    if (grad) {
      grads[c] = net.mlp().params().zeros_like();
      g = &grads[c];
    }
    totals[c] = detail::loss_chunk(net, pde, s, e, w_pde, terminal, bs, be, w_bc, g, &out.residuals, &psum[c], &bsum[c]);
  };
  workers = std::max(1, std::min<int>(workers, static_cast<int>(chunks)));
  if (workers == 1) {
    for (std::size_t c = 0; c < chunks; ++c) run(c);
  } else {
    std::vector<std::exception_ptr> errs(workers);
    {
      std::vector<std::jthread> pool;
      for (int w = 0; w < workers; ++w)
        pool.emplace_back([&, w] {
          try {
            for (std::size_t c = w; c < chunks; c += workers) run(c);
          } catch (...) {
            errs[w] = std::current_exception();
          }
        });
    }
    for (auto& e : errs)
      if (e) std::rethrow_exception(e);
  }
  double ps = 0.0, bsum_all = 0.0;
  for (std::size_t c = 0; c < chunks; ++c) {
    out.loss += totals[c];
    ps += psum[c];
    bsum_all += bsum[c];
    if (grad) {
      if (c == 0)
        *grad = std::move(grads[0]);
      else
        *grad += grads[c];
    }
  }
  out.pde = pde.t.empty() ? 0.0 : ps / static_cast<double>(pde.t.size());
  out.boundary = terminal.empty() ? 0.0 : bsum_all / static_cast<double>(terminal.size());
  return out;
}

/// Per-sample residuals |dV/dt + min{H, 0}| and the loss. For deepreach a non-empty
/// terminal batch adds bc_weight * mean |V(T, x) - l(x)|.
inline LossTerms pde_residual(const ValueNetwork& net, const ResidualBatch& batch, const std::vector<Vec>& terminal = {},
                              double bc_weight = 10.0) {
  if (batch.t.empty()) throw InvalidInput("pde_residual: empty batch");
  return loss_and_gradient(net, batch, net.variant() == Variant::DeepReach ? terminal : std::vector<Vec>{}, bc_weight,
                           nullptr);
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  std::uint64_t sample_budget = 2'000'000;
  int batch_size = 512;
  double learning_rate = 1e-4;
  double lr_decay = 0.5;          // multiply the rate by this ...
  double lr_decay_every = 0.4;    // ... each time this fraction of the steps has passed
  double curriculum_fraction = 0.5;  // window reaches [0, T] after this fraction of the steps
  double bc_weight = 10.0;        // deepreach terminal term
  double bc_fraction = 0.25;      // deepreach terminal sub-batch, as a fraction of batch_size
  std::uint64_t seed = 0;
  Variant variant = Variant::Bc;
  NetworkArch arch;
  int validate_every = 0;         // steps; 0 = only at the end
  int log_every = 50;
  int workers = 1;
  bool record_wall_time = true;
  double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;

  void validate() const {
    auto fail = [](const std::string& m) { throw InvalidInput("TrainConfig: " + m); };
    if (sample_budget == 0) fail("sample budget must be positive");
    if (batch_size < 2) fail("batch size must be at least 2");
    if (!(learning_rate > 0.0) || !(lr_decay > 0.0 && lr_decay <= 1.0) || !(lr_decay_every > 0.0))
      fail("bad learning-rate schedule");
    if (!(curriculum_fraction >= 0.0 && curriculum_fraction <= 1.0)) fail("curriculum fraction must be in [0, 1]");
    if (!(bc_fraction > 0.0 && bc_fraction < 1.0) || !(bc_weight >= 0.0)) fail("bad boundary term settings");
    if (validate_every < 0 || log_every < 1 || workers < 1) fail("bad cadence or worker count");
  }

  /// Steps are set by the budget at the full batch, identical for all variants.
  std::uint64_t steps() const { return std::max<std::uint64_t>(1, sample_budget / static_cast<std::uint64_t>(batch_size)); }

  /// Samples drawn per step: bc_sym draws half a batch.
  int pde_batch() const {
    switch (variant) {
      case Variant::DeepReach: return batch_size - terminal_batch();
      case Variant::Bc: return batch_size;
      case Variant::BcSym: return batch_size / 2;
    }
    return batch_size;
  }

  int terminal_batch() const {
    return variant == Variant::DeepReach ? std::max(1, static_cast<int>(std::lround(bc_fraction * batch_size))) : 0;
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"sample_budget", c.sample_budget},
       {"batch_size", c.batch_size},
       {"learning_rate", c.learning_rate},
       {"lr_decay", c.lr_decay},
       {"lr_decay_every", c.lr_decay_every},
       {"curriculum_fraction", c.curriculum_fraction},
       {"bc_weight", c.bc_weight},
       {"bc_fraction", c.bc_fraction},
       {"seed", c.seed},
       {"variant", to_string(c.variant)},
       {"arch", c.arch},
       {"validate_every", c.validate_every},
       {"log_every", c.log_every},
       {"workers", c.workers},
       {"record_wall_time", c.record_wall_time},
       {"adam", {{"beta1", c.beta1}, {"beta2", c.beta2}, {"eps", c.adam_eps}}}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  c = TrainConfig{};
  c.sample_budget = j.value("sample_budget", c.sample_budget);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.lr_decay = j.value("lr_decay", c.lr_decay);
  c.lr_decay_every = j.value("lr_decay_every", c.lr_decay_every);
  c.curriculum_fraction = j.value("curriculum_fraction", c.curriculum_fraction);
  c.bc_weight = j.value("bc_weight", c.bc_weight);
  c.bc_fraction = j.value("bc_fraction", c.bc_fraction);
  c.seed = j.value("seed", c.seed);
  if (j.contains("variant")) c.variant = parse_variant(j.at("variant").get<std::string>());
  if (j.contains("arch")) c.arch = j.at("arch").get<NetworkArch>();
  c.validate_every = j.value("validate_every", c.validate_every);
  c.log_every = j.value("log_every", c.log_every);
  c.workers = j.value("workers", c.workers);
  c.record_wall_time = j.value("record_wall_time", c.record_wall_time);
  if (j.contains("adam")) {
    const auto& a = j.at("adam");
    c.beta1 = a.value("beta1", c.beta1);
    c.beta2 = a.value("beta2", c.beta2);
    c.adam_eps = a.value("eps", c.adam_eps);
  }
}

struct TrainLogRow {
  std::uint64_t step = 0;
  double window = 0.0;
  double loss = 0.0;
  std::optional<double> val_error;
  std::uint64_t samples = 0;
  double wall_seconds = 0.0;
};

struct TrainResult {
  ValueNetwork net;
  std::vector<TrainLogRow> log;
  std::uint64_t steps = 0;
  std::uint64_t samples = 0;
  double wall_seconds = 0.0;
};

using Validator = std::function<double(const ValueNetwork&)>;

/// Curriculum window [T - window, T] at a step.
inline double curriculum_window(const TrainConfig& cfg, double horizon, std::uint64_t step) {
  const double ramp = cfg.curriculum_fraction * static_cast<double>(cfg.steps());
  if (ramp <= 0.0) return horizon;
  return horizon * std::min(1.0, static_cast<double>(step) / ramp);
}

inline double learning_rate_at(const TrainConfig& cfg, std::uint64_t step) {
  const auto period = std::max<std::uint64_t>(1, static_cast<std::uint64_t>(cfg.lr_decay_every * static_cast<double>(cfg.steps())));
  return cfg.learning_rate * std::pow(cfg.lr_decay, static_cast<double>(step / period));
}

/// The residual and terminal batches of one step. Each step draws from its own stream,
/// so a resumed run sees the same samples as an uninterrupted one.
inline std::pair<ResidualBatch, std::vector<Vec>> draw_training_batch(const SystemSpec& sys, const TrainConfig& cfg,
                                                                      std::uint64_t step) {
  Rng rng(derive_seed(derive_seed(cfg.seed, 2), step));
  const double window = curriculum_window(cfg, sys.horizon, step);
  ResidualBatch b;
  const int n = cfg.pde_batch();
  for (int k = 0; k < n; ++k) {
    b.t.push_back(sys.horizon - window * rng.uniform());
    Vec x = sample_state(sys, rng);
    // bc_sym samples X_train only; f maps the other half onto it uniformly.
    if (cfg.variant == Variant::BcSym && !in_train_region(sys, x)) x = symmetry_map(sys, x);
    b.x.push_back(std::move(x));
  }
  std::vector<Vec> terminal;
  for (int k = 0; k < cfg.terminal_batch(); ++k) terminal.push_back(sample_state(sys, rng));
  return {std::move(b), std::move(terminal)};
}

/// Adam with step decay on the residual loss. `resume` warm-starts from a network
/// (fresh optimizer state) and continues the schedule at `start_step`.
inline TrainResult train(const SystemSpec& sys, const TrainConfig& cfg, const Validator& validator = {},
                         const ValueNetwork* resume = nullptr, std::uint64_t start_step = 0) {
  cfg.validate();
  sys.validate();
  TrainResult res;
  if (resume) {
    if (!(resume->system() == sys)) throw InvalidInput("train: resume network was trained for a different system");
    if (resume->variant() != cfg.variant) throw InvalidInput("train: resume network has a different variant");
    res.net = *resume;
  } else {
    res.net = init_network(sys, cfg.variant, cfg.arch, derive_seed(cfg.seed, 1));
  }
  const auto t0 = std::chrono::steady_clock::now();
  auto wall = [&] {
    return cfg.record_wall_time ? std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() : 0.0;
  };
  auto& params = res.net.mlp().params();
  MlpParams m = params.zeros_like(), v = params.zeros_like(), grad;
  const std::uint64_t steps = cfg.steps();
  const std::uint64_t per_step = static_cast<std::uint64_t>(cfg.pde_batch() + cfg.terminal_batch());
  res.samples = start_step * per_step;
  double b1t = 1.0, b2t = 1.0;
  double running = 0.0;
  int running_n = 0;
  for (std::uint64_t step = start_step; step < steps; ++step) {
    const auto [batch, terminal] = draw_training_batch(sys, cfg, step);
    const LossTerms lt = loss_and_gradient(res.net, batch, terminal, cfg.bc_weight, &grad, cfg.workers);
    if (!std::isfinite(lt.loss)) {
      std::ostringstream os;
      os << "train: non-finite loss at step " << step;
      throw NumericalFault(os.str());
    }
    res.samples += per_step;
    running += lt.loss;
    ++running_n;

    const double lr = learning_rate_at(cfg, step);
    b1t *= cfg.beta1;
    b2t *= cfg.beta2;
    for (std::size_t k = 0; k < params.W.size(); ++k) {
      auto update = [&](auto& P, auto& M, auto& V, const auto& G) {
        M = cfg.beta1 * M + (1.0 - cfg.beta1) * G;
        V = cfg.beta2 * V + (1.0 - cfg.beta2) * G.cwiseProduct(G);
        P.array() -= lr * (M.array() / (1.0 - b1t)) / ((V.array() / (1.0 - b2t)).sqrt() + cfg.adam_eps);
      };
      update(params.W[k], m.W[k], v.W[k], grad.W[k]);
      update(params.b[k], m.b[k], v.b[k], grad.b[k]);
    }
    if (!params.all_finite()) {
      std::ostringstream os;
      os << "train: non-finite parameter after step " << step;
      throw NumericalFault(os.str());
    }

    const std::uint64_t done = step + 1;
    const bool last = done == steps;
    const bool val = validator && (last || (cfg.validate_every > 0 && done % cfg.validate_every == 0));
    if (last || val || done % cfg.log_every == 0) {
      TrainLogRow row{done, curriculum_window(cfg, sys.horizon, step), running / running_n, std::nullopt, res.samples, wall()};
      if (val) row.val_error = validator(res.net);
      res.log.push_back(row);
      running = 0.0;
      running_n = 0;
    }
  }
  res.steps = steps;
  res.wall_seconds = wall();
  return res;
}

inline std::string train_log_csv(const std::vector<TrainLogRow>& log, bool header = true) {
  std::ostringstream os;
  os.precision(9);
  if (header) os << "step,window,loss,val_error,samples,wall_seconds\n";
  for (const auto& r : log) {
    os << r.step << ',' << r.window << ',' << r.loss << ',';
    if (r.val_error) os << *r.val_error;
    os << ',' << r.samples << ',' << r.wall_seconds << '\n';
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Validation against the grid oracle

struct ValidationReport {
  double mean_abs_error = 0.0;     // over all samples
  double mean_abs_error_t0 = 0.0;  // over the t = 0 half
  int samples = 0;
};

/// Samples (t, x) uniformly from the state box, half of them at t = 0 and half with t ~ U[0, T],
/// and compares any value model with the oracle interpolant.
template <class Model>
ValidationReport validate_model(const Model& model, const ValueField& field, int n, std::uint64_t seed) {
  if (n < 2) throw InvalidInput("validate: need at least 2 samples");
  if (!(model.system() == field.sys)) throw InvalidInput("validate: model and oracle describe different systems");
  Rng rng(seed);
  std::vector<double> ts(n);
  std::vector<Vec> xs(n);
  for (int k = 0; k < n; ++k) {
    ts[k] = k % 2 == 0 ? 0.0 : rng.uniform(0.0, field.sys.horizon);
    xs[k] = sample_state(field.sys, rng);
  }
  std::vector<double> vals;
  if constexpr (requires { model.values(ts, xs); }) {
    vals = model.values(ts, xs);
  } else {
    for (int k = 0; k < n; ++k) vals.push_back(model.evaluate(ts[k], xs[k]).value);
  }
  ValidationReport r;
  r.samples = n;
  int n0 = 0;
  for (int k = 0; k < n; ++k) {
    const double e = std::abs(vals[k] - sample_value(field, ts[k], xs[k]));
    r.mean_abs_error += e;
    if (k % 2 == 0) {
      r.mean_abs_error_t0 += e;
      ++n0;
    }
  }
  r.mean_abs_error /= n;
  r.mean_abs_error_t0 /= n0;
  return r;
}

inline ValidationReport validate_against_oracle(const ValueNetwork& net, const ValueField& field, int n, std::uint64_t seed) {
  return validate_model(net, field, n, seed);
}

// ---------------------------------------------------------------------------
// Checkpoints: "RPVNET01", u64 LE header length, JSON header, f32 LE parameter blob.

namespace detail {
inline constexpr char kNetMagic[8] = {'R', 'P', 'V', 'N', 'E', 'T', '0', '1'};
}

struct CheckpointInfo {
  std::uint64_t step = 0;
  std::uint64_t samples = 0;
};

inline void save_checkpoint(const ValueNetwork& net, const std::string& path, const CheckpointInfo& info = {}) {
  const auto& mlp = net.mlp();
  const auto& norm = net.normalization();
  const nlohmann::json header{{"format", "reachplan.value_network"},
                              {"version", 1},
                              {"dtype", "f32le"},
                              {"layout", "per layer: W row-major, then b"},
                              {"input_dim", mlp.input_dim()},
                              {"arch", net.arch()},
                              {"variant", to_string(net.variant())},
                              {"system", net.system()},
                              {"normalization", {{"t_span", norm.t_span}, {"lo", norm.lo}, {"hi", norm.hi}}},
                              {"seed", net.seed()},
                              {"step", info.step},
                              {"samples", info.samples},
                              {"parameter_count", mlp.params().size()}};
  const std::string h = header.dump();
  const ColVec flat = mlp.params().flat();
  std::vector<float> blob(static_cast<std::size_t>(flat.size()));
  for (Eigen::Index k = 0; k < flat.size(); ++k) blob[static_cast<std::size_t>(k)] = static_cast<float>(flat[k]);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError(FormatError::Kind::Io, "cannot open " + path + " for writing");
  os.write(detail::kNetMagic, sizeof detail::kNetMagic);
  detail::write_u64(os, h.size());
  os.write(h.data(), static_cast<std::streamsize>(h.size()));
  os.write(reinterpret_cast<const char*>(blob.data()), static_cast<std::streamsize>(blob.size() * sizeof(float)));
  if (!os) throw FormatError(FormatError::Kind::Io, "write failed for " + path);
}

/// Loads a checkpoint. With `expected`, a different system is rejected.
inline ValueNetwork load_checkpoint(const std::string& path, const SystemSpec* expected = nullptr,
                                    CheckpointInfo* info = nullptr) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError(FormatError::Kind::Io, "cannot open " + path);
  char magic[8];
  is.read(magic, sizeof magic);
  if (!is || std::memcmp(magic, detail::kNetMagic, sizeof magic) != 0)
    throw FormatError(FormatError::Kind::BadMagic, path + ": not a value-network checkpoint");
  std::uint64_t hlen = 0;
  if (!detail::read_u64(is, hlen) || hlen > (1u << 24)) throw FormatError(FormatError::Kind::MalformedHeader, path + ": bad header length");
  std::string h(hlen, '\0');
  is.read(h.data(), static_cast<std::streamsize>(hlen));
  if (!is) throw FormatError(FormatError::Kind::MalformedHeader, path + ": truncated header");

  SystemSpec sys;
  Variant variant{};
  NetworkArch arch;
  std::uint64_t seed = 0, count = 0;
  int input_dim = 0;
  InputNormalization norm;
  CheckpointInfo ci;
  try {
    const auto j = nlohmann::json::parse(h);
    if (j.at("format") != "reachplan.value_network" || j.at("dtype") != "f32le") throw InvalidInput("wrong format tag");
    sys = j.at("system").get<SystemSpec>();
    variant = parse_variant(j.at("variant").get<std::string>());
    arch = j.at("arch").get<NetworkArch>();
    seed = j.at("seed").get<std::uint64_t>();
    input_dim = j.at("input_dim").get<int>();
    count = j.at("parameter_count").get<std::uint64_t>();
    const auto& nj = j.at("normalization");
    norm.t_span = nj.at("t_span").get<double>();
    norm.lo = nj.at("lo").get<std::vector<double>>();
    norm.hi = nj.at("hi").get<std::vector<double>>();
    ci.step = j.value("step", std::uint64_t{0});
    ci.samples = j.value("samples", std::uint64_t{0});
    sys.validate();
  } catch (const std::exception& e) {
    throw FormatError(FormatError::Kind::MalformedHeader, path + ": " + e.what());
  }
  if (expected && !(*expected == sys))
    throw FormatError(FormatError::Kind::SystemMismatch, path + ": checkpoint was trained for a different system");

  ValueNetwork net;
  try {
    net = ValueNetwork(sys, variant, arch, seed);
  } catch (const InvalidInput& e) {
    throw FormatError(FormatError::Kind::ShapeMismatch, path + ": " + e.what());
  }
  if (input_dim != 1 + sys.joint_dim || count != net.mlp().params().size() || !(norm == net.normalization()))
    throw FormatError(FormatError::Kind::ShapeMismatch, path + ": header shapes are inconsistent");

  std::vector<float> blob(count);
  is.read(reinterpret_cast<char*>(blob.data()), static_cast<std::streamsize>(count * sizeof(float)));
  if (!is) throw FormatError(FormatError::Kind::TruncatedBlob, path + ": parameter blob is truncated");
  if (is.peek() != std::char_traits<char>::eof())
    throw FormatError(FormatError::Kind::ShapeMismatch, path + ": trailing bytes after the parameter blob");
  ColVec flat(static_cast<Eigen::Index>(count));
  for (std::size_t k = 0; k < count; ++k) flat[static_cast<Eigen::Index>(k)] = blob[k];
  if (!flat.allFinite()) throw FormatError(FormatError::Kind::MalformedHeader, path + ": non-finite parameters");
  net.mlp().params().set_flat(flat);
  if (info) *info = ci;
  return net;
}

}  // namespace reachplan
