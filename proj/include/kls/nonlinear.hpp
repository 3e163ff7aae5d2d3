#pragma once

// Weakly nonlinear Knudsen-layer solves: the quadratic collision term as a
// precomputed modal tensor on a coarsened velocity grid, Picard iteration
// with contraction-ratio and norm-bound accounting, and a final fine-grid
// correction solve.  The quadratic term Gamma couples every velocity pair,
// so iterates live on the coarse grid; Theorem-style smallness demonstrations
// do not need fine velocity resolution, only a consistent discrete bilinear
// form (the O(delta^2) structure is exact for any fixed one).

#include <kls/boundary.hpp>
#include <kls/collision.hpp>
#include <kls/grids.hpp>
#include <kls/slab.hpp>

#include <algorithm>
#include <complex>
#include <limits>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace kls {

struct NonlinearConfig {
  double delta_max = 0.05;  // calibrated smallness threshold (reported, not asserted)
  double picard_tol = 1e-11;
  int max_picard_iters = 40;
  int coarse_n_r = 8, coarse_n_z = 8, coarse_n_theta = 6;
  int n_mu = 4, n_phi = 8;  // collision-sphere rule: Gauss in mu x uniform azimuth

  void validate() const {
    if (!(delta_max > 0) || !(picard_tol > 0) || max_picard_iters <= 0)
      throw std::invalid_argument("nonlinear: thresholds must be positive");
    if (coarse_n_r < 4 || coarse_n_z < 4 || coarse_n_z % 2 || coarse_n_theta < 4 ||
        coarse_n_theta % 2)
      throw std::invalid_argument("nonlinear: coarse grid too small or odd-sized");
    if (n_mu < 2 || n_phi < 4)
      throw std::invalid_argument("nonlinear: collision-sphere rule too small");
  }
};

// --------------------------------------------------------------------------
// velocity-space interpolation helpers (all at the h = f / sqrt(m) level,
// where the fields are smooth and the Gaussian factors cancel exactly
// through the collision's energy identity)

namespace detail {

struct RZStencil {
  int ir0 = 0, iz0 = 0;
  double wr[4], wz[4];
  bool inside = false;  // false: beyond the node hull, treat the field as zero
};

inline void lagrange4(const Vec& xs, int j0, double x, double* w) {
  for (int a = 0; a < 4; ++a) {
    double num = 1, den = 1;
    for (int b = 0; b < 4; ++b) {
      if (b == a) continue;
      num *= x - xs[j0 + b];
      den *= xs[j0 + a] - xs[j0 + b];
    }
    w[a] = num / den;
  }
}

inline int bracket4(const Vec& xs, double x) {
  int n = static_cast<int>(xs.size());
  int hi = static_cast<int>(std::upper_bound(xs.data(), xs.data() + n, x) - xs.data());
  return std::min(std::max(hi - 2, 0), n - 4);
}

// r: extrapolation toward the axis is allowed (the node set starts off r = 0);
// beyond the outermost node in r or |z| the field is truncated to zero.
inline RZStencil rz_stencil(const VelocityGrid& g, double r, double z) {
  RZStencil st;
  if (r > g.r_nodes[g.n_r - 1] || std::abs(z) > g.z_nodes[g.n_z - 1]) return st;
  st.inside = true;
  st.ir0 = bracket4(g.r_nodes, r);
  st.iz0 = bracket4(g.z_nodes, z);
  lagrange4(g.r_nodes, st.ir0, r, st.wr);
  lagrange4(g.z_nodes, st.iz0, z, st.wz);
  return st;
}

// trigonometric (Dirichlet) interpolation weights on the periodic theta grid;
// exact for every azimuthal mode the grid carries
inline void theta_weights(int n_theta, double theta, double* w) {
  int M = n_theta / 2;
  for (int k = 0; k < n_theta; ++k) {
    double d = theta - 2 * M_PI * k / n_theta;
    double acc = 1.0;
    for (int m = 1; m < M; ++m) acc += 2 * std::cos(m * d);
    acc += std::cos(M * d);
    w[k] = acc / n_theta;
  }
}

}  // namespace detail

// --------------------------------------------------------------------------
// Quadratic collision operator Gamma(a, b) on a coarse grid, precomputed as a
// translation-reduced tensor.  Azimuthal equivariance means only output
// azimuth 0 is assembled; the azimuthal DFT turns the tensor into per-mode
// blocks and evaluation into small complex matrix-vector products.
//
// Conventions: inputs at the h = f/sqrt(m) level, output at the f level.
//   Gamma(a,b)(v) = 1/2 int du dw B(g,w) sqrt(m(u)) [a'b'* + b'a'* - ab* - ba*]
// with B = |g.w| dw/(4 pi), v' = v - (g.w)w, u' = u + (g.w)w, and the exact
// identity sqrt(m(v')m(u')) = sqrt(m(v)m(u)) folding all Gaussians into the
// stored weights.  Assembly is embarrassingly parallel over output nodes.

class GammaOperator {
 public:
  GammaOperator(std::shared_ptr<const VelocityGrid> grid, int n_mu = 4, int n_phi = 8)
      : g_(std::move(grid)) {
    build(n_mu, n_phi);
  }

  const VelocityGrid& grid() const { return *g_; }

  // node-level evaluation: ha, hb of length n_nodes -> f-level Gamma(a,b)
  Vec eval_nodes(const Vec& ha, const Vec& hb) const {
    const VelocityGrid& g = *g_;
    const int P = g.P, nt = g.n_theta;
    Eigen::MatrixXcd A = forward_dft(ha), B = forward_dft(hb);
    Eigen::MatrixXcd out = Eigen::MatrixXcd::Zero(P, nt);
    double ref = A.cwiseAbs().maxCoeff() * B.cwiseAbs().maxCoeff();
    Eigen::VectorXcd c(P * P);
    for (int m1 = 0; m1 < nt; ++m1)
      for (int m2 = 0; m2 < nt; ++m2) {
        double sc = A.col(m1).cwiseAbs().maxCoeff() * B.col(m2).cwiseAbs().maxCoeff();
        double sc2 = B.col(m1).cwiseAbs().maxCoeff() * A.col(m2).cwiseAbs().maxCoeff();
        if (std::max(sc, sc2) < 1e-15 * ref) continue;
        for (int q = 0; q < P; ++q)
          for (int r = 0; r < P; ++r)
            c[q * P + r] = 0.5 * (A(q, m1) * B(r, m2) + B(q, m1) * A(r, m2));
        out.col((m1 + m2) % nt) += blocks_[m1 * nt + m2] * c;
      }
    Vec nodes(g.n_nodes());
    for (int p = 0; p < P; ++p)
      for (int k = 0; k < nt; ++k) {
        std::complex<double> acc = 0;
        for (int m = 0; m < nt; ++m)
          acc += out(p, m) * std::polar(1.0, 2 * M_PI * m * k / nt);
        nodes[p * nt + k] = acc.real();
      }
    return nodes;
  }

  // f-level convenience wrapper
  Vec eval(const Vec& fa, const Vec& fb) const {
    const VelocityGrid& g = *g_;
    Vec ha(fa.size()), hb(fb.size());
    for (int p = 0; p < g.P; ++p)
      for (int k = 0; k < g.n_theta; ++k) {
        int i = p * g.n_theta + k;
        ha[i] = fa[i] / g.sm[p];
        hb[i] = fb[i] / g.sm[p];
      }
    return eval_nodes(ha, hb);
  }

 private:
  std::shared_ptr<const VelocityGrid> g_;
  std::vector<Eigen::MatrixXcd> blocks_;  // (m1, m2) -> P x P^2

  Eigen::MatrixXcd forward_dft(const Vec& h) const {
    const VelocityGrid& g = *g_;
    const int P = g.P, nt = g.n_theta;
    Eigen::MatrixXcd H(P, nt);
    for (int p = 0; p < P; ++p)
      for (int m = 0; m < nt; ++m) {
        std::complex<double> acc = 0;
        for (int k = 0; k < nt; ++k)
          acc += h[p * nt + k] * std::polar(1.0, -2 * M_PI * m * k / nt);
        H(p, m) = acc / static_cast<double>(nt);
      }
    return H;
  }

  void build(int n_mu, int n_phi) {
    const VelocityGrid& g = *g_;
    const int P = g.P, nt = g.n_theta, n = P * nt;

    Rule1D mu_rule = golub_welsch(stieltjes([](double) { return 1.0; }, 0.0, 1.0, n_mu));

    blocks_.assign(nt * nt, Eigen::MatrixXcd::Zero(P, P * P));
    Eigen::MatrixXcd E(nt, nt);  // phase matrix for the (dk, dl) -> (m1, m2) transform
    for (int m = 0; m < nt; ++m)
      for (int k = 0; k < nt; ++k) E(m, k) = std::polar(1.0, 2 * M_PI * m * k / nt);

    Mat T(n, n);
    std::vector<int> idxv(16 * nt), idxu(16 * nt);
    std::vector<double> wv(16 * nt), wu(16 * nt), tw(nt);
    for (int p0 = 0; p0 < P; ++p0) {
      T.setZero();
      const double vx = 0.0, vy = g.R[p0], vz = g.Z[p0];  // output azimuth 0
      for (int q = 0; q < P; ++q) {
        double cw_node = g.node_weight(q) * g.sm[q] * g.sm[q] * g.sm[p0];
        if (cw_node < 1e-24) continue;  // Gaussian-damped tail pair
        for (int k = 0; k < nt; ++k) {
          double th = g.theta(k);
          double ux = g.R[q] * std::sin(th), uy = g.R[q] * std::cos(th), uz = g.Z[q];
          double gx = vx - ux, gy = vy - uy, gz = vz - uz;
          double gn = std::sqrt(gx * gx + gy * gy + gz * gz);
          if (gn < 1e-12) continue;
          // loss is nodal: output node (p0, 0) pairs with the u node
          T(p0 * nt + 0, q * nt + k) -= cw_node * gn / 2;
          // orthonormal frame transverse to g
          double hx = gx / gn, hy = gy / gn, hz = gz / gn;
          double rx = 0, ry = 0, rz = 1;
          if (std::abs(hz) >= 0.9) rx = 1, rz = 0;
          double d = rx * hx + ry * hy + rz * hz;
          double e1x = rx - d * hx, e1y = ry - d * hy, e1z = rz - d * hz;
          double e1n = std::sqrt(e1x * e1x + e1y * e1y + e1z * e1z);
          e1x /= e1n, e1y /= e1n, e1z /= e1n;
          double e2x = hy * e1z - hz * e1y, e2y = hz * e1x - hx * e1z,
                 e2z = hx * e1y - hy * e1x;
          for (int im = 0; im < n_mu; ++im) {
            double mu = mu_rule.x[im], smu = std::sqrt(1 - mu * mu);
            for (int ip = 0; ip < n_phi; ++ip) {
              double ph = 2 * M_PI * (ip + 0.5) / n_phi;
              double ox = mu * hx + smu * (std::cos(ph) * e1x + std::sin(ph) * e2x);
              double oy = mu * hy + smu * (std::cos(ph) * e1y + std::sin(ph) * e2y);
              double oz = mu * hz + smu * (std::cos(ph) * e1z + std::sin(ph) * e2z);
              double proj = gn * mu;
              double vpx = vx - proj * ox, vpy = vy - proj * oy, vpz = vz - proj * oz;
              double upx = ux + proj * ox, upy = uy + proj * oy, upz = uz + proj * oz;
              auto stv = detail::rz_stencil(g, std::hypot(vpx, vpy), vpz);
              auto stu = detail::rz_stencil(g, std::hypot(upx, upy), upz);
              if (!stv.inside || !stu.inside) continue;  // truncated tail
              double W = cw_node * gn * mu * mu_rule.w[im] / n_phi;
              int nv = 0;
              detail::theta_weights(nt, std::atan2(vpx, vpy), tw.data());
              for (int a = 0; a < 4; ++a)
                for (int b = 0; b < 4; ++b) {
                  double wrz = stv.wr[a] * stv.wz[b];
                  int node = ((stv.ir0 + a) * (g.n_z) + (stv.iz0 + b)) * nt;
                  for (int t = 0; t < nt; ++t) {
                    idxv[nv] = node + t;
                    wv[nv++] = wrz * tw[t];
                  }
                }
              int nu = 0;
              detail::theta_weights(nt, std::atan2(upx, upy), tw.data());
              for (int a = 0; a < 4; ++a)
                for (int b = 0; b < 4; ++b) {
                  double wrz = stu.wr[a] * stu.wz[b];
                  int node = ((stu.ir0 + a) * (g.n_z) + (stu.iz0 + b)) * nt;
                  for (int t = 0; t < nt; ++t) {
                    idxu[nu] = node + t;
                    wu[nu++] = wrz * tw[t];
                  }
                }
              for (int a = 0; a < nv; ++a) {
                double wa = W * wv[a];
                double* row = T.data() + idxv[a];  // column-major: row index offset
                for (int b = 0; b < nu; ++b) row[static_cast<long>(idxu[b]) * n] += wa * wu[b];
              }
            }
          }
        }
      }
      // (dk, dl) -> (m1, m2): per radial pair, conjugate the 6x6 azimuthal block
      for (int q = 0; q < P; ++q)
        for (int r = 0; r < P; ++r) {
          Eigen::MatrixXcd sub = T.block(q * nt, r * nt, nt, nt);
          Eigen::MatrixXcd mod = E * sub * E.transpose();
          for (int m1 = 0; m1 < nt; ++m1)
            for (int m2 = 0; m2 < nt; ++m2)
              blocks_[m1 * nt + m2](p0, q * P + r) = mod(m1, m2);
        }
    }
  }
};

// --------------------------------------------------------------------------
// transfers between velocity grids (same vmax), plane by plane at the
// h-level; planes the target grid or operator cannot carry are dropped with
// their sup recorded

inline Mat grid_interp_matrix(const VelocityGrid& from, const VelocityGrid& to) {
  Mat M = Mat::Zero(to.P, from.P);
  for (int p = 0; p < to.P; ++p) {
    auto st = detail::rz_stencil(from, to.R[p], to.Z[p]);
    if (!st.inside) continue;
    for (int a = 0; a < 4; ++a)
      for (int b = 0; b < 4; ++b)
        M(p, (st.ir0 + a) * from.n_z + (st.iz0 + b)) = st.wr[a] * st.wz[b];
  }
  // h-level interpolation: strip the source Gaussian, restore the target one
  return to.sm.asDiagonal() * M * from.sm.cwiseInverse().asDiagonal();
}

inline bool plane_supported(const VelocityGrid& g, PlaneId id, const CollisionOperator* op) {
  if (id.m > g.n_theta / 2) return false;
  if (id.sine && (id.m == 0 || id.m == g.n_theta / 2)) return false;
  return !op || op->has_mode(id.m);
}

inline SlabField transfer_field(const SlabField& from, const VelocityGrid& to,
                                const CollisionOperator* mode_limit = nullptr,
                                double* dropped_sup = nullptr) {
  SlabField out;
  out.grid = &to;
  out.mesh = from.mesh;
  Mat M = grid_interp_matrix(*from.grid, to);
  for (const auto& [id, F] : from.planes) {
    if (!plane_supported(to, id, mode_limit)) {
      if (dropped_sup) *dropped_sup = std::max(*dropped_sup, F.cwiseAbs().maxCoeff());
      continue;
    }
    out.planes.emplace(id, M * F);
  }
  return out;
}

inline Vec transfer_trace(const VelocityGrid& from, const VelocityGrid& to, const Vec& full,
                          const CollisionOperator* mode_limit = nullptr,
                          double* dropped_sup = nullptr) {
  Mat M = grid_interp_matrix(from, to);
  Vec out = Vec::Zero(to.n_nodes());
  for (const auto& [id, amp] : decompose_azimuthal(from, full)) {
    if (!plane_supported(to, id, mode_limit)) {
      if (dropped_sup) *dropped_sup = std::max(*dropped_sup, amp.cwiseAbs().maxCoeff());
      continue;
    }
    Vec a = M * amp;
    for (int p = 0; p < to.P; ++p)
      for (int j = 0; j < to.n_theta; ++j)
        out[p * to.n_theta + j] += a[p] * plane_basis(to, id, j);
  }
  return out;
}

// --------------------------------------------------------------------------
// Picard iteration

struct NonlinearContext {
  std::shared_ptr<const VelocityGrid> grid;       // coarse
  std::shared_ptr<const CollisionOperator> op;    // all azimuthal modes of the grid
  std::shared_ptr<const GammaOperator> gamma;

  static NonlinearContext build(const NonlinearConfig& ncfg, double vmax) {
    ncfg.validate();
    NonlinearContext ctx;
    auto g = std::make_shared<VelocityGrid>(
        VelocityGrid::make(ncfg.coarse_n_r, ncfg.coarse_n_z, vmax, ncfg.coarse_n_theta));
    std::vector<int> modes;
    for (int m = 0; m <= g->n_theta / 2; ++m) modes.push_back(m);
    ctx.op = std::make_shared<CollisionOperator>(*g, modes);
    ctx.gamma = std::make_shared<GammaOperator>(g, ncfg.n_mu, ncfg.n_phi);
    ctx.grid = std::move(g);
    return ctx;
  }
};

struct PicardLog {
  double delta = 0;              // measured weighted smallness of (S, R)
  double gain = 0;               // linear-solve gain C from the first iterate
  double bound = 0;              // 2 C delta / (sigma0 - sigma), sigma = sigma0/2
  std::vector<double> updates;   // weighted norm of f_{i+1} - f_i
  std::vector<double> ratios;    // successive update quotients
  std::vector<double> norms;     // weighted norm of each iterate
  std::vector<char> bound_ok;    // per-iteration norm-bound verdict
  double max_macro_defect = 0;   // worst relative macroscopic content of Gamma pre-projection
  double dropped_sup = 0;        // content lost in inter-grid transfers
  double flux_fix = 0;           // spurious wall mass flux removed after restriction
  int iterations = 0;
  bool converged = false;
  bool diverged = false;
  std::string message;
};

struct NonlinearResult {
  SlabField f;         // fine-grid corrected solution
  SlabField f_coarse;  // converged Picard iterate
  FarField far;        // far field of the corrected solution
  PicardLog log;
  bool converged = false;
};

namespace detail {

// Gamma(f, f), solvability-projected slice by slice
inline SlabField gamma_source(const GammaOperator& G, const CollisionOperator& cop,
                              const SlabField& f, double& max_macro) {
  const VelocityGrid& g = cop.grid;
  SlabField out;
  out.grid = &g;
  out.mesh = f.mesh;
  Vec h(g.n_nodes());
  for (int ix = 0; ix < f.nx(); ++ix) {
    Vec nodes = f.slice(ix);
    for (int p = 0; p < g.P; ++p)
      for (int k = 0; k < g.n_theta; ++k)
        h[p * g.n_theta + k] = nodes[p * g.n_theta + k] / g.sm[p];
    Vec gam = G.eval_nodes(h, h);
    double scale = gam.norm();
    if (scale > 0) {
      Vec pg = cop.project_P(gam);
      max_macro = std::max(max_macro, pg.norm() / scale);
      gam -= pg;
    }
    for (const auto& [id, v] : decompose_azimuthal(g, gam)) out.plane(id).col(ix) = v;
  }
  return out;
}

inline double trace_weight_norm(const VelocityGrid& g, const Vec& full, const WeightSpec& w) {
  double sup = 0;
  for (int p = 0; p < g.P; ++p) {
    double wp = w(g.s2[p]);
    for (int j = 0; j < g.n_theta; ++j)
      sup = std::max(sup, wp * std::abs(full[p * g.n_theta + j]));
  }
  return sup;
}

inline std::pair<SlabField, PicardLog> picard_iterate(const SolverConfig& cfg,
                                                      const NonlinearConfig& ncfg,
                                                      const NonlinearContext& ctx, double alpha,
                                                      const SlabField& Sc, const Vec& Rc,
                                                      double delta) {
  const SlabGrid mesh = Sc.mesh;
  const VelocityGrid& g = *ctx.grid;
  PicardLog log;
  log.delta = delta;

  // Restriction to the coarse grid does not commute with the flux moment, and
  // the density mode makes the wall problem nearly singular, so any spurious
  // injected mass shows up as an unattainable residual floor.  Re-enforce the
  // compatibility condition exactly, the way the volume slices are re-projected.
  Vec Rfix = Rc;
  if (Rfix.size() > 0) {
    Vec carrier = Vec::Zero(Rfix.size());
    for (int p = 0; p < g.P; ++p)
      if (g.Z[p] > 0)
        for (int j = 0; j < g.n_theta; ++j) carrier[p * g.n_theta + j] = g.Z[p] * g.sm[p];
    log.flux_fix = incoming_flux_moment(g, Rfix);
    Rfix -= (log.flux_fix / incoming_flux_moment(g, carrier)) * carrier;
  }

  // The near-singular density mode slows restarted GMRES badly; the coarse
  // problem is small, so a long basis is cheap insurance.
  SolverConfig inner = cfg;
  inner.gmres_restart = std::max(cfg.gmres_restart, 200);

  SlabField fc;
  fc.grid = ctx.grid.get();
  fc.mesh = mesh;
  double prev_update = -1;
  for (int it = 1; it <= ncfg.max_picard_iters; ++it) {
    SlabField src = Sc;
    if (!fc.planes.empty()) {
      SlabField gam = gamma_source(*ctx.gamma, *ctx.op, fc, log.max_macro_defect);
      src = linear_combine(1.0, gam, 1.0, Sc);
    }
    SlabProblem prob(*ctx.op, mesh, alpha);
    prob.set_wall_source(Rfix);
    if (!src.planes.empty()) prob.set_volume_source(src);
    SolveOutcome sol = prob.solve(inner);
    log.iterations = it;
    if (!sol.converged) {
      log.message = "inner linear solve failed: " + sol.message;
      return {std::move(sol.f), std::move(log)};
    }
    SlabField diff = fc.planes.empty() ? sol.f : linear_combine(1.0, sol.f, -1.0, fc);
    double update = weight_norm(diff, cfg.weight, cfg.sigma0 / 2);
    log.updates.push_back(update);
    log.norms.push_back(weight_norm(sol.f, cfg.weight, cfg.sigma0 / 2));
    if (it == 1 && delta > 0) {
      log.gain = log.norms[0] / delta;
      log.bound = 2 * log.gain * delta / (cfg.sigma0 - cfg.sigma0 / 2);
    }
    log.bound_ok.push_back(log.bound == 0 || log.norms.back() <= log.bound * (1 + 1e-9));
    fc = std::move(sol.f);
    if (prev_update > 0) {
      double ratio = update / prev_update;
      log.ratios.push_back(ratio);
      if (ratio >= 1.0 && update > ncfg.picard_tol) {
        log.diverged = true;
        log.message = "Picard iteration diverged (ratio " + std::to_string(ratio) +
                      " at measured delta " + std::to_string(delta) +
                      "); reduce the source amplitude";
        return {std::move(fc), std::move(log)};
      }
    }
    if (update <= ncfg.picard_tol) {
      log.converged = true;
      break;
    }
    prev_update = update;
  }
  if (!log.converged && log.message.empty())
    log.message = "Picard iteration did not reach tolerance";
  return {std::move(fc), std::move(log)};
}

}  // namespace detail

// Nonlinear half-space solve at the first width of cfg.d_schedule: Picard on
// the coarse grid, then one linear fine-grid solve with the converged
// quadratic source lifted onto the fine grid.  S and R live on the fine grid;
// S may be empty (no volume source).  Throws std::invalid_argument when the
// measured smallness exceeds delta_max or the data violate solvability, and
// std::runtime_error when the iteration diverges.
inline NonlinearResult solve_nonlinear(const SolverConfig& cfg, const NonlinearConfig& ncfg,
                                       const NonlinearContext& ctx, const CollisionOperator& op,
                                       double alpha, const SlabField& S, const TraceField& R) {
  cfg.validate();
  ncfg.validate();
  const VelocityGrid& gf = op.grid;
  const SlabGrid mesh = cfg.make_mesh(cfg.d_schedule.front());
  if (!S.planes.empty() && !same_mesh(S.mesh, mesh))
    throw std::invalid_argument("nonlinear: volume source mesh does not match the d-schedule");
  if (R.values.size() != gf.n_nodes())
    throw std::invalid_argument("nonlinear: boundary data length does not match the grid");

  // smallness of the data in the theorem's weighted norms
  double delta = detail::trace_weight_norm(gf, R.values, cfg.weight);
  if (!S.planes.empty()) delta += weight_norm(S, cfg.weight, cfg.sigma0);
  if (delta > ncfg.delta_max)
    throw std::invalid_argument("nonlinear: measured smallness " + std::to_string(delta) +
                                " exceeds delta_max " + std::to_string(ncfg.delta_max));

  // solvability of the data
  {
    std::vector<Vec> slices;
    for (int ix = 0; ix < (S.planes.empty() ? 0 : S.nx()); ++ix) slices.push_back(S.slice(ix));
    SolvabilityReport rep = check_solvability(op, slices, R.values, 1e-8);
    if (!rep.pass)
      throw std::invalid_argument("nonlinear: source data violate the solvability conditions");
  }

  NonlinearResult out;
  // restrict the data to the coarse grid (re-projected for exact solvability)
  double dropped = 0;
  SlabField Sc;
  Sc.grid = ctx.grid.get();
  Sc.mesh = mesh;
  if (!S.planes.empty()) {
    SlabField St = transfer_field(S, *ctx.grid, ctx.op.get(), &dropped);
    for (int ix = 0; ix < St.nx(); ++ix) {
      Vec s = St.slice(ix);
      s -= ctx.op->project_P(s);
      for (const auto& [id, v] : decompose_azimuthal(*ctx.grid, s)) Sc.plane(id).col(ix) = v;
    }
  }
  Vec Rc = transfer_trace(gf, *ctx.grid, R.values, ctx.op.get(), &dropped);

  auto [fc, log] = detail::picard_iterate(cfg, ncfg, ctx, alpha, Sc, Rc, delta);
  out.log = std::move(log);
  out.log.dropped_sup = dropped;
  out.f_coarse = std::move(fc);
  if (out.log.diverged) throw std::runtime_error(out.log.message);
  if (!out.log.converged) return out;

  // fine correction: lift the converged quadratic source, redo the linear solve
  SlabField src_f;
  src_f.grid = &gf;
  src_f.mesh = mesh;
  if (!out.f_coarse.planes.empty()) {
    SlabField gam_c =
        detail::gamma_source(*ctx.gamma, *ctx.op, out.f_coarse, out.log.max_macro_defect);
    SlabField gam_f = transfer_field(gam_c, gf, &op, &out.log.dropped_sup);
    // transfer breaks exact orthogonality; re-project on the fine grid
    for (int ix = 0; ix < gam_f.nx(); ++ix) {
      Vec s = gam_f.slice(ix);
      s -= op.project_P(s);
      for (const auto& [id, v] : decompose_azimuthal(gf, s)) src_f.plane(id).col(ix) = v;
    }
  }
  if (!S.planes.empty())
    src_f = src_f.planes.empty() ? S : linear_combine(1.0, src_f, 1.0, S);
  SlabProblem pf(op, mesh, alpha);
  pf.set_wall_source(R.values);
  if (!src_f.planes.empty()) pf.set_volume_source(src_f);
  SolveOutcome sol = pf.solve(cfg);
  if (!sol.converged) {
    out.log.message = "fine correction solve failed: " + sol.message;
    return out;
  }
  out.f = std::move(sol.f);
  out.far = compute_far_field(op, out.f);
  out.converged = true;
  return out;
}

// spec-shaped convenience overload: builds the coarse context on the fly
inline NonlinearResult solve_nonlinear(const SolverConfig& cfg, const NonlinearConfig& ncfg,
                                       const CollisionOperator& op, double alpha,
                                       const SlabField& S, const TraceField& R) {
  NonlinearContext ctx = NonlinearContext::build(ncfg, op.grid.vmax);
  return solve_nonlinear(cfg, ncfg, ctx, op, alpha, S, R);
}

// --------------------------------------------------------------------------
// studies used by the verification suite and the CLI reports

struct ScalingPoint {
  double t = 0, delta = 0, diff = 0;
  int iterations = 0;
};

struct ScalingStudy {
  std::vector<ScalingPoint> points;
  double exponent = 0;  // fitted slope of log diff vs log t
};

// Nonlinear-minus-linear distance under source scaling.  The linear reference
// is solved once at t = 1 and scaled exactly.
inline ScalingStudy scaling_study(const SolverConfig& cfg, const NonlinearConfig& ncfg,
                                  const NonlinearContext& ctx, const CollisionOperator& op,
                                  double alpha, const SlabField& S0, const TraceField& R0,
                                  const std::vector<double>& ts) {
  const SlabGrid mesh = cfg.make_mesh(cfg.d_schedule.front());
  SlabProblem lin(op, mesh, alpha);
  lin.set_wall_source(R0.values);
  if (!S0.planes.empty()) lin.set_volume_source(S0);
  SolveOutcome ref = lin.solve(cfg);
  if (!ref.converged) throw std::runtime_error("scaling study: linear reference solve failed");

  ScalingStudy study;
  for (double t : ts) {
    SlabField St;
    St.grid = S0.grid;
    St.mesh = S0.mesh;
    if (!S0.planes.empty()) St = linear_combine(t, S0, 0.0, S0);
    TraceField Rt = R0;
    Rt.values *= t;
    NonlinearResult nl = solve_nonlinear(cfg, ncfg, ctx, op, alpha, St, Rt);
    if (!nl.converged) throw std::runtime_error("scaling study: nonlinear solve failed");
    SlabField linear_t = linear_combine(t, ref.f, 0.0, ref.f);
    ScalingPoint pt;
    pt.t = t;
    pt.delta = nl.log.delta;
    pt.diff = sup_difference(nl.f, linear_t);
    pt.iterations = nl.log.iterations;
    study.points.push_back(pt);
  }
  // least-squares slope in log-log
  int n = static_cast<int>(study.points.size());
  if (n >= 2) {
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (const auto& p : study.points) {
      double x = std::log(p.t), y = std::log(std::max(p.diff, 1e-300));
      sx += x, sy += y, sxx += x * x, sxy += x * y;
    }
    study.exponent = (n * sxy - sx * sy) / (n * sxx - sx * sx);
  }
  return study;
}

// Largest measured smallness with every observed contraction ratio <= 1/2:
// scans the given amplitude multipliers (coarse Picard only) and reports the
// last delta before the ratio bound fails.  Divergence ends the scan.
struct DeltaCalibration {
  double delta_max = 0;
  std::vector<double> deltas, worst_ratios;
};

inline DeltaCalibration calibrate_delta_max(const SolverConfig& cfg, const NonlinearConfig& ncfg,
                                            const NonlinearContext& ctx,
                                            const CollisionOperator& op, double alpha,
                                            const SlabField& S0, const TraceField& R0,
                                            const std::vector<double>& scales) {
  const VelocityGrid& gf = op.grid;
  const SlabGrid mesh = cfg.make_mesh(cfg.d_schedule.front());
  DeltaCalibration cal;
  double base_delta = detail::trace_weight_norm(gf, R0.values, cfg.weight);
  if (!S0.planes.empty()) base_delta += weight_norm(S0, cfg.weight, cfg.sigma0);

  double dropped = 0;
  SlabField Sc0 = transfer_field(S0, *ctx.grid, ctx.op.get(), &dropped);
  Sc0.grid = ctx.grid.get();
  Sc0.mesh = mesh;
  Vec Rc0 = transfer_trace(gf, *ctx.grid, R0.values, ctx.op.get(), &dropped);

  NonlinearConfig loose = ncfg;
  loose.delta_max = std::numeric_limits<double>::infinity();
  for (double t : scales) {
    SlabField Sc = Sc0;
    if (!Sc0.planes.empty()) Sc = linear_combine(t, Sc0, 0.0, Sc0);
    auto [fc, log] = detail::picard_iterate(cfg, loose, ctx, alpha, Sc, Vec(t * Rc0),
                                            t * base_delta);
    (void)fc;
    double worst = 0;
    for (double r : log.ratios) worst = std::max(worst, r);
    cal.deltas.push_back(t * base_delta);
    cal.worst_ratios.push_back(worst);
    if (log.diverged || !log.converged || worst > 0.5) break;
    cal.delta_max = t * base_delta;
  }
  return cal;
}

}  // namespace kls
