#pragma once

// Hard-sphere linearized collision operator L = nu - K on the axisymmetric
// velocity grid, assembled per azimuthal mode:
//
//   f(v_r, theta, v_3) = sum_m fc_m(v_r, v_3) cos(m theta) + fs_m sin(m theta)
//
// K acts diagonally in m with mode matrices K_m built from the azimuthal cosine
// coefficients of the reduced pair kernel.  The kernel k = k2 - k1 uses the
// classical closed forms (angular integrals done analytically); an independent
// Carleman-plane quadrature of the gain kernel serves as a cross-check path.
//
// The assembled form stored per mode is the weighted (symmetric) bilinear
// matrix  A_m = W L_m, with W = diag(w2); all solves are deflated saddle-point
// systems so the discrete null space never degrades conditioning.

#include "grids.hpp"
#include "linalg.hpp"
#include "quadrature.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <map>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace kls {

inline constexpr double kTwoPi = 2.0 * M_PI;
inline constexpr double kC32 = 0.0634936359342409697857633;  // (2 pi)^{-3/2}

// ---------------------------------------------------------------------------
// collision frequency nu(s) = (1/2) int m(u) |v - u| du, closed form
// ---------------------------------------------------------------------------
inline double collision_frequency(double s) {
  if (s < 1e-8) return std::sqrt(2.0 / M_PI) * (1.0 + s * s / 3.0);
  return 0.5 * (std::sqrt(2.0 / M_PI) * std::exp(-s * s / 2) +
                (s + 1.0 / s) * std::erf(s / std::sqrt(2.0)));
}

inline Vec compute_nu(const VelocityGrid& g) {
  Vec nu(g.P);
  for (int p = 0; p < g.P; ++p) nu[p] = collision_frequency(std::sqrt(g.s2[p]));
  return nu;
}

// ---------------------------------------------------------------------------
// reduced pair kernels (loss k1, gain k2) after analytic angular integration;
// arguments: ss2 = |v-u|^2, e2 = (|v|^2-|u|^2)^2, p2 = |v|^2+|u|^2
// ---------------------------------------------------------------------------
inline double pair_kernel_loss(double ss2, double p2) {
  return 0.5 * kC32 * std::sqrt(ss2) * std::exp(-p2 / 4);
}

inline double pair_kernel_gain(double ss2, double e2) {
  double s2 = std::max(ss2, 1e-300);
  return 2.0 * kC32 / std::sqrt(s2) * std::exp(-s2 / 8 - e2 / (8 * s2));
}

inline double pair_kernel(double ss2, double e2, double p2) {
  return pair_kernel_gain(ss2, e2) - pair_kernel_loss(ss2, p2);
}

// Independent evaluation of the gain kernel through the Carleman representation:
//   k2(v,u) = 2 (2pi)^{-5/2} |v-u|^{-1} int_{w in (v-u)^perp} sqrt(m(u+w) m(v+w)) dw
// with the plane integral done by tensor Gauss-Legendre quadrature.
inline double gain_kernel_plane(const std::array<double, 3>& v, const std::array<double, 3>& u,
                                const Rule1D& gl) {
  std::array<double, 3> gvec{v[0] - u[0], v[1] - u[1], v[2] - u[2]};
  double gn = std::sqrt(gvec[0] * gvec[0] + gvec[1] * gvec[1] + gvec[2] * gvec[2]);
  if (gn < 1e-12) return 0.0;
  std::array<double, 3> gh{gvec[0] / gn, gvec[1] / gn, gvec[2] / gn};
  // orthonormal frame (e1, e2) spanning the plane perpendicular to g
  std::array<double, 3> ref = std::abs(gh[2]) < 0.9 ? std::array<double, 3>{0, 0, 1}
                                                    : std::array<double, 3>{1, 0, 0};
  std::array<double, 3> e1{gh[1] * ref[2] - gh[2] * ref[1], gh[2] * ref[0] - gh[0] * ref[2],
                           gh[0] * ref[1] - gh[1] * ref[0]};
  double n1 = std::sqrt(e1[0] * e1[0] + e1[1] * e1[1] + e1[2] * e1[2]);
  for (auto& c : e1) c /= n1;
  std::array<double, 3> e2{gh[1] * e1[2] - gh[2] * e1[1], gh[2] * e1[0] - gh[0] * e1[2],
                           gh[0] * e1[1] - gh[1] * e1[0]};

  const int n = static_cast<int>(gl.x.size());
  double acc = 0.0;
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      double w1 = gl.x[i], w2c = gl.x[j];
      double a2 = 0.0, b2 = 0.0;
      for (int c = 0; c < 3; ++c) {
        double wc = w1 * e1[c] + w2c * e2[c];
        double ac = u[c] + wc, bc = v[c] + wc;
        a2 += ac * ac;
        b2 += bc * bc;
      }
      acc += gl.w[i] * gl.w[j] * std::exp(-(a2 + b2) / 4);
    }
  }
  const double c52 = std::pow(kTwoPi, -2.5);
  return 2.0 * c52 / gn * acc;
}

// ---------------------------------------------------------------------------
// azimuthal quadrature for the cosine coefficients c_m(p,q):
// plain rule away from the coincidence point, geometrically graded rule when
// the (r,z) distance is small (the gain kernel has an integrable 1/|v-u| spike)
// ---------------------------------------------------------------------------
struct DeltaRules {
  Rule1D far;     // 48-point GL on [0, pi]
  Rule1D graded;  // geometric subdivision toward 0: 24 halvings x 12-pt GL + closing panel
  // cos(m * delta) tables, laid out point-major: cos_far[i * 5 + m]
  std::vector<double> cos_far, cos_graded;

  static const DeltaRules& instance() {
    static const DeltaRules rules = build();
    return rules;
  }

 private:
  static DeltaRules build() {
    DeltaRules d;
    d.far = map_to(gauss_legendre(48), 0.0, M_PI);
    Rule1D g12 = gauss_legendre(12);
    std::vector<double> xs, ws;
    double hi = M_PI;
    for (int j = 0; j < 24; ++j) {
      double lo = hi / 2;
      Rule1D seg = map_to(g12, lo, hi);
      xs.insert(xs.end(), seg.x.data(), seg.x.data() + seg.x.size());
      ws.insert(ws.end(), seg.w.data(), seg.w.data() + seg.w.size());
      hi = lo;
    }
    Rule1D seg = map_to(g12, 0.0, hi);
    xs.insert(xs.end(), seg.x.data(), seg.x.data() + seg.x.size());
    ws.insert(ws.end(), seg.w.data(), seg.w.data() + seg.w.size());
    d.graded.x = Eigen::Map<Vec>(xs.data(), xs.size());
    d.graded.w = Eigen::Map<Vec>(ws.data(), ws.size());
    auto tab = [](const Rule1D& r, std::vector<double>& out) {
      out.resize(r.x.size() * 5);
      for (int i = 0; i < r.x.size(); ++i)
        for (int m = 0; m <= 4; ++m) out[i * 5 + m] = std::cos(m * r.x[i]);
    };
    tab(d.far, d.cos_far);
    tab(d.graded, d.cos_graded);
    return d;
  }
};

// ---------------------------------------------------------------------------
// the operator
// ---------------------------------------------------------------------------
class CollisionOperator {
 public:
  static constexpr int kMaxMode = 4;
  static constexpr double kNearD2 = 0.64;  // (r,z) distance^2 below which the graded rule is used

  const VelocityGrid& grid;
  Vec nu;     // collision frequency per (r,z) pair
  Vec gamma;  // diagonal quadrature correction enforcing L sqrt(m) = 0 exactly

  CollisionOperator(const VelocityGrid& g, std::vector<int> modes, int threads = 1)
      : grid(g), nu(compute_nu(g)) {
    for (int m : modes)
      if (m < 0 || m > kMaxMode) throw std::invalid_argument("collision: mode out of range");
    assemble(modes, std::max(1, threads));
  }

  bool has_mode(int m) const { return blocks_.count(m) != 0; }

  // weighted bilinear block A_m = W L_m (symmetric)
  const Mat& bilinear(int m) const {
    auto it = blocks_.find(m);
    if (it == blocks_.end()) throw std::invalid_argument("collision: mode not assembled");
    return it->second;
  }

  // L_m f  (pair-profile application)
  Vec apply_L(int m, const Vec& f) const { return (bilinear(m) * f).cwiseQuotient(grid.w2); }

  Mat Lmat(int m) const { return grid.w2.cwiseInverse().asDiagonal() * bilinear(m); }

  // discrete null profiles of L_m (pair space)
  std::vector<Vec> null_profiles(int m) const {
    const Vec& sm = grid.sm;
    if (m == 0)
      return {sm, grid.Z.cwiseProduct(sm), (0.5 * (grid.s2.array() - 3.0) * sm.array()).matrix()};
    if (m == 1) return {grid.R.cwiseProduct(sm)};
    return {};
  }

  // W-orthogonal projection away from the mode's null profiles
  Vec deflate(int m, const Vec& f) const {
    auto nulls = null_profiles(m);
    if (nulls.empty()) return f;
    const int k = static_cast<int>(nulls.size());
    Mat X(grid.P, k);
    for (int j = 0; j < k; ++j) X.col(j) = nulls[j];
    Mat WX = grid.w2.asDiagonal() * X;
    Mat G = X.transpose() * WX;
    Vec c = G.ldlt().solve(WX.transpose() * f);
    return f - X * c;
  }

  // solve L_m x = rhs with the mode's null profiles deflated (saddle system)
  Vec solve_deflated(int m, const Vec& rhs) const {
    const BorderedSolver& s = factorization(m);
    return s.solve(grid.w2.cwiseProduct(rhs));
  }

  // ---- named pseudo-inverse images and transport coefficients ----
  // stress function: L_2^{-1} (r^2/2 sqrt m)        [A_12 channel]
  const Vec& hat_stress() const { return hat(2); }
  // shear-flow function: L_1^{-1} (r z sqrt m)      [A_13 channel]
  const Vec& hat_shear() const { return hat(1); }
  // heat-flux function: L_0^{-1} ((s^2-5)/2 z sqrt m)  [B_3 channel]
  const Vec& hat_heat() const { return hat(0); }

  double kappa1_stress() const {
    return M_PI * grid.w2.cwiseProduct(source_profile(2)).dot(hat_stress());
  }
  double kappa1_shear() const {
    return M_PI * grid.w2.cwiseProduct(source_profile(1)).dot(hat_shear());
  }
  double kappa2_heat() const {
    return kTwoPi * grid.w2.cwiseProduct(source_profile(0)).dot(hat_heat());
  }

  // ---- full-node fields (length P * n_theta), azimuthal-mode transforms ----
  int n_nodes() const { return grid.n_nodes(); }

  // five collision invariants as full-node fields
  std::vector<Vec> basis_N() const {
    const int nt = grid.n_theta, P = grid.P;
    std::vector<Vec> chi(5, Vec(P * nt));
    for (int p = 0; p < P; ++p) {
      for (int j = 0; j < nt; ++j) {
        int i = p * nt + j;
        double sm = grid.sm[p];
        chi[0][i] = sm;
        chi[1][i] = grid.v1(p, j) * sm;
        chi[2][i] = grid.v2(p, j) * sm;
        chi[3][i] = grid.Z[p] * sm;
        chi[4][i] = 0.5 * (grid.s2[p] - 3.0) * sm;
      }
    }
    return chi;
  }

  // projection of a full-node field onto span(chi_0..chi_4), node-weight inner product
  Vec project_P(const Vec& f) const {
    auto chi = basis_N();
    const int P = grid.P, nt = grid.n_theta;
    Vec nw(P * nt);
    for (int p = 0; p < P; ++p)
      for (int j = 0; j < nt; ++j) nw[p * nt + j] = grid.node_weight(p);
    Mat X(P * nt, 5);
    for (int j = 0; j < 5; ++j) X.col(j) = chi[j];
    Mat WX = nw.asDiagonal() * X;
    Mat G = X.transpose() * WX;
    Vec c = G.ldlt().solve(WX.transpose() * f);
    return X * c;
  }

  // pseudo-inverse of L on a full-node field g (must have negligible P g);
  // solves mode by mode through the azimuthal DFT.
  Vec pseudo_inverse(const Vec& g, double macro_tol = 1e-6) const {
    Vec pg = project_P(g);
    double rel = std::sqrt(pg.squaredNorm() / std::max(g.squaredNorm(), 1e-300));
    if (rel > macro_tol)
      throw std::invalid_argument("pseudo_inverse: input has macroscopic component " +
                                  std::to_string(rel));
    const int P = grid.P, nt = grid.n_theta;
    Vec out = Vec::Zero(P * nt);
    for (int m = 0; m <= std::min(kMaxMode, nt / 2); ++m) {
      for (int part = 0; part < 2; ++part) {  // 0: cos, 1: sin
        if (part == 1 && (m == 0 || 2 * m == nt)) continue;
        Vec prof(P);
        double scale = (m == 0 || 2 * m == nt) ? 1.0 / nt : 2.0 / nt;
        for (int p = 0; p < P; ++p) {
          double acc = 0.0;
          for (int j = 0; j < nt; ++j) {
            double a = m * grid.theta(j);
            acc += g[p * nt + j] * (part == 0 ? std::cos(a) : std::sin(a));
          }
          prof[p] = scale * acc;
        }
        if (prof.lpNorm<Eigen::Infinity>() < 1e-300) continue;
        Vec sol = solve_deflated(m, deflate(m, prof));
        for (int p = 0; p < P; ++p)
          for (int j = 0; j < nt; ++j) {
            double a = m * grid.theta(j);
            out[p * nt + j] += sol[p] * (part == 0 ? std::cos(a) : std::sin(a));
          }
      }
    }
    return out;
  }

  // coercivity constant: smallest Rayleigh quotient <L f, f>_W / <f, f>_{W nu}
  // over N^perp, per assembled mode, via inverse iteration on the saddle system.
  double c0_estimate(int iters = 30) const {
    double c0 = std::numeric_limits<double>::infinity();
    for (const auto& [m, A] : blocks_) {
      Vec x = Vec::Ones(grid.P);
      for (int p = 0; p < grid.P; ++p) x[p] += 0.3 * std::sin(7.1 * p + m);
      x = deflate(m, x);
      const BorderedSolver& s = factorization(m);
      Vec wnu = grid.w2.cwiseProduct(nu);
      for (int it = 0; it < iters; ++it) {
        Vec y = s.solve(wnu.cwiseProduct(x));
        y = deflate(m, y);
        double n = std::sqrt(y.dot(wnu.cwiseProduct(y)));
        if (n < 1e-300) break;
        x = y / n;
      }
      double lam = x.dot(A * x) / x.dot(wnu.cwiseProduct(x));
      c0 = std::min(c0, lam);
    }
    return c0;
  }

  // ---- binary cache ----
  static constexpr std::uint64_t kCacheMagic = 0x4b4c532d4f503031ull;  // "KLS-OP01"

  void save_cache(const std::string& path) const {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cache: cannot open " + path + " for writing");
    auto put = [&f](const void* p, size_t n) { f.write(static_cast<const char*>(p), n); };
    std::uint64_t magic = kCacheMagic, h = grid.hash(), nm = blocks_.size();
    put(&magic, 8); put(&h, 8); put(&nm, 8);
    put(nu.data(), sizeof(double) * grid.P);
    put(gamma.data(), sizeof(double) * grid.P);
    for (const auto& [m, A] : blocks_) {
      std::uint64_t mm = m;
      put(&mm, 8);
      put(A.data(), sizeof(double) * grid.P * grid.P);
    }
  }

  // returns false (leaving the operator untouched) if the file is absent or for
  // a different grid
  bool load_cache(const std::string& path, const std::vector<int>& modes) {
    std::ifstream f(path, std::ios::binary);
    if (!f) return false;
    auto get = [&f](void* p, size_t n) { f.read(static_cast<char*>(p), n); };
    std::uint64_t magic = 0, h = 0, nm = 0;
    get(&magic, 8); get(&h, 8); get(&nm, 8);
    if (!f || magic != kCacheMagic || h != grid.hash()) return false;
    Vec nu_in(grid.P), ga_in(grid.P);
    get(nu_in.data(), sizeof(double) * grid.P);
    get(ga_in.data(), sizeof(double) * grid.P);
    std::map<int, Mat> bl;
    for (std::uint64_t k = 0; k < nm; ++k) {
      std::uint64_t mm = 0;
      get(&mm, 8);
      Mat A(grid.P, grid.P);
      get(A.data(), sizeof(double) * grid.P * grid.P);
      if (!f) return false;
      bl.emplace(static_cast<int>(mm), std::move(A));
    }
    for (int m : modes)
      if (!bl.count(m)) return false;
    nu = std::move(nu_in);
    gamma = std::move(ga_in);
    blocks_ = std::move(bl);
    factorizations_.clear();
    hats_.clear();
    return true;
  }

  // source profiles of the named pseudo-inverse images
  Vec source_profile(int m) const {
    const Vec& sm = grid.sm;
    if (m == 2) return (0.5 * grid.R.array().square() * sm.array()).matrix();
    if (m == 1) return grid.R.cwiseProduct(grid.Z).cwiseProduct(sm);
    return (0.5 * (grid.s2.array() - 5.0) * grid.Z.array() * sm.array()).matrix();
  }

 private:
  std::map<int, Mat> blocks_;
  mutable std::map<int, BorderedSolver> factorizations_;
  mutable std::map<int, Vec> hats_;

  const BorderedSolver& factorization(int m) const {
    auto it = factorizations_.find(m);
    if (it != factorizations_.end()) return it->second;
    auto nulls = null_profiles(m);
    Mat C(grid.P, nulls.size());
    for (size_t j = 0; j < nulls.size(); ++j) C.col(j) = grid.w2.cwiseProduct(nulls[j]);
    BorderedSolver s(bilinear(m), C);
    return factorizations_.emplace(m, std::move(s)).first->second;
  }

  const Vec& hat(int m) const {
    auto it = hats_.find(m);
    if (it != hats_.end()) return it->second;
    Vec h = solve_deflated(m, source_profile(m));
    return hats_.emplace(m, std::move(h)).first->second;
  }

  void assemble(const std::vector<int>& modes, int threads) {
    const int P = grid.P;
    const auto& rules = DeltaRules::instance();
    std::vector<int> ms(modes);
    std::sort(ms.begin(), ms.end());
    ms.erase(std::unique(ms.begin(), ms.end()), ms.end());
    if (std::find(ms.begin(), ms.end(), 0) == ms.end()) ms.insert(ms.begin(), 0);  // gamma needs c_0

    for (int m : ms) blocks_[m] = Mat::Zero(P, P);
    std::vector<Mat*> bp;
    for (int m : ms) bp.push_back(&blocks_[m]);

    // row-tiled upper-triangle assembly of the cosine coefficients c_m(p,q)
    auto work = [&](int p_lo, int p_hi) {
      const int nfar = static_cast<int>(rules.far.x.size());
      const int ngr = static_cast<int>(rules.graded.x.size());
      std::vector<double> acc(ms.size());
      for (int p = p_lo; p < p_hi; ++p) {
        double rp = grid.R[p], zp = grid.Z[p], s2p = grid.s2[p];
        for (int q = p; q < P; ++q) {
          double rq = grid.R[q], zq = grid.Z[q], s2q = grid.s2[q];
          double d2 = (rp - rq) * (rp - rq) + (zp - zq) * (zp - zq);
          double rr4 = 4 * rp * rq;
          double e2 = (s2p - s2q) * (s2p - s2q);
          double p2 = s2p + s2q;
          bool diag = (p == q);
          bool near = diag || d2 < kNearD2;
          const Rule1D& rule = near ? rules.graded : rules.far;
          const std::vector<double>& ct = near ? rules.cos_graded : rules.cos_far;
          const int npt = near ? ngr : nfar;
          std::fill(acc.begin(), acc.end(), 0.0);
          for (int i = 0; i < npt; ++i) {
            double sh = std::sin(rule.x[i] / 2);
            double ker = pair_kernel(d2 + rr4 * sh * sh, e2, p2) * rule.w[i] * M_1_PI;
            const double* c = &ct[i * 5];
            for (size_t k = 0; k < ms.size(); ++k) {
              double cm = c[ms[k]];
              acc[k] += ker * (diag ? cm - 1.0 : cm);  // the m-independent diagonal part
            }                                          // is carried by gamma
          }
          for (size_t k = 0; k < ms.size(); ++k) {
            (*bp[k])(p, q) = acc[k];
            (*bp[k])(q, p) = acc[k];
          }
        }
      }
    };

    if (threads <= 1) {
      work(0, P);
    } else {
      // interleave row blocks so the (shrinking) triangle rows spread evenly
      std::vector<std::thread> pool;
      int nb = threads * 8;
      std::vector<std::pair<int, int>> spans;
      for (int b = 0; b < nb; ++b)
        spans.emplace_back(P * b / nb, P * (b + 1) / nb);
      std::atomic<size_t> next{0};
      for (int t = 0; t < threads; ++t)
        pool.emplace_back([&] {
          for (size_t i = next++; i < spans.size(); i = next++) work(spans[i].first, spans[i].second);
        });
      for (auto& th : pool) th.join();
    }

    // gamma from the chi_0 row condition: (nu - K_0) sqrt m = 0 exactly
    {
      const Mat& c0 = blocks_.at(0);
      Vec K0sm = kTwoPi * (c0 * grid.w2.cwiseProduct(grid.sm));
      gamma = (nu.cwiseProduct(grid.sm) - K0sm)
                  .cwiseQuotient(kTwoPi * grid.w2.cwiseProduct(grid.sm));
    }

    // turn cosine-coefficient tables into the weighted bilinear blocks
    //   A_m = diag(w2 nu) - 2 pi W c_m W - diag(2 pi gamma w2^2)
    Vec dia = grid.w2.cwiseProduct(nu) - kTwoPi * gamma.cwiseProduct(grid.w2.cwiseProduct(grid.w2));
    for (auto& [m, B] : blocks_) {
      B = (-kTwoPi) * grid.w2.asDiagonal() * B * grid.w2.asDiagonal();
      B.diagonal() += dia;
    }

    // Fold the null-space correction into the stored blocks: A_m <- Q^T A_m Q
    // with Q the W-orthogonal projector off the mode's collision invariants.
    // The gamma diagonal pins chi_0 exactly; the remaining invariants carry a
    // pure quadrature defect which this projection removes without touching the
    // complement (symmetry is preserved since Q^T W = W Q).
    for (auto& [m, B] : blocks_) {
      auto nulls = null_profiles(m);
      if (nulls.empty()) continue;
      const int k = static_cast<int>(nulls.size());
      Mat X(P, k);
      for (int j = 0; j < k; ++j) X.col(j) = nulls[j];
      Mat WX = grid.w2.asDiagonal() * X;
      Mat G = X.transpose() * WX;
      auto Gld = G.ldlt();
      // A <- A - WX G^{-1} X^T A - A X G^{-1} X^T W + WX G^{-1} (X^T A X) G^{-1} X^T W
      Mat GiXtA = Gld.solve(X.transpose() * B);                    // G^{-1} X^T A
      Mat core = Gld.solve((GiXtA * X).transpose()).transpose();   // G^{-1} (X^T A X) G^{-1}
      B.noalias() -= WX * GiXtA;
      B.noalias() -= GiXtA.transpose() * WX.transpose();
      B.noalias() += WX * core * WX.transpose();
    }
  }
};

// ---------------------------------------------------------------------------
// reduced axisymmetric operator L^S, defined by L(v1 phi(v_r,v3)) = v1 L^S phi
// ---------------------------------------------------------------------------
struct ReducedOperator {
  const VelocityGrid* grid = nullptr;
  Vec nuS;
  Mat KS;  // so that L^S phi = nuS .* phi - KS phi

  Vec apply(const Vec& phi) const { return nuS.cwiseProduct(phi) - KS * phi; }
};

inline ReducedOperator assemble_LS(const AxiGrid& axi, const CollisionOperator& op) {
  const VelocityGrid& g = *axi.base;
  ReducedOperator rs;
  rs.grid = &g;
  rs.nuS = op.nu;
  // K^S phi = K_1(R phi) / R
  Mat K1 = Mat(g.w2.cwiseProduct(op.nu).asDiagonal()) - op.bilinear(1);
  K1 = g.w2.cwiseInverse().asDiagonal() * K1;
  rs.KS = g.R.cwiseInverse().asDiagonal() * K1 * g.R.asDiagonal();
  return rs;
}

// ---------------------------------------------------------------------------
// radial factor extraction: fit hat = a(|v|) * base in the W inner product,
// optionally subject to one linear constraint sum_p c_p a(s_p) base_p = c0.
// Basis: Chebyshev polynomials in the scaled speed.
// ---------------------------------------------------------------------------
struct RadialFit {
  Vec coef;        // Chebyshev coefficients
  double s_max;    // scaling
  double residual; // relative W-norm residual of the fit
  double shell_dev;  // max deviation of shell-averaged ratios from the fit

  double operator()(double s) const {
    double t = 2.0 * s / s_max - 1.0;
    t = std::clamp(t, -1.0, 1.0);
    double tkm1 = 1.0, tk = t, acc = coef[0] + (coef.size() > 1 ? coef[1] * t : 0.0);
    for (int k = 2; k < coef.size(); ++k) {
      double tn = 2 * t * tk - tkm1;
      acc += coef[k] * tn;
      tkm1 = tk;
      tk = tn;
    }
    return acc;
  }
};

inline RadialFit fit_radial_factor(const VelocityGrid& g, const Vec& hat, const Vec& base,
                                   int degree = 12, const Vec* constraint = nullptr,
                                   double constraint_value = 0.0) {
  RadialFit fit;
  fit.s_max = g.vmax * std::sqrt(2.0) * 1.0000001;
  const int n = degree + 1, P = g.P;
  Mat T(P, n);
  for (int p = 0; p < P; ++p) {
    double t = 2.0 * std::sqrt(g.s2[p]) / fit.s_max - 1.0;
    T(p, 0) = 1.0;
    if (n > 1) T(p, 1) = t;
    for (int k = 2; k < n; ++k) T(p, k) = 2 * t * T(p, k - 1) - T(p, k - 2);
  }
  //  minimize sum_p w2_p (hat_p - a(s_p) base_p)^2
  Mat D = base.asDiagonal() * T;
  Vec sw = g.w2.cwiseSqrt();
  Mat A = sw.asDiagonal() * D;
  Vec b = sw.cwiseProduct(hat);
  if (constraint) {
    // one linear equality via bordered normal equations
    Mat N = A.transpose() * A;
    Vec rhs = A.transpose() * b;
    Vec c = T.transpose() * constraint->cwiseProduct(base);
    Mat M = Mat::Zero(n + 1, n + 1);
    M.topLeftCorner(n, n) = N;
    M.topRightCorner(n, 1) = c;
    M.bottomLeftCorner(1, n) = c.transpose();
    Vec r2 = Vec::Zero(n + 1);
    r2.head(n) = rhs;
    r2[n] = constraint_value;
    fit.coef = M.partialPivLu().solve(r2).head(n);
  } else {
    fit.coef = A.colPivHouseholderQr().solve(b);
  }
  Vec model = D * fit.coef;
  fit.residual = std::sqrt(g.w2.cwiseProduct((hat - model).cwiseAbs2()).sum() /
                           std::max(g.w2.cwiseProduct(hat.cwiseAbs2()).sum(), 1e-300));
  // isotropy check: the pointwise ratio hat/base must collapse onto a function of
  // speed alone.  Weighted RMS deviation of the ratio from the fitted radial
  // profile, in units of the profile's own RMS, over nodes carrying weight.
  double wmax = 0.0;
  for (int p = 0; p < P; ++p) wmax = std::max(wmax, g.w2[p] * base[p] * base[p]);
  double dev2 = 0.0, ref2 = 0.0, wsum = 0.0;
  for (int p = 0; p < P; ++p) {
    double w = g.w2[p] * base[p] * base[p];
    if (w < 1e-10 * wmax) continue;
    double ratio = hat[p] / base[p];
    double a = fit(std::sqrt(g.s2[p]));
    dev2 += w * (ratio - a) * (ratio - a);
    ref2 += w * ratio * ratio;
    wsum += w;
  }
  fit.shell_dev = wsum > 0 ? std::sqrt(dev2 / std::max(ref2, 1e-300)) : 0.0;
  return fit;
}

// ---------------------------------------------------------------------------
// hydrodynamic fields A, B, their pseudo-inverse images, radial factors, kappas
// ---------------------------------------------------------------------------
struct HydroFields {
  Vec A12, A13, B3;       // source profiles (modes 2, 1, 0)
  Vec A12_hat, A13_hat, B3_hat;
  RadialFit a_A, b_B;
  double kappa1 = 0, kappa1_alt = 0, kappa2 = 0;
};

inline HydroFields make_hydro_fields(const CollisionOperator& op) {
  HydroFields h;
  h.A12 = op.source_profile(2);
  h.A13 = op.source_profile(1);
  h.B3 = op.source_profile(0);
  h.A12_hat = op.hat_stress();
  h.A13_hat = op.hat_shear();
  h.B3_hat = op.hat_heat();
  h.kappa1 = op.kappa1_stress();
  h.kappa1_alt = op.kappa1_shear();
  h.kappa2 = op.kappa2_heat();
  h.a_A = fit_radial_factor(op.grid, h.A13_hat, h.A13);
  // the heat-flux factor is fitted against the smooth base v3 sqrt(m): the ratio
  // against B3 itself has a pole where the (s^2-5)/2 source factor changes sign
  h.b_B = fit_radial_factor(op.grid, h.B3_hat, op.grid.Z.cwiseProduct(op.grid.sm));
  return h;
}

}  // namespace kls
