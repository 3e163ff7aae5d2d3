#pragma once

// Wall operators for the slab: Maxwell reflection (specular/diffuse mix) at
// x = 0, pure specular reflection at x = d, the outgoing mass-flux functional,
// and solvability checks for boundary sources.
//
// Traces are full-node vectors (length P * n_theta).  At x = 0 the incoming
// set is {v3 > 0}; at x = d it is {v3 < 0}.

#include "collision.hpp"
#include "grids.hpp"

#include <cmath>
#include <optional>
#include <string>
#include <vector>

namespace kls {

enum class Wall { x0, xd };

struct TraceField {
  const VelocityGrid* grid = nullptr;
  Wall wall = Wall::x0;
  Vec values;  // length grid->n_nodes()

  bool incoming(int p) const {
    double z = grid->Z[p];
    return wall == Wall::x0 ? z > 0 : z < 0;
  }
};

struct BoundarySpec {
  double alpha = 1.0;
  Vec r;  // incoming source at x=0, supported on {v3 > 0}
  // Prescribed mass flux for the auxiliary slab problem.  Not used by
  // apply_maxwell itself: the auxiliary wall condition replaces the diffuse
  // re-emission alpha*K(gamma_+ f) with the fixed emission
  // alpha*sqrt(2 pi)*lambda*sqrt(m), which the slab solver applies.
  std::optional<double> lambda;
  bool r_support_warning = false;  // set if off-support entries had to be zeroed

  static BoundarySpec make(const VelocityGrid& g, double alpha, Vec r_in,
                           std::optional<double> lambda = std::nullopt) {
    if (!(alpha > 0.0) || alpha > 1.0)
      throw std::invalid_argument("boundary: accommodation coefficient must be in (0, 1]");
    BoundarySpec s;
    s.alpha = alpha;
    s.lambda = lambda;
    if (r_in.size() == 0) r_in = Vec::Zero(g.n_nodes());
    if (r_in.size() != g.n_nodes())
      throw std::invalid_argument("boundary: source length does not match grid");
    for (int p = 0; p < g.P; ++p) {
      if (g.Z[p] > 0) continue;
      for (int j = 0; j < g.n_theta; ++j) {
        double& v = r_in[p * g.n_theta + j];
        if (v != 0.0) {
          v = 0.0;
          s.r_support_warning = true;  // off-support data is dropped, not rejected
        }
      }
    }
    s.r = std::move(r_in);
    return s;
  }
};

// node index helpers ---------------------------------------------------------
inline int trace_mirror_node(const VelocityGrid& g, int node) {
  int p = node / g.n_theta, j = node % g.n_theta;
  return g.mirror[p] * g.n_theta + j;  // (v1, v2, -v3)
}

// specular reflection: incoming values replaced by outgoing values at the
// v3-mirrored node; outgoing half left untouched
inline TraceField apply_specular(const TraceField& t) {
  TraceField out = t;
  const VelocityGrid& g = *t.grid;
  for (int p = 0; p < g.P; ++p) {
    if (!t.incoming(p)) continue;
    for (int j = 0; j < g.n_theta; ++j) {
      int i = p * g.n_theta + j;
      out.values[i] = t.values[trace_mirror_node(g, i)];
    }
  }
  return out;
}

// outgoing mass flux at x = 0:  P_gamma f = int_{v3<0} |v3| f sqrt(m) dv
inline double mass_flux(const TraceField& t) {
  const VelocityGrid& g = *t.grid;
  double acc = 0.0;
  for (int p = 0; p < g.P; ++p) {
    if (g.Z[p] >= 0) continue;
    double w = g.node_weight(p) * std::abs(g.Z[p]) * g.sm[p];
    for (int j = 0; j < g.n_theta; ++j) acc += w * t.values[p * g.n_theta + j];
  }
  return acc;
}

// diffuse re-emission: sqrt(2 pi m(v)) * P_gamma f, broadcast to incoming nodes
inline TraceField apply_K_gamma(const TraceField& t) {
  const VelocityGrid& g = *t.grid;
  double flux = mass_flux(t);
  TraceField out = t;
  out.values.setZero();
  double c = std::sqrt(2 * M_PI) * flux;
  for (int p = 0; p < g.P; ++p) {
    if (!t.incoming(p)) continue;
    for (int j = 0; j < g.n_theta; ++j) out.values[p * g.n_theta + j] = c * g.sm[p];
  }
  return out;
}

// Maxwell reflection at x = 0:
//   gamma_- f = (1 - alpha) L gamma_+ f + alpha K gamma_+ f + r
inline TraceField apply_maxwell(const TraceField& t, const BoundarySpec& spec) {
  const VelocityGrid& g = *t.grid;
  TraceField spec_part = apply_specular(t);
  TraceField diff_part = apply_K_gamma(t);
  TraceField out = t;
  for (int p = 0; p < g.P; ++p) {
    if (!t.incoming(p)) continue;
    for (int j = 0; j < g.n_theta; ++j) {
      int i = p * g.n_theta + j;
      out.values[i] = (1 - spec.alpha) * spec_part.values[i] +
                      spec.alpha * diff_part.values[i] + spec.r[i];
    }
  }
  return out;
}

// solvability report ---------------------------------------------------------
struct SolvabilityReport {
  double r_flux = 0.0;          // int_{v3>0} v3 sqrt(m) r dv
  double max_macro = 0.0;       // max over x slices of |P g| / |g|
  std::vector<int> bad_slices;  // indices where the source has macroscopic content
  bool pass = true;
};

inline double incoming_flux_moment(const VelocityGrid& g, const Vec& r) {
  double acc = 0.0;
  for (int p = 0; p < g.P; ++p) {
    if (g.Z[p] <= 0) continue;
    double w = g.node_weight(p) * g.Z[p] * g.sm[p];
    for (int j = 0; j < g.n_theta; ++j) acc += w * r[p * g.n_theta + j];
  }
  return acc;
}

inline SolvabilityReport check_solvability(const CollisionOperator& op,
                                           const std::vector<Vec>& g_slices, const Vec& r,
                                           double tol = 1e-8) {
  SolvabilityReport rep;
  const VelocityGrid& g = op.grid;
  rep.r_flux = incoming_flux_moment(g, r);
  if (std::abs(rep.r_flux) > tol) rep.pass = false;
  for (size_t i = 0; i < g_slices.size(); ++i) {
    Vec pg = op.project_P(g_slices[i]);
    double rel = std::sqrt(pg.squaredNorm() / std::max(g_slices[i].squaredNorm(), 1e-300));
    rep.max_macro = std::max(rep.max_macro, rel);
    if (rel > tol) {
      rep.pass = false;
      rep.bad_slices.push_back(static_cast<int>(i));
    }
  }
  return rep;
}

// boundary-source presets -----------------------------------------------------
// The two slip-problem sources evaluate the fitted radial factors of the
// pseudo-inverse images on the incoming half:
//   "phi-u":     r = (2 - alpha) v3 a_A(|v|) v1 sqrt(m)     (shear / velocity slip)
//   "phi-theta": r = (2 - alpha) v3 b_B(|v|) sqrt(m)        (temperature jump)
// The phi-theta factor is fitted with the flux-orthogonality constraint so the
// solvability condition holds exactly for the fitted field.
inline Vec boundary_source_preset(const std::string& name, const VelocityGrid& g,
                                  const HydroFields& hydro, double alpha) {
  Vec r = Vec::Zero(g.n_nodes());
  if (name == "zero") return r;
  if (name == "phi-u") {
    for (int p = 0; p < g.P; ++p) {
      if (g.Z[p] <= 0) continue;
      double a = hydro.a_A(std::sqrt(g.s2[p]));
      for (int j = 0; j < g.n_theta; ++j)
        r[p * g.n_theta + j] = (2 - alpha) * g.Z[p] * a * g.v1(p, j) * g.sm[p];
    }
    return r;
  }
  if (name == "phi-theta") {
    for (int p = 0; p < g.P; ++p) {
      if (g.Z[p] <= 0) continue;
      double b = hydro.b_B(std::sqrt(g.s2[p]));
      for (int j = 0; j < g.n_theta; ++j)
        r[p * g.n_theta + j] = (2 - alpha) * g.Z[p] * b * g.sm[p];
    }
    return r;
  }
  throw std::invalid_argument("boundary: unknown source preset '" + name + "'");
}

}  // namespace kls
