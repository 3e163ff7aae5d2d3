#pragma once

// Slip-coefficient pipeline: the viscous-slip problem on the reduced
// axisymmetric operator, the temperature-jump problem on the full operator,
// the lift/consistency checks tying the two formulations together, and the
// first-order slip boundary conditions assembled from the results.

#include <kls/boundary.hpp>
#include <kls/collision.hpp>
#include <kls/grids.hpp>
#include <kls/slab.hpp>

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

namespace kls {

// --------------------------------------------------------------------------
// Viscous-slip problem on the reduced operator.  The unknown phi(v_r, v3; x)
// carries the azimuthal structure implicitly (the physical field is v1 phi),
// so the wall reduces to pure (1 - alpha)-specular reflection: the diffuse
// re-emission integrates an odd-in-theta field to zero.

struct PhiUResult {
  double c_u = 0.0;
  Mat phi;  // P x Nx reduced layer profile
  SlabGrid mesh;
  bool converged = false;
  int iterations = 0;
  double residual = 0.0;
  DecayFit decay;
  double lift_residual = 0.0;  // sup of v3 d(v1 phi)/dx + L(v1 phi), relative
};

// Reduced transport sweep map: phi -> sweep((1-alpha) spec(phi) [+ r], KS phi)
namespace detail {

class ReducedSlabMap {
 public:
  ReducedSlabMap(const ReducedOperator& opS, const SlabGrid& mesh, double alpha, Vec r)
      : opS_(&opS), g_(opS.grid), mesh_(&mesh), alpha_(alpha), r_(std::move(r)),
        tt_(TransportTables::build(*opS.grid, mesh, opS.nuS, 0.0)) {}

  Mat operator()(const Mat& phi, bool with_sources) const {
    const VelocityGrid& g = *g_;
    Mat S = opS_->KS * phi;
    Vec inc = Vec::Zero(g.P);
    for (int p = 0; p < g.P; ++p)
      if (g.Z[p] > 0) inc[p] = (1 - alpha_) * phi(g.mirror[p], 0);
    if (with_sources) inc += r_;
    return plane_sweep(g, *mesh_, tt_, inc, S);
  }

 private:
  const ReducedOperator* opS_;
  const VelocityGrid* g_;
  const SlabGrid* mesh_;
  double alpha_;
  Vec r_;
  TransportTables tt_;
};

}  // namespace detail

// Finite-difference residual of the lifted field on the full equation
// v3 d(v1 phi)/dx + L(v1 phi) = 0, relative to the collision-term scale.
inline double lift_residual(const CollisionOperator& op, const Mat& phi, const SlabGrid& mesh) {
  const VelocityGrid& g = op.grid;
  const int Nx = mesh.size();
  Mat F = g.R.asDiagonal() * phi;         // v1 phi at the cos-theta plane level
  Mat LF = op.bilinear(1) * F;
  LF.array().colwise() /= g.w2.array();
  double scale = LF.cwiseAbs().maxCoeff();
  if (scale == 0.0) return 0.0;
  double worst = 0.0;
  const auto& x = mesh.x_nodes;
  for (int i = 1; i + 1 < Nx; ++i) {
    double hl = x[i] - x[i - 1], hr = x[i + 1] - x[i];
    double cl = -hr / (hl * (hl + hr)), cc = (hr - hl) / (hl * hr),
           cr = hl / (hr * (hl + hr));
    for (int p = 0; p < g.P; ++p) {
      double d = cl * F(p, i - 1) + cc * F(p, i) + cr * F(p, i + 1);
      worst = std::max(worst, std::abs(g.Z[p] * d + LF(p, i)));
    }
  }
  return worst / scale;
}

// Solve the reduced viscous-slip problem with explicit wall data r (supported
// on v3 > 0).  The preset entry point below builds r from the fitted radial
// factor; passing r = 0 must return c_u = 0, phi = 0.
inline PhiUResult solve_phi_u_with_data(const CollisionOperator& op, const ReducedOperator& opS,
                                        double alpha, const Vec& r, const SolverConfig& cfg) {
  cfg.validate();
  if (!(alpha > 0) || alpha > 1)
    throw std::invalid_argument("slip: accommodation coefficient must be in (0, 1]");
  const VelocityGrid& g = *opS.grid;
  PhiUResult out;
  out.mesh = cfg.make_mesh(cfg.d_schedule.front());
  const int Nx = out.mesh.size();

  detail::ReducedSlabMap map(opS, out.mesh, alpha, r);
  Mat Z0 = Mat::Zero(g.P, Nx);
  Mat B = map(Z0, true);
  Eigen::Map<const Vec> bvec(B.data(), B.size());
  auto apply = [&](const Vec& v) -> Vec {
    Eigen::Map<const Mat> Vm(v.data(), g.P, Nx);
    Mat Tv = map(Vm, false);
    return v - Eigen::Map<const Vec>(Tv.data(), Tv.size());
  };
  IterResult res = gmres(apply, bvec, Vec(), cfg.gmres_tol, cfg.gmres_restart, 40);
  out.phi = Eigen::Map<const Mat>(res.x.data(), g.P, Nx);
  out.converged = res.converged || res.residual <= 10 * cfg.gmres_tol;
  out.iterations = res.iterations;
  out.residual = res.residual;

  // far field: phi -> c_u sqrt(m); transport-moment correction from the rest
  Vec w_ax = g.w2.cwiseProduct(g.R).cwiseProduct(g.R);
  double b_d = w_ax.cwiseProduct(g.sm).dot(out.phi.col(Nx - 1)) /
               w_ax.cwiseProduct(g.sm).dot(g.sm);
  Vec rest = out.phi.col(Nx - 1) - b_d * g.sm;
  out.c_u = b_d + M_PI * g.w2.cwiseProduct(g.R).cwiseProduct(g.Z)
                           .cwiseProduct(op.hat_shear()).dot(rest) / op.kappa1_shear();

  // decay of the lifted layer, measured in the weighted sup norm
  Vec prof(Nx);
  Vec wv(g.P);
  for (int p = 0; p < g.P; ++p) wv[p] = cfg.weight(g.s2[p]) * g.R[p];
  for (int ix = 0; ix < Nx; ++ix)
    prof[ix] = wv.cwiseProduct((out.phi.col(ix) - out.c_u * g.sm).cwiseAbs()).maxCoeff();
  out.decay = fit_exponential_decay(out.mesh, prof, out.mesh.d / 2);
  out.lift_residual = lift_residual(op, out.phi, out.mesh);
  return out;
}

inline PhiUResult solve_phi_u(const CollisionOperator& op, const ReducedOperator& opS,
                              const HydroFields& hydro, double alpha, const SolverConfig& cfg) {
  const VelocityGrid& g = *opS.grid;
  Vec r = Vec::Zero(g.P);
  for (int p = 0; p < g.P; ++p)
    if (g.Z[p] > 0)
      r[p] = (2 - alpha) * g.Z[p] * hydro.a_A(std::sqrt(g.s2[p])) * g.sm[p];
  return solve_phi_u_with_data(op, opS, alpha, r, cfg);
}

// Full-grid formulation of the same problem: the lifted field v1 phi solved
// as an azimuthal-plane problem of the slab solver.  Used to certify the
// reduced-operator path (two-formulation agreement).
struct PhiULifted {
  double c_u = 0.0;
  SlabField f;
  bool converged = false;
};

inline PhiULifted solve_phi_u_lifted(const CollisionOperator& op, const HydroFields& hydro,
                                     double alpha, const SolverConfig& cfg) {
  cfg.validate();
  SlabProblem prob(op, cfg.make_mesh(cfg.d_schedule.front()), alpha);
  prob.set_wall_source(boundary_source_preset("phi-u", op.grid, hydro, alpha));
  SolveOutcome sol = prob.solve(cfg);
  PhiULifted out;
  out.converged = sol.converged;
  FarField far = compute_far_field(op, sol.f);
  out.c_u = far.q[1] + far.q[2];  // v1-data populates the sine plane only
  out.f = std::move(sol.f);
  return out;
}

// --------------------------------------------------------------------------
// Temperature-jump problem (full operator, axisymmetric data).

struct PhiThetaResult {
  double c_theta = 0.0;
  AuxiliaryResult aux;
  DecayFit decay;
  double flux_sup = 0.0;         // sup_x of the mass flux (impermeability)
  double rotation_defect = 0.0;  // azimuthal content of the solution
};

inline PhiThetaResult solve_phi_theta(const CollisionOperator& op, const HydroFields& hydro,
                                      double alpha, const SolverConfig& cfg) {
  const VelocityGrid& g = op.grid;
  Vec r = boundary_source_preset("phi-theta", g, hydro, alpha);
  PhiThetaResult out;
  out.aux = solve_auxiliary(op, alpha, 0.0, r, cfg);
  if (!out.aux.solver_converged) return out;
  out.c_theta = out.aux.far.q[3];

  SlabField layer = subtract_far_field(out.aux.f, out.aux.far);
  Vec prof = weighted_sup_profile(layer, cfg.weight);
  out.decay = fit_exponential_decay(layer.mesh, prof, layer.mesh.d / 2);

  // impermeability: the mass flux vanishes identically in x
  if (const Mat* F0 = out.aux.f.find({0, false})) {
    Vec mass_w = 2 * M_PI * g.w2.cwiseProduct(g.Z).cwiseProduct(g.sm);
    for (int ix = 0; ix < out.aux.f.nx(); ++ix)
      out.flux_sup = std::max(out.flux_sup, std::abs(mass_w.dot(F0->col(ix))));
  }
  // radial in (v1, v2): no azimuthal plane beyond the axisymmetric one
  for (const auto& [id, F] : out.aux.f.planes)
    if (!(id == PlaneId{0, false}))
      out.rotation_defect = std::max(out.rotation_defect, F.cwiseAbs().maxCoeff());
  return out;
}

// --------------------------------------------------------------------------
// Combined slip result and the first-order boundary conditions.

struct SlipResult {
  double alpha = 0.0;
  double c_u = 0.0;
  double c_theta = 0.0;
  PhiUResult phi_u;
  PhiThetaResult phi_theta;
  double d_final = 0.0;
  bool converged = false;
};

inline SlipResult solve_slip(const CollisionOperator& op, const ReducedOperator& opS,
                             const HydroFields& hydro, double alpha, const SolverConfig& cfg) {
  SlipResult out;
  out.alpha = alpha;
  out.phi_u = solve_phi_u(op, opS, hydro, alpha, cfg);
  out.phi_theta = solve_phi_theta(op, hydro, alpha, cfg);
  out.c_u = out.phi_u.c_u;
  out.c_theta = out.phi_theta.c_theta;
  out.d_final = out.phi_theta.aux.d_history.empty() ? cfg.d_schedule.front()
                                                    : out.phi_theta.aux.d_history.back();
  out.converged = out.phi_u.converged && out.phi_theta.aux.solver_converged;
  return out;
}

struct BoundaryGradients {
  double du1_d3 = 0.0;  // d_3 u0_1
  double du2_d3 = 0.0;  // d_3 u0_2
  double du3_d1 = 0.0;  // d_1 u0_3
  double du3_d2 = 0.0;  // d_2 u0_3
  double dtheta_d3 = 0.0;
};

struct SlipConditions {
  double u1_1 = 0.0, u1_2 = 0.0, u1_3 = 0.0;  // first-order velocity at the wall
  double theta_1 = 0.0;                       // first-order temperature at the wall
};

inline SlipConditions emit_slip_conditions(double c_u, double c_theta,
                                           const BoundaryGradients& grad) {
  SlipConditions out;
  out.u1_1 = c_u * (grad.du1_d3 + grad.du3_d1);
  out.u1_2 = c_u * (grad.du2_d3 + grad.du3_d2);
  out.u1_3 = 0.0;  // impermeability
  out.theta_1 = c_theta * grad.dtheta_d3;
  return out;
}

// --------------------------------------------------------------------------
// Zeroth-order wall condition: the Maxwell reflection residual on a
// linearized Maxwellian (a + u.v + theta (|v|^2-3)/2) sqrt(m) vanishes iff
// the wall-tangential velocity and the temperature perturbation vanish.
// Returns the incoming-trace residual norm for each of the five fields.

inline std::vector<double> wall_kernel_residuals(const CollisionOperator& op, double alpha) {
  const VelocityGrid& g = op.grid;
  std::vector<double> out;
  for (int k = 0; k < 5; ++k) {
    Vec full(g.n_nodes());
    for (int p = 0; p < g.P; ++p)
      for (int j = 0; j < g.n_theta; ++j) {
        double chi = 0.0;
        switch (k) {
          case 0: chi = 1.0; break;
          case 1: chi = g.v1(p, j); break;
          case 2: chi = g.v2(p, j); break;
          case 3: chi = g.Z[p]; break;
          case 4: chi = 0.5 * (g.s2[p] - 3.0); break;
        }
        full[p * g.n_theta + j] = chi * g.sm[p];
      }
    TraceField t;
    t.grid = &g;
    t.wall = Wall::x0;
    t.values = full;
    BoundarySpec spec = BoundarySpec::make(g, alpha, Vec::Zero(g.n_nodes()));
    TraceField refl = apply_maxwell(t, spec);
    double res = 0.0;
    for (int p = 0; p < g.P; ++p) {
      if (!(g.Z[p] > 0)) continue;
      for (int j = 0; j < g.n_theta; ++j) {
        int i = p * g.n_theta + j;
        res = std::max(res, std::abs(refl.values[i] - full[i]));
      }
    }
    out.push_back(res);
  }
  return out;
}

// Uniqueness surrogate: the temperature-jump constant does not depend on the
// internal flux parameter of the auxiliary formulation.
inline double lambda_shift_defect(const CollisionOperator& op, const HydroFields& hydro,
                                  double alpha, const SolverConfig& cfg) {
  const VelocityGrid& g = op.grid;
  Vec r = boundary_source_preset("phi-theta", g, hydro, alpha);
  SolverConfig one = cfg;
  one.d_schedule = {cfg.d_schedule.front()};
  double c0, c1;
  {
    AuxiliaryResult a = solve_auxiliary(op, alpha, 0.0, r, one);
    c0 = a.far.q[3];
  }
  {
    AuxiliaryResult a = solve_auxiliary(op, alpha, 1.0, r, one);
    c1 = a.far.q[3];
  }
  return std::abs(c1 - c0);
}

}  // namespace kls
