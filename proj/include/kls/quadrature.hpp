#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

namespace kls {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

struct Rule1D {
  Vec x;  // nodes
  Vec w;  // weights
};

// Gauss-Legendre rule on [-1,1] via Newton iteration on P_n.
inline Rule1D gauss_legendre(int n) {
  Rule1D r{Vec(n), Vec(n)};
  for (int i = 0; i < (n + 1) / 2; ++i) {
    double x = std::cos(M_PI * (i + 0.75) / (n + 0.5));
    double pp = 0.0;
    for (int it = 0; it < 100; ++it) {
      double p0 = 1.0, p1 = x;
      for (int k = 2; k <= n; ++k) {
        double p2 = ((2 * k - 1) * x * p1 - (k - 1) * p0) / k;
        p0 = p1;
        p1 = p2;
      }
      pp = n * (x * p1 - p0) / (x * x - 1.0);
      double dx = p1 / pp;
      x -= dx;
      if (std::abs(dx) < 1e-15) break;
    }
    r.x[i] = -x;
    r.x[n - 1 - i] = x;
    r.w[i] = r.w[n - 1 - i] = 2.0 / ((1.0 - x * x) * pp * pp);
  }
  return r;
}

inline Rule1D map_to(const Rule1D& base, double a, double b) {
  Rule1D r{base.x, base.w};
  const double mid = 0.5 * (a + b), half = 0.5 * (b - a);
  r.x = (half * base.x).array() + mid;
  r.w = base.w * half;
  return r;
}

// Composite Gauss-Legendre over [a,b] with nseg equal segments of npt points.
inline Rule1D composite_gl(double a, double b, int nseg, int npt) {
  Rule1D base = gauss_legendre(npt);
  Rule1D out{Vec(nseg * npt), Vec(nseg * npt)};
  for (int s = 0; s < nseg; ++s) {
    double lo = a + (b - a) * s / nseg, hi = a + (b - a) * (s + 1) / nseg;
    Rule1D seg = map_to(base, lo, hi);
    out.x.segment(s * npt, npt) = seg.x;
    out.w.segment(s * npt, npt) = seg.w;
  }
  return out;
}

// Recurrence coefficients (alpha_k, beta_k) of the orthogonal polynomials of
// a weight on [a,b], computed by discretized Stieltjes on a dense composite rule.
struct Recurrence {
  Vec alpha, beta;  // beta[0] = total mass
};

template <class W>
Recurrence stieltjes(W&& weight, double a, double b, int n, int nseg = 200, int npt = 30) {
  Rule1D q = composite_gl(a, b, nseg, npt);
  Vec w(q.x.size());
  for (Eigen::Index i = 0; i < q.x.size(); ++i) w[i] = q.w[i] * weight(q.x[i]);
  Recurrence rc{Vec::Zero(n), Vec::Zero(n)};
  Vec p_prev = Vec::Zero(q.x.size()), p = Vec::Ones(q.x.size());
  double nrm2 = w.sum();
  rc.beta[0] = nrm2;
  for (int k = 0; k < n; ++k) {
    rc.alpha[k] = (w.array() * q.x.array() * p.array().square()).sum() / nrm2;
    if (k == n - 1) break;
    Vec p_next = (q.x.array() - rc.alpha[k]) * p.array();
    if (k > 0) p_next -= rc.beta[k] * p_prev;
    double nrm2_next = (w.array() * p_next.array().square()).sum();
    rc.beta[k + 1] = nrm2_next / nrm2;
    p_prev = p;
    p = p_next;
    nrm2 = nrm2_next;
  }
  return rc;
}

// Gauss rule from recurrence coefficients (Golub-Welsch).
inline Rule1D golub_welsch(const Recurrence& rc) {
  const int n = static_cast<int>(rc.alpha.size());
  Mat J = Mat::Zero(n, n);
  for (int k = 0; k < n; ++k) {
    J(k, k) = rc.alpha[k];
    if (k + 1 < n) J(k, k + 1) = J(k + 1, k) = std::sqrt(rc.beta[k + 1]);
  }
  Eigen::SelfAdjointEigenSolver<Mat> es(J);
  if (es.info() != Eigen::Success) throw std::runtime_error("golub_welsch: eigensolve failed");
  Rule1D r{es.eigenvalues(), Vec(n)};
  for (int i = 0; i < n; ++i) {
    double v0 = es.eigenvectors()(0, i);
    r.w[i] = rc.beta[0] * v0 * v0;
  }
  return r;
}

// Values of the orthonormal polynomials p_0..p_{n-1} at the given points.
inline Mat orthonormal_values(const Recurrence& rc, const Vec& x) {
  const int n = static_cast<int>(rc.alpha.size());
  Mat P(x.size(), n);
  P.col(0).setConstant(1.0 / std::sqrt(rc.beta[0]));
  if (n > 1)
    P.col(1) = ((x.array() - rc.alpha[0]) * P.col(0).array()) / std::sqrt(rc.beta[1]);
  for (int k = 1; k + 1 < n; ++k)
    P.col(k + 1) = ((x.array() - rc.alpha[k]) * P.col(k).array() -
                    std::sqrt(rc.beta[k]) * P.col(k - 1).array()) /
                   std::sqrt(rc.beta[k + 1]);
  return P;
}

}  // namespace kls
