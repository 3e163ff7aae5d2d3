#pragma once

// Dense iterative / constrained solvers used by the slab and operator layers:
//  - restarted GMRES with Givens rotations (matrix-free),
//  - Anderson mixing for fixed-point iterations,
//  - a bordered KKT factorization for equality-constrained symmetric solves.

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <limits>
#include <stdexcept>
#include <vector>

namespace kls {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

struct IterResult {
  Vec x;
  int iterations = 0;
  double residual = 0.0;
  bool converged = false;
};

// Restarted GMRES(m) on A x = b with A given as a callable apply(x) -> Ax.
// Stops when ||b - A x|| <= rtol * ||b||.
template <class Apply>
IterResult gmres(Apply&& apply, const Vec& b, const Vec& x0, double rtol = 1e-12,
                 int restart = 60, int max_outer = 40) {
  const int n = static_cast<int>(b.size());
  IterResult out;
  out.x = x0.size() == n ? x0 : Vec::Zero(n);

  const double bnorm = b.norm();
  if (bnorm == 0.0) {
    out.x.setZero();
    out.converged = true;
    return out;
  }

  Mat V(n, restart + 1);
  Mat H = Mat::Zero(restart + 1, restart);
  std::vector<double> cs(restart), sn(restart);
  Vec g(restart + 1);

  double prev_rn = std::numeric_limits<double>::infinity();
  for (int outer = 0; outer < max_outer; ++outer) {
    Vec r = b - apply(out.x);
    double beta = r.norm();
    out.residual = beta / bnorm;
    if (out.residual <= rtol) {
      out.converged = true;
      return out;
    }
    V.col(0) = r / beta;
    g.setZero();
    g[0] = beta;

    int k = 0;
    for (; k < restart; ++k) {
      Vec w = apply(V.col(k));
      // modified Gram-Schmidt
      for (int i = 0; i <= k; ++i) {
        H(i, k) = V.col(i).dot(w);
        w -= H(i, k) * V.col(i);
      }
      const double hsub = w.norm();  // Arnoldi subdiagonal, before rotations
      H(k + 1, k) = hsub;
      if (hsub > 0) V.col(k + 1) = w / hsub;

      // apply stored rotations, then new one
      for (int i = 0; i < k; ++i) {
        double t = cs[i] * H(i, k) + sn[i] * H(i + 1, k);
        H(i + 1, k) = -sn[i] * H(i, k) + cs[i] * H(i + 1, k);
        H(i, k) = t;
      }
      double denom = std::hypot(H(k, k), H(k + 1, k));
      if (denom == 0.0) { cs[k] = 1.0; sn[k] = 0.0; }
      else { cs[k] = H(k, k) / denom; sn[k] = H(k + 1, k) / denom; }
      H(k, k) = denom;
      H(k + 1, k) = 0.0;
      g[k + 1] = -sn[k] * g[k];
      g[k] = cs[k] * g[k];

      ++out.iterations;
      if (std::abs(g[k + 1]) / bnorm <= rtol) { ++k; break; }
      if (hsub == 0.0) { ++k; break; }  // lucky breakdown: solution lies in the current space
    }

    // back substitution on the k x k triangle
    Vec y = Vec::Zero(k);
    for (int i = k - 1; i >= 0; --i) {
      double s = g[i];
      for (int j = i + 1; j < k; ++j) s -= H(i, j) * y[j];
      y[i] = s / H(i, i);
    }
    out.x += V.leftCols(k) * y;

    double rn = (b - apply(out.x)).norm() / bnorm;
    out.residual = rn;
    if (rn <= rtol) {
      out.converged = true;
      return out;
    }
    if (rn >= 0.98 * prev_rn) return out;  // stagnated at the attainable floor
    prev_rn = rn;
  }
  return out;
}

// Anderson mixing of a fixed-point iteration x -> G(x); keeps up to `depth`
// previous residual pairs and returns the least-squares combination.
class AndersonMixer {
 public:
  explicit AndersonMixer(int depth = 5, double damping = 1.0)
      : depth_(depth), damping_(damping) {}

  void reset() {
    xs_.clear();
    fs_.clear();
  }

  // x: current iterate, gx: G(x). Returns the accelerated next iterate.
  Vec next(const Vec& x, const Vec& gx) {
    Vec f = gx - x;
    xs_.push_back(x);
    fs_.push_back(f);
    if (static_cast<int>(xs_.size()) > depth_ + 1) {
      xs_.erase(xs_.begin());
      fs_.erase(fs_.begin());
    }
    const int m = static_cast<int>(xs_.size()) - 1;
    if (m == 0) return x + damping_ * f;

    // minimize || f_k - sum_j gamma_j (f_k - f_{k-j}) || over the history
    Mat dF(f.size(), m);
    for (int j = 0; j < m; ++j) dF.col(j) = fs_[m] - fs_[m - 1 - j];
    Vec gamma = dF.colPivHouseholderQr().solve(fs_[m]);

    Vec xbar = xs_[m];
    Vec fbar = fs_[m];
    for (int j = 0; j < m; ++j) {
      xbar -= gamma[j] * (xs_[m] - xs_[m - 1 - j]);
      fbar -= gamma[j] * (fs_[m] - fs_[m - 1 - j]);
    }
    return xbar + damping_ * fbar;
  }

 private:
  int depth_;
  double damping_;
  std::vector<Vec> xs_, fs_;
};

// LU factorization of the bordered (KKT) system
//   [ A   C ] [x]   [b]
//   [ C^T 0 ] [mu] = [0]
// used to solve A x = b subject to C^T x = 0 when A is singular exactly on the
// span that C constrains away.
class BorderedSolver {
 public:
  BorderedSolver() = default;

  BorderedSolver(const Mat& A, const Mat& C) { factor(A, C); }

  void factor(const Mat& A, const Mat& C) {
    n_ = static_cast<int>(A.rows());
    k_ = static_cast<int>(C.cols());
    if (C.rows() != n_) throw std::invalid_argument("bordered solver: constraint row mismatch");
    Mat M = Mat::Zero(n_ + k_, n_ + k_);
    M.topLeftCorner(n_, n_) = A;
    if (k_ > 0) {
      M.topRightCorner(n_, k_) = C;
      M.bottomLeftCorner(k_, n_) = C.transpose();
    }
    lu_.compute(M);
  }

  Vec solve(const Vec& b) const {
    Vec rhs = Vec::Zero(n_ + k_);
    rhs.head(n_) = b;
    Vec sol = lu_.solve(rhs);
    return sol.head(n_);
  }

  int size() const { return n_; }

 private:
  int n_ = 0, k_ = 0;
  Eigen::PartialPivLU<Mat> lu_;
};

}  // namespace kls
