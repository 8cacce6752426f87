#include "romelab/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <utility>
#include <vector>

#include "romelab/error.hpp"

namespace romelab {

namespace {

constexpr double kPivotTolerance = 1e-13;
constexpr double kDegenerateKey = 1e-12;

bool all_finite(const Matrix& m) { return m.allFinite(); }

// Doolittle LU with partial pivoting, kept local so the solver used by the
// editor does not share code with the test-side KKT oracle.
class PivotedLu {
 public:
  explicit PivotedLu(Matrix a) : lu_(std::move(a)), perm_(static_cast<std::size_t>(lu_.rows())) {
    const Eigen::Index n = lu_.rows();
    if (lu_.cols() != n) {
      fail(ErrorCode::kDimension, "solve_linear: matrix is " + std::to_string(lu_.rows()) + "x" +
                                      std::to_string(lu_.cols()) + ", expected square");
    }
    if (!all_finite(lu_)) fail(ErrorCode::kInvalidArgument, "solve_linear: non-finite matrix entry");
    const double scale = n > 0 ? lu_.cwiseAbs().maxCoeff() : 0.0;
    for (Eigen::Index i = 0; i < n; ++i) perm_[static_cast<std::size_t>(i)] = i;
    for (Eigen::Index k = 0; k < n; ++k) {
      Eigen::Index pivot_row = k;
      double best = std::abs(lu_(k, k));
      for (Eigen::Index r = k + 1; r < n; ++r) {
        if (std::abs(lu_(r, k)) > best) {
          best = std::abs(lu_(r, k));
          pivot_row = r;
        }
      }
      if (!(best > kPivotTolerance * scale) || best == 0.0) {
        std::ostringstream msg;
        msg << "solve_linear: matrix singular to tolerance (pivot " << best << " at column " << k
            << " <= " << kPivotTolerance << " * max|a| = " << kPivotTolerance * scale << ")";
        fail(ErrorCode::kSingular, msg.str());
      }
      if (pivot_row != k) {
        lu_.row(k).swap(lu_.row(pivot_row));
        std::swap(perm_[static_cast<std::size_t>(k)], perm_[static_cast<std::size_t>(pivot_row)]);
      }
      const double inv = 1.0 / lu_(k, k);
      for (Eigen::Index r = k + 1; r < n; ++r) {
        const double factor = lu_(r, k) * inv;
        lu_(r, k) = factor;
        if (factor != 0.0) {
          lu_.row(r).tail(n - k - 1) -= factor * lu_.row(k).tail(n - k - 1);
        }
      }
    }
  }

  Vector solve(const Vector& b) const {
    const Eigen::Index n = lu_.rows();
    if (b.size() != n) {
      fail(ErrorCode::kDimension, "solve_linear: rhs has " + std::to_string(b.size()) +
                                      " entries, expected " + std::to_string(n));
    }
    Vector x(n);
    for (Eigen::Index i = 0; i < n; ++i) x(i) = b(perm_[static_cast<std::size_t>(i)]);
    for (Eigen::Index i = 0; i < n; ++i) {
      double s = x(i);
      for (Eigen::Index j = 0; j < i; ++j) s -= lu_(i, j) * x(j);
      x(i) = s;
    }
    for (Eigen::Index i = n - 1; i >= 0; --i) {
      double s = x(i);
      for (Eigen::Index j = i + 1; j < n; ++j) s -= lu_(i, j) * x(j);
      x(i) = s / lu_(i, i);
    }
    return x;
  }

 private:
  Matrix lu_;
  std::vector<Eigen::Index> perm_;
};

// One step of iterative refinement keeps the residual contract comfortably
// inside 1e-8 (1 + |b|) for the moderately conditioned C matrices we see.
Vector solve_refined(const PivotedLu& lu, const Matrix& a, const Vector& b) {
  Vector x = lu.solve(b);
  const Vector r = b - a * x;
  x += lu.solve(r);
  return x;
}

void check_update_shapes(const Matrix& w, const Matrix& c, const Vector& k_star,
                         const Vector& v_star) {
  const auto h = w.rows();
  const auto d = w.cols();
  if (c.rows() != d || c.cols() != d || k_star.size() != d || v_star.size() != h) {
    std::ostringstream msg;
    msg << "rank_one_update: W is " << h << "x" << d << ", C is " << c.rows() << "x" << c.cols()
        << ", k* has " << k_star.size() << " and v* has " << v_star.size() << " entries";
    fail(ErrorCode::kDimension, msg.str());
  }
}

double key_alignment(const Vector& u, const Vector& k_star) {
  const double denom = u.dot(k_star);
  if (!(denom > kDegenerateKey)) {
    std::ostringstream msg;
    msg << "rank_one_update: degenerate key, u^T k* = " << denom << " (C^{-1} annihilates k*)";
    fail(ErrorCode::kDegenerateKey, msg.str());
  }
  return denom;
}

}  // namespace

CovarianceAccumulator::CovarianceAccumulator(std::size_t dim)
    : sum_outer_(Matrix::Zero(static_cast<Eigen::Index>(dim), static_cast<Eigen::Index>(dim))) {}

CovarianceAccumulator::CovarianceAccumulator(Matrix sum_outer, std::size_t n_samples)
    : sum_outer_(std::move(sum_outer)), n_samples_(n_samples) {
  if (sum_outer_.rows() != sum_outer_.cols()) {
    fail(ErrorCode::kDimension, "covariance: sum_outer must be square");
  }
  if (!all_finite(sum_outer_)) fail(ErrorCode::kInvalidArgument, "covariance: non-finite entry");
}

void CovarianceAccumulator::accumulate(const Vector& key) {
  if (key.size() != sum_outer_.rows()) {
    fail(ErrorCode::kDimension, "accumulate: key has " + std::to_string(key.size()) +
                                    " entries, accumulator dim is " +
                                    std::to_string(sum_outer_.rows()));
  }
  sum_outer_.noalias() += key * key.transpose();
  ++n_samples_;
}

void CovarianceAccumulator::accumulate_rows(const Matrix& keys) {
  if (keys.rows() == 0) return;
  if (keys.cols() != sum_outer_.rows()) {
    fail(ErrorCode::kDimension, "accumulate: keys have " + std::to_string(keys.cols()) +
                                    " columns, accumulator dim is " +
                                    std::to_string(sum_outer_.rows()));
  }
  sum_outer_.noalias() += keys.transpose() * keys;
  // The product is symmetric in exact arithmetic; pin it so downstream
  // consumers see an exactly symmetric matrix.
  sum_outer_ = (0.5 * (sum_outer_ + sum_outer_.transpose())).eval();
  n_samples_ += static_cast<std::size_t>(keys.rows());
}

void CovarianceAccumulator::merge(const CovarianceAccumulator& other) {
  if (other.dim() != dim()) fail(ErrorCode::kDimension, "merge: accumulator dims differ");
  sum_outer_ += other.sum_outer_;
  n_samples_ += other.n_samples_;
}

CovarianceAccumulator accumulate(CovarianceAccumulator acc, const Vector& key) {
  acc.accumulate(key);
  return acc;
}

Matrix finalize_covariance(const CovarianceAccumulator& acc, double ridge) {
  if (acc.n_samples() == 0) {
    fail(ErrorCode::kEmptyStatistics, "finalize_covariance: no samples accumulated");
  }
  if (!(ridge >= 0.0) || !std::isfinite(ridge)) {
    fail(ErrorCode::kInvalidArgument, "finalize_covariance: ridge must be finite and >= 0");
  }
  Matrix c = acc.sum_outer();
  c.diagonal().array() += ridge;
  return c;
}

double default_ridge(const Matrix& c) {
  if (c.rows() == 0) return 0.0;
  Eigen::SelfAdjointEigenSolver<Matrix> eig(c, Eigen::EigenvaluesOnly);
  const double lo = eig.eigenvalues().minCoeff();
  const double hi = eig.eigenvalues().maxCoeff();
  const bool ill = !(lo > 0.0) || hi / lo > 1e12;
  return ill ? 1e-6 * c.diagonal().mean() : 0.0;
}

Vector solve_linear(const Matrix& a, const Vector& b) {
  PivotedLu lu(a);
  return solve_refined(lu, a, b);
}

RankOneUpdate rank_one_update(const Matrix& w, const Matrix& c, const Vector& k_star,
                              const Vector& v_star) {
  check_update_shapes(w, c, k_star, v_star);
  RankOneUpdate out;
  out.u = solve_linear(c, k_star);
  const double denom = key_alignment(out.u, k_star);
  out.v = (v_star - w * k_star) / denom;
  out.w_hat = w + out.v * out.u.transpose();
  return out;
}

RankOneUpdate rank_one_update_block(const Matrix& w, const Matrix& c, const Vector& k_star,
                                    const Vector& v_star) {
  check_update_shapes(w, c, k_star, v_star);
  const Eigen::Index h = w.rows();
  const Eigen::Index d = w.cols();
  RankOneUpdate out;
  out.u = solve_linear(c, k_star);
  key_alignment(out.u, k_star);

  // X M = R with X = [W_hat | v], M = [[I, k*], [-u^T, 0]], R = [W | v*].
  // Transposed: M^T X^T = R^T, solved one row of X at a time.
  Matrix m = Matrix::Zero(d + 1, d + 1);
  m.topLeftCorner(d, d).setIdentity();
  m.topRightCorner(d, 1) = k_star;
  m.bottomLeftCorner(1, d) = -out.u.transpose();
  const Matrix mt = m.transpose();
  PivotedLu lu(mt);

  out.w_hat.resize(h, d);
  out.v.resize(h);
  Vector rhs(d + 1);
  for (Eigen::Index row = 0; row < h; ++row) {
    rhs.head(d) = w.row(row).transpose();
    rhs(d) = v_star(row);
    const Vector x = solve_refined(lu, mt, rhs);
    out.w_hat.row(row) = x.head(d).transpose();
    out.v(row) = x(d);
  }
  return out;
}

double relative_frobenius(const Matrix& a, const Matrix& b) {
  const double denom = std::max(b.norm(), 1e-300);
  return (a - b).norm() / denom;
}

}  // namespace romelab
