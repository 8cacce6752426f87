#pragma once

#include <Eigen/Dense>

#include <cstddef>

namespace romelab {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

/// Running second moment sum_i k_i k_i^T of MLP keys.  The raw sum is kept
/// (no division by the sample count); the rank-one update is invariant to a
/// positive rescaling of C.
class CovarianceAccumulator {
 public:
  explicit CovarianceAccumulator(std::size_t dim);
  CovarianceAccumulator(Matrix sum_outer, std::size_t n_samples);

  void accumulate(const Vector& key);
  // Adds every row of `keys` (n x dim) in one symmetric rank-n update.
  void accumulate_rows(const Matrix& keys);
  void merge(const CovarianceAccumulator& other);

  std::size_t dim() const { return static_cast<std::size_t>(sum_outer_.rows()); }
  std::size_t n_samples() const { return n_samples_; }
  const Matrix& sum_outer() const { return sum_outer_; }

 private:
  Matrix sum_outer_;
  std::size_t n_samples_ = 0;
};

CovarianceAccumulator accumulate(CovarianceAccumulator acc, const Vector& key);

/// sum_outer + ridge * I.  Throws kEmptyStatistics when nothing was accumulated.
Matrix finalize_covariance(const CovarianceAccumulator& acc, double ridge);

/// Ridge applied when C is too ill-conditioned to invert reliably:
/// 1e-6 * mean(diag C) if cond(C) > 1e12, otherwise 0.
double default_ridge(const Matrix& c);

/// Dense solve with partial pivoting.  Throws kSingular when a pivot falls
/// below the relative tolerance.
Vector solve_linear(const Matrix& a, const Vector& b);

struct RankOneUpdate {
  Vector v;  // Lagrange multiplier column
  Vector u;  // C^{-1} k*
  Matrix w_hat;
};

/// Inserts the key/value pair (k*, v*) into the linear memory W (H x D) with
/// the minimal-interference update W_hat = W + v (C^{-1} k*)^T.
RankOneUpdate rank_one_update(const Matrix& w, const Matrix& c, const Vector& k_star,
                              const Vector& v_star);

/// Same update obtained by solving the bordered block system
///   [W_hat | v] [[I, k*], [-u^T, 0]] = [W | v*]
/// for all unknowns at once.  Used as a second algebraic route.
RankOneUpdate rank_one_update_block(const Matrix& w, const Matrix& c, const Vector& k_star,
                                    const Vector& v_star);

double relative_frobenius(const Matrix& a, const Matrix& b);

}  // namespace romelab
