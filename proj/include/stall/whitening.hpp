#pragma once

// PCA whitening: W = Lambda^{-1/2} V^T from the biased (1/N) covariance of a
// sample population, so that W^T W = Sigma^{-1}.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <cstdint>
#include <string>

#include "stall/embedseq.hpp"
#include "stall/error.hpp"

namespace stall {

inline constexpr double kDefaultEigenFloor = 1e-10;

struct WhiteningModel {
  Vector mean;          // d
  RowMatrix matrix;     // d x d, row i = eigenvector i scaled by lambda_i^{-1/2}
  Vector eigenvalues;   // d, descending, already clamped
  std::uint64_t sample_count = 0;
  double epsilon = kDefaultEigenFloor;  // relative floor
  double floor = 0.0;                   // absolute clamp = epsilon * lambda_max

  Eigen::Index dim() const { return mean.size(); }

  // V diag(lambda_clamped) V^T, the covariance the matrix actually inverts.
  RowMatrix regularized_covariance() const {
    const RowMatrix v = matrix.transpose() * eigenvalues.cwiseSqrt().asDiagonal();
    return v * eigenvalues.asDiagonal() * v.transpose();
  }
};

// Identity-transform model of dimension d (mean 0, W = I). Mostly for tests.
inline WhiteningModel identity_model(Eigen::Index d) {
  WhiteningModel m;
  m.mean = Vector::Zero(d);
  m.matrix = RowMatrix::Identity(d, d);
  m.eigenvalues = Vector::Ones(d);
  m.floor = kDefaultEigenFloor;
  return m;
}

// Fits the model on the rows of `samples` (N x d). Eigenvalues below
// epsilon * lambda_max are raised to that floor. Rows of the matrix follow
// descending eigenvalue order and each eigenvector is signed so its
// largest-magnitude component is positive, which makes the output unique.
inline WhiteningModel fit(const Eigen::Ref<const RowMatrix>& samples,
                          double epsilon = kDefaultEigenFloor) {
  const Eigen::Index n = samples.rows();
  const Eigen::Index d = samples.cols();
  if (n < 2) fail(ErrorCode::kInsufficientData, "whitening fit needs at least 2 samples");
  if (d < 1) fail(ErrorCode::kInvalidArgument, "whitening fit needs d >= 1");
  if (!(epsilon >= 0.0)) fail(ErrorCode::kInvalidArgument, "epsilon must be nonnegative");
  if (!samples.allFinite()) fail(ErrorCode::kNonFinite, "whitening fit input is not finite");

  WhiteningModel model;
  model.sample_count = static_cast<std::uint64_t>(n);
  model.epsilon = epsilon;

  // Fixed-order accumulation; row i is added before row i + 1.
  model.mean = Vector::Zero(d);
  for (Eigen::Index i = 0; i < n; ++i) model.mean += samples.row(i).transpose();
  model.mean /= static_cast<double>(n);

  const RowMatrix centered = samples.rowwise() - model.mean.transpose();
  Eigen::MatrixXd cov = centered.transpose() * centered;
  cov /= static_cast<double>(n);
  cov = 0.5 * (cov + cov.transpose());

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
  if (solver.info() != Eigen::Success) {
    fail(ErrorCode::kInvalidArgument, "covariance eigendecomposition failed");
  }
  const Vector& ascending = solver.eigenvalues();
  const Eigen::MatrixXd& vectors = solver.eigenvectors();

  const double largest = std::max(ascending(d - 1), 0.0);
  model.floor = epsilon * largest;
  if (!(model.floor > 0.0)) model.floor = std::max(epsilon, std::numeric_limits<double>::min());

  model.eigenvalues.resize(d);
  model.matrix.resize(d, d);
  for (Eigen::Index r = 0; r < d; ++r) {
    const Eigen::Index src = d - 1 - r;
    Vector v = vectors.col(src);
    Eigen::Index pivot = 0;
    v.cwiseAbs().maxCoeff(&pivot);
    if (v(pivot) < 0.0) v = -v;
    const double lambda = std::max(ascending(src), model.floor);
    model.eigenvalues(r) = lambda;
    model.matrix.row(r) = v.transpose() / std::sqrt(lambda);
  }
  return model;
}

inline void check_dim(const WhiteningModel& model, Eigen::Index d, const char* what) {
  if (d != model.dim()) {
    fail(ErrorCode::kDimensionMismatch, std::string(what) + ": expected dimension " +
                                            std::to_string(model.dim()) + ", got " +
                                            std::to_string(d));
  }
}

inline Vector whiten(const WhiteningModel& model, const Eigen::Ref<const Vector>& x) {
  check_dim(model, x.size(), "whiten");
  return model.matrix * (x - model.mean);
}

// Y = C W^T for rows that already had the mean subtracted.
inline RowMatrix whiten_centered_rows(const WhiteningModel& model, const RowMatrix& centered) {
  check_dim(model, centered.cols(), "whiten_centered_rows");
  RowMatrix y(centered.rows(), centered.cols());
  y.noalias() = centered * model.matrix.transpose();
  return y;
}

// Row-wise whitening of an N x d block: Y = (X - 1 mu^T) W^T.
inline RowMatrix whiten_rows(const WhiteningModel& model, const Eigen::Ref<const RowMatrix>& x) {
  check_dim(model, x.cols(), "whiten_rows");
  const RowMatrix centered = x.rowwise() - model.mean.transpose();
  return whiten_centered_rows(model, centered);
}

}  // namespace stall
