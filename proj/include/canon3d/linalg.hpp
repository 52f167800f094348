#pragma once

// Small dense 3x3 factorizations used by the frame losses and the baselines:
// SVD (forward-only, no adjoint), orthogonal Procrustes with determinant
// correction, and the PCA canonicalization baseline.

#include <cmath>
#include <cstddef>
#include <vector>

#include <Eigen/Dense>

#include "canon3d/common.hpp"

namespace canon3d {

struct Svd3 {
  Mat3 u;
  Vec3 s;  // descending, nonnegative
  Mat3 v;
};

// Full SVD of a 3x3 matrix, m = u * diag(s) * v^T.
inline Svd3 svd3(const Mat3& m) {
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      check(std::isfinite(m[i][j]), "svd3: non-finite entry in input matrix");
  Eigen::Matrix3d em;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) em(i, j) = m[i][j];
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(em, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Svd3 out;
  for (int i = 0; i < 3; ++i) {
    out.s[i] = svd.singularValues()(i);
    for (int j = 0; j < 3; ++j) {
      out.u[i][j] = svd.matrixU()(i, j);
      out.v[i][j] = svd.matrixV()(i, j);
    }
  }
  return out;
}

// Nearest matrix with orthonormal columns, u * v^T.
inline Mat3 svd3_uvt(const Mat3& m) {
  const Svd3 f = svd3(m);
  return mat3_mul(f.u, mat3_transpose(f.v));
}

struct ProcrustesResult {
  Mat3 rotation;        // proper rotation, det = +1
  bool rank_deficient;  // cross-covariance rank < 3: solution not unique
};

// Solves argmin_{R in SO(3)} sum_i ||y_i - R x_i||^2 for clouds in
// correspondence, via the SVD of the cross-covariance sum_i y_i x_i^T.
// If det(U V^T) < 0 the singular direction with the smallest singular
// value is flipped (ties: smallest index, i.e. the last of the
// descending-ordered columns).
inline ProcrustesResult procrustes_align(const PointCloud& x, const PointCloud& y) {
  check(x.size() == y.size(), "procrustes_align: clouds must have equal size");
  check(x.size() > 0, "procrustes_align: empty cloud");
  Mat3 cov{};  // sum_i y_i x_i^T
  for (std::size_t i = 0; i < x.size(); ++i) {
    const Vec3 xi = x.point(i), yi = y.point(i);
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) cov[r][c] += yi[r] * xi[c];
  }
  const Svd3 f = svd3(cov);
  Mat3 r = mat3_mul(f.u, mat3_transpose(f.v));
  if (mat3_det(r) < 0.0) {
    // flip the column of u belonging to the smallest singular value
    Mat3 u = f.u;
    for (int i = 0; i < 3; ++i) u[i][2] = -u[i][2];
    r = mat3_mul(u, mat3_transpose(f.v));
  }
  ProcrustesResult out;
  out.rotation = r;
  out.rank_deficient = f.s[2] <= 1e-12 * std::max(1.0, f.s[0]);
  return out;
}

struct PcaResult {
  Mat3 frame;            // rows = eigenvectors, descending eigenvalue order, det = +1
  PointCloud canonical;  // frame * (x_i - mean) per point
  Vec3 eigenvalues;      // descending
  Vec3 mean;
  bool ambiguous;  // repeated eigenvalues (within 1e-9): frame not unique
};

// PCA baseline: mean-center, diagonalize the covariance, and read the frame
// off the eigenvectors. Sign convention: each eigenvector's
// largest-magnitude component is made positive (ties: lowest index);
// det is forced to +1 by flipping the last row if needed.
inline PcaResult pca_canonicalize(const PointCloud& cloud) {
  check(cloud.size() > 0, "pca_canonicalize: empty cloud");
  const std::size_t k = cloud.size();
  Vec3 mean = cloud_mean(cloud);
  Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
  for (std::size_t i = 0; i < k; ++i) {
    const Vec3 p = cloud.point(i);
    Eigen::Vector3d d(p[0] - mean[0], p[1] - mean[1], p[2] - mean[2]);
    cov += d * d.transpose();
  }
  cov /= static_cast<double>(k);
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> eig(cov);
  check(eig.info() == Eigen::Success, "pca_canonicalize: eigendecomposition failed");

  PcaResult out;
  out.mean = mean;
  // Eigen returns ascending eigenvalues; reverse to descending.
  for (int r = 0; r < 3; ++r) {
    const int src = 2 - r;
    out.eigenvalues[r] = eig.eigenvalues()(src);
    for (int c = 0; c < 3; ++c) out.frame[r][c] = eig.eigenvectors()(c, src);
  }
  out.ambiguous = (out.eigenvalues[0] - out.eigenvalues[1] < 1e-9) ||
                  (out.eigenvalues[1] - out.eigenvalues[2] < 1e-9);

  for (int r = 0; r < 3; ++r) {
    int arg = 0;
    double best = std::fabs(out.frame[r][0]);
    for (int c = 1; c < 3; ++c) {
      const double a = std::fabs(out.frame[r][c]);
      if (a > best) {
        best = a;
        arg = c;
      }
    }
    if (out.frame[r][arg] < 0.0)
      for (int c = 0; c < 3; ++c) out.frame[r][c] = -out.frame[r][c];
  }
  if (mat3_det(out.frame) < 0.0)
    for (int c = 0; c < 3; ++c) out.frame[2][c] = -out.frame[2][c];

  out.canonical.xyz.resize(3 * k);
  for (std::size_t i = 0; i < k; ++i) {
    const Vec3 p = cloud.point(i);
    const Vec3 d{p[0] - mean[0], p[1] - mean[1], p[2] - mean[2]};
    const Vec3 q = mat3_apply(out.frame, d);
    out.canonical.xyz[3 * i] = q[0];
    out.canonical.xyz[3 * i + 1] = q[1];
    out.canonical.xyz[3 * i + 2] = q[2];
  }
  out.canonical.labels = cloud.labels;
  return out;
}

}  // namespace canon3d
