#pragma once

#include <Eigen/Dense>
#include <complex>
#include <map>
#include <tuple>

#include "canon3d/common.hpp"
#include "canon3d/rng.hpp"

namespace canon3d {

inline constexpr int kMaxDegree = 3;
inline constexpr int kHarmonicTotal = 16;  // sum of (2l+1), l = 0..3

using MatX = Eigen::MatrixXd;
using VecX = Eigen::VectorXd;

// Real solid harmonics, scaled so that Y^0 = 1 and Y^1(x) = (x, y, z)
// exactly (i.e. sqrt(4pi/(2l+1)) * r^l * orthonormal real SH).
// Components are ordered m = -l..l except l=1 which uses (x, y, z).
inline void eval_solid_harmonics(int l, const double* p, double* out) {
  const double x = p[0], y = p[1], z = p[2];
  switch (l) {
    case 0:
      out[0] = 1.0;
      return;
    case 1:
      out[0] = x;
      out[1] = y;
      out[2] = z;
      return;
    case 2: {
      const double r2 = x * x + y * y + z * z;
      const double s3 = 1.7320508075688772935;  // sqrt(3)
      out[0] = s3 * x * y;
      out[1] = s3 * y * z;
      out[2] = 0.5 * (3.0 * z * z - r2);
      out[3] = s3 * z * x;
      out[4] = 0.5 * s3 * (x * x - y * y);
      return;
    }
    case 3: {
      const double r2 = x * x + y * y + z * z;
      const double s10_4 = 0.79056941504209483300;  // sqrt(10)/4
      const double s15 = 3.8729833462074168852;     // sqrt(15)
      const double s6_4 = 0.61237243569579452455;   // sqrt(6)/4
      const double s15_2 = 1.9364916731037084426;   // sqrt(15)/2
      out[0] = s10_4 * y * (3.0 * x * x - y * y);
      out[1] = s15 * x * y * z;
      out[2] = s6_4 * y * (5.0 * z * z - r2);
      out[3] = 0.5 * z * (5.0 * z * z - 3.0 * r2);
      out[4] = s6_4 * x * (5.0 * z * z - r2);
      out[5] = s15_2 * z * (x * x - y * y);
      out[6] = s10_4 * x * (x * x - 3.0 * y * y);
      return;
    }
    default:
      throw error("eval_solid_harmonics: degree out of range");
  }
}

// n x 16 matrix of all harmonics (l = 0..3 concatenated) at the given
// points/directions.
inline MatX harmonics_matrix(const std::vector<Vec3>& pts) {
  MatX m(static_cast<int>(pts.size()), kHarmonicTotal);
  for (int i = 0; i < static_cast<int>(pts.size()); ++i) {
    double buf[7];
    int off = 0;
    for (int l = 0; l <= kMaxDegree; ++l) {
      eval_solid_harmonics(l, pts[i].data(), buf);
      for (int c = 0; c < 2 * l + 1; ++c) m(i, off + c) = buf[c];
      off += 2 * l + 1;
    }
  }
  return m;
}

namespace detail {

// Fixed generic point set used to realize Wigner matrices by solving
// Y(R p_k) = D Y(p_k) in the least-squares sense; exact because the
// harmonics span is closed under rotation.
inline const std::vector<Vec3>& generic_points() {
  static const std::vector<Vec3> pts = [] {
    Rng rng(7);
    std::vector<Vec3> p(16);
    for (auto& v : p) {
      double n;
      do {
        v = {rng.normal(), rng.normal(), rng.normal()};
        n = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
      } while (n < 0.3);
      v = {v[0] / n, v[1] / n, v[2] / n};
    }
    return p;
  }();
  return pts;
}

// Right pseudoinverse of the (2l+1) x 16 harmonic matrix at the generic
// points, per degree.
inline const std::array<MatX, 4>& generic_pinv() {
  static const std::array<MatX, 4> pinvs = [] {
    std::array<MatX, 4> out;
    const auto& pts = generic_points();
    int off = 0;
    MatX all = harmonics_matrix(pts);
    for (int l = 0; l <= kMaxDegree; ++l) {
      MatX a = all.block(0, off, all.rows(), 2 * l + 1).transpose();
      // pinv(a) = a^T (a a^T)^-1 for full row rank a
      out[l] = a.transpose() * (a * a.transpose()).ldlt().solve(
                                   MatX::Identity(2 * l + 1, 2 * l + 1));
      off += 2 * l + 1;
    }
    return out;
  }();
  return pinvs;
}

}  // namespace detail

// Wigner matrix D^l(R): the unique matrix with Y^l(R x) = D^l(R) Y^l(x).
inline MatX wigner_d(int l, const Mat3& r) {
  check(l >= 0 && l <= kMaxDegree, "wigner_d: degree out of range");
  if (l == 0) return MatX::Ones(1, 1);
  const auto& pts = detail::generic_points();
  std::vector<Vec3> rotated(pts.size());
  for (size_t i = 0; i < pts.size(); ++i) rotated[i] = mat3_apply(r, pts[i]);
  MatX yr(2 * l + 1, static_cast<int>(pts.size()));
  for (size_t i = 0; i < pts.size(); ++i) {
    double buf[7];
    eval_solid_harmonics(l, rotated[i].data(), buf);
    for (int c = 0; c < 2 * l + 1; ++c) yr(c, static_cast<int>(i)) = buf[c];
  }
  return yr * detail::generic_pinv()[l];
}

// Block-diagonal D^0..D^3 (16 x 16), in harmonics_matrix column order.
inline MatX wigner_blocks(const Mat3& r) {
  MatX d = MatX::Zero(kHarmonicTotal, kHarmonicTotal);
  int off = 0;
  for (int l = 0; l <= kMaxDegree; ++l) {
    d.block(off, off, 2 * l + 1, 2 * l + 1) = wigner_d(l, r);
    off += 2 * l + 1;
  }
  return d;
}

namespace detail {

inline double factorial(int n) {
  static const double table[] = {1, 1, 2, 6, 24, 120, 720, 5040, 40320,
                                 362880, 3628800, 39916800, 479001600};
  return table[n];
}

// Complex Clebsch-Gordan coefficient <l1 m1 l2 m2 | l m> (Racah's
// closed form; exact in double for l <= 3).
inline double cg_complex(int l1, int m1, int l2, int m2, int l, int m) {
  if (m1 + m2 != m) return 0.0;
  if (l < std::abs(l1 - l2) || l > l1 + l2) return 0.0;
  if (std::abs(m1) > l1 || std::abs(m2) > l2 || std::abs(m) > l) return 0.0;
  double pref =
      std::sqrt((2.0 * l + 1) * factorial(l1 + l2 - l) * factorial(l1 - l2 + l) *
                factorial(-l1 + l2 + l) / factorial(l1 + l2 + l + 1));
  pref *= std::sqrt(factorial(l + m) * factorial(l - m) * factorial(l1 - m1) *
                    factorial(l1 + m1) * factorial(l2 - m2) * factorial(l2 + m2));
  double sum = 0.0;
  for (int k = 0;; ++k) {
    int a = l1 + l2 - l - k;
    int b = l1 - m1 - k;
    int c = l2 + m2 - k;
    int d = l - l2 + m1 + k;
    int e = l - l1 - m2 + k;
    if (a < 0 || b < 0 || c < 0) break;
    if (d < 0 || e < 0) continue;
    double term = 1.0 / (factorial(k) * factorial(a) * factorial(b) *
                         factorial(c) * factorial(d) * factorial(e));
    sum += (k % 2 == 0) ? term : -term;
  }
  return pref * sum;
}

// Unitary change of basis from real to complex spherical harmonics
// (rows: real index in m-order; cols: complex m), Condon-Shortley phases.
inline Eigen::MatrixXcd real_to_complex_u(int l) {
  using namespace std::complex_literals;
  Eigen::MatrixXcd u = Eigen::MatrixXcd::Zero(2 * l + 1, 2 * l + 1);
  const double inv_sqrt2 = 1.0 / std::sqrt(2.0);
  for (int m = -l; m <= l; ++m) {
    if (m < 0) {
      u(m + l, m + l) = 1i * inv_sqrt2;
      u(m + l, -m + l) = -1i * inv_sqrt2 * ((-m) % 2 == 0 ? 1.0 : -1.0);
    } else if (m == 0) {
      u(l, l) = 1.0;
    } else {
      u(m + l, -m + l) = inv_sqrt2;
      u(m + l, m + l) = inv_sqrt2 * (m % 2 == 0 ? 1.0 : -1.0);
    }
  }
  return u;
}

// Component permutation aligning the m-ordered real basis with the
// orderings used by eval_solid_harmonics (identity except l = 1, whose
// m-order (y, z, x) is stored as (x, y, z)).
inline MatX component_perm(int l) {
  MatX p = MatX::Zero(2 * l + 1, 2 * l + 1);
  if (l == 1) {
    p(0, 2) = p(1, 0) = p(2, 1) = 1.0;
  } else {
    p.setIdentity();
  }
  return p;
}

}  // namespace detail

// Real-basis Clebsch-Gordan tensor for the triple (l, l1, l2), flattened
// row-major [m][p][q], unit Frobenius norm, first nonzero entry positive.
// Satisfies D^l Q = Q (D^l1 x D^l2) for every rotation.
inline std::vector<double> cg_real(int l, int l1, int l2) {
  using CMat = Eigen::MatrixXcd;
  const int n = 2 * l + 1, n1 = 2 * l1 + 1, n2 = 2 * l2 + 1;
  std::vector<std::complex<double>> q(static_cast<size_t>(n) * n1 * n2, 0.0);
  CMat u = detail::real_to_complex_u(l).conjugate();
  CMat u1 = detail::real_to_complex_u(l1);
  CMat u2 = detail::real_to_complex_u(l2);
  for (int m = 0; m < n; ++m)
    for (int p = 0; p < n1; ++p)
      for (int q2 = 0; q2 < n2; ++q2) {
        std::complex<double> acc = 0.0;
        for (int a = 0; a < n; ++a)
          for (int b = 0; b < n1; ++b)
            for (int c = 0; c < n2; ++c) {
              double cc = detail::cg_complex(l1, b - l1, l2, c - l2, l, a - l);
              if (cc != 0.0) acc += u(m, a) * u1(p, b) * u2(q2, c) * cc;
            }
        q[(static_cast<size_t>(m) * n1 + p) * n2 + q2] = acc;
      }
  // The realified tensor is purely real or purely imaginary.
  double re = 0, im = 0;
  for (const auto& v : q) {
    re = std::max(re, std::abs(v.real()));
    im = std::max(im, std::abs(v.imag()));
  }
  check(std::min(re, im) < 1e-10 * std::max({re, im, 1e-300}),
        "cg_real: realification produced a mixed tensor");
  std::vector<double> qr(q.size());
  for (size_t i = 0; i < q.size(); ++i)
    qr[i] = (re >= im) ? q[i].real() : q[i].imag();
  // Re-order components to the storage convention of each degree.
  MatX pm = detail::component_perm(l), p1 = detail::component_perm(l1),
       p2 = detail::component_perm(l2);
  std::vector<double> out(qr.size(), 0.0);
  for (int m = 0; m < n; ++m)
    for (int a = 0; a < n; ++a) {
      if (pm(m, a) == 0.0) continue;
      for (int p = 0; p < n1; ++p)
        for (int b = 0; b < n1; ++b) {
          if (p1(p, b) == 0.0) continue;
          for (int qq = 0; qq < n2; ++qq)
            for (int c = 0; c < n2; ++c) {
              if (p2(qq, c) == 0.0) continue;
              out[(static_cast<size_t>(m) * n1 + p) * n2 + qq] +=
                  pm(m, a) * p1(p, b) * p2(qq, c) *
                  qr[(static_cast<size_t>(a) * n1 + b) * n2 + c];
            }
        }
    }
  double norm = 0.0;
  for (double v : out) norm += v * v;
  norm = std::sqrt(norm);
  check(norm > 1e-12, "cg_real: zero tensor");
  for (double& v : out) v /= norm;
  for (double v : out) {
    if (std::abs(v) > 1e-12) {
      if (v < 0)
        for (double& w : out) w = -w;
      break;
    }
  }
  return out;
}

// All stored triples: l <= 3, |l1 - l2| <= l <= l1 + l2.
struct CgTable {
  // key (l, l1, l2) -> row-major [m][p][q]
  std::map<std::tuple<int, int, int>, std::vector<double>> entries;

  static const CgTable& instance() {
    static const CgTable table = [] {
      CgTable t;
      for (int l = 0; l <= kMaxDegree; ++l)
        for (int l1 = 0; l1 <= kMaxDegree; ++l1)
          for (int l2 = 0; l2 <= kMaxDegree; ++l2)
            if (std::abs(l1 - l2) <= l && l <= l1 + l2)
              t.entries[{l, l1, l2}] = cg_real(l, l1, l2);
      return t;
    }();
    return table;
  }

  const std::vector<double>& get(int l, int l1, int l2) const {
    auto it = entries.find({l, l1, l2});
    check(it != entries.end(), "CgTable: no such triple");
    return it->second;
  }
};

// ---------------------------------------------------------------------------
// Discrete spherical harmonic transforms over a finite direction set.

struct SphereSampling {
  int n_dirs = 0;
  std::vector<Vec3> dirs;
  MatX isht;  // n_dirs x 16, evaluation matrix
  MatX sht;   // 16 x n_dirs, regularized left inverse

  static SphereSampling from_dirs(const std::vector<Vec3>& dirs,
                                  double lambda = 1e-12) {
    SphereSampling s;
    s.n_dirs = static_cast<int>(dirs.size());
    check(s.n_dirs >= kHarmonicTotal,
          "SphereSampling: need at least 16 directions");
    s.dirs = dirs;
    s.isht = harmonics_matrix(dirs);
    MatX g = s.isht.transpose() * s.isht;
    MatX reg = g + (lambda * g.trace() / kHarmonicTotal) *
                       MatX::Identity(kHarmonicTotal, kHarmonicTotal);
    s.sht = reg.ldlt().solve(s.isht.transpose());
    return s;
  }

  // Spiral (Fibonacci) lattice; the default standalone sampling.
  static SphereSampling fibonacci(int n = 32) {
    std::vector<Vec3> dirs(n);
    const double ga = M_PI * (3.0 - std::sqrt(5.0));
    for (int i = 0; i < n; ++i) {
      double z = 1.0 - 2.0 * (i + 0.5) / n;
      double r = std::sqrt(std::max(0.0, 1.0 - z * z));
      dirs[i] = {r * std::cos(ga * i), r * std::sin(ga * i), z};
    }
    return from_dirs(dirs);
  }
};

// Greedy farthest-point selection over unit directions; start fixed by the
// caller. Returns selected indices in selection order.
inline std::vector<int> fps_directions(const std::vector<Vec3>& dirs, int m,
                                       int start) {
  const int n = static_cast<int>(dirs.size());
  check(m >= 1 && m <= n, "fps_directions: m out of range");
  std::vector<int> sel = {start};
  std::vector<double> best(n);
  auto d2 = [&](int a, int b) {
    double dx = dirs[a][0] - dirs[b][0], dy = dirs[a][1] - dirs[b][1],
           dz = dirs[a][2] - dirs[b][2];
    return dx * dx + dy * dy + dz * dz;
  };
  for (int i = 0; i < n; ++i) best[i] = d2(i, start);
  for (int t = 1; t < m; ++t) {
    int arg = 0;
    double bv = -1.0;
    for (int i = 0; i < n; ++i)
      if (best[i] > bv) {
        bv = best[i];
        arg = i;
      }
    sel.push_back(arg);
    for (int i = 0; i < n; ++i) best[i] = std::min(best[i], d2(i, arg));
  }
  return sel;
}

// Sampling anchored to the cloud's own point directions: rotating the
// cloud rotates the direction set with it, so the discrete transforms
// commute with rotations exactly rather than up to a band-limit error.
inline SphereSampling anchored_sampling(const PointCloud& cloud, int m) {
  const int k = cloud.size();
  const Vec3 c = cloud_mean(cloud);
  std::vector<Vec3> cand;
  std::vector<double> norms;
  cand.reserve(k);
  for (int i = 0; i < k; ++i) {
    const double* p = cloud.row(i);
    const Vec3 d{p[0] - c[0], p[1] - c[1], p[2] - c[2]};
    double n = std::sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2]);
    if (n < 1e-12) continue;
    cand.push_back({d[0] / n, d[1] / n, d[2] / n});
    norms.push_back(n);
  }
  check(static_cast<int>(cand.size()) >= m,
        "anchored_sampling: not enough off-center points");
  // Start from the farthest point from the centroid (ties: lowest index).
  int start = 0;
  for (int i = 1; i < static_cast<int>(norms.size()); ++i)
    if (norms[i] > norms[start]) start = i;
  std::vector<int> sel = fps_directions(cand, m, start);
  std::vector<Vec3> dirs(m);
  for (int i = 0; i < m; ++i) dirs[i] = cand[sel[i]];
  return SphereSampling::from_dirs(dirs);
}

}  // namespace canon3d
