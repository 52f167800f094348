#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace canon3d {

using Vec3 = std::array<double, 3>;
using Mat3 = std::array<std::array<double, 3>, 3>;

// A point cloud is a flat row-major K x 3 buffer plus optional per-point
// integer labels (part ids, correspondence ids).
struct PointCloud {
  std::vector<double> xyz;  // 3*K values, row-major
  std::vector<int> labels;  // empty or K values

  int size() const { return static_cast<int>(xyz.size() / 3); }
  double* row(int i) { return xyz.data() + 3 * i; }
  const double* row(int i) const { return xyz.data() + 3 * i; }
  Vec3 point(std::size_t i) const { return {xyz[3 * i], xyz[3 * i + 1], xyz[3 * i + 2]}; }
  bool has_labels() const { return !labels.empty(); }
};

struct error : std::runtime_error {
  explicit error(const std::string& what) : std::runtime_error(what) {}
};

inline void check(bool cond, const std::string& msg) {
  if (!cond) throw error(msg);
}

inline Vec3 mat3_apply(const Mat3& m, const Vec3& v) {
  return {m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
          m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
          m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2]};
}

inline Mat3 mat3_mul(const Mat3& a, const Mat3& b) {
  Mat3 c{};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      double s = 0;
      for (int k = 0; k < 3; ++k) s += a[i][k] * b[k][j];
      c[i][j] = s;
    }
  return c;
}

inline Mat3 mat3_transpose(const Mat3& m) {
  Mat3 t{};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) t[i][j] = m[j][i];
  return t;
}

inline Mat3 mat3_identity() {
  return {{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}};
}

inline double mat3_det(const Mat3& m) {
  return m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) -
         m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0]) +
         m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
}

// Applies R to every point: out_i = R x_i.
inline PointCloud rotate_cloud(const PointCloud& cloud, const Mat3& r) {
  PointCloud out = cloud;
  for (int i = 0; i < cloud.size(); ++i) {
    const double* p = cloud.row(i);
    Vec3 v = mat3_apply(r, {p[0], p[1], p[2]});
    double* q = out.row(i);
    q[0] = v[0];
    q[1] = v[1];
    q[2] = v[2];
  }
  return out;
}

inline Vec3 cloud_mean(const PointCloud& cloud) {
  Vec3 m{0, 0, 0};
  const int k = cloud.size();
  for (int i = 0; i < k; ++i) {
    const double* p = cloud.row(i);
    m[0] += p[0];
    m[1] += p[1];
    m[2] += p[2];
  }
  if (k > 0) {
    m[0] /= k;
    m[1] /= k;
    m[2] /= k;
  }
  return m;
}

// Greedy farthest-point subsampling in selection order. Deterministic:
// starts at the point farthest from the centroid of `pts` and breaks all
// ties toward the lowest index.
inline std::vector<int> fps_points(const std::vector<Vec3>& pts, int m) {
  const int n = static_cast<int>(pts.size());
  check(m >= 1 && m <= n, "fps_points: m out of range");
  Vec3 c{0, 0, 0};
  for (const Vec3& p : pts) {
    c[0] += p[0];
    c[1] += p[1];
    c[2] += p[2];
  }
  c[0] /= n;
  c[1] /= n;
  c[2] /= n;
  auto d2 = [](const Vec3& a, const Vec3& b) {
    double dx = a[0] - b[0], dy = a[1] - b[1], dz = a[2] - b[2];
    return dx * dx + dy * dy + dz * dz;
  };
  int start = 0;
  double far2 = -1.0;
  for (int i = 0; i < n; ++i) {
    double v = d2(pts[i], c);
    if (v > far2) {
      far2 = v;
      start = i;
    }
  }
  std::vector<int> sel = {start};
  std::vector<double> best(n);
  for (int i = 0; i < n; ++i) best[i] = d2(pts[i], pts[start]);
  for (int t = 1; t < m; ++t) {
    int arg = 0;
    double bv = -1.0;
    for (int i = 0; i < n; ++i)
      if (best[i] > bv) {
        bv = best[i];
        arg = i;
      }
    sel.push_back(arg);
    for (int i = 0; i < n; ++i) best[i] = std::min(best[i], d2(pts[i], pts[arg]));
  }
  return sel;
}

inline PointCloud center_cloud(const PointCloud& cloud, Vec3* mean_out = nullptr) {
  Vec3 m = cloud_mean(cloud);
  if (mean_out) *mean_out = m;
  PointCloud out = cloud;
  for (int i = 0; i < cloud.size(); ++i) {
    double* p = out.row(i);
    p[0] -= m[0];
    p[1] -= m[1];
    p[2] -= m[2];
  }
  return out;
}

}  // namespace canon3d
