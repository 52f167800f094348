#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <unordered_map>
#include <vector>

#include "canon3d/common.hpp"
#include "canon3d/rng.hpp"

namespace canon3d {

// Result of a cropping operator. `kept_indices` are the surviving indices
// into the full cloud in ascending order; the rows of `partial` are bitwise
// copies of the corresponding full rows. `barycenter_offset` is the mean of
// the kept points expressed in the full cloud's centered coordinates — the
// translation the amodal head is asked to recover.
struct CropResult {
  PointCloud partial;
  std::vector<int> kept_indices;
  Vec3 barycenter_offset{0, 0, 0};
};

namespace detail {

inline CropResult assemble_crop(const PointCloud& full, std::vector<int> kept) {
  std::sort(kept.begin(), kept.end());
  CropResult out;
  out.partial.xyz.reserve(3 * kept.size());
  const bool labeled = full.has_labels();
  if (labeled) out.partial.labels.reserve(kept.size());
  for (int i : kept) {
    const double* p = full.row(i);
    out.partial.xyz.push_back(p[0]);
    out.partial.xyz.push_back(p[1]);
    out.partial.xyz.push_back(p[2]);
    if (labeled) out.partial.labels.push_back(full.labels[i]);
  }
  const Vec3 c = cloud_mean(full);
  Vec3 o{0, 0, 0};
  for (int i : kept) {
    const double* p = full.row(i);
    o[0] += p[0] - c[0];
    o[1] += p[1] - c[1];
    o[2] += p[2] - c[2];
  }
  const double n = static_cast<double>(kept.size());
  out.barycenter_offset = {o[0] / n, o[1] / n, o[2] / n};
  out.kept_indices = std::move(kept);
  return out;
}

}  // namespace detail

// Half-space slicing: keep the ceil(K/2) points with the lowest projection
// onto `direction` (equivalently, remove the top K/2). Ties on equal
// projection are broken by original index so the result is deterministic.
inline CropResult slice_crop(const PointCloud& full, const Vec3& direction) {
  const int k = full.size();
  check(k >= 2, "slice_crop: need at least two points");
  std::vector<double> dot(k);
  for (int i = 0; i < k; ++i) {
    const double* p = full.row(i);
    dot[i] = p[0] * direction[0] + p[1] * direction[1] + p[2] * direction[2];
  }
  std::vector<int> order(k);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return dot[a] < dot[b]; });
  const int n_keep = (k + 1) / 2;
  order.resize(n_keep);
  return detail::assemble_crop(full, std::move(order));
}

inline CropResult slice_crop(const PointCloud& full, Rng& rng) {
  return slice_crop(full, random_unit_vector(rng));
}

// Depth-camera cropping: project through a pinhole camera at `camera`
// looking at the cloud centroid, keep the nearest point per occupied pixel
// of a `resolution` x `resolution` image, then farthest-point subsample if
// more than `max_points` pixels are occupied. The focal length is chosen so
// the cloud spans ~80% of the image.
inline CropResult depth_camera_crop(const PointCloud& full, const Vec3& camera,
                                    int resolution = 64, int max_points = 512) {
  check(resolution >= 1, "depth_camera_crop: resolution must be positive");
  check(max_points >= 1, "depth_camera_crop: max_points must be positive");
  const int k = full.size();
  const Vec3 c = cloud_mean(full);
  double bound2 = 0.0;
  for (int i = 0; i < k; ++i) {
    const double* p = full.row(i);
    double dx = p[0] - c[0], dy = p[1] - c[1], dz = p[2] - c[2];
    bound2 = std::max(bound2, dx * dx + dy * dy + dz * dz);
  }
  const double dx = c[0] - camera[0], dy = c[1] - camera[1], dz = c[2] - camera[2];
  const double dist2 = dx * dx + dy * dy + dz * dz;
  check(dist2 > bound2, "depth_camera_crop: camera inside the bounding sphere");

  const double dist = std::sqrt(dist2);
  const Vec3 fwd{dx / dist, dy / dist, dz / dist};
  const Vec3 up0 = std::fabs(fwd[2]) < 0.9 ? Vec3{0, 0, 1} : Vec3{0, 1, 0};
  Vec3 right{fwd[1] * up0[2] - fwd[2] * up0[1], fwd[2] * up0[0] - fwd[0] * up0[2],
             fwd[0] * up0[1] - fwd[1] * up0[0]};
  const double rn = std::sqrt(right[0] * right[0] + right[1] * right[1] +
                              right[2] * right[2]);
  right = {right[0] / rn, right[1] / rn, right[2] / rn};
  const Vec3 up{fwd[1] * right[2] - fwd[2] * right[1],
                fwd[2] * right[0] - fwd[0] * right[2],
                fwd[0] * right[1] - fwd[1] * right[0]};

  std::vector<double> iu(k), iv(k), depth(k);
  double span = 0.0;
  for (int i = 0; i < k; ++i) {
    const double* p = full.row(i);
    const Vec3 d{p[0] - camera[0], p[1] - camera[1], p[2] - camera[2]};
    depth[i] = d[0] * fwd[0] + d[1] * fwd[1] + d[2] * fwd[2];
    if (depth[i] <= 0.0) continue;
    iu[i] = (d[0] * right[0] + d[1] * right[1] + d[2] * right[2]) / depth[i];
    iv[i] = (d[0] * up[0] + d[1] * up[1] + d[2] * up[2]) / depth[i];
    span = std::max(span, std::max(std::fabs(iu[i]), std::fabs(iv[i])));
  }
  const double scale = span > 1e-12 ? 0.4 * resolution / span : 0.0;
  const double half = 0.5 * resolution;

  // Per-pixel z-buffer; the first (lowest-index) point wins depth ties.
  std::unordered_map<std::int64_t, int> nearest;
  for (int i = 0; i < k; ++i) {
    if (depth[i] <= 0.0) continue;
    const int px = static_cast<int>(std::floor(half + scale * iu[i]));
    const int py = static_cast<int>(std::floor(half + scale * iv[i]));
    if (px < 0 || px >= resolution || py < 0 || py >= resolution) continue;
    const std::int64_t key = static_cast<std::int64_t>(py) * resolution + px;
    auto it = nearest.find(key);
    if (it == nearest.end() || depth[i] < depth[it->second])
      nearest[key] = i;
  }
  std::vector<int> kept;
  kept.reserve(nearest.size());
  for (const auto& kv : nearest) kept.push_back(kv.second);
  check(!kept.empty(), "depth_camera_crop: no visible points");
  std::sort(kept.begin(), kept.end());

  if (static_cast<int>(kept.size()) > max_points) {
    std::vector<Vec3> pts(kept.size());
    for (std::size_t j = 0; j < kept.size(); ++j) pts[j] = full.point(kept[j]);
    std::vector<int> sel = fps_points(pts, max_points);
    std::vector<int> capped(sel.size());
    for (std::size_t j = 0; j < sel.size(); ++j) capped[j] = kept[sel[j]];
    kept = std::move(capped);
  }
  return detail::assemble_crop(full, std::move(kept));
}

struct RecenterResult {
  PointCloud centered;
  Vec3 mean{0, 0, 0};
};

inline RecenterResult recenter(const PointCloud& cloud) {
  check(cloud.size() > 0, "recenter: empty cloud");
  RecenterResult r;
  r.centered = center_cloud(cloud, &r.mean);
  return r;
}

}  // namespace canon3d
