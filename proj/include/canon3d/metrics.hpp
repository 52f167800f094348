#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <string>
#include <utility>
#include <vector>

#include "canon3d/common.hpp"
#include "canon3d/linalg.hpp"
#include "canon3d/occlusion.hpp"
#include "canon3d/rng.hpp"
#include "canon3d/tensor.hpp"

namespace canon3d {

struct MetricReport {
  std::string metric;
  std::string category;
  double value = 0.0;
  int n_samples = 0;
  std::uint64_t seed = 0;
};

inline std::string metric_csv_header() { return "metric,category,value,n_samples,seed"; }

inline std::string metric_csv_row(const MetricReport& r) {
  char buf[128];
  std::snprintf(buf, sizeof(buf), ",%.17g,%d,%llu", r.value, r.n_samples,
                static_cast<unsigned long long>(r.seed));
  return r.metric + "," + r.category + buf;
}

namespace detail {

inline double dist2(const double* p, const double* q) {
  const double dx = p[0] - q[0];
  const double dy = p[1] - q[1];
  const double dz = p[2] - q[2];
  return dx * dx + dy * dy + dz * dz;
}

// Uniform-grid nearest-neighbor index over a fixed cloud. Queries return
// the exact minimum squared distance: candidate cells are scanned in
// expanding Chebyshev rings and the search stops only once the nearest
// possible point of the next ring is provably farther than the best hit.
// Distances are accumulated with the same expression as the brute-force
// scan, so the minimum is the identical double.
class NnGrid {
 public:
  explicit NnGrid(const PointCloud& cloud) : cloud_(&cloud) {
    check(cloud.size() > 0, "NnGrid: empty cloud");
    const std::size_t n = cloud.size();
    lo_ = hi_ = cloud.point(0);
    for (std::size_t i = 1; i < n; ++i) {
      const double* p = cloud.row(i);
      for (int a = 0; a < 3; ++a) {
        lo_[a] = std::min(lo_[a], p[a]);
        hi_[a] = std::max(hi_[a], p[a]);
      }
    }
    const int target = std::max(1, static_cast<int>(std::cbrt(static_cast<double>(n))));
    min_cell_ = 0.0;
    for (int a = 0; a < 3; ++a) {
      const double extent = hi_[a] - lo_[a];
      dims_[a] = extent > 0.0 ? target : 1;
      cell_[a] = dims_[a] > 1 ? extent / dims_[a] : 1.0;
      if (dims_[a] > 1)
        min_cell_ = min_cell_ == 0.0 ? cell_[a] : std::min(min_cell_, cell_[a]);
    }
    cells_.assign(static_cast<std::size_t>(dims_[0]) * dims_[1] * dims_[2], {});
    for (std::size_t i = 0; i < n; ++i)
      cells_[flat_index(coords(cloud.row(i)))].push_back(static_cast<int>(i));
  }

  double nearest2(const double* p) const {
    const std::array<int, 3> c = coords(p);
    double best = std::numeric_limits<double>::infinity();
    const int max_ring =
        std::max({dims_[0], dims_[1], dims_[2]}) + 1;  // covers clamped queries
    for (int ring = 0; ring <= max_ring; ++ring) {
      if (ring > 1 && min_cell_ > 0.0) {
        // Shrink the ring bound by a hair so ulp-level rounding in the
        // cell assignment or in dist2 can never hide the true minimum.
        const double bound = (ring - 1) * min_cell_ * 0.999999999;
        if (best <= bound * bound) break;
      }
      bool any = false;
      visit_ring(c, ring, [&](const std::vector<int>& cell) {
        any = true;
        for (int idx : cell) {
          const double d = dist2(p, cloud_->row(static_cast<std::size_t>(idx)));
          if (d < best) best = d;
        }
      });
      if (!any && ring > 0 && best < std::numeric_limits<double>::infinity() &&
          min_cell_ == 0.0)
        break;  // single-cell grid: everything was scanned at ring 0
    }
    return best;
  }

 private:
  std::array<int, 3> coords(const double* p) const {
    std::array<int, 3> c;
    for (int a = 0; a < 3; ++a) {
      int i = dims_[a] > 1 ? static_cast<int>((p[a] - lo_[a]) / cell_[a]) : 0;
      c[a] = std::clamp(i, 0, dims_[a] - 1);
    }
    return c;
  }

  std::size_t flat_index(const std::array<int, 3>& c) const {
    return (static_cast<std::size_t>(c[0]) * dims_[1] + c[1]) * dims_[2] + c[2];
  }

  template <typename Fn>
  void visit_ring(const std::array<int, 3>& c, int ring, Fn&& fn) const {
    const int x0 = std::max(0, c[0] - ring), x1 = std::min(dims_[0] - 1, c[0] + ring);
    const int y0 = std::max(0, c[1] - ring), y1 = std::min(dims_[1] - 1, c[1] + ring);
    const int z0 = std::max(0, c[2] - ring), z1 = std::min(dims_[2] - 1, c[2] + ring);
    for (int x = x0; x <= x1; ++x)
      for (int y = y0; y <= y1; ++y)
        for (int z = z0; z <= z1; ++z) {
          const int cheb = std::max(
              {std::abs(x - c[0]), std::abs(y - c[1]), std::abs(z - c[2])});
          if (cheb != ring) continue;
          fn(cells_[flat_index({x, y, z})]);
        }
  }

  const PointCloud* cloud_;
  Vec3 lo_{}, hi_{};
  std::array<int, 3> dims_{};
  Vec3 cell_{};
  double min_cell_ = 0.0;
  std::vector<std::vector<int>> cells_;
};

}  // namespace detail

// Two-way Chamfer distance: squared nearest-neighbor distances averaged
// within each cloud, then summed over the two directions. Brute force.
inline double chamfer_brute(const PointCloud& a, const PointCloud& b) {
  check(a.size() > 0 && b.size() > 0, "chamfer: empty cloud");
  double total = 0.0;
  const PointCloud* from = &a;
  const PointCloud* to = &b;
  for (int side = 0; side < 2; ++side) {
    double s = 0.0;
    for (std::size_t i = 0; i < from->size(); ++i) {
      const double* p = from->row(i);
      double best = std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < to->size(); ++j) {
        const double d = detail::dist2(p, to->row(j));
        if (d < best) best = d;
      }
      s += best;
    }
    total += s / static_cast<double>(from->size());
    std::swap(from, to);
  }
  return total;
}

// Grid-accelerated Chamfer. Identical arithmetic to chamfer_brute (same
// per-point minimum, same accumulation order), so the result is the same
// double bit for bit.
inline double chamfer(const PointCloud& a, const PointCloud& b) {
  check(a.size() > 0 && b.size() > 0, "chamfer: empty cloud");
  const detail::NnGrid ga(a), gb(b);
  double total = 0.0;
  {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += gb.nearest2(a.row(i));
    total += s / static_cast<double>(a.size());
  }
  {
    double s = 0.0;
    for (std::size_t i = 0; i < b.size(); ++i) s += ga.nearest2(b.row(i));
    total += s / static_cast<double>(b.size());
  }
  return total;
}

// Instance-level consistency: one shared set of random rotations, and for
// each shape the Chamfer distance between the canonicalized rotated copy
// and the canonicalized original, averaged over shapes and rotations.
template <typename CanonFn>
MetricReport ic_metric(CanonFn&& canon, const std::vector<PointCloud>& shapes,
                       int n_rotations, Rng& rng, std::string category = "") {
  check(!shapes.empty(), "ic_metric: empty dataset");
  check(n_rotations > 0, "ic_metric: n_rotations must be positive");
  const std::uint64_t seed = rng.state();
  std::vector<Mat3> rots(n_rotations);
  for (Mat3& r : rots) r = random_rotation(rng);
  double total = 0.0;
  for (const PointCloud& x : shapes) {
    const PointCloud xc = canon(x);
    for (const Mat3& r : rots) total += chamfer(canon(rotate_cloud(x, r)), xc);
  }
  MetricReport rep;
  rep.metric = "ic";
  rep.category = std::move(category);
  rep.value = total / (static_cast<double>(shapes.size()) * n_rotations);
  rep.n_samples = n_rotations;
  rep.seed = seed;
  return rep;
}

// Category-level consistency: each shape compared against n_compare
// sampled partners (never itself), Chamfer between the canonicalized pair.
template <typename CanonFn>
MetricReport cc_metric(CanonFn&& canon, const std::vector<PointCloud>& shapes,
                       int n_compare, Rng& rng, std::string category = "") {
  check(shapes.size() >= 2, "cc_metric: need at least two shapes");
  check(n_compare > 0, "cc_metric: n_compare must be positive");
  const std::uint64_t seed = rng.state();
  std::vector<PointCloud> canonical;
  canonical.reserve(shapes.size());
  for (const PointCloud& x : shapes) canonical.push_back(canon(x));
  const int n = static_cast<int>(shapes.size());
  double total = 0.0;
  for (int i = 0; i < n; ++i)
    for (int s = 0; s < n_compare; ++s) {
      int j = rng.uniform_int(n - 1);
      if (j >= i) ++j;  // uniform over partners distinct from i
      total += chamfer(canonical[i], canonical[j]);
    }
  MetricReport rep;
  rep.metric = "cc";
  rep.category = std::move(category);
  rep.value = total / (static_cast<double>(n) * n_compare);
  rep.n_samples = n_compare;
  rep.seed = seed;
  return rep;
}

// Ground-truth consistency on a pre-aligned dataset: transport a sampled
// anchor shape by the canonicalizing frames predicted for two other
// sampled shapes and measure the Chamfer distance between the transports.
template <typename FrameFn>
MetricReport gc_metric(FrameFn&& frame, const std::vector<PointCloud>& shapes,
                       int n_anchors, int n_pairs, Rng& rng,
                       std::string category = "") {
  check(shapes.size() >= 3, "gc_metric: need at least three shapes");
  check(n_anchors > 0 && n_pairs > 0, "gc_metric: sample counts must be positive");
  const std::uint64_t seed = rng.state();
  const int n = static_cast<int>(shapes.size());
  std::vector<Mat3> frames;
  frames.reserve(shapes.size());
  for (const PointCloud& x : shapes) frames.push_back(frame(x));
  double total = 0.0;
  for (int a = 0; a < n_anchors; ++a) {
    const PointCloud& xi = shapes[static_cast<std::size_t>(rng.uniform_int(n))];
    for (int p = 0; p < n_pairs; ++p) {
      const Mat3& rj = frames[static_cast<std::size_t>(rng.uniform_int(n))];
      const Mat3& rk = frames[static_cast<std::size_t>(rng.uniform_int(n))];
      total += chamfer(rotate_cloud(xi, rj), rotate_cloud(xi, rk));
    }
  }
  MetricReport rep;
  rep.metric = "gc";
  rep.category = std::move(category);
  rep.value = total / (static_cast<double>(n_anchors) * n_pairs);
  rep.n_samples = n_anchors * n_pairs;
  rep.seed = seed;
  return rep;
}

// Translation error: mean L2 distance between the predicted amodal
// translation of each crop and its recorded barycenter offset.
template <typename TransFn>
MetricReport te_metric(TransFn&& trans, const std::vector<CropResult>& crops,
                       std::string category = "", std::uint64_t seed = 0) {
  check(!crops.empty(), "te_metric: empty dataset");
  double total = 0.0;
  for (const CropResult& c : crops) {
    const Vec3 t = trans(c.partial);
    const Vec3& o = c.barycenter_offset;
    const double dx = t[0] - o[0], dy = t[1] - o[1], dz = t[2] - o[2];
    total += std::sqrt(dx * dx + dy * dy + dz * dz);
  }
  MetricReport rep;
  rep.metric = "te";
  rep.category = std::move(category);
  rep.value = total / static_cast<double>(crops.size());
  rep.n_samples = static_cast<int>(crops.size());
  rep.seed = seed;
  return rep;
}

struct RegistrationResult {
  double rmse = 0.0;  // mean over pairs of per-pair point RMSE
  double cd = 0.0;    // mean over pairs of Chamfer distance
};

// Registers each source onto its target by applying the source's
// canonicalizing frame followed by the inverse of the target's, then
// reports the correspondence RMSE and the (correspondence-free) Chamfer
// distance of the registered points against the target.
template <typename FrameFn>
RegistrationResult registration_eval(
    FrameFn&& frame, const std::vector<std::pair<PointCloud, PointCloud>>& pairs) {
  check(!pairs.empty(), "registration_eval: no pairs");
  RegistrationResult out;
  for (const auto& [source, target] : pairs) {
    check(source.size() == target.size() && source.size() > 0,
          "registration_eval: pairs must be same-size nonempty clouds");
    const Mat3 rs = frame(source);
    const Mat3 rt_inv = mat3_transpose(frame(target));
    const PointCloud registered = rotate_cloud(rotate_cloud(source, rs), rt_inv);
    double se = 0.0;
    for (std::size_t i = 0; i < registered.size(); ++i)
      se += detail::dist2(registered.row(i), target.row(i));
    out.rmse += std::sqrt(se / static_cast<double>(registered.size()));
    out.cd += chamfer(registered, target);
  }
  out.rmse /= static_cast<double>(pairs.size());
  out.cd /= static_cast<double>(pairs.size());
  return out;
}

struct KeypointTransfer {
  std::vector<int> target_index;   // per source point: receiving target point
  std::vector<int> target_labels;  // per target point; -1 where nothing landed
  bool flagged_empty_part = false;
};

// Transfers per-point annotations between canonicalized clouds through
// their part decompositions: each source point keeps its offset from its
// part centroid, the offset is replayed from the matching target part
// centroid, and the annotation lands on the nearest target point (ties:
// lowest index). Target parts with no members fall back to the global
// target mean as the centroid and set the flag. When several source
// points land on one target point, the lowest source index wins.
inline KeypointTransfer keypoint_transfer(const PointCloud& source,
                                          const std::vector<int>& part_source,
                                          const PointCloud& target,
                                          const std::vector<int>& part_target,
                                          int c_parts) {
  check(source.size() > 0 && target.size() > 0, "keypoint_transfer: empty cloud");
  check(source.has_labels(), "keypoint_transfer: source labels required");
  check(part_source.size() == source.size() && part_target.size() == target.size(),
        "keypoint_transfer: part assignment sizes must match the clouds");
  check(c_parts > 0, "keypoint_transfer: c_parts must be positive");
  for (int p : part_source) check(p >= 0 && p < c_parts, "keypoint_transfer: bad part id");
  for (int p : part_target) check(p >= 0 && p < c_parts, "keypoint_transfer: bad part id");

  auto centroids = [c_parts](const PointCloud& cloud, const std::vector<int>& parts,
                             std::vector<bool>& present) {
    std::vector<Vec3> c(static_cast<std::size_t>(c_parts), Vec3{0, 0, 0});
    std::vector<int> count(static_cast<std::size_t>(c_parts), 0);
    for (std::size_t i = 0; i < cloud.size(); ++i) {
      const std::size_t p = static_cast<std::size_t>(parts[i]);
      const double* q = cloud.row(i);
      for (int a = 0; a < 3; ++a) c[p][a] += q[a];
      ++count[p];
    }
    present.assign(static_cast<std::size_t>(c_parts), false);
    for (int p = 0; p < c_parts; ++p)
      if (count[p] > 0) {
        present[p] = true;
        for (int a = 0; a < 3; ++a) c[p][a] /= count[p];
      }
    return c;
  };

  std::vector<bool> src_present, tgt_present;
  const std::vector<Vec3> src_c = centroids(source, part_source, src_present);
  const std::vector<Vec3> tgt_c = centroids(target, part_target, tgt_present);
  const Vec3 tgt_mean = cloud_mean(target);

  KeypointTransfer out;
  out.target_index.resize(source.size());
  out.target_labels.assign(target.size(), -1);
  for (std::size_t i = 0; i < source.size(); ++i) {
    const std::size_t p = static_cast<std::size_t>(part_source[i]);
    const double* x = source.row(i);
    Vec3 anchor = tgt_c[p];
    if (!tgt_present[p]) {
      anchor = tgt_mean;
      out.flagged_empty_part = true;
    }
    Vec3 pos;
    for (int a = 0; a < 3; ++a) pos[a] = anchor[a] + (x[a] - src_c[p][a]);
    int arg = 0;
    double best = detail::dist2(pos.data(), target.row(0));
    for (std::size_t j = 1; j < target.size(); ++j) {
      const double d = detail::dist2(pos.data(), target.row(j));
      if (d < best) {
        best = d;
        arg = static_cast<int>(j);
      }
    }
    out.target_index[i] = arg;
    if (out.target_labels[static_cast<std::size_t>(arg)] < 0)
      out.target_labels[static_cast<std::size_t>(arg)] = source.labels[i];
  }
  return out;
}

// Hard part assignment from a soft segmentation (ties: lowest column).
inline std::vector<int> argmax_parts(const Tensor& s) {
  std::vector<int> out(static_cast<std::size_t>(s.rows));
  for (int i = 0; i < s.rows; ++i) {
    int arg = 0;
    for (int j = 1; j < s.cols; ++j)
      if (s.v[static_cast<std::size_t>(i) * s.cols + j] >
          s.v[static_cast<std::size_t>(i) * s.cols + arg])
        arg = j;
    out[static_cast<std::size_t>(i)] = arg;
  }
  return out;
}

}  // namespace canon3d
