#pragma once

#include <cinttypes>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "canon3d/common.hpp"
#include "canon3d/rng.hpp"

namespace canon3d {

// A generated shape in its canonical pose: mean-centered and scaled so the
// bounding-box diagonal is exactly 1.
struct ShapeRecord {
  std::string id;
  std::string family;
  std::string split;  // "train" or "val"
  PointCloud cloud;
  Mat3 gt_frame{{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}};
  std::vector<double> params;  // generator parameters, for reference
};

struct DatasetManifest {
  std::uint64_t seed = 0;
  int version = 1;
  std::vector<ShapeRecord> records;
};

inline const std::vector<std::string>& shape_families() {
  static const std::vector<std::string> families{"toy-plane", "toy-chair",
                                                 "toy-table", "blob-cluster"};
  return families;
}

// Greedy max-min subset selection. The first index is `start`; every next
// pick maximizes the distance to the already-selected set (ties: lowest
// index). Returns indices in selection order.
inline std::vector<int> farthest_point_sampling(const PointCloud& cloud, int m,
                                                int start) {
  const int k = static_cast<int>(cloud.size());
  check(m >= 1, "farthest_point_sampling: m must be positive");
  check(m <= k, "farthest_point_sampling: m exceeds the cloud size");
  check(start >= 0 && start < k, "farthest_point_sampling: start out of range");
  std::vector<int> selected{start};
  selected.reserve(static_cast<std::size_t>(m));
  std::vector<double> best(static_cast<std::size_t>(k));
  auto d2 = [&](int i, int j) {
    const double* p = cloud.row(static_cast<std::size_t>(i));
    const double* q = cloud.row(static_cast<std::size_t>(j));
    const double dx = p[0] - q[0], dy = p[1] - q[1], dz = p[2] - q[2];
    return dx * dx + dy * dy + dz * dz;
  };
  for (int i = 0; i < k; ++i) best[static_cast<std::size_t>(i)] = d2(i, start);
  while (static_cast<int>(selected.size()) < m) {
    int arg = 0;
    double bv = -1.0;
    for (int i = 0; i < k; ++i)
      if (best[static_cast<std::size_t>(i)] > bv) {
        bv = best[static_cast<std::size_t>(i)];
        arg = i;
      }
    selected.push_back(arg);
    for (int i = 0; i < k; ++i) {
      const double d = d2(i, arg);
      if (d < best[static_cast<std::size_t>(i)]) best[static_cast<std::size_t>(i)] = d;
    }
  }
  return selected;
}

inline double bbox_diagonal(const PointCloud& cloud) {
  check(cloud.size() > 0, "bbox_diagonal: empty cloud");
  Vec3 lo = cloud.point(0), hi = lo;
  for (std::size_t i = 1; i < cloud.size(); ++i) {
    const double* p = cloud.row(i);
    for (int a = 0; a < 3; ++a) {
      lo[a] = std::min(lo[a], p[a]);
      hi[a] = std::max(hi[a], p[a]);
    }
  }
  const double dx = hi[0] - lo[0], dy = hi[1] - lo[1], dz = hi[2] - lo[2];
  return std::sqrt(dx * dx + dy * dy + dz * dz);
}

// Mean-center and scale to a unit bounding-box diagonal, in place.
inline void center_and_normalize(PointCloud& cloud) {
  check(cloud.size() > 0, "center_and_normalize: empty cloud");
  const Vec3 mean = cloud_mean(cloud);
  for (std::size_t i = 0; i < cloud.size(); ++i)
    for (int a = 0; a < 3; ++a) cloud.xyz[3 * i + a] -= mean[a];
  const double diag = bbox_diagonal(cloud);
  check(diag > 1e-12, "center_and_normalize: degenerate cloud");
  const double s = 1.0 / diag;
  for (double& v : cloud.xyz) v *= s;
}

namespace detail {

// One surface primitive: total area plus a function appending one
// area-uniform sample.
struct Primitive {
  double area;
  std::function<void(Rng&, PointCloud&)> sample;
};

inline void push_point(PointCloud& out, double x, double y, double z) {
  out.xyz.push_back(x);
  out.xyz.push_back(y);
  out.xyz.push_back(z);
}

// Axis-aligned box surface, dims = full extents.
inline Primitive box_prim(Vec3 center, Vec3 dims) {
  const double ax = dims[1] * dims[2];  // +-x faces
  const double ay = dims[0] * dims[2];
  const double az = dims[0] * dims[1];
  Primitive p;
  p.area = 2.0 * (ax + ay + az);
  p.sample = [=](Rng& rng, PointCloud& out) {
    const double r = rng.uniform01() * (ax + ay + az);
    const double sgn = rng.uniform01() < 0.5 ? -0.5 : 0.5;
    const double u = rng.uniform01() - 0.5, v = rng.uniform01() - 0.5;
    if (r < ax)
      push_point(out, center[0] + sgn * dims[0], center[1] + u * dims[1],
                 center[2] + v * dims[2]);
    else if (r < ax + ay)
      push_point(out, center[0] + u * dims[0], center[1] + sgn * dims[1],
                 center[2] + v * dims[2]);
    else
      push_point(out, center[0] + u * dims[0], center[1] + v * dims[1],
                 center[2] + sgn * dims[2]);
  };
  return p;
}

// Ellipsoid surface with semi-axes `semi`, area-uniform by rejection.
inline Primitive ellipsoid_prim(Vec3 center, Vec3 semi) {
  const double a = semi[0], b = semi[1], c = semi[2];
  constexpr double kP = 1.6075;  // Thomsen's approximation, for weighting only
  const double ap = std::pow(a * b, kP), bp = std::pow(b * c, kP),
               cp = std::pow(c * a, kP);
  Primitive p;
  p.area = 4.0 * M_PI * std::pow((ap + bp + cp) / 3.0, 1.0 / kP);
  const double wmax = std::max({a * b, b * c, c * a});
  p.sample = [=](Rng& rng, PointCloud& out) {
    while (true) {
      const Vec3 u = random_unit_vector(rng);
      const double w = std::sqrt((b * c * u[0]) * (b * c * u[0]) +
                                 (a * c * u[1]) * (a * c * u[1]) +
                                 (a * b * u[2]) * (a * b * u[2]));
      if (rng.uniform01() * wmax <= w) {
        push_point(out, center[0] + a * u[0], center[1] + b * u[1],
                   center[2] + c * u[2]);
        return;
      }
    }
  };
  return p;
}

// Closed cylinder along +z from base z0, given radius and height.
inline Primitive cylinder_prim(double cx, double cy, double z0, double radius,
                               double height) {
  const double lateral = 2.0 * M_PI * radius * height;
  const double cap = M_PI * radius * radius;
  Primitive p;
  p.area = lateral + 2.0 * cap;
  p.sample = [=](Rng& rng, PointCloud& out) {
    const double r = rng.uniform01() * (lateral + 2.0 * cap);
    const double theta = rng.uniform01() * 2.0 * M_PI;
    if (r < lateral) {
      push_point(out, cx + radius * std::cos(theta), cy + radius * std::sin(theta),
                 z0 + rng.uniform01() * height);
    } else {
      const double rr = radius * std::sqrt(rng.uniform01());
      const double z = r < lateral + cap ? z0 : z0 + height;
      push_point(out, cx + rr * std::cos(theta), cy + rr * std::sin(theta), z);
    }
  };
  return p;
}

inline PointCloud sample_primitives(Rng& rng, const std::vector<Primitive>& prims,
                                    int m) {
  double total = 0.0;
  for (const Primitive& p : prims) total += p.area;
  PointCloud out;
  out.xyz.reserve(static_cast<std::size_t>(m) * 3);
  for (int i = 0; i < m; ++i) {
    double r = rng.uniform01() * total;
    std::size_t pick = 0;
    while (pick + 1 < prims.size() && r >= prims[pick].area) {
      r -= prims[pick].area;
      ++pick;
    }
    prims[pick].sample(rng, out);
  }
  return out;
}

// Canonical pose for all families: principal direction along +x, up = +z.

inline PointCloud toy_plane(Rng& rng, int m, std::vector<double>& params) {
  const double len = rng.uniform(0.7, 1.0);        // fuselage half-length
  const double width = rng.uniform(0.13, 0.2);     // fuselage radius
  const double span = rng.uniform(0.9, 1.3);       // full wingspan
  const double chord = rng.uniform(0.28, 0.42);
  const double wing_t = rng.uniform(0.04, 0.07);
  const double fin_h = rng.uniform(0.25, 0.38);
  params = {len, width, span, chord, wing_t, fin_h};
  std::vector<Primitive> prims;
  prims.push_back(ellipsoid_prim({0, 0, 0}, {len, width, width}));
  prims.push_back(box_prim({rng.uniform(0.0, 0.15), 0, 0}, {chord, span, wing_t}));
  // vertical fin on the rear top: breaks the up/down symmetry
  prims.push_back(box_prim({-0.85 * len, 0, 0.5 * fin_h + 0.5 * width},
                           {0.22, 0.04, fin_h}));
  // horizontal stabilizer
  prims.push_back(box_prim({-0.85 * len, 0, 0.05}, {0.16, 0.45 * span, wing_t}));
  return sample_primitives(rng, prims, m);
}

inline PointCloud toy_chair(Rng& rng, int m, std::vector<double>& params) {
  const double depth = rng.uniform(0.8, 1.0);   // x
  const double width = rng.uniform(0.8, 1.1);   // y
  const double height = rng.uniform(0.45, 0.6);  // seat height
  const double back_h = rng.uniform(0.5, 0.7);
  const double leg_r = rng.uniform(0.035, 0.05);
  params = {depth, width, height, back_h, leg_r};
  std::vector<Primitive> prims;
  prims.push_back(box_prim({0, 0, height}, {depth, width, 0.08}));
  // backrest along the rear (-x) edge; the chair faces +x
  prims.push_back(
      box_prim({-0.5 * depth + 0.04, 0, height + 0.5 * back_h}, {0.08, width, back_h}));
  const double ix = 0.5 * depth - 2.0 * leg_r, iy = 0.5 * width - 2.0 * leg_r;
  for (int sx = -1; sx <= 1; sx += 2)
    for (int sy = -1; sy <= 1; sy += 2)
      prims.push_back(cylinder_prim(sx * ix, sy * iy, 0.0, leg_r, height));
  return sample_primitives(rng, prims, m);
}

inline PointCloud toy_table(Rng& rng, int m, std::vector<double>& params) {
  const double width = rng.uniform(1.0, 1.4);                  // x
  const double depth = width * rng.uniform(0.92, 1.08);        // y, near-square
  const double height = rng.uniform(0.55, 0.8);
  const double leg_r = rng.uniform(0.04, 0.06);
  params = {width, depth, height, leg_r};
  std::vector<Primitive> prims;
  prims.push_back(box_prim({0, 0, height}, {width, depth, 0.07}));
  const double ix = 0.5 * width - 2.0 * leg_r, iy = 0.5 * depth - 2.0 * leg_r;
  for (int sx = -1; sx <= 1; sx += 2)
    for (int sy = -1; sy <= 1; sy += 2)
      prims.push_back(cylinder_prim(sx * ix, sy * iy, 0.0, leg_r, height));
  return sample_primitives(rng, prims, m);
}

inline PointCloud blob_cluster(Rng& rng, int m, std::vector<double>& params) {
  const int k = 3 + rng.uniform_int(4);
  params = {static_cast<double>(k)};
  std::vector<Vec3> centers;
  std::vector<double> sigma, weight;
  double total = 0.0;
  for (int i = 0; i < k; ++i) {
    centers.push_back(
        {rng.uniform(-0.8, 0.8), rng.uniform(-0.8, 0.8), rng.uniform(-0.8, 0.8)});
    sigma.push_back(rng.uniform(0.1, 0.25));
    weight.push_back(rng.uniform(0.5, 1.5));
    total += weight.back();
    params.push_back(centers.back()[0]);
    params.push_back(centers.back()[1]);
    params.push_back(centers.back()[2]);
    params.push_back(sigma.back());
  }
  PointCloud out;
  out.xyz.reserve(static_cast<std::size_t>(m) * 3);
  for (int i = 0; i < m; ++i) {
    double r = rng.uniform01() * total;
    int pick = 0;
    while (pick + 1 < k && r >= weight[static_cast<std::size_t>(pick)]) {
      r -= weight[static_cast<std::size_t>(pick)];
      ++pick;
    }
    const Vec3& c = centers[static_cast<std::size_t>(pick)];
    const double s = sigma[static_cast<std::size_t>(pick)];
    push_point(out, c[0] + s * rng.normal(), c[1] + s * rng.normal(),
               c[2] + s * rng.normal());
  }
  return out;
}

}  // namespace detail

// Generates one shape of the family: a dense area-weighted surface sample,
// FPS-reduced to n_points, then centered and unit-diagonal normalized.
inline ShapeRecord make_shape(const std::string& family, Rng& rng,
                              int n_points = 1024) {
  std::vector<double> params;
  PointCloud dense;
  const int m = 3 * n_points;
  if (family == "toy-plane")
    dense = detail::toy_plane(rng, m, params);
  else if (family == "toy-chair")
    dense = detail::toy_chair(rng, m, params);
  else if (family == "toy-table")
    dense = detail::toy_table(rng, m, params);
  else if (family == "blob-cluster")
    dense = detail::blob_cluster(rng, m, params);
  else
    throw error("make_shape: unknown family '" + family + "'");
  const std::vector<int> idx = farthest_point_sampling(dense, n_points, 0);
  ShapeRecord rec;
  rec.family = family;
  rec.params = std::move(params);
  rec.cloud.xyz.reserve(static_cast<std::size_t>(n_points) * 3);
  for (int i : idx) {
    const double* p = dense.row(static_cast<std::size_t>(i));
    rec.cloud.xyz.insert(rec.cloud.xyz.end(), p, p + 3);
  }
  center_and_normalize(rec.cloud);
  return rec;
}

// Validation share of an n-record dataset: one eighth, at least 2, always
// leaving at least one training record.
inline int default_val_count(int n) {
  if (n <= 1) return 0;
  return std::min(n - 1, std::max(2, n / 8));
}

inline DatasetManifest gen_synthetic(const std::string& family, int n, Rng& rng,
                                     int n_points = 1024) {
  check(n > 0, "gen_synthetic: n must be positive");
  DatasetManifest m;
  m.seed = rng.state();
  const int n_val = default_val_count(n);
  for (int i = 0; i < n; ++i) {
    Rng sub = rng.fork(static_cast<std::uint64_t>(i));
    ShapeRecord rec = make_shape(family, sub, n_points);
    char idbuf[64];
    std::snprintf(idbuf, sizeof(idbuf), "%s-%06d", family.c_str(), i);
    rec.id = idbuf;
    rec.split = i < n - n_val ? "train" : "val";
    m.records.push_back(std::move(rec));
  }
  return m;
}

struct AugmentResult {
  ShapeRecord record;  // rotated cloud, gt_frame updated
  Mat3 rotation;
};

// Applies a fixed rotation to the record, keeping the ground-truth frame
// consistent: canonical = gt_frame * cloud stays true after the update.
inline AugmentResult apply_rotation(const ShapeRecord& rec, const Mat3& r) {
  AugmentResult out;
  out.rotation = r;
  out.record = rec;
  out.record.cloud = rotate_cloud(rec.cloud, r);
  out.record.gt_frame = mat3_mul(rec.gt_frame, mat3_transpose(r));
  return out;
}

inline AugmentResult augment_rotation(const ShapeRecord& rec, Rng& rng) {
  return apply_rotation(rec, random_rotation(rng));
}

// --- .xyz I/O ------------------------------------------------------------
// One point per line, "x y z" at 17 significant digits, optional integer
// label as a fourth column (all lines labeled or none).

inline void write_xyz(const std::string& path, const PointCloud& cloud) {
  std::FILE* f = std::fopen(path.c_str(), "w");
  check(f != nullptr, "write_xyz: cannot open '" + path + "'");
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const double* p = cloud.row(i);
    std::fprintf(f, "%.17g %.17g %.17g", p[0], p[1], p[2]);
    if (cloud.has_labels()) std::fprintf(f, " %d", cloud.labels[i]);
    std::fputc('\n', f);
  }
  std::fclose(f);
}

inline PointCloud read_xyz(const std::string& path) {
  std::ifstream in(path);
  check(in.good(), "read_xyz: cannot open '" + path + "'");
  PointCloud cloud;
  std::string line;
  int line_no = 0;
  bool labeled = false;
  auto fail = [&](const std::string& what) {
    throw error("read_xyz: " + path + ":" + std::to_string(line_no) + ": " + what);
  };
  while (std::getline(in, line)) {
    ++line_no;
    std::istringstream iss(line);
    double x, y, z;
    if (!(iss >> x >> y >> z)) fail("expected 'x y z'");
    int label = 0;
    bool has_label = false;
    if (iss >> label) has_label = true;
    iss >> std::ws;
    if (!iss.eof()) fail("trailing characters");
    if (cloud.size() == 0)
      labeled = has_label;
    else if (has_label != labeled)
      fail(labeled ? "missing label column" : "unexpected label column");
    cloud.xyz.insert(cloud.xyz.end(), {x, y, z});
    if (has_label) cloud.labels.push_back(label);
  }
  check(cloud.size() > 0, "read_xyz: '" + path + "' contains no points");
  return cloud;
}

// --- Manifest I/O ---------------------------------------------------------
// Plain text: a version line, the seed, the record count, then one line per
// record: id, family, split, and the relative .xyz path.

inline void write_manifest(const std::string& dir, const DatasetManifest& m) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  std::set<std::string> seen;
  for (const ShapeRecord& r : m.records)
    check(seen.insert(r.id).second, "write_manifest: duplicate id '" + r.id + "'");
  const std::string path = (fs::path(dir) / "manifest.txt").string();
  std::FILE* f = std::fopen(path.c_str(), "w");
  check(f != nullptr, "write_manifest: cannot open '" + path + "'");
  std::fprintf(f, "canon3d-manifest %d\n", m.version);
  std::fprintf(f, "seed %" PRIu64 "\n", m.seed);
  std::fprintf(f, "count %zu\n", m.records.size());
  for (const ShapeRecord& r : m.records) {
    const std::string rel = r.id + ".xyz";
    std::fprintf(f, "record %s %s %s %s\n", r.id.c_str(), r.family.c_str(),
                 r.split.c_str(), rel.c_str());
    write_xyz((fs::path(dir) / rel).string(), r.cloud);
  }
  std::fclose(f);
}

inline DatasetManifest read_manifest(const std::string& dir) {
  namespace fs = std::filesystem;
  const std::string path = (fs::path(dir) / "manifest.txt").string();
  std::ifstream in(path);
  check(in.good(), "read_manifest: cannot open '" + path + "'");
  DatasetManifest m;
  std::string tag;
  int version = 0;
  check(static_cast<bool>(in >> tag >> version) && tag == "canon3d-manifest",
        "read_manifest: not a manifest file");
  check(version == 1, "read_manifest: unsupported version " + std::to_string(version));
  m.version = version;
  std::size_t count = 0;
  check(static_cast<bool>(in >> tag >> m.seed) && tag == "seed",
        "read_manifest: missing seed");
  check(static_cast<bool>(in >> tag >> count) && tag == "count",
        "read_manifest: missing count");
  std::set<std::string> seen;
  for (std::size_t i = 0; i < count; ++i) {
    ShapeRecord r;
    std::string rel;
    check(static_cast<bool>(in >> tag >> r.id >> r.family >> r.split >> rel) &&
              tag == "record",
          "read_manifest: bad record line");
    check(seen.insert(r.id).second, "read_manifest: duplicate id '" + r.id + "'");
    r.cloud = read_xyz((fs::path(dir) / rel).string());
    m.records.push_back(std::move(r));
  }
  return m;
}

}  // namespace canon3d
