#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <numeric>
#include <set>

#include "canon3d/occlusion.hpp"
#include "canon3d/rng.hpp"

using namespace canon3d;

namespace {

PointCloud random_cloud(Rng& rng, int k) {
  PointCloud c;
  c.xyz.reserve(3 * k);
  for (int i = 0; i < 3 * k; ++i) c.xyz.push_back(rng.normal());
  return c;
}

PointCloud make_cloud(const std::vector<Vec3>& pts) {
  PointCloud c;
  for (const auto& p : pts) {
    c.xyz.push_back(p[0]);
    c.xyz.push_back(p[1]);
    c.xyz.push_back(p[2]);
  }
  return c;
}

// Independent selection oracle: stable sort of (projection, index) pairs.
std::vector<int> slice_oracle(const PointCloud& cloud, const Vec3& v) {
  const int k = cloud.size();
  std::vector<std::pair<double, int>> keyed(k);
  for (int i = 0; i < k; ++i) {
    const double* p = cloud.row(i);
    keyed[i] = {p[0] * v[0] + p[1] * v[1] + p[2] * v[2], i};
  }
  std::stable_sort(keyed.begin(), keyed.end(),
                   [](const auto& a, const auto& b) { return a.first < b.first; });
  std::vector<int> kept;
  for (int i = 0; i < (k + 1) / 2; ++i) kept.push_back(keyed[i].second);
  std::sort(kept.begin(), kept.end());
  return kept;
}

}  // namespace

TEST_CASE("slice_crop keeps the lower half against a sorting oracle") {
  Rng rng(41);
  for (int trial = 0; trial < 6; ++trial) {
    const int k = 2 + rng.uniform_int(200);
    PointCloud cloud = random_cloud(rng, k);
    Vec3 v = random_unit_vector(rng);
    CropResult crop = slice_crop(cloud, v);
    REQUIRE(static_cast<int>(crop.kept_indices.size()) == (k + 1) / 2);
    REQUIRE(crop.kept_indices == slice_oracle(cloud, v));
  }
}

TEST_CASE("slice_crop keeps 512 of 1024 points") {
  Rng rng(42);
  PointCloud cloud = random_cloud(rng, 1024);
  CropResult crop = slice_crop(cloud, rng);
  REQUIRE(crop.kept_indices.size() == 512);
  REQUIRE(crop.partial.size() == 512);
}

TEST_CASE("slice_crop partial rows are bitwise copies of the full rows") {
  Rng rng(43);
  PointCloud cloud = random_cloud(rng, 101);
  cloud.labels.resize(101);
  for (int i = 0; i < 101; ++i) cloud.labels[i] = i % 7;
  CropResult crop = slice_crop(cloud, rng);
  REQUIRE(crop.kept_indices.size() == 51);
  REQUIRE(std::is_sorted(crop.kept_indices.begin(), crop.kept_indices.end()));
  for (std::size_t j = 0; j < crop.kept_indices.size(); ++j) {
    const double* a = crop.partial.row(static_cast<int>(j));
    const double* b = cloud.row(crop.kept_indices[j]);
    REQUIRE(a[0] == b[0]);
    REQUIRE(a[1] == b[1]);
    REQUIRE(a[2] == b[2]);
    REQUIRE(crop.partial.labels[j] == cloud.labels[crop.kept_indices[j]]);
  }
}

TEST_CASE("slice_crop breaks projection ties by original index") {
  // Projections onto +x are {0, 1, 1, 2}; keeping the lowest two must take
  // index 1, not index 2, for the tied pair.
  PointCloud cloud = make_cloud(
      {{0, 5, 0}, {1, -3, 2}, {1, 9, -1}, {2, 0, 0}});
  CropResult crop = slice_crop(cloud, Vec3{1, 0, 0});
  REQUIRE(crop.kept_indices == std::vector<int>{0, 1});
}

TEST_CASE("slice_crop rejects clouds with fewer than two points") {
  PointCloud one = make_cloud({{1, 2, 3}});
  Rng rng(44);
  REQUIRE_THROWS_AS(slice_crop(one, rng), error);
  PointCloud empty;
  REQUIRE_THROWS_AS(slice_crop(empty, rng), error);
}

TEST_CASE("slice_crop barycenter offset is the kept mean in centered coordinates") {
  Rng rng(45);
  PointCloud cloud = random_cloud(rng, 60);
  // Shift the whole cloud; the offset is defined relative to the cloud's own
  // centroid, so it must not move.
  Vec3 v = random_unit_vector(rng);
  CropResult crop = slice_crop(cloud, v);
  Vec3 c = cloud_mean(cloud);
  Vec3 expect{0, 0, 0};
  for (int i : crop.kept_indices) {
    const double* p = cloud.row(i);
    expect[0] += p[0] - c[0];
    expect[1] += p[1] - c[1];
    expect[2] += p[2] - c[2];
  }
  const double n = static_cast<double>(crop.kept_indices.size());
  for (int a = 0; a < 3; ++a)
    REQUIRE(crop.barycenter_offset[a] == expect[a] / n);

  PointCloud shifted = cloud;
  for (int i = 0; i < shifted.size(); ++i) {
    double* p = shifted.row(i);
    p[0] += 11.0;
    p[1] -= 4.0;
    p[2] += 0.5;
  }
  CropResult crop2 = slice_crop(shifted, v);
  REQUIRE(crop2.kept_indices == crop.kept_indices);
  for (int a = 0; a < 3; ++a)
    REQUIRE(crop2.barycenter_offset[a] ==
            Catch::Approx(crop.barycenter_offset[a]).margin(1e-12));
}

TEST_CASE("slicing a mirror-symmetric cloud along +z gives a negative z offset") {
  std::vector<Vec3> pts;
  Rng rng(46);
  for (int i = 0; i < 40; ++i) {
    Vec3 p{rng.normal(), rng.normal(), rng.normal()};
    pts.push_back(p);
    pts.push_back({-p[0], -p[1], -p[2]});
  }
  PointCloud cloud = make_cloud(pts);
  CropResult crop = slice_crop(cloud, Vec3{0, 0, 1});
  REQUIRE(crop.barycenter_offset[2] < 0.0);
}

TEST_CASE("slice_crop is deterministic given the seed") {
  Rng a(77), b(77);
  PointCloud cloud = random_cloud(a, 128);
  Rng a2(99), b2(99);
  CropResult ca = slice_crop(cloud, a2);
  CropResult cb = slice_crop(cloud, b2);
  REQUIRE(ca.kept_indices == cb.kept_indices);
  REQUIRE(ca.partial.xyz == cb.partial.xyz);
}

TEST_CASE("slice_crop direction handling is rotation equivariant") {
  Rng rng(47);
  for (int trial = 0; trial < 5; ++trial) {
    PointCloud cloud = random_cloud(rng, 96);
    Vec3 v = random_unit_vector(rng);
    CropResult base = slice_crop(cloud, v);
    for (int t = 0; t < 4; ++t) {
      Mat3 r = random_rotation(rng);
      CropResult rot = slice_crop(rotate_cloud(cloud, r), mat3_apply(r, v));
      REQUIRE(rot.kept_indices == base.kept_indices);
    }
  }
}

TEST_CASE("fps_points matches a brute-force oracle") {
  Rng rng(48);
  for (int trial = 0; trial < 4; ++trial) {
    const int n = 30 + rng.uniform_int(40);
    std::vector<Vec3> pts(n);
    for (auto& p : pts) p = {rng.normal(), rng.normal(), rng.normal()};
    const int m = 5 + rng.uniform_int(n - 5);
    std::vector<int> got = fps_points(pts, m);

    auto d2 = [&](const Vec3& a, const Vec3& b) {
      double dx = a[0] - b[0], dy = a[1] - b[1], dz = a[2] - b[2];
      return dx * dx + dy * dy + dz * dz;
    };
    Vec3 c{0, 0, 0};
    for (const auto& p : pts) {
      c[0] += p[0];
      c[1] += p[1];
      c[2] += p[2];
    }
    c = {c[0] / n, c[1] / n, c[2] / n};
    std::vector<int> want;
    int start = 0;
    for (int i = 1; i < n; ++i)
      if (d2(pts[i], c) > d2(pts[start], c)) start = i;
    want.push_back(start);
    while (static_cast<int>(want.size()) < m) {
      int arg = -1;
      double bv = -1.0;
      for (int i = 0; i < n; ++i) {
        double nearest = 1e300;
        for (int s : want) nearest = std::min(nearest, d2(pts[i], pts[s]));
        if (nearest > bv) {
          bv = nearest;
          arg = i;
        }
      }
      want.push_back(arg);
    }
    REQUIRE(got == want);
  }
}

TEST_CASE("depth crop of a planar cloud facing the camera keeps every point") {
  std::vector<Vec3> pts;
  for (int i = 0; i < 20; ++i)
    for (int j = 0; j < 20; ++j)
      pts.push_back({-0.5 + i / 19.0, -0.5 + j / 19.0, 0.3});
  PointCloud cloud = make_cloud(pts);
  CropResult crop = depth_camera_crop(cloud, Vec3{0, 0, 5});
  std::vector<int> all(400);
  std::iota(all.begin(), all.end(), 0);
  REQUIRE(crop.kept_indices == all);
}

TEST_CASE("depth crop keeps the nearer of two coincident-pixel points") {
  PointCloud cloud = make_cloud({{0, 0, 1}, {0, 0, 2}});
  CropResult crop = depth_camera_crop(cloud, Vec3{0, 0, -5});
  REQUIRE(crop.kept_indices == std::vector<int>{0});

  // Same geometry seen from the other side: now index 1 is nearer.
  CropResult far = depth_camera_crop(cloud, Vec3{0, 0, 8});
  REQUIRE(far.kept_indices == std::vector<int>{1});
}

TEST_CASE("depth crop output is a sorted subset with bitwise-equal rows") {
  Rng rng(49);
  PointCloud cloud = random_cloud(rng, 700);
  CropResult crop = depth_camera_crop(cloud, Vec3{9, -1, 2});
  REQUIRE(!crop.kept_indices.empty());
  REQUIRE(std::is_sorted(crop.kept_indices.begin(), crop.kept_indices.end()));
  std::set<int> uniq(crop.kept_indices.begin(), crop.kept_indices.end());
  REQUIRE(uniq.size() == crop.kept_indices.size());
  for (std::size_t j = 0; j < crop.kept_indices.size(); ++j) {
    REQUIRE(crop.kept_indices[j] >= 0);
    REQUIRE(crop.kept_indices[j] < cloud.size());
    const double* a = crop.partial.row(static_cast<int>(j));
    const double* b = cloud.row(crop.kept_indices[j]);
    REQUIRE(a[0] == b[0]);
    REQUIRE(a[1] == b[1]);
    REQUIRE(a[2] == b[2]);
  }
}

TEST_CASE("depth crop caps the kept set at max_points via farthest point sampling") {
  Rng rng(50);
  PointCloud cloud = random_cloud(rng, 4000);
  CropResult uncapped = depth_camera_crop(cloud, Vec3{0, 12, 0}, 64, 100000);
  REQUIRE(static_cast<int>(uncapped.kept_indices.size()) > 512);
  CropResult capped = depth_camera_crop(cloud, Vec3{0, 12, 0});
  REQUIRE(capped.kept_indices.size() == 512);
  // The capped set must be a subset of the uncapped visible set.
  std::set<int> visible(uncapped.kept_indices.begin(), uncapped.kept_indices.end());
  for (int i : capped.kept_indices) REQUIRE(visible.count(i) == 1);
}

TEST_CASE("depth crop rejects a camera inside the bounding sphere") {
  Rng rng(51);
  PointCloud cloud = random_cloud(rng, 50);
  REQUIRE_THROWS_AS(depth_camera_crop(cloud, cloud_mean(cloud)), error);
  PointCloud empty;
  REQUIRE_THROWS_AS(depth_camera_crop(empty, Vec3{5, 0, 0}), error);
}

TEST_CASE("recenter removes the mean and reports it") {
  PointCloud cloud = make_cloud({{1, 0, 0}, {3, 0, 0}});
  RecenterResult r = recenter(cloud);
  REQUIRE(r.mean == Vec3{2, 0, 0});
  REQUIRE(r.centered.point(0) == Vec3{-1, 0, 0});
  REQUIRE(r.centered.point(1) == Vec3{1, 0, 0});
}

TEST_CASE("recenter is idempotent and rejects empty clouds") {
  Rng rng(52);
  PointCloud cloud = random_cloud(rng, 33);
  RecenterResult once = recenter(cloud);
  Vec3 m = cloud_mean(once.centered);
  for (int a = 0; a < 3; ++a) REQUIRE(std::fabs(m[a]) < 1e-12);
  RecenterResult twice = recenter(once.centered);
  for (int a = 0; a < 3; ++a) {
    REQUIRE(std::fabs(twice.mean[a]) < 1e-12);
    for (int i = 0; i < cloud.size(); ++i)
      REQUIRE(twice.centered.row(i)[a] ==
              Catch::Approx(once.centered.row(i)[a]).margin(1e-12));
  }
  PointCloud empty;
  REQUIRE_THROWS_AS(recenter(empty), error);
}
