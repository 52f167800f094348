#pragma once

// Rotation-equivariant point-cloud layers: equivariant convolution with
// Gaussian radial shells and Clebsch-Gordan degree coupling, the sphere-map
// nonlinearity, and global max-pooling over the sampled sphere.
//
// Feature maps are per-degree graph nodes of shape (K*(2l+1)) x C_l with row
// layout i*(2l+1) + m, so a per-point block is contiguous. ConvGeometry and
// SphereSampling are computed once per forward pass from the input cloud and
// must outlive the graph (backward closures reference them).

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <memory>
#include <numeric>
#include <vector>

#include "canon3d/common.hpp"
#include "canon3d/so3.hpp"
#include "canon3d/tensor.hpp"

namespace canon3d {

struct FeatureMap {
  int n_points = 0;
  std::array<int, 4> block{-1, -1, -1, -1};  // graph node per degree, -1 absent
  std::array<int, 4> channels{0, 0, 0, 0};
};

inline constexpr int kShells = 3;
inline constexpr double kShellCenters[kShells] = {0.1, 0.3, 0.6};
inline constexpr double kShellWidth = 0.2;
// Kernel rows per point: per shell, one lf=0 row and three lf=1 rows.
inline constexpr int kKernelRows = kShells * 4;

// Degree-coupling paths (lf = filter degree, li = input degree) feeding each
// output degree. Filters carry lf <= 1; inputs up to li = 2 are consumed.
struct ConvPath {
  int lf;
  int li;
};

inline const std::array<std::vector<ConvPath>, 4>& conv_path_table() {
  static const std::array<std::vector<ConvPath>, 4> table = {{
      {{0, 0}, {1, 1}},                  // lo = 0
      {{0, 1}, {1, 0}, {1, 1}, {1, 2}},  // lo = 1
      {{0, 2}, {1, 1}, {1, 2}},          // lo = 2
      {{1, 2}},                          // lo = 3
  }};
  return table;
}

// Columns of the per-degree collected matrix consumed by the mixing weights:
// 3 shells x C_li for every path whose input degree is present.
inline int conv_in_width(const std::array<int, 4>& channels, int lo) {
  int w = 0;
  for (const ConvPath& p : conv_path_table()[lo])
    if (channels[p.li] > 0) w += kShells * channels[p.li];
  return w;
}

// Neighborhoods plus the per-point kernel matrix, shared by all conv layers
// of one forward pass.
struct ConvGeometry {
  int n_points = 0;
  int k = 0;
  std::vector<int> neighbors;  // K*k, self first, then ascending distance
  Tensor phi;                  // (K*kKernelRows) x k; rows shell-major, lf=0 then lf=1
  double rho = 1.0;            // cloud radius about the centroid
};

inline ConvGeometry build_conv_geometry(const PointCloud& cloud, int k = 16) {
  const int n = static_cast<int>(cloud.size());
  check(n > 0, "build_conv_geometry: empty cloud");
  check(k >= 1 && k <= n, "equivariant_conv: neighborhood size exceeds point count");

  ConvGeometry geo;
  geo.n_points = n;
  geo.k = k;

  const Vec3 c = cloud_mean(cloud);
  geo.rho = 0.0;
  for (int i = 0; i < n; ++i) {
    const Vec3 p = cloud.point(i);
    const double dx = p[0] - c[0], dy = p[1] - c[1], dz = p[2] - c[2];
    geo.rho = std::max(geo.rho, std::sqrt(dx * dx + dy * dy + dz * dz));
  }
  if (geo.rho < 1e-12) geo.rho = 1.0;

  geo.neighbors.resize(static_cast<std::size_t>(n) * k);
  geo.phi = Tensor(n * kKernelRows, k);

  std::vector<double> d2(n);
  std::vector<int> order(n);
  const double sigma = kShellWidth * geo.rho;
  for (int i = 0; i < n; ++i) {
    const Vec3 pi = cloud.point(i);
    for (int j = 0; j < n; ++j) {
      const Vec3 pj = cloud.point(j);
      const double dx = pj[0] - pi[0], dy = pj[1] - pi[1], dz = pj[2] - pi[2];
      d2[j] = dx * dx + dy * dy + dz * dz;
    }
    std::iota(order.begin(), order.end(), 0);
    std::partial_sort(order.begin(), order.begin() + k, order.end(), [&](int a, int b) {
      if (d2[a] != d2[b]) return d2[a] < d2[b];
      if ((a == i) != (b == i)) return a == i;  // self first among ties
      return a < b;
    });
    for (int t = 0; t < k; ++t) {
      const int j = order[t];
      geo.neighbors[static_cast<std::size_t>(i) * k + t] = j;
      const Vec3 pj = cloud.point(j);
      const double d[3] = {pj[0] - pi[0], pj[1] - pi[1], pj[2] - pi[2]};
      const double r = std::sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2]);
      double y1[3];
      eval_solid_harmonics(1, d, y1);
      for (int s = 0; s < kShells; ++s) {
        const double dr = r - kShellCenters[s] * geo.rho;
        const double w = std::exp(-dr * dr / (2.0 * sigma * sigma));
        const int row = i * kKernelRows + s * 4;
        geo.phi.at(row, t) = w;
        for (int a = 0; a < 3; ++a) geo.phi.at(row + 1 + a, t) = w * y1[a];
      }
    }
  }
  return geo;
}

// Gathers each point's neighbor features (flattened (2li+1) x C blocks) and
// contracts them with the kernel matrix: out rows [i*12, i*12+12) =
// phi_i (12 x k) * Fnbr_i (k x (2li+1)C).
inline int gather_filtered(Graph& g, const ConvGeometry& geo, int feat, int li) {
  const int n = geo.n_points, k = geo.k;
  const int nb = 2 * li + 1;
  const Tensor& f = g.val(feat);
  check(f.rows == n * nb, "gather_filtered: feature rows disagree with cloud size");
  const int c = f.cols;
  const int w = nb * c;

  Tensor out(n * kKernelRows, w);
  Tensor scratch(k, w);
  for (int i = 0; i < n; ++i) {
    for (int t = 0; t < k; ++t) {
      const int j = geo.neighbors[static_cast<std::size_t>(i) * k + t];
      std::copy_n(&f.v[static_cast<std::size_t>(j) * w], w, &scratch.v[static_cast<std::size_t>(t) * w]);
    }
    ConstEigenMap phi(&geo.phi.v[static_cast<std::size_t>(i) * kKernelRows * k], kKernelRows, k);
    ConstEigenMap nbr(scratch.v.data(), k, w);
    EigenMap(&out.v[static_cast<std::size_t>(i) * kKernelRows * w], kKernelRows, w).noalias() = phi * nbr;
  }

  const int id = g.custom(std::move(out), {feat});
  if (g.requires_grad(id)) {
    Graph* gp = &g;
    // The graph outlives the caller's geometry, so the closure keeps its
    // own copy of the neighbor table and kernel values.
    auto gg = std::make_shared<const ConvGeometry>(geo);
    g.set_backward(id, [gp, gg, id, feat, nb] {
      const int n = gg->n_points, k = gg->k;
      const Tensor& dout = gp->grad(id);
      Tensor& df = gp->grad(feat);
      const int c = df.cols;
      const int w = nb * c;
      Tensor dn(k, w);
      for (int i = 0; i < n; ++i) {
        ConstEigenMap phi(&gg->phi.v[static_cast<std::size_t>(i) * kKernelRows * k], kKernelRows, k);
        ConstEigenMap dg(&dout.v[static_cast<std::size_t>(i) * kKernelRows * w], kKernelRows, w);
        EigenMap(dn.v.data(), k, w).noalias() = phi.transpose() * dg;
        for (int t = 0; t < k; ++t) {
          const int j = gg->neighbors[static_cast<std::size_t>(i) * k + t];
          double* dst = &df.v[static_cast<std::size_t>(j) * w];
          const double* src = &dn.v[static_cast<std::size_t>(t) * w];
          for (int x = 0; x < w; ++x) dst[x] += src[x];
        }
      }
    });
  }
  return id;
}

// Applies the Clebsch-Gordan coupling of every active (lf, li) path and
// shell for one output degree, tiling the results along columns:
// out rows [i*(2lo+1), +(2lo+1)) hold, per (path, shell), Q * blk where blk
// is the (2lf+1)(2li+1) x C slice of the gathered matrix.
inline int cg_collect(Graph& g, const ConvGeometry& geo, const std::array<int, 4>& gathered,
                      const std::array<int, 4>& channels, int lo) {
  struct Active {
    int lf, li, c, col, parent;
    const double* q;
  };
  std::vector<Active> act;
  int width = 0;
  for (const ConvPath& p : conv_path_table()[lo]) {
    if (gathered[p.li] < 0) continue;
    const std::vector<double>& q = CgTable::instance().get(lo, p.lf, p.li);
    act.push_back({p.lf, p.li, channels[p.li], width, gathered[p.li], q.data()});
    width += kShells * channels[p.li];
  }
  check(!act.empty(), "cg_collect: no active path for requested output degree");

  const int n = geo.n_points;
  const int no = 2 * lo + 1;
  Tensor out(n * no, width);
  for (int i = 0; i < n; ++i) {
    EigenMap orow(&out.v[static_cast<std::size_t>(i) * no * width], no, width);
    for (const Active& a : act) {
      const int nf = 2 * a.lf + 1, ni = 2 * a.li + 1;
      ConstEigenMap q(a.q, no, nf * ni);
      const Tensor& gt = g.val(a.parent);
      const int gw = ni * a.c;
      for (int s = 0; s < kShells; ++s) {
        const int r0 = i * kKernelRows + s * 4 + (a.lf == 0 ? 0 : 1);
        ConstEigenMap blk(&gt.v[static_cast<std::size_t>(r0) * gw], nf * ni, a.c);
        orow.block(0, a.col + s * a.c, no, a.c).noalias() = q * blk;
      }
    }
  }

  std::vector<int> parents;
  for (const Active& a : act) parents.push_back(a.parent);
  const int id = g.custom(std::move(out), parents);
  if (g.requires_grad(id)) {
    Graph* gp = &g;
    g.set_backward(id, [gp, id, act, no, width, n] {
      const Tensor& dout = gp->grad(id);
      for (int i = 0; i < n; ++i) {
        ConstEigenMap drow(&dout.v[static_cast<std::size_t>(i) * no * width], no, width);
        for (const Active& a : act) {
          const int nf = 2 * a.lf + 1, ni = 2 * a.li + 1;
          ConstEigenMap q(a.q, no, nf * ni);
          Tensor& dg = gp->grad(a.parent);
          const int gw = ni * a.c;
          for (int s = 0; s < kShells; ++s) {
            const int r0 = i * kKernelRows + s * 4 + (a.lf == 0 ? 0 : 1);
            EigenMap dblk(&dg.v[static_cast<std::size_t>(r0) * gw], nf * ni, a.c);
            dblk.noalias() += q.transpose() * drow.block(0, a.col + s * a.c, no, a.c);
          }
        }
      }
    });
  }
  return id;
}

struct ConvWeights {
  std::array<int, 4> mix{-1, -1, -1, -1};  // (conv_in_width(lo)) x C_out per degree
  int bias = -1;                           // 1 x C_out, degree-0 only
};

inline FeatureMap equivariant_conv(Graph& g, const ConvGeometry& geo, const FeatureMap& in,
                                   const ConvWeights& w) {
  std::array<int, 4> gathered{-1, -1, -1, -1};
  for (int li = 0; li <= 2; ++li)
    if (in.block[li] >= 0) gathered[li] = gather_filtered(g, geo, in.block[li], li);

  FeatureMap out;
  out.n_points = geo.n_points;
  for (int lo = 0; lo <= kMaxDegree; ++lo) {
    if (w.mix[lo] < 0) continue;
    bool any = false;
    for (const ConvPath& p : conv_path_table()[lo]) any = any || gathered[p.li] >= 0;
    if (!any) continue;
    int m = g.matmul(cg_collect(g, geo, gathered, in.channels, lo), w.mix[lo]);
    if (lo == 0 && w.bias >= 0) m = g.add_rowvec(m, w.bias);
    out.block[lo] = m;
    out.channels[lo] = g.cols(w.mix[lo]);
  }
  return out;
}

inline Tensor isht_slice(const SphereSampling& s, int l) {
  Tensor t(s.n_dirs, 2 * l + 1);
  for (int i = 0; i < s.n_dirs; ++i)
    for (int m = 0; m < 2 * l + 1; ++m) t.at(i, m) = s.isht(i, l * l + m);
  return t;
}

inline Tensor sht_slice(const SphereSampling& s, int l) {
  Tensor t(2 * l + 1, s.n_dirs);
  for (int m = 0; m < 2 * l + 1; ++m)
    for (int i = 0; i < s.n_dirs; ++i) t.at(m, i) = s.sht(l * l + m, i);
  return t;
}

// Sphere-map nonlinearity: evaluate the summed per-point spherical signal on
// the sampling directions, apply one affine channel map (+ ReLU), and project
// back to degrees l <= 3.
inline FeatureMap equivariant_nonlinearity(Graph& g, const SphereSampling& samp, const FeatureMap& in,
                                           int w, int b, bool use_relu = true) {
  int sig = -1;
  int c_in = -1;
  for (int l = 0; l <= kMaxDegree; ++l) {
    if (in.block[l] < 0) continue;
    check(c_in < 0 || g.cols(in.block[l]) == c_in,
          "equivariant_nonlinearity: per-degree channel widths must match");
    c_in = g.cols(in.block[l]);
    const int s_l = g.block_linear(in.block[l], isht_slice(samp, l));
    sig = sig < 0 ? s_l : g.add(sig, s_l);
  }
  check(sig >= 0, "equivariant_nonlinearity: empty feature map");

  int y = g.matmul(sig, w);
  if (b >= 0) y = g.add_rowvec(y, b);
  if (use_relu) y = g.relu(y);

  FeatureMap out;
  out.n_points = in.n_points;
  for (int l = 0; l <= kMaxDegree; ++l) {
    out.block[l] = g.block_linear(y, sht_slice(samp, l));
    out.channels[l] = g.cols(y);
  }
  return out;
}

// Per-direction max over points of the concatenated per-degree sphere maps:
// (K*n_dirs) x sum(C_l) -> n_dirs x sum(C_l).
inline int global_sphere_pool(Graph& g, const SphereSampling& samp, const FeatureMap& in) {
  check(in.n_points > 0, "global_sphere_pool: empty cloud");
  std::vector<int> maps;
  for (int l = 0; l <= kMaxDegree; ++l)
    if (in.block[l] >= 0) maps.push_back(g.block_linear(in.block[l], isht_slice(samp, l)));
  check(!maps.empty(), "global_sphere_pool: empty feature map");
  const int cat = maps.size() == 1 ? maps[0] : g.concat_cols(maps);
  return g.max_blocks(cat, samp.n_dirs);
}

struct BackboneWeights {
  ConvWeights conv1, conv2, conv3;
  int nl1_w = -1, nl1_b = -1;
  int nl2_w = -1, nl2_b = -1;
};

struct BackboneResult {
  int pooled = -1;          // n_dirs x (4 * C_out)
  FeatureMap features;      // per-point map after the last conv
};

// Three equivariant convolutions with interleaved sphere-map nonlinearities,
// then the global pool. The input feature is a constant scalar channel.
inline BackboneResult backbone_forward(Graph& g, const ConvGeometry& geo, const SphereSampling& samp,
                                       const BackboneWeights& w) {
  FeatureMap in;
  in.n_points = geo.n_points;
  Tensor ones(geo.n_points, 1);
  for (double& x : ones.v) x = 1.0;
  in.block[0] = g.constant(std::move(ones));
  in.channels[0] = 1;

  const FeatureMap f1 = equivariant_conv(g, geo, in, w.conv1);
  const FeatureMap h1 = equivariant_nonlinearity(g, samp, f1, w.nl1_w, w.nl1_b);
  const FeatureMap f2 = equivariant_conv(g, geo, h1, w.conv2);
  const FeatureMap h2 = equivariant_nonlinearity(g, samp, f2, w.nl2_w, w.nl2_b);
  const FeatureMap f3 = equivariant_conv(g, geo, h2, w.conv3);

  BackboneResult out;
  out.features = f3;
  out.pooled = global_sphere_pool(g, samp, f3);
  return out;
}

}  // namespace canon3d
