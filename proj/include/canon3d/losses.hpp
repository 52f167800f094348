#pragma once

#include <cmath>
#include <vector>

#include "canon3d/model.hpp"

namespace canon3d {

struct LossWeights {
  double canon = 2.0;
  double rest = 1.0;
  double ortho = 1.0;
  double sep = 0.8;
  double amod = 1.0;
  double seg_full = 0.1;
  double seg_partial = 0.1;
  double l1_reg = 0.1;
};

namespace detail {

inline Tensor cloud_tensor(const PointCloud& x) {
  Tensor t(x.size(), 3);
  for (int i = 0; i < x.size(); ++i)
    for (int a = 0; a < 3; ++a) t.at(i, a) = x.row(i)[a];
  return t;
}

inline Tensor mat3_tensor(const Mat3& m) {
  Tensor t(3, 3);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) t.at(i, j) = m[i][j];
  return t;
}

// |a|_F as a graph scalar. sqrt's backward skips the zero point, so a
// vanishing difference contributes a zero subgradient instead of a NaN.
inline int frobenius(Graph& g, int a) { return g.sqrt_elem(g.squared_sum(a)); }

// Sum of row-wise cosine similarities over the `valid` row subset.
inline int cosine_rows_sum(Graph& g, int a, int b, const std::vector<int>& valid) {
  const int ga = g.gather_rows(a, valid);
  const int gb = g.gather_rows(b, valid);
  const int num = g.row_sum(g.mul(ga, gb));
  const int den = g.mul(g.rows_l2norm(ga), g.rows_l2norm(gb));
  return g.sum_all(g.div(num, den));
}

}  // namespace detail

// Mean (not squared) Euclidean residual between the posed canonical shape
// and the input: (1/K) sum_i |E xc_i - X_i|.
inline int canon_loss(Graph& g, int e_sel, int x_c, const PointCloud& x) {
  check(g.rows(x_c) == x.size() && g.cols(x_c) == 3,
        "canon_loss: canonical shape / point count mismatch");
  check(g.rows(e_sel) == 3 && g.cols(e_sel) == 3, "canon_loss: frame must be 3x3");
  const int rec = g.matmul(x_c, g.transpose(e_sel));
  const int d = g.sub(rec, g.constant(detail::cloud_tensor(x)));
  return g.mean_all(g.rows_l2norm(d));
}

// Min-over-candidates form: the minimizing frame is chosen on values and
// only that frame receives gradient.
struct CanonMin {
  int loss = -1;
  int selected = 0;
};

inline CanonMin canon_loss_min(Graph& g, const std::vector<int>& frames, int x_c,
                               const PointCloud& x) {
  std::vector<Mat3> fr;
  fr.reserve(frames.size());
  for (int id : frames) fr.push_back(tensor_to_mat3(g.val(id)));
  CanonMin r;
  r.selected = select_frame(fr, g.val(x_c), x);
  r.loss = canon_loss(g, frames[r.selected], x_c, x);
  return r;
}

// (1/P) sum_p |U_p V_p^T - E_p|_F with the orthonormal target frozen: the
// SVD is taken on values and enters the graph as a constant.
inline int ortho_loss(Graph& g, const std::vector<int>& frames) {
  check(!frames.empty(), "ortho_loss: no frames");
  int acc = -1;
  for (int e : frames) {
    const Mat3 target = svd3_uvt(tensor_to_mat3(g.val(e)));
    const int d = g.sub(g.constant(detail::mat3_tensor(target)), e);
    const int f = detail::frobenius(g, d);
    acc = acc < 0 ? f : g.add(acc, f);
  }
  return g.scale(acc, 1.0 / static_cast<double>(frames.size()));
}

// -(1/(9P)) sum_{i != j} |E_i - E_j|_F over ordered pairs.
inline int separation_loss(Graph& g, const std::vector<int>& frames) {
  const int p = static_cast<int>(frames.size());
  check(p >= 1, "separation_loss: no frames");
  if (p == 1) return g.constant(Tensor::scalar(0.0));
  int acc = -1;
  for (int i = 0; i < p; ++i)
    for (int j = i + 1; j < p; ++j) {
      const int f = detail::frobenius(g, g.sub(frames[i], frames[j]));
      acc = acc < 0 ? f : g.add(acc, f);
    }
  return g.scale(acc, -2.0 / (9.0 * p));
}

// Mean squared distance between the full branch's canonical shape restricted
// to the kept indices and the partial branch's canonical shape, each
// mean-centered so the comparison is translation-free.
inline int restriction_loss(Graph& g, int full_x_c, int partial_x_c,
                            const std::vector<int>& kept) {
  check(!kept.empty(), "restriction_loss: empty kept set");
  check(g.rows(partial_x_c) == static_cast<int>(kept.size()),
        "restriction_loss: kept set / partial shape mismatch");
  const int a = g.mean_center_rows(g.gather_rows(full_x_c, kept));
  const int b = g.mean_center_rows(partial_x_c);
  return g.scale(g.squared_sum(g.sub(a, b)),
                 1.0 / static_cast<double>(kept.size()));
}

inline int amodal_loss(Graph& g, int t, const Vec3& offset) {
  check(g.rows(t) == 3 && g.cols(t) == 1, "amodal_loss: translation must be 3x1");
  Tensor o(3, 1);
  o.v = {offset[0], offset[1], offset[2]};
  return g.squared_sum(g.sub(t, g.constant(o)));
}

// Mass-weighted part centroids theta = A^T X with A the column-normalized
// segmentation.
struct PartCentroids {
  int theta = -1;  // C x 3
  std::vector<int> degenerate_parts;
};

inline PartCentroids part_centroids(Graph& g, const PointCloud& x, int s) {
  const int k = x.size();
  const int c = g.cols(s);
  check(k > 0, "part_centroids: empty cloud");
  check(g.rows(s) == k, "part_centroids: segmentation row count mismatch");

  PartCentroids out;
  const int xc = g.constant(detail::cloud_tensor(x));
  const int colsum = g.col_sum(s);  // 1 x C part masses

  const Tensor& mass = g.val(colsum);
  for (int j = 0; j < c; ++j)
    if (mass.v[j] <= 0.0) out.degenerate_parts.push_back(j);

  if (out.degenerate_parts.empty()) {
    out.theta = g.matmul(g.transpose(g.div_rowvec(s, colsum)), xc);
  } else {
    // A part with no mass gets the cloud mean as its centroid (constant, so
    // it carries no gradient), and everything downstream stays finite.
    const int a = g.div_rowvec(s, g.clamp_min(colsum, 1e-30));
    const int raw = g.matmul(g.transpose(a), xc);
    Tensor mask(c, 3);
    for (double& v : mask.v) v = 1.0;
    Tensor fallback = Tensor::zeros(c, 3);
    const Vec3 mean = cloud_mean(x);
    for (int j : out.degenerate_parts)
      for (int a3 = 0; a3 < 3; ++a3) {
        mask.at(j, a3) = 0.0;
        fallback.at(j, a3) = mean[a3];
      }
    out.theta = g.add(g.mul(raw, g.constant(mask)), g.constant(fallback));
  }
  return out;
}

// Localization, equilibrium, and the two-way point/centroid Chamfer term.
// theta is exposed so the partial-branch losses can reuse the centroids.
struct SegFullLosses {
  int localization = -1;
  int equilibrium = -1;
  int part_distribution = -1;
  int theta = -1;  // C x 3
  std::vector<int> degenerate_parts;
};

inline SegFullLosses seg_losses_full(Graph& g, const PointCloud& x, int s) {
  const int k = x.size();
  const int c = g.cols(s);
  check(k > 0, "seg_losses_full: empty cloud");
  check(g.rows(s) == k, "seg_losses_full: segmentation row count mismatch");

  SegFullLosses out;
  const PartCentroids pc = part_centroids(g, x, s);
  out.theta = pc.theta;
  out.degenerate_parts = pc.degenerate_parts;
  const int xc = g.constant(detail::cloud_tensor(x));
  const int colsum = g.col_sum(s);  // 1 x C part masses

  // localization = (1/K) sum_i sum_k S_ik |X_i - theta_k|^2, expanded so it
  // is three dense contractions instead of a K x C x 3 loop.
  Tensor xsq(k, 1);
  for (int i = 0; i < k; ++i) {
    const double* p = x.row(i);
    xsq.v[i] = p[0] * p[0] + p[1] * p[1] + p[2] * p[2];
  }
  const int t_point = g.dot_all(g.row_sum(s), g.constant(xsq));
  const int t_cross = g.dot_all(s, g.matmul(xc, g.transpose(out.theta)));
  const int theta_sq = g.transpose(g.row_sum(g.mul(out.theta, out.theta)));
  const int t_mass = g.dot_all(colsum, theta_sq);
  out.localization = g.scale(
      g.add(g.add(t_point, g.scale(t_cross, -2.0)), t_mass), 1.0 / k);

  out.equilibrium = g.squared_sum(
      g.add_scalar(g.scale(colsum, 1.0 / k), -1.0 / c));

  // Two-way Chamfer between points and centroids; nearest assignments are
  // fixed on values and gradient flows through the matched pairs.
  const Tensor& th = g.val(out.theta);
  auto d2 = [&](int i, int j) {
    double s2 = 0;
    for (int a3 = 0; a3 < 3; ++a3) {
      const double d = x.row(i)[a3] - th.at(j, a3);
      s2 += d * d;
    }
    return s2;
  };
  std::vector<int> nearest_centroid(k, 0);
  for (int i = 0; i < k; ++i) {
    double best = d2(i, 0);
    for (int j = 1; j < c; ++j) {
      const double v = d2(i, j);
      if (v < best) {
        best = v;
        nearest_centroid[i] = j;
      }
    }
  }
  Tensor nearest_point(c, 3);
  for (int j = 0; j < c; ++j) {
    int arg = 0;
    double best = d2(0, j);
    for (int i = 1; i < k; ++i) {
      const double v = d2(i, j);
      if (v < best) {
        best = v;
        arg = i;
      }
    }
    for (int a3 = 0; a3 < 3; ++a3) nearest_point.at(j, a3) = x.row(arg)[a3];
  }
  const int fwd = g.scale(
      g.squared_sum(g.sub(xc, g.gather_rows(out.theta, nearest_centroid))),
      1.0 / k);
  const int bwd = g.scale(
      g.squared_sum(g.sub(out.theta, g.constant(nearest_point))), 1.0 / c);
  out.part_distribution = g.add(fwd, bwd);
  return out;
}

// Partial-branch segmentation consistency: the partial cloud's part
// distributions should restrict the full ones, and centroid-difference
// directions should agree between the branches.
struct SegPartialLosses {
  int part_restriction = -1;
  int part_directional = -1;
  bool flagged_zero_rows = false;
  bool flagged_zero_pairs = false;
};

inline SegPartialLosses seg_losses_partial(Graph& g, int s_full, int s_partial,
                                           const std::vector<int>& kept, int k_full,
                                           int theta_full, int theta_partial) {
  check(!kept.empty(), "seg_losses_partial: empty kept set");
  check(g.rows(s_partial) == static_cast<int>(kept.size()),
        "seg_losses_partial: kept set / partial segmentation mismatch");
  check(g.cols(s_full) == g.cols(s_partial),
        "seg_losses_partial: part count mismatch");
  const int c = g.rows(theta_full);
  check(g.rows(theta_partial) == c, "seg_losses_partial: centroid count mismatch");

  SegPartialLosses out;
  const int sk = g.gather_rows(s_full, kept);

  auto row_norm = [&](const Tensor& t, int i) {
    double s2 = 0;
    for (int j = 0; j < t.cols; ++j) s2 += t.at(i, j) * t.at(i, j);
    return s2;
  };
  std::vector<int> valid_rows;
  {
    const Tensor& a = g.val(sk);
    const Tensor& b = g.val(s_partial);
    for (int i = 0; i < a.rows; ++i) {
      if (row_norm(a, i) > 0.0 && row_norm(b, i) > 0.0)
        valid_rows.push_back(i);
      else
        out.flagged_zero_rows = true;
    }
  }
  out.part_restriction =
      valid_rows.empty()
          ? g.constant(Tensor::scalar(0.0))
          : g.scale(detail::cosine_rows_sum(g, sk, s_partial, valid_rows),
                    -2.0 / static_cast<double>(k_full));

  if (c < 2) {
    out.part_directional = g.constant(Tensor::scalar(0.0));
    return out;
  }
  std::vector<int> idx_a, idx_b;
  for (int j = 0; j < c; ++j)
    for (int l = j + 1; l < c; ++l) {
      idx_a.push_back(j);
      idx_b.push_back(l);
    }
  const int d_full = g.sub(g.gather_rows(theta_full, idx_a),
                           g.gather_rows(theta_full, idx_b));
  const int d_part = g.sub(g.gather_rows(theta_partial, idx_a),
                           g.gather_rows(theta_partial, idx_b));
  std::vector<int> valid_pairs;
  {
    const Tensor& a = g.val(d_full);
    const Tensor& b = g.val(d_part);
    for (int i = 0; i < a.rows; ++i) {
      if (row_norm(a, i) > 0.0 && row_norm(b, i) > 0.0)
        valid_pairs.push_back(i);
      else
        out.flagged_zero_pairs = true;
    }
  }
  const int n_pairs = c * (c - 1) / 2;
  out.part_directional =
      valid_pairs.empty()
          ? g.constant(Tensor::scalar(0.0))
          : g.scale(detail::cosine_rows_sum(g, d_full, d_part, valid_pairs),
                    -1.0 / static_cast<double>(n_pairs));
  return out;
}

struct LossComponents {
  int canon = -1;
  int rest = -1;
  int ortho = -1;
  int sep = -1;
  int amod = -1;
  int seg_full = -1;     // localization + equilibrium + part_distribution
  int seg_partial = -1;  // part_restriction + part_directional
};

// Weighted sum of whatever components are present, plus the L1 kernel
// regularizer over the equivariant convolution weights.
inline int total_loss(Graph& g, const LossComponents& c, const LossWeights& w,
                      const std::vector<int>& kernel_weights) {
  int acc = -1;
  auto addw = [&](int id, double wt) {
    if (id < 0) return;
    const int t = g.scale(id, wt);
    acc = acc < 0 ? t : g.add(acc, t);
  };
  addw(c.canon, w.canon);
  addw(c.rest, w.rest);
  addw(c.ortho, w.ortho);
  addw(c.sep, w.sep);
  addw(c.amod, w.amod);
  addw(c.seg_full, w.seg_full);
  addw(c.seg_partial, w.seg_partial);
  if (!kernel_weights.empty()) {
    int l1 = -1;
    for (int kw : kernel_weights) {
      const int a = g.abs_sum(kw);
      l1 = l1 < 0 ? a : g.add(l1, a);
    }
    addw(l1, w.l1_reg);
  }
  check(acc >= 0, "total_loss: no components");
  return acc;
}

// The conv kernels the L1 regularizer applies to.
inline std::vector<int> kernel_weight_ids(const BoundModel& m) {
  std::vector<int> ids;
  for (const ConvWeights* cw : {&m.backbone.conv1, &m.backbone.conv2, &m.backbone.conv3})
    for (int lo = 0; lo < 4; ++lo)
      if (cw->mix[lo] >= 0) ids.push_back(cw->mix[lo]);
  return ids;
}

}  // namespace canon3d
