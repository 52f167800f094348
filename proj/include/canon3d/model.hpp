#pragma once

#include <array>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "canon3d/linalg.hpp"
#include "canon3d/occlusion.hpp"
#include "canon3d/rng.hpp"
#include "canon3d/tfn.hpp"

namespace canon3d {

// Architecture plan. The two presets share every structural choice and
// differ only in widths; `desk` is sized so a full training run fits in
// minutes on one core.
struct ModelConfig {
  int p_frames = 5;
  int c_parts = 10;
  int n_anchor = 32;    // sphere directions for ISHT/SHT
  int k_neighbors = 16;
  std::array<int, 3> conv_channels{32, 64, 64};  // per-degree widths, layers 1-3
  int coeff_hidden = 128;
  int c_glob = 64;
  int frame_hidden = 64;
  int trans_hidden = 64;
  std::array<int, 2> seg_hidden{256, 128};
  bool project_frames = false;  // post-hoc svd3 -> UVt projection of E_p

  int pooled_width() const { return 4 * conv_channels[2]; }

  static ModelConfig full() { return ModelConfig{}; }

  static ModelConfig desk() {
    ModelConfig c;
    c.n_anchor = 24;
    c.conv_channels = {8, 16, 16};
    c.coeff_hidden = 32;
    c.c_glob = 16;
    c.frame_hidden = 16;
    c.trans_hidden = 16;
    c.seg_hidden = {64, 32};
    return c;
  }
};

struct ConvParamSet {
  std::array<Tensor, 4> mix;  // empty where the degree has no incoming path
  Tensor bias;
};

struct ModelParams {
  ConvParamSet conv1, conv2, conv3;
  Tensor nl1_w, nl1_b, nl2_w, nl2_b;
  Tensor coeff_w1, coeff_b1, coeff_w2, coeff_b2;
  Tensor shape_w;  // c_glob x 3; x_c rows are H^1 rows times this
  Tensor frame_w1, frame_b1, frame_w2, frame_b2;
  Tensor trans_w1, trans_b1, trans_w2, trans_b2;
  Tensor seg_w1, seg_b1, seg_w2, seg_b2, seg_w3, seg_b3;
};

// Single source of truth for parameter order. Initialization, optimizer
// state, binding, and checkpoints all iterate through here, so they agree
// on which tensor is which without any other registry.
template <typename Params, typename Fn>
void for_each_param(Params&& p, Fn&& fn) {
  auto conv = [&](const std::string& base, auto& c) {
    for (int lo = 0; lo < 4; ++lo)
      fn(base + "_mix" + std::to_string(lo), c.mix[lo]);
    fn(base + "_bias", c.bias);
  };
  conv("conv1", p.conv1);
  conv("conv2", p.conv2);
  conv("conv3", p.conv3);
  fn("nl1_w", p.nl1_w);
  fn("nl1_b", p.nl1_b);
  fn("nl2_w", p.nl2_w);
  fn("nl2_b", p.nl2_b);
  fn("coeff_w1", p.coeff_w1);
  fn("coeff_b1", p.coeff_b1);
  fn("coeff_w2", p.coeff_w2);
  fn("coeff_b2", p.coeff_b2);
  fn("shape_w", p.shape_w);
  fn("frame_w1", p.frame_w1);
  fn("frame_b1", p.frame_b1);
  fn("frame_w2", p.frame_w2);
  fn("frame_b2", p.frame_b2);
  fn("trans_w1", p.trans_w1);
  fn("trans_b1", p.trans_b1);
  fn("trans_w2", p.trans_w2);
  fn("trans_b2", p.trans_b2);
  fn("seg_w1", p.seg_w1);
  fn("seg_b1", p.seg_b1);
  fn("seg_w2", p.seg_w2);
  fn("seg_b2", p.seg_b2);
  fn("seg_w3", p.seg_w3);
  fn("seg_b3", p.seg_b3);
}

// Uniform fan-in initialization: weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)),
// biases zero. The RNG is consumed in for_each_param order, so a given seed
// and config always produce the same parameters.
inline ModelParams init_params(const ModelConfig& cfg, Rng& rng) {
  const int c1 = cfg.conv_channels[0], c2 = cfg.conv_channels[1],
            c3 = cfg.conv_channels[2];
  const std::array<int, 4> in1{1, 0, 0, 0};
  const std::array<int, 4> in2{c1, c1, c1, c1};
  const std::array<int, 4> in3{c2, c2, c2, c2};

  auto weight = [&](int rows, int cols) {
    Tensor t(rows, cols);
    const double b = 1.0 / std::sqrt(static_cast<double>(rows));
    for (double& x : t.v) x = rng.uniform(-b, b);
    return t;
  };
  auto conv_set = [&](const std::array<int, 4>& in, int c_out) {
    ConvParamSet s;
    for (int lo = 0; lo < 4; ++lo) {
      const int w = conv_in_width(in, lo);
      if (w > 0) s.mix[lo] = weight(w, c_out);
    }
    s.bias = Tensor::zeros(1, c_out);
    return s;
  };

  ModelParams p;
  p.conv1 = conv_set(in1, c1);
  p.conv2 = conv_set(in2, c2);
  p.conv3 = conv_set(in3, c3);
  p.nl1_w = weight(c1, c1);
  p.nl1_b = Tensor::zeros(1, c1);
  p.nl2_w = weight(c2, c2);
  p.nl2_b = Tensor::zeros(1, c2);

  const int pw = cfg.pooled_width();
  p.coeff_w1 = weight(pw, cfg.coeff_hidden);
  p.coeff_b1 = Tensor::zeros(1, cfg.coeff_hidden);
  p.coeff_w2 = weight(cfg.coeff_hidden, cfg.c_glob);
  p.coeff_b2 = Tensor::zeros(1, cfg.c_glob);
  p.shape_w = weight(cfg.c_glob, 3);
  p.frame_w1 = weight(pw, cfg.frame_hidden);
  p.frame_b1 = Tensor::zeros(1, cfg.frame_hidden);
  p.frame_w2 = weight(cfg.frame_hidden, 3 * cfg.p_frames);
  p.frame_b2 = Tensor::zeros(1, 3 * cfg.p_frames);
  p.trans_w1 = weight(pw, cfg.trans_hidden);
  p.trans_b1 = Tensor::zeros(1, cfg.trans_hidden);
  p.trans_w2 = weight(cfg.trans_hidden, 1);
  p.trans_b2 = Tensor::zeros(1, 1);
  p.seg_w1 = weight(4 * cfg.c_glob, cfg.seg_hidden[0]);
  p.seg_b1 = Tensor::zeros(1, cfg.seg_hidden[0]);
  p.seg_w2 = weight(cfg.seg_hidden[0], cfg.seg_hidden[1]);
  p.seg_b2 = Tensor::zeros(1, cfg.seg_hidden[1]);
  p.seg_w3 = weight(cfg.seg_hidden[1], cfg.c_parts);
  p.seg_b3 = Tensor::zeros(1, cfg.c_parts);
  return p;
}

struct BoundModel {
  BackboneWeights backbone;
  int coeff_w1 = -1, coeff_b1 = -1, coeff_w2 = -1, coeff_b2 = -1;
  int shape_w = -1;
  int frame_w1 = -1, frame_b1 = -1, frame_w2 = -1, frame_b2 = -1;
  int trans_w1 = -1, trans_b1 = -1, trans_w2 = -1, trans_b2 = -1;
  int seg_w1 = -1, seg_b1 = -1, seg_w2 = -1, seg_b2 = -1, seg_w3 = -1, seg_b3 = -1;
};

// Loads every non-empty parameter tensor into the graph as a leaf. When
// `ids` is given, the leaf ids are appended in for_each_param order (the
// optimizer pairs them back up with the parameter tensors the same way).
inline BoundModel bind_model(Graph& g, const ModelParams& p, bool trainable,
                             std::vector<int>* ids = nullptr) {
  BoundModel m;
  auto bind = [&](const Tensor& t) {
    const int id = g.leaf(t, trainable);
    if (ids) ids->push_back(id);
    return id;
  };
  auto conv = [&](const ConvParamSet& c) {
    ConvWeights w;
    for (int lo = 0; lo < 4; ++lo)
      if (!c.mix[lo].empty()) w.mix[lo] = bind(c.mix[lo]);
    w.bias = bind(c.bias);
    return w;
  };
  m.backbone.conv1 = conv(p.conv1);
  m.backbone.conv2 = conv(p.conv2);
  m.backbone.conv3 = conv(p.conv3);
  m.backbone.nl1_w = bind(p.nl1_w);
  m.backbone.nl1_b = bind(p.nl1_b);
  m.backbone.nl2_w = bind(p.nl2_w);
  m.backbone.nl2_b = bind(p.nl2_b);
  m.coeff_w1 = bind(p.coeff_w1);
  m.coeff_b1 = bind(p.coeff_b1);
  m.coeff_w2 = bind(p.coeff_w2);
  m.coeff_b2 = bind(p.coeff_b2);
  m.shape_w = bind(p.shape_w);
  m.frame_w1 = bind(p.frame_w1);
  m.frame_b1 = bind(p.frame_b1);
  m.frame_w2 = bind(p.frame_w2);
  m.frame_b2 = bind(p.frame_b2);
  m.trans_w1 = bind(p.trans_w1);
  m.trans_b1 = bind(p.trans_b1);
  m.trans_w2 = bind(p.trans_w2);
  m.trans_b2 = bind(p.trans_b2);
  m.seg_w1 = bind(p.seg_w1);
  m.seg_b1 = bind(p.seg_b1);
  m.seg_w2 = bind(p.seg_w2);
  m.seg_b2 = bind(p.seg_b2);
  m.seg_w3 = bind(p.seg_w3);
  m.seg_b3 = bind(p.seg_b3);
  return m;
}

// Global equivariant feature: one spherical-harmonic coefficient block per
// degree, (2l+1) x c_glob.
struct GlobalFeature {
  std::array<int, 4> block{-1, -1, -1, -1};
  int channels = 0;
};

// Pooled sphere map -> MLP over directions -> SHT per degree. Because the
// sampling directions are anchored to the cloud, the fitted coefficients
// rotate with it: F^l(RX) = D^l(R) F^l(X).
inline GlobalFeature coefficient_head(Graph& g, const SphereSampling& samp,
                                      int pooled, const BoundModel& m) {
  const int hid = g.relu(g.add_rowvec(g.matmul(pooled, m.coeff_w1), m.coeff_b1));
  const int sig = g.add_rowvec(g.matmul(hid, m.coeff_w2), m.coeff_b2);
  GlobalFeature f;
  f.channels = g.cols(sig);
  for (int l = 0; l <= kMaxDegree; ++l)
    f.block[l] = g.matmul(g.constant(sht_slice(samp, l)), sig);
  return f;
}

// Rotation-invariant per-point embedding H^l_ij = <F^l_:,j, Y^l(X_i)>.
// blocks[l] is K x c_glob; h concatenates them to K x 4*c_glob.
struct InvariantEmbedding {
  std::array<int, 4> block{-1, -1, -1, -1};
  int h = -1;
};

inline InvariantEmbedding invariant_embedding(Graph& g, const PointCloud& centered,
                                              const GlobalFeature& f) {
  InvariantEmbedding e;
  const int k = centered.size();
  std::vector<int> parts;
  for (int l = 0; l <= kMaxDegree; ++l) {
    Tensor y(k, 2 * l + 1);
    double buf[7];
    for (int i = 0; i < k; ++i) {
      eval_solid_harmonics(l, centered.row(i), buf);
      for (int c = 0; c < 2 * l + 1; ++c) y.at(i, c) = buf[c];
    }
    e.block[l] = g.matmul(g.constant(std::move(y)), f.block[l]);
    parts.push_back(e.block[l]);
  }
  e.h = g.concat_cols(parts);
  return e;
}

struct ShapeAndFrame {
  int x_c = -1;             // K x 3 invariant shape
  int canonical_frame = -1;  // 3 x 3, W (F^1)^T
};

inline ShapeAndFrame invariant_shape_and_frame(Graph& g, const InvariantEmbedding& e,
                                               const GlobalFeature& f, int shape_w) {
  ShapeAndFrame s;
  s.x_c = g.matmul(e.block[1], shape_w);
  s.canonical_frame = g.transpose(g.matmul(f.block[1], shape_w));
  return s;
}

// P candidate frames. The last layer emits 3P sphere-map channels; channels
// 3p..3p+2 give three type-1 vectors which become the columns of E_p, so
// each candidate satisfies E_p(RX) = R E_p(X).
inline std::vector<int> frame_head(Graph& g, const SphereSampling& samp, int pooled,
                                   const BoundModel& m, int p_frames) {
  check(p_frames >= 1, "frame_head: need at least one frame");
  const int hid = g.relu(g.add_rowvec(g.matmul(pooled, m.frame_w1), m.frame_b1));
  const int out = g.add_rowvec(g.matmul(hid, m.frame_w2), m.frame_b2);
  const int v = g.matmul(g.constant(sht_slice(samp, 1)), out);  // 3 x 3P
  const int vt = g.transpose(v);
  std::vector<int> frames(p_frames);
  for (int p = 0; p < p_frames; ++p)
    frames[p] = g.transpose(g.gather_rows(vt, {3 * p, 3 * p + 1, 3 * p + 2}));
  return frames;
}

// Amodal translation: a single sphere-map channel converted to one type-1
// vector. Expects the pooled signal of the mean-centered partial cloud.
inline int translation_head(Graph& g, const SphereSampling& samp, int pooled,
                            const BoundModel& m) {
  const int hid = g.relu(g.add_rowvec(g.matmul(pooled, m.trans_w1), m.trans_b1));
  const int out = g.add_rowvec(g.matmul(hid, m.trans_w2), m.trans_b2);
  return g.matmul(g.constant(sht_slice(samp, 1)), out);  // 3 x 1
}

// Per-point part distribution from the invariant embedding; rows sum to 1.
inline int segmentation_head(Graph& g, const InvariantEmbedding& e,
                             const BoundModel& m) {
  int hid = g.relu(g.add_rowvec(g.matmul(e.h, m.seg_w1), m.seg_b1));
  hid = g.relu(g.add_rowvec(g.matmul(hid, m.seg_w2), m.seg_b2));
  return g.softmax_rows(g.add_rowvec(g.matmul(hid, m.seg_w3), m.seg_b3));
}

// argmin_p (1/K) sum_i |E_p xc_i - X_i|; ties go to the lowest index.
inline int select_frame(const std::vector<Mat3>& frames, const Tensor& x_c,
                        const PointCloud& points) {
  check(!frames.empty(), "select_frame: no candidate frames");
  const int k = points.size();
  check(x_c.rows == k && x_c.cols == 3, "select_frame: shape mismatch");
  int best = 0;
  double best_res = std::numeric_limits<double>::infinity();
  for (std::size_t p = 0; p < frames.size(); ++p) {
    double acc = 0.0;
    for (int i = 0; i < k; ++i) {
      const Vec3 xc{x_c.at(i, 0), x_c.at(i, 1), x_c.at(i, 2)};
      const Vec3 rec = mat3_apply(frames[p], xc);
      const double* x = points.row(i);
      const double dx = rec[0] - x[0], dy = rec[1] - x[1], dz = rec[2] - x[2];
      acc += std::sqrt(dx * dx + dy * dy + dz * dz);
    }
    const double res = acc / k;
    if (res < best_res) {
      best_res = res;
      best = static_cast<int>(p);
    }
  }
  return best;
}

inline Mat3 tensor_to_mat3(const Tensor& t) {
  check(t.rows == 3 && t.cols == 3, "tensor_to_mat3: not 3x3");
  Mat3 m;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) m[i][j] = t.at(i, j);
  return m;
}

// Full pipeline on a mean-centered cloud, graph form. Frame selection is a
// discrete choice made on values; losses route gradients through the
// selected frame only.
struct ModelGraphOutput {
  int pooled = -1;
  GlobalFeature f;
  InvariantEmbedding h;
  int x_c = -1;
  int canonical_frame = -1;
  std::vector<int> frames;
  int translation = -1;  // 3 x 1
  int segmentation = -1;
  int selected = 0;
};

inline ModelGraphOutput model_forward(Graph& g, const PointCloud& centered,
                                      const BoundModel& m, const ModelConfig& cfg) {
  const ConvGeometry geo = build_conv_geometry(centered, cfg.k_neighbors);
  const SphereSampling samp = anchored_sampling(centered, cfg.n_anchor);
  const BackboneResult bb = backbone_forward(g, geo, samp, m.backbone);

  ModelGraphOutput out;
  out.pooled = bb.pooled;
  out.f = coefficient_head(g, samp, bb.pooled, m);
  out.h = invariant_embedding(g, centered, out.f);
  const ShapeAndFrame sf = invariant_shape_and_frame(g, out.h, out.f, m.shape_w);
  out.x_c = sf.x_c;
  out.canonical_frame = sf.canonical_frame;
  out.frames = frame_head(g, samp, bb.pooled, m, cfg.p_frames);
  out.translation = translation_head(g, samp, bb.pooled, m);
  out.segmentation = segmentation_head(g, out.h, m);

  std::vector<Mat3> fr;
  fr.reserve(out.frames.size());
  for (int id : out.frames) fr.push_back(tensor_to_mat3(g.val(id)));
  out.selected = select_frame(fr, g.val(out.x_c), centered);
  return out;
}

struct CanonicalizationResult {
  Tensor x_c;  // K x 3
  std::vector<Mat3> frames;
  int selected = 0;
  Mat3 canonical_frame{};
  Vec3 amodal_translation{0, 0, 0};
  Tensor segmentation;  // K x c_parts
};

inline CanonicalizationResult forward(const PointCloud& centered,
                                      const ModelParams& p, const ModelConfig& cfg) {
  Graph g;
  const BoundModel m = bind_model(g, p, false);
  const ModelGraphOutput out = model_forward(g, centered, m, cfg);

  CanonicalizationResult r;
  r.x_c = g.val(out.x_c);
  for (int id : out.frames) r.frames.push_back(tensor_to_mat3(g.val(id)));
  if (cfg.project_frames)
    for (Mat3& e : r.frames) e = svd3_uvt(e);
  r.selected = select_frame(r.frames, r.x_c, centered);
  r.canonical_frame = tensor_to_mat3(g.val(out.canonical_frame));
  const Tensor& t = g.val(out.translation);
  r.amodal_translation = {t.v[0], t.v[1], t.v[2]};
  r.segmentation = g.val(out.segmentation);
  return r;
}

// The exported canonicalization transform: recenter, run the model, apply
// the transpose of the selected frame to the centered input.
struct CanonicalizeOutput {
  CanonicalizationResult result;
  PointCloud canonical;
  Vec3 removed_mean{0, 0, 0};
};

inline CanonicalizeOutput canonicalize(const PointCloud& cloud,
                                       const ModelParams& p, const ModelConfig& cfg) {
  const RecenterResult rc = recenter(cloud);
  CanonicalizeOutput o;
  o.removed_mean = rc.mean;
  o.result = forward(rc.centered, p, cfg);
  const Mat3 et = mat3_transpose(o.result.frames[o.result.selected]);
  o.canonical = rotate_cloud(rc.centered, et);
  return o;
}

}  // namespace canon3d
