// Acceptance suite: one pass/fail line per criterion, exit 0 iff all pass.
//
//   1. representation theory        5. crop commutativity
//   2. network equivariance         6. desk-scale training
//   3. loss gradients               7. symmetric-family behavior (P=1 vs P=5)
//   4. metric oracles               8. subcommand determinism
//
// Criteria 6 and 7 train real models and dominate the runtime (tens of
// minutes on one core); everything else finishes in seconds.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "canon3d/metrics.hpp"
#include "canon3d/training.hpp"

using namespace canon3d;
namespace fs = std::filesystem;

namespace {

// ---------------------------------------------------------------------------
// Reporting

int g_failures = 0;

struct Stopwatch {
  std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
        .count();
  }
};

void verdict(int criterion, const std::string& name, bool ok, double elapsed,
             const std::string& detail) {
  std::printf("%s criterion %d (%s): %s [%.1f s]\n", ok ? "PASS" : "FAIL",
              criterion, name.c_str(), detail.c_str(), elapsed);
  std::fflush(stdout);
  if (!ok) ++g_failures;
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

double rel_tensor_diff(const Tensor& got, const Tensor& want) {
  double num = 0, den = 0;
  for (std::size_t i = 0; i < got.v.size(); ++i) {
    num += (got.v[i] - want.v[i]) * (got.v[i] - want.v[i]);
    den += want.v[i] * want.v[i];
  }
  return std::sqrt(num) / std::max(1e-300, std::sqrt(den));
}

PointCloud gaussian_cloud(Rng& rng, int n) {
  PointCloud x;
  x.xyz.reserve(3 * n);
  for (int i = 0; i < 3 * n; ++i) x.xyz.push_back(rng.normal());
  return x;
}

// ---------------------------------------------------------------------------
// 1. Representation theory

void criterion_1() {
  Stopwatch sw;
  Rng rng(101);
  double worst_identity = 0, worst_d1 = 0, worst_hom = 0, worst_orth = 0;
  double worst_harm = 0, worst_cg = 0;

  const Mat3 eye{{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}};
  for (int l = 0; l <= kMaxDegree; ++l) {
    const MatX d = wigner_d(l, eye);
    worst_identity = std::max(
        worst_identity,
        (d - MatX::Identity(2 * l + 1, 2 * l + 1)).cwiseAbs().maxCoeff());
  }

  for (int t = 0; t < 50; ++t) {
    const Mat3 r1 = random_rotation(rng), r2 = random_rotation(rng);
    Mat3 r12{};
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j)
        for (int k = 0; k < 3; ++k) r12[i][j] += r1[i][k] * r2[k][j];
    const MatX d1 = wigner_d(1, r1);
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j)
        worst_d1 = std::max(worst_d1, std::abs(d1(i, j) - r1[i][j]));
    for (int l = 0; l <= kMaxDegree; ++l) {
      const MatX a = wigner_d(l, r1), b = wigner_d(l, r2);
      worst_hom = std::max(worst_hom,
                           (wigner_d(l, r12) - a * b).cwiseAbs().maxCoeff());
      worst_orth = std::max(
          worst_orth, (a * a.transpose() - MatX::Identity(2 * l + 1, 2 * l + 1))
                          .cwiseAbs()
                          .maxCoeff());
    }
  }

  for (int t = 0; t < 50; ++t) {
    const Mat3 r = random_rotation(rng);
    const Vec3 x{rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
    const Vec3 rx = mat3_apply(r, x);
    for (int l = 0; l <= kMaxDegree; ++l) {
      double yx[7], yrx[7];
      eval_solid_harmonics(l, x.data(), yx);
      eval_solid_harmonics(l, rx.data(), yrx);
      const MatX d = wigner_d(l, r);
      for (int i = 0; i < 2 * l + 1; ++i) {
        double s = 0;
        for (int j = 0; j < 2 * l + 1; ++j) s += d(i, j) * yx[j];
        worst_harm = std::max(worst_harm, std::abs(yrx[i] - s));
      }
    }
  }

  for (int t = 0; t < 5; ++t) {
    const Mat3 r = random_rotation(rng);
    for (const auto& [key, c] : CgTable::instance().entries) {
      const auto [l, l1, l2] = key;
      const int n = 2 * l + 1, n1 = 2 * l1 + 1, n2 = 2 * l2 + 1;
      ConstEigenMap cm(c.data(), n, n1 * n2);
      const MatX d = wigner_d(l, r), d1 = wigner_d(l1, r), d2 = wigner_d(l2, r);
      MatX kron(n1 * n2, n1 * n2);
      for (int p = 0; p < n1; ++p)
        for (int q = 0; q < n2; ++q)
          for (int pp = 0; pp < n1; ++pp)
            for (int qq = 0; qq < n2; ++qq)
              kron(p * n2 + q, pp * n2 + qq) = d1(p, pp) * d2(q, qq);
      worst_cg = std::max(worst_cg, (cm * kron - d * cm).cwiseAbs().maxCoeff());
    }
  }

  const bool ok = worst_identity <= 1e-12 && worst_d1 <= 1e-12 &&
                  worst_hom <= 1e-8 && worst_orth <= 1e-8 &&
                  worst_harm <= 1e-10 && worst_cg <= 1e-8 && sw.seconds() < 10.0;
  verdict(1, "representation theory", ok, sw.seconds(),
          "identity " + fmt(worst_identity) + ", D1 " + fmt(worst_d1) +
              ", homomorphism " + fmt(worst_hom) + ", orthogonality " +
              fmt(worst_orth) + ", harmonics " + fmt(worst_harm) + ", cg " +
              fmt(worst_cg));
}

// ---------------------------------------------------------------------------
// 2. Network equivariance

void criterion_2() {
  Stopwatch sw;
  Rng rng(202);
  ModelConfig cfg = ModelConfig::desk();
  cfg.p_frames = 5;
  Rng prng(7);
  const ModelParams params = init_params(cfg, prng);

  double worst_f = 0, worst_inv = 0, worst_eq = 0, worst_shift = 0;
  for (int c = 0; c < 5; ++c) {
    const PointCloud cloud = center_cloud(gaussian_cloud(rng, 64), nullptr);
    Graph g0;
    const BoundModel m0 = bind_model(g0, params, false);
    const ModelGraphOutput base = model_forward(g0, cloud, m0, cfg);

    for (int t = 0; t < 20; ++t) {
      const Mat3 r = random_rotation(rng);
      const PointCloud rotated = rotate_cloud(cloud, r);
      Graph g1;
      const BoundModel m1 = bind_model(g1, params, false);
      const ModelGraphOutput out = model_forward(g1, rotated, m1, cfg);

      for (int l = 0; l <= kMaxDegree; ++l) {
        const MatX d = wigner_d(l, r);
        const Tensor& fb = g0.val(base.f.block[l]);
        Tensor want(fb.rows, fb.cols);
        EigenMap(want.v.data(), want.rows, want.cols).noalias() =
            d * ConstEigenMap(fb.v.data(), fb.rows, fb.cols);
        worst_f = std::max(worst_f, rel_tensor_diff(g1.val(out.f.block[l]), want));
      }

      worst_inv = std::max(worst_inv, rel_tensor_diff(g1.val(out.h.h), g0.val(base.h.h)));
      worst_inv = std::max(worst_inv, rel_tensor_diff(g1.val(out.x_c), g0.val(base.x_c)));
      worst_inv = std::max(
          worst_inv, rel_tensor_diff(g1.val(out.segmentation), g0.val(base.segmentation)));

      for (std::size_t p = 0; p < base.frames.size(); ++p) {
        const Mat3 eb = tensor_to_mat3(g0.val(base.frames[p]));
        Mat3 want{};
        for (int i = 0; i < 3; ++i)
          for (int j = 0; j < 3; ++j)
            for (int k = 0; k < 3; ++k) want[i][j] += r[i][k] * eb[k][j];
        const Mat3 got = tensor_to_mat3(g1.val(out.frames[p]));
        double num = 0, den = 0;
        for (int i = 0; i < 3; ++i)
          for (int j = 0; j < 3; ++j) {
            num += (got[i][j] - want[i][j]) * (got[i][j] - want[i][j]);
            den += want[i][j] * want[i][j];
          }
        worst_eq = std::max(worst_eq, std::sqrt(num / std::max(1e-300, den)));
      }
      {
        const Tensor& tb = g0.val(base.translation);
        const Vec3 want = mat3_apply(r, {tb.v[0], tb.v[1], tb.v[2]});
        const Tensor& tg = g1.val(out.translation);
        double num = 0, den = 0;
        for (int i = 0; i < 3; ++i) {
          num += (tg.v[i] - want[i]) * (tg.v[i] - want[i]);
          den += want[i] * want[i];
        }
        worst_eq = std::max(worst_eq, std::sqrt(num / std::max(1e-300, den)));
      }
    }

    PointCloud shifted = cloud;
    for (int i = 0; i < shifted.size(); ++i) {
      double* p = shifted.row(i);
      p[0] += 3.7;
      p[1] -= 0.45;
      p[2] += 12.0;
    }
    const PointCloud ca = canonicalize(cloud, params, cfg).canonical;
    const PointCloud cb = canonicalize(shifted, params, cfg).canonical;
    for (int i = 0; i < ca.size(); ++i)
      for (int a = 0; a < 3; ++a)
        worst_shift = std::max(worst_shift, std::abs(ca.row(i)[a] - cb.row(i)[a]));
  }

  const bool ok = worst_f <= 1e-3 && worst_inv <= 1e-3 && worst_eq <= 1e-3 &&
                  worst_shift <= 1e-10 && sw.seconds() < 120.0;
  verdict(2, "network equivariance", ok, sw.seconds(),
          "F^l " + fmt(worst_f) + ", invariants " + fmt(worst_inv) +
              ", frames/translation " + fmt(worst_eq) + ", translation shift " +
              fmt(worst_shift));
}

// ---------------------------------------------------------------------------
// 3. Loss gradients

template <typename Builder>
double fd_check(std::vector<Tensor>& params, Builder&& build) {
  auto loss_fn = [&](const std::vector<Tensor>& p) {
    Graph g;
    std::vector<int> ids;
    for (const Tensor& t : p) ids.push_back(g.leaf(t, false));
    return g.val(build(g, ids)).v[0];
  };
  auto grads_fn = [&](const std::vector<Tensor>& p, std::vector<Tensor>& grads) {
    Graph g;
    std::vector<int> ids;
    for (const Tensor& t : p) ids.push_back(g.leaf(t, true));
    g.backward(build(g, ids));
    for (std::size_t i = 0; i < ids.size(); ++i) grads[i] = g.grad(ids[i]);
  };
  return grad_check(loss_fn, grads_fn, params, 1e-5);
}

void criterion_3() {
  Stopwatch sw;
  double worst = 0;
  for (std::uint64_t seed = 300; seed < 310; ++seed) {
    Rng rng(seed);
    PointCloud x = gaussian_cloud(rng, 14);
    PointCloud xp;  // the first half, mean-centered, as the partial branch
    std::vector<int> kept;
    for (int i = 0; i < 7; ++i) kept.push_back(i);
    for (int i : kept)
      xp.xyz.insert(xp.xyz.end(), {x.row(i)[0], x.row(i)[1], x.row(i)[2]});
    xp = center_cloud(xp, nullptr);

    Tensor xc(14, 3), xcp(7, 3), seg(14, 4), segp(7, 4), e1(3, 3), e2(3, 3),
        e3(3, 3), tr(3, 1);
    for (double& v : xc.v) v = 0.2 * rng.normal();
    for (double& v : xcp.v) v = 0.2 * rng.normal();
    for (double& v : seg.v) v = 0.4 + 0.1 * rng.normal();
    for (double& v : segp.v) v = 0.4 + 0.1 * rng.normal();
    for (double& v : e1.v) v = 0.4 * rng.normal();
    for (double& v : e2.v) v = 0.4 * rng.normal();
    for (double& v : e3.v) v = 0.4 * rng.normal();
    for (double& v : tr.v) v = 0.2 * rng.normal();
    std::vector<Tensor> ps{xc, xcp, seg, segp, e1, e2, e3, tr};

    auto fd = [&](auto&& build) { worst = std::max(worst, fd_check(ps, build)); };

    fd([&](Graph& g, const std::vector<int>& ids) {
      return canon_loss(g, ids[4], ids[0], x);
    });
    fd([&](Graph& g, const std::vector<int>& ids) {
      return canon_loss_min(g, {ids[4], ids[5], ids[6]}, ids[0], x).loss;
    });
    fd([&](Graph& g, const std::vector<int>& ids) {
      return ortho_loss(g, {ids[4], ids[5], ids[6]});
    });
    fd([&](Graph& g, const std::vector<int>& ids) {
      return separation_loss(g, {ids[4], ids[5], ids[6]});
    });
    fd([&](Graph& g, const std::vector<int>& ids) {
      return restriction_loss(g, ids[0], ids[1], kept);
    });
    fd([&](Graph& g, const std::vector<int>& ids) {
      return amodal_loss(g, ids[7], {0.12, -0.3, 0.21});
    });
    fd([&](Graph& g, const std::vector<int>& ids) {
      const SegFullLosses f = seg_losses_full(g, x, g.softmax_rows(ids[2]));
      return f.localization;
    });
    fd([&](Graph& g, const std::vector<int>& ids) {
      const SegFullLosses f = seg_losses_full(g, x, g.softmax_rows(ids[2]));
      return f.equilibrium;
    });
    fd([&](Graph& g, const std::vector<int>& ids) {
      const SegFullLosses f = seg_losses_full(g, x, g.softmax_rows(ids[2]));
      return f.part_distribution;
    });
    fd([&](Graph& g, const std::vector<int>& ids) {
      const int sf = g.softmax_rows(ids[2]);
      const int sp = g.softmax_rows(ids[3]);
      const SegFullLosses f = seg_losses_full(g, x, sf);
      const PartCentroids pc = part_centroids(g, xp, sp);
      const SegPartialLosses p =
          seg_losses_partial(g, sf, sp, kept, 14, f.theta, pc.theta);
      return p.part_restriction;
    });
    fd([&](Graph& g, const std::vector<int>& ids) {
      const int sf = g.softmax_rows(ids[2]);
      const int sp = g.softmax_rows(ids[3]);
      const SegFullLosses f = seg_losses_full(g, x, sf);
      const PartCentroids pc = part_centroids(g, xp, sp);
      const SegPartialLosses p =
          seg_losses_partial(g, sf, sp, kept, 14, f.theta, pc.theta);
      return p.part_directional;
    });
    fd([&](Graph& g, const std::vector<int>& ids) {
      LossComponents c;
      c.canon = canon_loss_min(g, {ids[4], ids[5]}, ids[0], x).loss;
      c.rest = restriction_loss(g, ids[0], ids[1], kept);
      c.ortho = ortho_loss(g, {ids[4], ids[5]});
      c.sep = separation_loss(g, {ids[4], ids[5]});
      c.amod = amodal_loss(g, ids[7], {0.12, -0.3, 0.21});
      const int sf = g.softmax_rows(ids[2]);
      const SegFullLosses f = seg_losses_full(g, x, sf);
      c.seg_full = g.add(g.add(f.localization, f.equilibrium), f.part_distribution);
      return total_loss(g, c, LossWeights{}, {ids[6]});
    });
  }
  const bool ok = worst < 1e-4 && sw.seconds() < 300.0;
  verdict(3, "loss gradients", ok, sw.seconds(),
          "max grad_check relative error " + fmt(worst) + " over 10 seeds");
}

// ---------------------------------------------------------------------------
// 4. Metric oracles

void criterion_4() {
  Stopwatch sw;
  Rng rng(404);

  double worst_cd = 0;
  for (int t = 0; t < 100; ++t) {
    const int na = 1 + rng.uniform_int(256), nb = 1 + rng.uniform_int(256);
    const double scale = std::pow(10.0, rng.uniform(-2, 2));
    PointCloud a = gaussian_cloud(rng, na), b = gaussian_cloud(rng, nb);
    for (double& v : a.xyz) v *= scale;
    for (double& v : b.xyz) v *= scale;
    const double g = chamfer(a, b), br = chamfer_brute(a, b);
    if (g != br) worst_cd = std::max(worst_cd, std::abs(g - br));
  }

  const ShapeRecord rec = make_shape("toy-chair", rng, 96);
  const PointCloud ref = rec.cloud;
  auto oracle_canon = [&](const PointCloud& c) {
    return rotate_cloud(c, mat3_transpose(procrustes_align(ref, c).rotation));
  };
  auto oracle_frame = [&](const PointCloud& c) {
    return mat3_transpose(procrustes_align(ref, c).rotation);
  };
  std::vector<PointCloud> copies;
  for (int i = 0; i < 6; ++i) copies.push_back(rotate_cloud(ref, random_rotation(rng)));
  const double ic = ic_metric(oracle_canon, copies, 8, rng).value;
  const double cc = cc_metric(oracle_canon, copies, 4, rng).value;
  std::vector<PointCloud> aligned(6, ref);  // pre-aligned dataset for gc
  const double gc = gc_metric(oracle_frame, aligned, 8, 4, rng).value;
  std::vector<CropResult> crops;
  for (int i = 0; i < 6; ++i)
    crops.push_back(slice_crop(copies[i], random_unit_vector(rng)));
  const double te =
      te_metric([&](const PointCloud& p) -> Vec3 {
        for (const CropResult& c : crops)
          if (c.partial.size() == p.size() && c.partial.xyz == p.xyz)
            return c.barycenter_offset;
        check(false, "criterion 4: crop lookup failed");
        return {0, 0, 0};
      }, crops).value;
  const double worst_oracle = std::max(std::max(ic, cc), std::max(gc, te));

  double worst_pr = 0;
  for (int t = 0; t < 20; ++t) {
    const PointCloud x = gaussian_cloud(rng, 24);
    const Mat3 r = random_rotation(rng);
    const ProcrustesResult pr = procrustes_align(x, rotate_cloud(x, r));
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j)
        worst_pr = std::max(worst_pr, std::abs(pr.rotation[i][j] - r[i][j]));
  }

  // PCA canonicalization is defined up to the four proper sign flips.
  double worst_pca = 0;
  const std::vector<Mat3> flips{
      Mat3{{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}},
      Mat3{{{1, 0, 0}, {0, -1, 0}, {0, 0, -1}}},
      Mat3{{{-1, 0, 0}, {0, 1, 0}, {0, 0, -1}}},
      Mat3{{{-1, 0, 0}, {0, -1, 0}, {0, 0, 1}}}};
  for (int t = 0; t < 10; ++t) {
    const ShapeRecord shape = make_shape("toy-plane", rng, 80);
    const PointCloud canon = pca_canonicalize(shape.cloud).canonical;
    const PointCloud rcanon =
        pca_canonicalize(rotate_cloud(shape.cloud, random_rotation(rng))).canonical;
    double best = std::numeric_limits<double>::infinity();
    for (const Mat3& f : flips)
      best = std::min(best, chamfer(rotate_cloud(rcanon, f), canon));
    worst_pca = std::max(worst_pca, best);
  }

  const bool ok = worst_cd == 0.0 && worst_oracle <= 1e-9 && worst_pr <= 1e-10 &&
                  worst_pca <= 1e-8 && sw.seconds() < 120.0;
  verdict(4, "metric oracles", ok, sw.seconds(),
          "chamfer gap " + fmt(worst_cd) + ", oracle ic/cc/gc/te " +
              fmt(worst_oracle) + ", procrustes " + fmt(worst_pr) +
              ", pca flips " + fmt(worst_pca));
}

// ---------------------------------------------------------------------------
// 5. Crop commutativity: frame(X)·crop(X) = crop(frame(X)·X) with the
// model's own (projected) selected frame.

void criterion_5() {
  Stopwatch sw;
  Rng rng(505);
  ModelConfig cfg = ModelConfig::desk();
  cfg.p_frames = 3;
  cfg.project_frames = true;
  Rng prng(15);
  const ModelParams params = init_params(cfg, prng);

  double worst = 0;
  for (int t = 0; t < 20; ++t) {
    const PointCloud x = center_cloud(gaussian_cloud(rng, 56), nullptr);
    const Vec3 dir = random_unit_vector(rng);
    const CanonicalizationResult r = forward(x, params, cfg);
    const Mat3 rot = mat3_transpose(r.frames[static_cast<std::size_t>(r.selected)]);

    const PointCloud lhs = rotate_cloud(slice_crop(x, dir).partial, rot);
    const CropResult c2 = slice_crop(rotate_cloud(x, rot), mat3_apply(rot, dir));
    check(lhs.size() == c2.partial.size(), "criterion 5: crop size mismatch");
    for (int i = 0; i < lhs.size(); ++i)
      for (int a = 0; a < 3; ++a)
        worst = std::max(worst, std::abs(lhs.row(i)[a] - c2.partial.row(i)[a]));
  }
  const bool ok = worst <= 1e-12;
  verdict(5, "crop commutativity", ok, sw.seconds(),
          "max deviation " + fmt(worst) + " over 20 clouds");
}

// ---------------------------------------------------------------------------
// 6. Desk-scale training

double mean_canon(const std::vector<TrainStepResult>& curve, std::size_t from,
                  std::size_t count) {
  double s = 0;
  for (std::size_t i = from; i < from + count; ++i) s += curve[i].canon;
  return s / static_cast<double>(count);
}

double ic_of(const ModelParams& params, ModelConfig cfg,
             const std::vector<PointCloud>& shapes, int rotations,
             std::uint64_t seed) {
  cfg.project_frames = true;
  Rng rng(seed);
  return ic_metric(
             [&](const PointCloud& x) { return canonicalize(x, params, cfg).canonical; },
             shapes, rotations, rng)
      .value;
}

void criterion_6() {
  Stopwatch sw;
  Rng drng(0);
  const DatasetManifest data = gen_synthetic("toy-plane", 256, drng, 256);
  std::vector<ShapeRecord> train_records;
  std::vector<PointCloud> held_out;
  for (const ShapeRecord& r : data.records)
    (r.split == "train" ? (void)train_records.push_back(r)
                        : (void)held_out.push_back(r.cloud));

  TrainConfig cfg = TrainConfig::desk();
  cfg.seed = 0;
  const ModelConfig mcfg = model_config_for_preset(cfg.channel_preset, cfg.p_frames);

  Rng urng(cfg.seed);
  const ModelParams untrained = init_params(mcfg, urng);

  int next_report = 0;
  const TrainResult res =
      train(cfg, train_records, [&](int it, const TrainStepResult& r) {
        if (it == next_report) {
          std::printf("  [train %d/%d] total %.4f canon %.4f ortho %.4f amod %.4f (%.0f s)\n",
                      it, cfg.iterations, r.total, r.canon, r.ortho, r.amod,
                      sw.seconds());
          std::fflush(stdout);
          next_report += 250;
        }
      });

  const double canon_initial = mean_canon(res.curve, 0, 100);
  const double canon_final = mean_canon(res.curve, res.curve.size() - 100, 100);
  const double canon_ratio = canon_final / canon_initial;

  const double ic_trained = ic_of(res.params, mcfg, held_out, 16, 600);
  const double ic_untrained = ic_of(untrained, mcfg, held_out, 16, 600);
  const double ic_ratio = ic_trained / ic_untrained;

  // Orthonormality residual of the selected (unprojected) frame.
  double ortho_sum = 0;
  {
    ModelConfig raw = mcfg;
    raw.project_frames = false;
    for (const PointCloud& x : held_out) {
      const CanonicalizationResult r = canonicalize(x, res.params, raw).result;
      const Mat3& e = r.frames[static_cast<std::size_t>(r.selected)];
      const Mat3 uvt = svd3_uvt(e);
      double s = 0;
      for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j)
          s += (uvt[i][j] - e[i][j]) * (uvt[i][j] - e[i][j]);
      ortho_sum += std::sqrt(s);
    }
  }
  const double ortho_mean = ortho_sum / static_cast<double>(held_out.size());

  Rng crng(601);
  std::vector<CropResult> crops;
  for (const PointCloud& x : held_out) {
    const PointCloud posed = rotate_cloud(x, random_rotation(crng));
    crops.push_back(slice_crop(posed, random_unit_vector(crng)));
  }
  ModelConfig pcfg = mcfg;
  pcfg.project_frames = true;
  const double te_model =
      te_metric([&](const PointCloud& p) {
        return canonicalize(p, res.params, pcfg).result.amodal_translation;
      }, crops).value;
  const double te_zero =
      te_metric([](const PointCloud&) { return Vec3{0, 0, 0}; }, crops).value;
  const double te_ratio = te_model / te_zero;

  const bool ok = canon_ratio < 0.5 && ic_ratio < 0.5 && ortho_mean < 0.05 &&
                  te_ratio < 0.5 && sw.seconds() < 1800.0;
  verdict(6, "desk-scale training", ok, sw.seconds(),
          "canon final/initial " + fmt(canon_ratio) + " (" + fmt(canon_initial) +
              " -> " + fmt(canon_final) + "), ic trained/untrained " +
              fmt(ic_ratio) + " (" + fmt(ic_trained) + " vs " + fmt(ic_untrained) +
              "), ortho residual " + fmt(ortho_mean) + ", te model/zero " +
              fmt(te_ratio) + " (" + fmt(te_model) + " vs " + fmt(te_zero) + ")");
}

// ---------------------------------------------------------------------------
// 7. Symmetric family: multi-frame (P=5) vs single-frame (P=1) on toy-table

double median3(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v[1];
}

void criterion_7() {
  Stopwatch sw;
  std::vector<double> ic_p1, ic_p5;
  for (std::uint64_t seed : {0ull, 1ull, 2ull}) {
    Rng drng(seed);
    const DatasetManifest data = gen_synthetic("toy-table", 64, drng, 128);
    std::vector<ShapeRecord> train_records;
    std::vector<PointCloud> held_out;
    for (const ShapeRecord& r : data.records)
      (r.split == "train" ? (void)train_records.push_back(r)
                          : (void)held_out.push_back(r.cloud));

    for (int p : {1, 5}) {
      TrainConfig cfg = TrainConfig::desk();
      cfg.p_frames = p;
      cfg.k_full = 128;
      cfg.k_partial = 64;
      cfg.iterations = 600;
      cfg.lr_decay_every = 200;
      cfg.seed = seed;
      const ModelConfig mcfg =
          model_config_for_preset(cfg.channel_preset, cfg.p_frames);
      const TrainResult res = train(cfg, train_records);
      const double ic = ic_of(res.params, mcfg, held_out, 8, 700 + seed);
      (p == 1 ? ic_p1 : ic_p5).push_back(ic);
      std::printf("  [p=%d seed=%llu] ic %.5f (%.0f s)\n", p,
                  static_cast<unsigned long long>(seed), ic, sw.seconds());
      std::fflush(stdout);
    }
  }
  const double m1 = median3(ic_p1), m5 = median3(ic_p5);
  const bool ok = m5 <= m1;
  verdict(7, "symmetric-family behavior", ok, sw.seconds(),
          "median ic P=5 " + fmt(m5) + " vs P=1 " + fmt(m1) +
              (ok ? " (non-increase holds)" : " (P=5 regressed)"));
}

// ---------------------------------------------------------------------------
// 8. Subcommand determinism: run the CLI twice per subcommand, byte-compare.

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  check(is.good(), "acceptance: cannot read " + p.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

bool same_bytes(const fs::path& a, const fs::path& b) { return slurp(a) == slurp(b); }

void criterion_8() {
  Stopwatch sw;
  const fs::path self = fs::read_symlink("/proc/self/exe");
  const fs::path cli = self.parent_path() / "canon3d";
  if (!fs::exists(cli)) {
    verdict(8, "subcommand determinism", false, sw.seconds(),
            "canon3d binary not found next to the acceptance binary");
    return;
  }
  const fs::path work = fs::temp_directory_path() / "canon3d_acceptance";
  fs::remove_all(work);
  fs::create_directories(work);
  {
    std::ofstream os((work / "gen.cfg").string());
    os << "n_points 96\n";
  }

  auto run = [&](const std::string& args) {
    const std::string cmd = cli.string() + " " + args + " > /dev/null 2>&1";
    const int rc = std::system(cmd.c_str());
    check(rc == 0, "acceptance: command failed: " + cmd);
  };

  const std::string d1 = (work / "d1").string(), d2 = (work / "d2").string();
  run("gen-data --family toy-chair --n 10 --seed 9 --config " +
      (work / "gen.cfg").string() + " --out " + d1);
  // (config file written before the second run so both see identical input)
  run("gen-data --family toy-chair --n 10 --seed 9 --config " +
      (work / "gen.cfg").string() + " --out " + d2);

  bool ok = true;
  std::string what;
  auto expect_same = [&](const fs::path& a, const fs::path& b, const std::string& label) {
    if (!same_bytes(a, b)) {
      ok = false;
      if (!what.empty()) what += ", ";
      what += label;
    }
  };

  expect_same(fs::path(d1) / "manifest.txt", fs::path(d2) / "manifest.txt",
              "gen-data manifest");
  expect_same(fs::path(d1) / "toy-chair-000004.xyz",
              fs::path(d2) / "toy-chair-000004.xyz", "gen-data xyz");

  const std::string cfg_path = (work / "train.cfg").string();
  {
    std::ofstream os(cfg_path);
    os << "preset desk\nbatch_size 2\niterations 20\nlr_decay_every 10\n"
          "p_frames 2\nk_full 64\nk_partial 32\n";
  }
  const std::string g1 = (work / "g64a").string(), g2 = (work / "g64b").string();
  {
    std::ofstream os((work / "np.cfg").string());
    os << "n_points 64\n";
  }
  run("gen-data --family toy-chair --n 8 --seed 3 --config " +
      (work / "np.cfg").string() + " --out " + g1);
  run("gen-data --family toy-chair --n 8 --seed 3 --config " +
      (work / "np.cfg").string() + " --out " + g2);
  const std::string ck1 = (work / "a.ckpt").string(), ck2 = (work / "b.ckpt").string();
  run("train " + g1 + " --config " + cfg_path + " --seed 4 --out " + ck1);
  run("train " + g2 + " --config " + cfg_path + " --seed 4 --out " + ck2);
  expect_same(ck1, ck2, "train checkpoint");
  expect_same(ck1 + ".curve.csv", ck2 + ".curve.csv", "train loss curve");

  const std::string ev1 = (work / "m1.csv").string(), ev2 = (work / "m2.csv").string();
  run("evaluate " + g1 + " --metric all --rotations 6 --seed 11 --checkpoint " +
      ck1 + " --baseline pca --out " + ev1);
  run("evaluate " + g1 + " --metric all --rotations 6 --seed 11 --checkpoint " +
      ck1 + " --baseline pca --out " + ev2);
  expect_same(ev1, ev2, "evaluate csv");

  const std::string in_xyz = g1 + "/toy-chair-000007.xyz";
  const std::string c1 = (work / "c1.xyz").string(), c2 = (work / "c2.xyz").string();
  run("canonicalize " + in_xyz + " --checkpoint " + ck1 + " --out " + c1);
  run("canonicalize " + in_xyz + " --checkpoint " + ck1 + " --out " + c2);
  expect_same(c1, c2, "canonicalize xyz");
  expect_same(c1 + ".pose", c2 + ".pose", "canonicalize pose");

  const std::string s1 = (work / "s1.xyz").string(), s2 = (work / "s2.xyz").string();
  run("segment " + in_xyz + " --checkpoint " + ck1 + " --out " + s1);
  run("segment " + in_xyz + " --checkpoint " + ck1 + " --out " + s2);
  expect_same(s1, s2, "segment xyz");

  const std::string t1 = (work / "t1.xyz").string(), t2 = (work / "t2.xyz").string();
  const std::string target_xyz = g1 + "/toy-chair-000002.xyz";
  run("transfer-keypoints " + s1 + " " + target_xyz + " --checkpoint " + ck1 +
      " --out " + t1);
  run("transfer-keypoints " + s1 + " " + target_xyz + " --checkpoint " + ck1 +
      " --out " + t2);
  expect_same(t1, t2, "transfer-keypoints xyz");

  verdict(8, "subcommand determinism", ok, sw.seconds(),
          ok ? "all rerun outputs byte-identical"
             : "differing outputs: " + what);
}

void run_criterion(int n, const char* name, void (*fn)()) {
  try {
    fn();
  } catch (const std::exception& e) {
    verdict(n, name, false, 0.0, std::string("aborted: ") + e.what());
  }
}

}  // namespace

int main() {
  run_criterion(1, "representation theory", criterion_1);
  run_criterion(2, "network equivariance", criterion_2);
  run_criterion(3, "loss gradients", criterion_3);
  run_criterion(4, "metric oracles", criterion_4);
  run_criterion(5, "crop commutativity", criterion_5);
  run_criterion(8, "subcommand determinism", criterion_8);
  run_criterion(7, "symmetric-family behavior", criterion_7);
  run_criterion(6, "desk-scale training", criterion_6);

  if (g_failures == 0) {
    std::printf("acceptance: all 8 criteria passed\n");
    return 0;
  }
  std::printf("acceptance: %d criterion(s) failed\n", g_failures);
  return 1;
}
