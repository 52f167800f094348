#pragma once

#include <cinttypes>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "canon3d/data.hpp"
#include "canon3d/losses.hpp"
#include "canon3d/model.hpp"
#include "canon3d/occlusion.hpp"
#include "canon3d/rng.hpp"

namespace canon3d {

// ---------------------------------------------------------------------------
// Configuration

struct TrainConfig {
  int batch_size = 16;
  int iterations = 45000;
  double lr = 6e-4;
  int lr_decay_every = 15000;
  double lr_decay_factor = 0.1;
  int p_frames = 5;
  LossWeights weights;
  std::uint64_t seed = 0;
  int k_full = 1024;    // points per shape after the one-time subsample
  int k_partial = 512;  // points the slice crop keeps, ceil(k_full / 2)
  int channel_preset = 256;

  // Sized so a complete run finishes in minutes on one core.
  static TrainConfig desk() {
    TrainConfig c;
    c.batch_size = 8;
    c.iterations = 2000;
    c.lr_decay_every = c.iterations / 3;
    c.k_full = 256;
    c.k_partial = 128;
    c.channel_preset = 64;
    return c;
  }
};

inline ModelConfig model_config_for_preset(int preset, int p_frames) {
  ModelConfig c;
  if (preset == 64)
    c = ModelConfig::desk();
  else if (preset == 256)
    c = ModelConfig::full();
  else
    check(false, "unknown channel preset " + std::to_string(preset) +
                     " (expected 64 or 256)");
  c.p_frames = p_frames;
  return c;
}

inline void validate_train_config(const TrainConfig& c) {
  check(c.batch_size > 0, "train config: batch_size must be positive");
  check(c.iterations > 0, "train config: iterations must be positive");
  check(c.lr > 0.0, "train config: lr must be positive");
  check(c.lr_decay_every > 0, "train config: lr_decay_every must be positive");
  check(c.lr_decay_every <= c.iterations,
        "train config: lr_decay_every exceeds iterations");
  check(c.lr_decay_factor > 0.0, "train config: lr_decay_factor must be positive");
  check(c.p_frames >= 1, "train config: p_frames must be at least 1");
  check(c.k_full >= 4, "train config: k_full must be at least 4");
  check(c.k_partial == (c.k_full + 1) / 2,
        "train config: k_partial must equal ceil(k_full / 2)");
  model_config_for_preset(c.channel_preset, c.p_frames);
}

// ---------------------------------------------------------------------------
// Optimizer

// Non-empty parameter tensors in for_each_param order; the same rule
// bind_model uses, so these line up with the leaf ids it appends.
inline std::vector<Tensor*> trainable_params(ModelParams& p) {
  std::vector<Tensor*> out;
  for_each_param(p, [&](const std::string&, Tensor& t) {
    if (!t.empty()) out.push_back(&t);
  });
  return out;
}

struct OptimizerState {
  std::vector<Tensor> m, v;
  int step = 0;
};

inline OptimizerState init_optimizer(ModelParams& p) {
  OptimizerState s;
  for (Tensor* t : trainable_params(p)) {
    s.m.push_back(Tensor::zeros(t->rows, t->cols));
    s.v.push_back(Tensor::zeros(t->rows, t->cols));
  }
  return s;
}

inline double scheduled_lr(const TrainConfig& cfg, int step) {
  return cfg.lr * std::pow(cfg.lr_decay_factor, step / cfg.lr_decay_every);
}

// One Adam update. `grads` must already hold the means over the batch.
inline void optimizer_step(const TrainConfig& cfg, OptimizerState& st,
                           const std::vector<Tensor*>& params,
                           const std::vector<Tensor>& grads) {
  check(params.size() == st.m.size() && params.size() == st.v.size(),
        "optimizer_step: state / parameter count mismatch");
  check(grads.size() == params.size(),
        "optimizer_step: gradient / parameter count mismatch");
  const double lr = scheduled_lr(cfg, st.step);
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  const double t = static_cast<double>(st.step) + 1.0;
  const double c1 = 1.0 - std::pow(b1, t);
  const double c2 = 1.0 - std::pow(b2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    const Tensor& gt = grads[i];
    check(gt.rows == p.rows && gt.cols == p.cols,
          "optimizer_step: gradient shape mismatch");
    Tensor& m = st.m[i];
    Tensor& v = st.v[i];
    for (std::size_t j = 0; j < p.v.size(); ++j) {
      const double gj = gt.v[j];
      check(std::isfinite(gj), "optimizer_step: non-finite gradient");
      m.v[j] = b1 * m.v[j] + (1.0 - b1) * gj;
      v.v[j] = b2 * v.v[j] + (1.0 - b2) * gj * gj;
      p.v[j] -= lr * (m.v[j] / c1) / (std::sqrt(v.v[j] / c2) + eps);
    }
  }
  ++st.step;
}

// ---------------------------------------------------------------------------
// Training step

struct TrainStepResult {
  double total = 0;
  double canon = 0;
  double rest = 0;
  double ortho = 0;
  double sep = 0;
  double amod = 0;
  double seg_full = 0;
  double seg_partial = 0;
  double l1 = 0;
};

namespace detail {

struct ElementTerms {
  int canon = -1, rest = -1, ortho = -1, sep = -1, amod = -1;
  int seg_full = -1, seg_partial = -1;
};

template <typename Fn>
void for_each_term(const ElementTerms& t, Fn&& fn) {
  fn("canon", t.canon);
  fn("rest", t.rest);
  fn("ortho", t.ortho);
  fn("sep", t.sep);
  fn("amod", t.amod);
  fn("seg_full", t.seg_full);
  fn("seg_partial", t.seg_partial);
}

// The Siamese element: the posed cloud through the full branch, its sliced
// half through the partial branch, both on one shared parameter binding.
// Branch values are combined as the mean where both branches produce the
// same term (canon, sep); the orthonormality penalty sees all 2P candidate
// frames at once.
struct TrainElement {
  PointCloud posed;
  CropResult crop;
  PointCloud partial_centered;

  ElementTerms build(Graph& g, const ModelParams& params, const ModelConfig& mcfg,
                     int k_full, std::vector<int>* ids,
                     std::vector<int>* kernel_ids) const {
    const BoundModel m = bind_model(g, params, true, ids);
    if (kernel_ids) *kernel_ids = kernel_weight_ids(m);
    const ModelGraphOutput full = model_forward(g, posed, m, mcfg);
    const ModelGraphOutput part = model_forward(g, partial_centered, m, mcfg);

    ElementTerms t;
    const CanonMin cf = canon_loss_min(g, full.frames, full.x_c, posed);
    const CanonMin cp = canon_loss_min(g, part.frames, part.x_c, partial_centered);
    t.canon = g.scale(g.add(cf.loss, cp.loss), 0.5);

    std::vector<int> all_frames = full.frames;
    all_frames.insert(all_frames.end(), part.frames.begin(), part.frames.end());
    t.ortho = ortho_loss(g, all_frames);
    t.sep = g.scale(
        g.add(separation_loss(g, full.frames), separation_loss(g, part.frames)),
        0.5);

    t.rest = restriction_loss(g, full.x_c, part.x_c, crop.kept_indices);
    t.amod = amodal_loss(g, part.translation, crop.barycenter_offset);

    const SegFullLosses segf = seg_losses_full(g, posed, full.segmentation);
    t.seg_full = g.add(g.add(segf.localization, segf.equilibrium),
                       segf.part_distribution);
    const PartCentroids pc = part_centroids(g, partial_centered, part.segmentation);
    const SegPartialLosses segp =
        seg_losses_partial(g, full.segmentation, part.segmentation,
                           crop.kept_indices, k_full, segf.theta, pc.theta);
    t.seg_partial = g.add(segp.part_restriction, segp.part_directional);
    return t;
  }
};

// Failure path: rebuild the element one term at a time in fresh graphs and
// report the first whose backward produces a non-finite parameter gradient.
inline void diagnose_bad_gradient(const TrainElement& el, const ModelParams& params,
                                  const ModelConfig& mcfg, int k_full) {
  Graph probe;
  ElementTerms terms = el.build(probe, params, mcfg, k_full, nullptr, nullptr);
  std::string culprit = "total";
  for_each_term(terms, [&](const char* name, int id) {
    if (culprit != "total") return;
    Graph g;
    std::vector<int> ids;
    ElementTerms t = el.build(g, params, mcfg, k_full, &ids, nullptr);
    int term = -1;
    for_each_term(t, [&](const char* n, int tid) {
      if (std::strcmp(n, name) == 0) term = tid;
    });
    (void)id;
    g.backward(term);
    for (int pid : ids) {
      const Tensor& gr = g.grad(pid);
      for (double x : gr.v)
        if (!std::isfinite(x)) {
          culprit = name;
          return;
        }
    }
  });
  check(false, "train_iteration: non-finite gradient from the " + culprit +
                   " loss term");
}

}  // namespace detail

// One optimizer update from `cfg.batch_size` sampled elements. Every record
// is assumed to already hold exactly k_full points (the train() driver
// subsamples once up front). Returned scalars are unweighted per-term means
// over the batch; `total` is the weighted objective the step descended.
inline TrainStepResult train_iteration(ModelParams& params, OptimizerState& opt,
                                       const TrainConfig& cfg,
                                       const ModelConfig& mcfg,
                                       const std::vector<ShapeRecord>& records,
                                       Rng& rng) {
  check(!records.empty(), "train_iteration: no records");
  const std::vector<Tensor*> tp = trainable_params(params);
  std::vector<Tensor> grads;
  grads.reserve(tp.size());
  for (Tensor* t : tp) grads.push_back(Tensor::zeros(t->rows, t->cols));

  TrainStepResult out;
  const double inv_b = 1.0 / static_cast<double>(cfg.batch_size);
  for (int b = 0; b < cfg.batch_size; ++b) {
    detail::TrainElement el;
    const int idx = rng.uniform_int(static_cast<int>(records.size()));
    const Mat3 r = random_rotation(rng);
    const Vec3 dir = random_unit_vector(rng);
    el.posed = rotate_cloud(records[idx].cloud, r);
    el.crop = slice_crop(el.posed, dir);
    el.partial_centered = recenter(el.crop.partial).centered;

    Graph g;
    std::vector<int> ids;
    std::vector<int> kernel_ids;
    const detail::ElementTerms terms =
        el.build(g, params, mcfg, cfg.k_full, &ids, &kernel_ids);
    detail::for_each_term(terms, [&](const char* name, int id) {
      check(std::isfinite(g.val(id).v[0]),
            std::string("train_iteration: non-finite ") + name + " loss");
    });

    LossComponents comps;
    comps.canon = terms.canon;
    comps.rest = terms.rest;
    comps.ortho = terms.ortho;
    comps.sep = terms.sep;
    comps.amod = terms.amod;
    comps.seg_full = terms.seg_full;
    comps.seg_partial = terms.seg_partial;
    const int total = total_loss(g, comps, cfg.weights, kernel_ids);
    g.backward(g.scale(total, inv_b));

    bool bad = false;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      const Tensor& gr = g.grad(ids[i]);
      if (gr.empty()) continue;
      for (std::size_t j = 0; j < gr.v.size(); ++j) {
        grads[i].v[j] += gr.v[j];
        if (!std::isfinite(gr.v[j])) bad = true;
      }
    }
    if (bad) detail::diagnose_bad_gradient(el, params, mcfg, cfg.k_full);

    double l1 = 0;
    for (int kw : kernel_ids)
      for (double x : g.val(kw).v) l1 += std::abs(x);
    out.total += g.val(total).v[0] * inv_b;
    out.canon += g.val(terms.canon).v[0] * inv_b;
    out.rest += g.val(terms.rest).v[0] * inv_b;
    out.ortho += g.val(terms.ortho).v[0] * inv_b;
    out.sep += g.val(terms.sep).v[0] * inv_b;
    out.amod += g.val(terms.amod).v[0] * inv_b;
    out.seg_full += g.val(terms.seg_full).v[0] * inv_b;
    out.seg_partial += g.val(terms.seg_partial).v[0] * inv_b;
    out.l1 += l1 * inv_b;
  }

  optimizer_step(cfg, opt, tp, grads);
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints
//
// A checkpoint is a text manifest followed by a binary payload:
//
//   canon3d-checkpoint 1
//   channel_preset 64
//   p_frames 5
//   c_parts 10
//   step 2000
//   tensor_count 33
//   tensor conv1_mix0 1 8
//   ...
//   payload
//   <per tensor: u64 little-endian value count, then that many f64 LE>
//
// Every for_each_param entry appears in the manifest, empty ones as 0 x 0,
// so the reader never needs the architecture tables to allocate.

namespace detail {

inline void write_u64_le(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

inline bool read_u64_le(std::istream& is, std::uint64_t& v) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8)) return false;
  v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return true;
}

inline void write_f64_le(std::ostream& os, double d) {
  std::uint64_t u;
  std::memcpy(&u, &d, 8);
  write_u64_le(os, u);
}

inline bool read_f64_le(std::istream& is, double& d) {
  std::uint64_t u;
  if (!read_u64_le(is, u)) return false;
  std::memcpy(&d, &u, 8);
  return true;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const ModelParams& params,
                            const TrainConfig& cfg, int step) {
  const ModelConfig mcfg = model_config_for_preset(cfg.channel_preset, cfg.p_frames);
  std::ofstream os(path, std::ios::binary);
  check(os.good(), "save_checkpoint: cannot open " + path);

  int count = 0;
  for_each_param(params, [&](const std::string&, const Tensor&) { ++count; });
  os << "canon3d-checkpoint 1\n";
  os << "channel_preset " << cfg.channel_preset << "\n";
  os << "p_frames " << cfg.p_frames << "\n";
  os << "c_parts " << mcfg.c_parts << "\n";
  os << "step " << step << "\n";
  os << "tensor_count " << count << "\n";
  for_each_param(params, [&](const std::string& name, const Tensor& t) {
    os << "tensor " << name << " " << t.rows << " " << t.cols << "\n";
  });
  os << "payload\n";
  for_each_param(params, [&](const std::string&, const Tensor& t) {
    detail::write_u64_le(os, t.v.size());
    for (double x : t.v) detail::write_f64_le(os, x);
  });
  os.flush();
  check(os.good(), "save_checkpoint: write failed for " + path);
}

struct LoadedCheckpoint {
  ModelParams params;
  int step = 0;
  int channel_preset = 0;
  int p_frames = 0;
  int c_parts = 0;
};

inline LoadedCheckpoint load_checkpoint(const std::string& path,
                                        int expected_preset = -1,
                                        int expected_p_frames = -1) {
  std::ifstream is(path, std::ios::binary);
  check(is.good(), "load_checkpoint: cannot open " + path);
  auto fail = [&](const std::string& what) {
    return error("load_checkpoint: " + path + ": " + what);
  };
  auto line_kv = [&](const std::string& key) {
    std::string line;
    if (!std::getline(is, line)) throw fail("truncated header");
    std::istringstream ls(line);
    std::string k;
    long long v = 0;
    if (!(ls >> k >> v) || k != key) throw fail("expected '" + key + "' line");
    return v;
  };

  std::string line;
  if (!std::getline(is, line)) throw fail("empty file");
  {
    std::istringstream ls(line);
    std::string tag;
    int version = 0;
    if (!(ls >> tag >> version) || tag != "canon3d-checkpoint")
      throw fail("not a checkpoint file");
    if (version != 1)
      throw fail("unsupported format version " + std::to_string(version));
  }

  LoadedCheckpoint out;
  out.channel_preset = static_cast<int>(line_kv("channel_preset"));
  out.p_frames = static_cast<int>(line_kv("p_frames"));
  out.c_parts = static_cast<int>(line_kv("c_parts"));
  out.step = static_cast<int>(line_kv("step"));
  if (expected_preset >= 0 && out.channel_preset != expected_preset)
    throw fail("channel preset mismatch: file has " +
               std::to_string(out.channel_preset) + ", expected " +
               std::to_string(expected_preset));
  if (expected_p_frames >= 0 && out.p_frames != expected_p_frames)
    throw fail("p_frames mismatch: file has " + std::to_string(out.p_frames) +
               ", expected " + std::to_string(expected_p_frames));

  const long long count = line_kv("tensor_count");
  std::vector<std::string> names;
  std::vector<int> rows, cols;
  for (long long i = 0; i < count; ++i) {
    if (!std::getline(is, line)) throw fail("truncated tensor list");
    std::istringstream ls(line);
    std::string tag, name;
    int r = 0, c = 0;
    if (!(ls >> tag >> name >> r >> c) || tag != "tensor" || r < 0 || c < 0)
      throw fail("bad tensor line: " + line);
    names.push_back(name);
    rows.push_back(r);
    cols.push_back(c);
  }
  if (!std::getline(is, line) || line != "payload")
    throw fail("expected 'payload' separator");

  std::size_t i = 0;
  for_each_param(out.params, [&](const std::string& name, Tensor& t) {
    if (i >= names.size()) throw fail("tensor list shorter than the model");
    if (names[i] != name)
      throw fail("tensor order mismatch: file has '" + names[i] +
                 "' where '" + name + "' belongs");
    std::uint64_t n = 0;
    if (!detail::read_u64_le(is, n)) throw fail("truncated payload");
    const std::uint64_t want =
        static_cast<std::uint64_t>(rows[i]) * static_cast<std::uint64_t>(cols[i]);
    if (n != want)
      throw fail("payload length mismatch for '" + name + "': header says " +
                 std::to_string(want) + " values, payload says " +
                 std::to_string(n));
    if (n > 0) {
      t = Tensor(rows[i], cols[i]);
      for (std::uint64_t j = 0; j < n; ++j)
        if (!detail::read_f64_le(is, t.v[j])) throw fail("truncated payload");
    }
    ++i;
  });
  if (i != names.size()) throw fail("tensor list longer than the model");
  return out;
}

// ---------------------------------------------------------------------------
// Driver

struct TrainResult {
  ModelParams params;
  std::vector<TrainStepResult> curve;  // one entry per iteration
  int step = 0;
};

inline void write_loss_curve(const std::string& path,
                             const std::vector<TrainStepResult>& curve) {
  std::ofstream os(path, std::ios::binary);
  check(os.good(), "write_loss_curve: cannot open " + path);
  os << "step,total,canon,rest,ortho,sep,amod,seg_full,seg_partial,l1\n";
  char buf[64];
  auto put = [&](double v) {
    std::snprintf(buf, sizeof buf, ",%.17g", v);
    os << buf;
  };
  for (std::size_t i = 0; i < curve.size(); ++i) {
    const TrainStepResult& r = curve[i];
    os << i;
    put(r.total);
    put(r.canon);
    put(r.rest);
    put(r.ortho);
    put(r.sep);
    put(r.amod);
    put(r.seg_full);
    put(r.seg_partial);
    put(r.l1);
    os << "\n";
  }
  check(os.good(), "write_loss_curve: write failed for " + path);
}

// Subsample every record to exactly k_full points, once, before the loop.
inline std::vector<ShapeRecord> prepare_records(const std::vector<ShapeRecord>& in,
                                                int k_full) {
  check(!in.empty(), "train: no records");
  std::vector<ShapeRecord> out = in;
  for (ShapeRecord& rec : out) {
    const int k = rec.cloud.size();
    check(k >= k_full, "train: record " + rec.id + " has " + std::to_string(k) +
                           " points, needs at least " + std::to_string(k_full));
    if (k == k_full) continue;
    const std::vector<int> idx = farthest_point_sampling(rec.cloud, k_full, 0);
    PointCloud sub;
    sub.xyz.reserve(static_cast<std::size_t>(k_full) * 3);
    const bool labeled = rec.cloud.has_labels();
    if (labeled) sub.labels.reserve(k_full);
    for (int i : idx) {
      const double* p = rec.cloud.row(i);
      sub.xyz.insert(sub.xyz.end(), {p[0], p[1], p[2]});
      if (labeled) sub.labels.push_back(rec.cloud.labels[i]);
    }
    rec.cloud = std::move(sub);
  }
  return out;
}

template <typename PerStep>
TrainResult train(const TrainConfig& cfg, const std::vector<ShapeRecord>& records,
                  PerStep&& per_step) {
  validate_train_config(cfg);
  const ModelConfig mcfg = model_config_for_preset(cfg.channel_preset, cfg.p_frames);
  const std::vector<ShapeRecord> prepared = prepare_records(records, cfg.k_full);

  Rng rng(cfg.seed);
  TrainResult res;
  res.params = init_params(mcfg, rng);
  OptimizerState opt = init_optimizer(res.params);
  res.curve.reserve(cfg.iterations);
  for (int it = 0; it < cfg.iterations; ++it) {
    const TrainStepResult r =
        train_iteration(res.params, opt, cfg, mcfg, prepared, rng);
    res.curve.push_back(r);
    per_step(it, r);
  }
  res.step = opt.step;
  return res;
}

inline TrainResult train(const TrainConfig& cfg,
                         const std::vector<ShapeRecord>& records) {
  return train(cfg, records, [](int, const TrainStepResult&) {});
}

}  // namespace canon3d
