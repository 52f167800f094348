// canon3d command-line tool: data generation, training, canonicalization,
// evaluation, segmentation export, keypoint transfer, and a self-test.
//
// Exit codes: 0 success, 1 validation failure (flags, config, inputs that
// fail preconditions), 2 runtime failure.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include "canon3d/metrics.hpp"
#include "canon3d/training.hpp"

#include <CLI11.hpp>

namespace {

using namespace canon3d;

struct validation_error : std::runtime_error {
  explicit validation_error(const std::string& what) : std::runtime_error(what) {}
};

std::string fmt_g(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

using ConfigLines = std::vector<std::pair<std::string, std::string>>;

void print_resolved(const std::string& sub, const ConfigLines& lines) {
  std::printf("canon3d %s\n", sub.c_str());
  for (const auto& [k, v] : lines) std::printf("  %s %s\n", k.c_str(), v.c_str());
  std::fflush(stdout);
}

// ---------------------------------------------------------------------------
// key=value config files ('#' starts a comment; '=' and whitespace both
// separate key from value)

std::map<std::string, std::string> read_config_file(const std::string& path) {
  std::ifstream is(path);
  if (!is.good()) throw validation_error("cannot open config file '" + path + "'");
  std::map<std::string, std::string> kv;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    std::replace(line.begin(), line.end(), '=', ' ');
    std::istringstream ls(line);
    std::string key, value, extra;
    if (!(ls >> key)) continue;  // blank
    if (!(ls >> value) || (ls >> extra))
      throw validation_error(path + ":" + std::to_string(lineno) +
                             ": expected 'key value'");
    if (!kv.emplace(key, value).second)
      throw validation_error(path + ":" + std::to_string(lineno) +
                             ": duplicate key '" + key + "'");
  }
  return kv;
}

double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const double d = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw validation_error("config key '" + key + "': bad number '" + v + "'");
  }
}

long long parse_int(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const long long i = std::stoll(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return i;
  } catch (const std::exception&) {
    throw validation_error("config key '" + key + "': bad integer '" + v + "'");
  }
}

// Training configuration: a preset selects the base, individual keys
// override single fields.
TrainConfig train_config_from(const std::map<std::string, std::string>& kv) {
  TrainConfig cfg = TrainConfig::desk();
  auto preset = kv.find("preset");
  if (preset != kv.end()) {
    if (preset->second == "desk")
      cfg = TrainConfig::desk();
    else if (preset->second == "full")
      cfg = TrainConfig{};
    else
      throw validation_error("config key 'preset': expected desk or full, got '" +
                             preset->second + "'");
  }
  for (const auto& [key, value] : kv) {
    if (key == "preset") continue;
    if (key == "batch_size") cfg.batch_size = static_cast<int>(parse_int(key, value));
    else if (key == "iterations") cfg.iterations = static_cast<int>(parse_int(key, value));
    else if (key == "lr") cfg.lr = parse_double(key, value);
    else if (key == "lr_decay_every") cfg.lr_decay_every = static_cast<int>(parse_int(key, value));
    else if (key == "lr_decay_factor") cfg.lr_decay_factor = parse_double(key, value);
    else if (key == "p_frames") cfg.p_frames = static_cast<int>(parse_int(key, value));
    else if (key == "seed") cfg.seed = static_cast<std::uint64_t>(parse_int(key, value));
    else if (key == "k_full") cfg.k_full = static_cast<int>(parse_int(key, value));
    else if (key == "k_partial") cfg.k_partial = static_cast<int>(parse_int(key, value));
    else if (key == "channel_preset") cfg.channel_preset = static_cast<int>(parse_int(key, value));
    else if (key == "w_canon") cfg.weights.canon = parse_double(key, value);
    else if (key == "w_rest") cfg.weights.rest = parse_double(key, value);
    else if (key == "w_ortho") cfg.weights.ortho = parse_double(key, value);
    else if (key == "w_sep") cfg.weights.sep = parse_double(key, value);
    else if (key == "w_amod") cfg.weights.amod = parse_double(key, value);
    else if (key == "w_seg_full") cfg.weights.seg_full = parse_double(key, value);
    else if (key == "w_seg_partial") cfg.weights.seg_partial = parse_double(key, value);
    else if (key == "w_l1") cfg.weights.l1_reg = parse_double(key, value);
    else if (key == "n_points") continue;  // consumed by gen-data
    else throw validation_error("unknown config key '" + key + "'");
  }
  return cfg;
}

ConfigLines train_config_lines(const TrainConfig& c) {
  return {{"batch_size", std::to_string(c.batch_size)},
          {"iterations", std::to_string(c.iterations)},
          {"lr", fmt_g(c.lr)},
          {"lr_decay_every", std::to_string(c.lr_decay_every)},
          {"lr_decay_factor", fmt_g(c.lr_decay_factor)},
          {"p_frames", std::to_string(c.p_frames)},
          {"seed", std::to_string(c.seed)},
          {"k_full", std::to_string(c.k_full)},
          {"k_partial", std::to_string(c.k_partial)},
          {"channel_preset", std::to_string(c.channel_preset)},
          {"w_canon", fmt_g(c.weights.canon)},
          {"w_rest", fmt_g(c.weights.rest)},
          {"w_ortho", fmt_g(c.weights.ortho)},
          {"w_sep", fmt_g(c.weights.sep)},
          {"w_amod", fmt_g(c.weights.amod)},
          {"w_seg_full", fmt_g(c.weights.seg_full)},
          {"w_seg_partial", fmt_g(c.weights.seg_partial)},
          {"w_l1", fmt_g(c.weights.l1_reg)}};
}

// ---------------------------------------------------------------------------
// Model plumbing shared by the inference subcommands

struct LoadedModel {
  ModelParams params;
  ModelConfig cfg;
};

LoadedModel load_model(const std::string& checkpoint) {
  const LoadedCheckpoint lc = load_checkpoint(checkpoint);
  LoadedModel m;
  m.cfg = model_config_for_preset(lc.channel_preset, lc.p_frames);
  m.cfg.project_frames = true;  // inference always reports orthonormal frames
  m.params = std::move(lc.params);
  return m;
}

Vec3 amodal_translation(const LoadedModel& m, const PointCloud& partial) {
  return canonicalize(partial, m.params, m.cfg).result.amodal_translation;
}

Mat3 canonicalizing_rotation(const LoadedModel& m, const PointCloud& x) {
  const CanonicalizationResult r = canonicalize(x, m.params, m.cfg).result;
  return mat3_transpose(r.frames[static_cast<std::size_t>(r.selected)]);
}

// ---------------------------------------------------------------------------
// gen-data

int cmd_gen_data(const std::string& family, int n, std::uint64_t seed,
                 const std::string& out_dir, const std::string& config_path) {
  int n_points = 1024;
  if (!config_path.empty()) {
    const auto kv = read_config_file(config_path);
    for (const auto& [key, value] : kv) {
      if (key == "n_points") n_points = static_cast<int>(parse_int(key, value));
      else throw validation_error("unknown config key '" + key + "' for gen-data");
    }
  }
  const auto& families = shape_families();
  if (std::find(families.begin(), families.end(), family) == families.end()) {
    std::string known;
    for (const std::string& f : families) known += (known.empty() ? "" : ", ") + f;
    throw validation_error("unknown family '" + family + "' (known: " + known + ")");
  }
  if (n <= 0) throw validation_error("--n must be positive");
  if (n_points < 8) throw validation_error("n_points must be at least 8");
  if (out_dir.empty()) throw validation_error("--out directory is required");

  print_resolved("gen-data", {{"family", family},
                              {"n", std::to_string(n)},
                              {"n_points", std::to_string(n_points)},
                              {"seed", std::to_string(seed)},
                              {"out", out_dir}});
  Rng rng(seed);
  const DatasetManifest m = gen_synthetic(family, n, rng, n_points);
  write_manifest(out_dir, m);
  int n_val = 0;
  for (const ShapeRecord& r : m.records) n_val += r.split == "val" ? 1 : 0;
  std::printf("wrote %zu records (%d train, %d val) under %s\n", m.records.size(),
              static_cast<int>(m.records.size()) - n_val, n_val, out_dir.c_str());
  return 0;
}

// ---------------------------------------------------------------------------
// train

int cmd_train(const std::string& manifest_dir, const std::string& config_path,
              bool seed_set, std::uint64_t seed, const std::string& out_path) {
  TrainConfig cfg = config_path.empty() ? TrainConfig::desk()
                                        : train_config_from(read_config_file(config_path));
  if (seed_set) cfg.seed = seed;
  if (out_path.empty()) throw validation_error("--out checkpoint path is required");
  try {
    validate_train_config(cfg);
  } catch (const error& e) {
    throw validation_error(e.what());
  }

  ConfigLines lines = train_config_lines(cfg);
  lines.emplace_back("manifest", manifest_dir);
  lines.emplace_back("out", out_path);
  print_resolved("train", lines);

  const DatasetManifest m = read_manifest(manifest_dir);
  std::vector<ShapeRecord> records;
  for (const ShapeRecord& r : m.records)
    if (r.split == "train") records.push_back(r);
  if (records.empty())
    throw validation_error("manifest has no records with split 'train'");
  std::printf("training on %zu records\n", records.size());

  const TrainResult res =
      train(cfg, records, [&](int it, const TrainStepResult& r) {
        if (it % 200 == 0 || it + 1 == cfg.iterations)
          std::printf("step %d total %.6f canon %.6f amod %.6f\n", it, r.total,
                      r.canon, r.amod);
      });
  save_checkpoint(out_path, res.params, cfg, res.step);
  const std::string curve_path = out_path + ".curve.csv";
  write_loss_curve(curve_path, res.curve);
  std::printf("checkpoint %s\nloss curve %s\n", out_path.c_str(), curve_path.c_str());
  return 0;
}

// ---------------------------------------------------------------------------
// canonicalize / segment / transfer-keypoints

void write_pose_file(const std::string& path, const Mat3& frame, const Vec3& t) {
  std::ofstream os(path, std::ios::binary);
  check(os.good(), "cannot open pose file '" + path + "'");
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) os << fmt_g(frame[i][j]) << "\n";
  for (int a = 0; a < 3; ++a) os << fmt_g(t[a]) << "\n";
  check(os.good(), "write failed for pose file '" + path + "'");
}

int cmd_canonicalize(const std::string& input, const std::string& checkpoint,
                     const std::string& out_path, bool partial) {
  if (out_path.empty()) throw validation_error("--out path is required");
  print_resolved("canonicalize", {{"input", input},
                                  {"checkpoint", checkpoint},
                                  {"out", out_path},
                                  {"partial", partial ? "true" : "false"}});
  const LoadedModel m = load_model(checkpoint);
  const PointCloud cloud = read_xyz(input);
  const CanonicalizeOutput co = canonicalize(cloud, m.params, m.cfg);
  const Mat3& e = co.result.frames[static_cast<std::size_t>(co.result.selected)];
  const Vec3& t = co.result.amodal_translation;

  PointCloud out = co.canonical;
  if (partial) {
    // Place the partial shape where it belongs inside the full canonical
    // shape: the amodal translation, rotated into the canonical frame.
    const Vec3 tc = mat3_apply(mat3_transpose(e), t);
    for (int i = 0; i < out.size(); ++i) {
      double* p = out.row(i);
      p[0] += tc[0];
      p[1] += tc[1];
      p[2] += tc[2];
    }
  }
  write_xyz(out_path, out);
  const std::string pose_path = out_path + ".pose";
  write_pose_file(pose_path, e, t);
  std::printf("canonicalized %d points -> %s\npose -> %s\n", cloud.size(),
              out_path.c_str(), pose_path.c_str());
  return 0;
}

int cmd_segment(const std::string& input, const std::string& checkpoint,
                const std::string& out_path) {
  if (out_path.empty()) throw validation_error("--out path is required");
  print_resolved("segment", {{"input", input},
                             {"checkpoint", checkpoint},
                             {"out", out_path}});
  const LoadedModel m = load_model(checkpoint);
  PointCloud cloud = read_xyz(input);
  const CanonicalizationResult r = canonicalize(cloud, m.params, m.cfg).result;
  cloud.labels = argmax_parts(r.segmentation);
  write_xyz(out_path, cloud);
  std::set<int> used(cloud.labels.begin(), cloud.labels.end());
  std::printf("segmented %d points into %zu occupied parts -> %s\n", cloud.size(),
              used.size(), out_path.c_str());
  return 0;
}

int cmd_transfer_keypoints(const std::string& source_path,
                           const std::string& target_path,
                           const std::string& checkpoint,
                           const std::string& out_path) {
  if (out_path.empty()) throw validation_error("--out path is required");
  print_resolved("transfer-keypoints", {{"source", source_path},
                                        {"target", target_path},
                                        {"checkpoint", checkpoint},
                                        {"out", out_path}});
  const LoadedModel m = load_model(checkpoint);
  const PointCloud source = read_xyz(source_path);
  if (!source.has_labels())
    throw validation_error("source '" + source_path +
                           "' carries no labels to transfer");
  const PointCloud target = read_xyz(target_path);

  const CanonicalizeOutput cs = canonicalize(source, m.params, m.cfg);
  const CanonicalizeOutput ct = canonicalize(target, m.params, m.cfg);
  PointCloud source_canon = cs.canonical;  // labels ride along
  const KeypointTransfer kt = keypoint_transfer(
      source_canon, argmax_parts(cs.result.segmentation), ct.canonical,
      argmax_parts(ct.result.segmentation), m.cfg.c_parts);

  PointCloud out = target;
  out.labels = kt.target_labels;
  write_xyz(out_path, out);
  int placed = 0;
  for (int l : kt.target_labels) placed += l >= 0 ? 1 : 0;
  std::printf("transferred labels onto %d of %d target points -> %s\n", placed,
              target.size(), out_path.c_str());
  if (kt.flagged_empty_part)
    std::printf("note: at least one source part was empty on the target\n");
  return 0;
}

// ---------------------------------------------------------------------------
// evaluate

struct EvalBackend {
  std::string suffix;  // appended to the category column
  std::function<PointCloud(const PointCloud&)> canon;
  std::function<Mat3(const PointCloud&)> frame;
  std::function<Vec3(const PointCloud&)> trans;
};

EvalBackend model_backend(std::shared_ptr<const LoadedModel> m, std::string suffix) {
  EvalBackend b;
  b.suffix = std::move(suffix);
  b.canon = [m](const PointCloud& x) { return canonicalize(x, m->params, m->cfg).canonical; };
  b.frame = [m](const PointCloud& x) { return canonicalizing_rotation(*m, x); };
  b.trans = [m](const PointCloud& x) { return amodal_translation(*m, x); };
  return b;
}

EvalBackend pca_backend(std::string suffix) {
  EvalBackend b;
  b.suffix = std::move(suffix);
  b.canon = [](const PointCloud& x) { return pca_canonicalize(x).canonical; };
  b.frame = [](const PointCloud& x) { return pca_canonicalize(x).frame; };
  // PCA predicts no amodal translation; it stands in for the
  // zero-translation reference predictor.
  b.trans = [](const PointCloud&) { return Vec3{0, 0, 0}; };
  return b;
}

int cmd_evaluate(const std::string& manifest_dir, const std::string& metric,
                 int rotations, std::uint64_t seed, const std::string& checkpoint,
                 const std::string& baseline, const std::string& compare,
                 int limit, const std::string& crop_kind,
                 const std::string& out_path) {
  static const std::set<std::string> known{"ic", "cc", "gc", "te", "reg", "all"};
  if (!known.count(metric))
    throw validation_error("unknown --metric '" + metric +
                           "' (expected ic, cc, gc, te, reg, or all)");
  if (rotations <= 0) throw validation_error("--rotations must be positive");
  if (!baseline.empty() && baseline != "pca")
    throw validation_error("unknown --baseline '" + baseline + "' (expected pca)");
  if (crop_kind != "slice" && crop_kind != "depth")
    throw validation_error("unknown --crop '" + crop_kind +
                           "' (expected slice or depth)");

  print_resolved("evaluate", {{"manifest", manifest_dir},
                              {"metric", metric},
                              {"rotations", std::to_string(rotations)},
                              {"seed", std::to_string(seed)},
                              {"checkpoint", checkpoint.empty() ? "(pca)" : checkpoint},
                              {"baseline", baseline.empty() ? "(none)" : baseline},
                              {"compare", compare.empty() ? "(none)" : compare},
                              {"n", std::to_string(limit)},
                              {"crop", crop_kind},
                              {"out", out_path}});

  const DatasetManifest m = read_manifest(manifest_dir);
  bool has_val = false;
  for (const ShapeRecord& r : m.records) has_val |= r.split == "val";
  std::vector<PointCloud> shapes;
  std::string category;
  for (const ShapeRecord& r : m.records) {
    if (has_val && r.split != "val") continue;
    if (category.empty())
      category = r.family;
    else if (category != r.family)
      category = "mixed";
    shapes.push_back(r.cloud);
  }
  if (limit > 0 && static_cast<int>(shapes.size()) > limit) shapes.resize(limit);
  if (shapes.empty()) throw validation_error("no shapes selected from the manifest");
  std::printf("evaluating %zu %s shapes (%s split)\n", shapes.size(),
              category.c_str(), has_val ? "val" : "all");

  std::vector<EvalBackend> backends;
  if (!checkpoint.empty())
    backends.push_back(model_backend(
        std::make_shared<const LoadedModel>(load_model(checkpoint)), ""));
  else
    backends.push_back(pca_backend(""));
  if (!compare.empty())
    backends.push_back(model_backend(
        std::make_shared<const LoadedModel>(load_model(compare)), "-compare"));
  if (baseline == "pca" && !checkpoint.empty()) backends.push_back(pca_backend("-pca"));

  Rng rng(seed);
  std::vector<std::string> rows;
  auto emit = [&](const MetricReport& rep) {
    rows.push_back(metric_csv_row(rep));
    std::printf("%s\n", rows.back().c_str());
  };
  const bool all = metric == "all";

  for (const EvalBackend& b : backends) {
    const std::string cat = category + b.suffix;
    if (all || metric == "ic") emit(ic_metric(b.canon, shapes, rotations, rng, cat));
    if ((all || metric == "cc") && shapes.size() >= 2)
      emit(cc_metric(b.canon, shapes, rotations, rng, cat));
    if ((all || metric == "gc") && shapes.size() >= 3)
      emit(gc_metric(b.frame, shapes, rotations, 2, rng, cat));
    if (all || metric == "te") {
      const std::uint64_t te_seed = rng.state();
      std::vector<CropResult> crops;
      crops.reserve(shapes.size());
      for (const PointCloud& x : shapes) {
        const PointCloud posed = rotate_cloud(x, random_rotation(rng));
        if (crop_kind == "slice") {
          crops.push_back(slice_crop(posed, random_unit_vector(rng)));
        } else {
          const Vec3 u = random_unit_vector(rng);
          crops.push_back(depth_camera_crop(posed, {2.5 * u[0], 2.5 * u[1], 2.5 * u[2]}));
        }
      }
      emit(te_metric(b.trans, crops, cat, te_seed));
    }
    if (all || metric == "reg") {
      const std::uint64_t reg_seed = rng.state();
      std::vector<std::pair<PointCloud, PointCloud>> pairs;
      pairs.reserve(shapes.size());
      for (const PointCloud& x : shapes)
        pairs.emplace_back(rotate_cloud(x, random_rotation(rng)),
                           rotate_cloud(x, random_rotation(rng)));
      const RegistrationResult rr = registration_eval(b.frame, pairs);
      MetricReport rep;
      rep.category = cat;
      rep.n_samples = static_cast<int>(pairs.size());
      rep.seed = reg_seed;
      rep.metric = "reg_rmse";
      rep.value = rr.rmse;
      emit(rep);
      rep.metric = "reg_cd";
      rep.value = rr.cd;
      emit(rep);
    }
  }

  std::ofstream os(out_path, std::ios::binary);
  check(os.good(), "cannot open '" + out_path + "'");
  os << metric_csv_header() << "\n";
  for (const std::string& r : rows) os << r << "\n";
  check(os.good(), "write failed for '" + out_path + "'");
  std::printf("metrics -> %s\n", out_path.c_str());
  return 0;
}

// ---------------------------------------------------------------------------
// selftest: compressed versions of the equivariance, gradient, and oracle
// property suites. Exits nonzero if any check fails.

struct SelfTest {
  int failures = 0;

  void report(const std::string& name, bool ok, double worst, double tol) {
    if (ok) {
      std::printf("ok   %-42s max %.3g (tol %.3g)\n", name.c_str(), worst, tol);
    } else {
      std::printf("FAIL %-42s max %.3g (tol %.3g)\n", name.c_str(), worst, tol);
      ++failures;
    }
  }

  void bound(const std::string& name, double worst, double tol) {
    report(name, std::isfinite(worst) && worst <= tol, worst, tol);
  }
};

double rel_diff(const Tensor& a, const Tensor& b) {
  double num = 0, den = 0;
  for (std::size_t i = 0; i < a.v.size(); ++i) {
    num += (a.v[i] - b.v[i]) * (a.v[i] - b.v[i]);
    den += b.v[i] * b.v[i];
  }
  return std::sqrt(num) / std::max(1e-300, std::sqrt(den));
}

int cmd_selftest(std::uint64_t seed) {
  print_resolved("selftest", {{"seed", std::to_string(seed)}});
  SelfTest st;
  Rng rng(seed);

  {  // Wigner-D: identity, degree-1 = R, homomorphism, orthogonality.
    double worst = 0;
    const Mat3 eye{{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}};
    for (int l = 0; l <= kMaxDegree; ++l) {
      const MatX d = wigner_d(l, eye);
      worst = std::max(worst, (d - MatX::Identity(2 * l + 1, 2 * l + 1)).norm());
    }
    for (int t = 0; t < 10; ++t) {
      const Mat3 r1 = random_rotation(rng), r2 = random_rotation(rng);
      Mat3 r12{};
      for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j)
          for (int k = 0; k < 3; ++k) r12[i][j] += r1[i][k] * r2[k][j];
      const MatX d1 = wigner_d(1, r1);
      for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) worst = std::max(worst, std::abs(d1(i, j) - r1[i][j]));
      for (int l = 0; l <= kMaxDegree; ++l) {
        const MatX a = wigner_d(l, r1), b = wigner_d(l, r2);
        worst = std::max(worst, (wigner_d(l, r12) - a * b).norm());
        worst = std::max(worst,
                         (a * a.transpose() - MatX::Identity(2 * l + 1, 2 * l + 1)).norm());
      }
    }
    st.bound("wigner-d identity/degree-1/homomorphism", worst, 1e-8);
  }

  {  // Solid harmonics transform by the Wigner-D of the rotation.
    double worst = 0;
    for (int t = 0; t < 10; ++t) {
      const Mat3 r = random_rotation(rng);
      const Vec3 x = {rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
      const Vec3 rx = mat3_apply(r, x);
      for (int l = 0; l <= kMaxDegree; ++l) {
        double yx[7], yrx[7];
        eval_solid_harmonics(l, x.data(), yx);
        eval_solid_harmonics(l, rx.data(), yrx);
        const MatX d = wigner_d(l, r);
        for (int i = 0; i < 2 * l + 1; ++i) {
          double s = 0;
          for (int j = 0; j < 2 * l + 1; ++j) s += d(i, j) * yx[j];
          worst = std::max(worst, std::abs(yrx[i] - s));
        }
      }
    }
    st.bound("solid harmonics equivariance", worst, 1e-10);
  }

  {  // Clebsch-Gordan intertwining for every stored triple.
    double worst = 0;
    for (int t = 0; t < 3; ++t) {
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
        worst = std::max(worst, (cm * kron - d * cm).norm());
      }
    }
    st.bound("clebsch-gordan intertwining", worst, 1e-8);
  }

  ModelConfig mcfg = ModelConfig::desk();
  mcfg.p_frames = 2;
  Rng prng(17);
  const ModelParams params = init_params(mcfg, prng);

  {  // End-to-end equivariance of the exported quantities.
    double worst_inv = 0, worst_eq = 0, worst_trans = 0;
    for (int t = 0; t < 2; ++t) {
      const ShapeRecord rec = make_shape("toy-chair", rng, 48);
      const CanonicalizationResult a = forward(rec.cloud, params, mcfg);
      for (int q = 0; q < 2; ++q) {
        const Mat3 r = random_rotation(rng);
        const CanonicalizationResult b =
            forward(rotate_cloud(rec.cloud, r), params, mcfg);
        worst_inv = std::max(worst_inv, rel_diff(b.x_c, a.x_c));
        worst_inv = std::max(worst_inv, rel_diff(b.segmentation, a.segmentation));
        for (std::size_t p = 0; p < a.frames.size(); ++p) {
          double num = 0, den = 0;
          for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) {
              double re = 0;
              for (int k = 0; k < 3; ++k) re += r[i][k] * a.frames[p][k][j];
              num += (b.frames[p][i][j] - re) * (b.frames[p][i][j] - re);
              den += re * re;
            }
          worst_eq = std::max(worst_eq, std::sqrt(num / std::max(1e-300, den)));
        }
        const Vec3 rt = mat3_apply(r, a.amodal_translation);
        double num = 0, den = 0;
        for (int i = 0; i < 3; ++i) {
          num += (b.amodal_translation[i] - rt[i]) * (b.amodal_translation[i] - rt[i]);
          den += rt[i] * rt[i];
        }
        worst_eq = std::max(worst_eq, std::sqrt(num / std::max(1e-300, den)));
      }
      PointCloud shifted = rec.cloud;
      for (int i = 0; i < shifted.size(); ++i) {
        double* p = shifted.row(i);
        p[0] += 0.37;
        p[1] -= 1.25;
        p[2] += 0.08;
      }
      const PointCloud ca = canonicalize(rec.cloud, params, mcfg).canonical;
      const PointCloud cb = canonicalize(shifted, params, mcfg).canonical;
      for (int i = 0; i < ca.size(); ++i)
        for (int a3 = 0; a3 < 3; ++a3)
          worst_trans = std::max(worst_trans,
                                 std::abs(ca.row(i)[a3] - cb.row(i)[a3]));
    }
    st.bound("invariance of shape and segmentation", worst_inv, 1e-3);
    st.bound("equivariance of frames and translation", worst_eq, 1e-3);
    st.bound("translation invariance after centering", worst_trans, 1e-10);
  }

  {  // Gradients of every loss term against finite differences.
    double worst = 0;
    for (std::uint64_t s : {401ull, 402ull}) {
      Rng grng(s);
      PointCloud x;
      for (int i = 0; i < 12; ++i) {
        x.xyz.push_back(grng.normal());
        x.xyz.push_back(grng.normal());
        x.xyz.push_back(grng.normal());
      }
      std::vector<Tensor> ps;
      Tensor xc(12, 3), seg(12, 3), e1(3, 3), e2(3, 3), tr(3, 1);
      for (double& v : xc.v) v = 0.15 * grng.normal();
      for (double& v : seg.v) v = 0.5 + 0.1 * grng.normal();
      for (double& v : e1.v) v = 0.4 * grng.normal();
      for (double& v : e2.v) v = 0.4 * grng.normal();
      for (double& v : tr.v) v = 0.2 * grng.normal();
      ps = {xc, seg, e1, e2, tr};

      auto fd = [&](auto&& build) {
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
        worst = std::max(worst, grad_check(loss_fn, grads_fn, ps, 1e-5));
      };

      fd([&](Graph& g, const std::vector<int>& ids) {
        return canon_loss(g, ids[2], ids[0], x);
      });
      fd([&](Graph& g, const std::vector<int>& ids) {
        return ortho_loss(g, {ids[2], ids[3]});
      });
      fd([&](Graph& g, const std::vector<int>& ids) {
        return separation_loss(g, {ids[2], ids[3]});
      });
      fd([&](Graph& g, const std::vector<int>& ids) {
        return g.scale(restriction_loss(g, ids[0], g.gather_rows(ids[0], {0, 2, 4, 6}),
                                        {0, 2, 4, 6}),
                       0.25);
      });
      fd([&](Graph& g, const std::vector<int>& ids) {
        return amodal_loss(g, ids[4], {0.1, -0.2, 0.05});
      });
      fd([&](Graph& g, const std::vector<int>& ids) {
        const int s = g.softmax_rows(ids[1]);
        const SegFullLosses f = seg_losses_full(g, x, s);
        return g.add(g.add(f.localization, f.equilibrium), f.part_distribution);
      });
    }
    st.bound("loss gradients vs finite differences", worst, 1e-4);
  }

  {  // Chamfer grid acceleration is exact; Procrustes recovers rotations;
     // an oracle canonicalizer zeroes the consistency metrics.
    double worst_cd = 0;
    for (int t = 0; t < 10; ++t) {
      PointCloud a, b;
      const int n = 20 + 10 * t;
      for (int i = 0; i < n; ++i) {
        a.xyz.push_back(rng.normal());
        a.xyz.push_back(rng.normal());
        a.xyz.push_back(rng.normal());
        b.xyz.push_back(rng.normal());
        b.xyz.push_back(rng.normal());
        b.xyz.push_back(rng.normal());
      }
      worst_cd = std::max(worst_cd, std::abs(chamfer(a, b) - chamfer_brute(a, b)));
    }
    st.bound("chamfer grid equals brute force", worst_cd, 0.0);

    double worst_pr = 0;
    for (int t = 0; t < 5; ++t) {
      PointCloud x;
      for (int i = 0; i < 16; ++i) {
        x.xyz.push_back(rng.normal());
        x.xyz.push_back(rng.normal());
        x.xyz.push_back(rng.normal());
      }
      const Mat3 r = random_rotation(rng);
      const ProcrustesResult pr = procrustes_align(x, rotate_cloud(x, r));
      for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j)
          worst_pr = std::max(worst_pr, std::abs(pr.rotation[i][j] - r[i][j]));
    }
    st.bound("procrustes recovers known rotations", worst_pr, 1e-10);

    const ShapeRecord rec = make_shape("toy-table", rng, 64);
    const PointCloud ref = rec.cloud;
    auto oracle = [&](const PointCloud& c) {
      return rotate_cloud(c, mat3_transpose(procrustes_align(ref, c).rotation));
    };
    std::vector<PointCloud> copies;
    for (int i = 0; i < 4; ++i)
      copies.push_back(rotate_cloud(ref, random_rotation(rng)));
    const double ic = ic_metric(oracle, copies, 4, rng).value;
    const double cc = cc_metric(oracle, copies, 3, rng).value;
    st.bound("oracle canonicalizer zeroes ic/cc", std::max(ic, cc), 1e-9);
  }

  {  // Canonicalization commutes with cropping.
    double worst = 0;
    for (int t = 0; t < 5; ++t) {
      const ShapeRecord rec = make_shape("blob-cluster", rng, 48);
      const Mat3 r = random_rotation(rng);
      const Vec3 dir = random_unit_vector(rng);
      const CropResult c1 = slice_crop(rec.cloud, dir);
      const PointCloud a = rotate_cloud(c1.partial, r);
      const Vec3 rdir = mat3_apply(r, dir);
      const CropResult c2 = slice_crop(rotate_cloud(rec.cloud, r), rdir);
      check(a.size() == c2.partial.size(), "selftest: crop size mismatch");
      for (int i = 0; i < a.size(); ++i)
        for (int a3 = 0; a3 < 3; ++a3)
          worst = std::max(worst, std::abs(a.row(i)[a3] - c2.partial.row(i)[a3]));
    }
    st.bound("cropping commutes with rotation", worst, 1e-12);
  }

  if (st.failures > 0) {
    std::printf("selftest: %d failure(s)\n", st.failures);
    return 2;
  }
  std::printf("selftest: all checks passed\n");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"self-supervised 3d pose canonicalization"};
  app.require_subcommand(1);

  std::string config_path, out_path, family = "toy-plane", metric = "all";
  std::string checkpoint, baseline, compare, crop_kind = "slice";
  std::string input, input2, manifest_dir;
  std::uint64_t seed = 0;
  bool seed_set = false, partial = false;
  int n = 16, rotations = 16, limit = 0;

  auto add_seed = [&](CLI::App* cmd) {
    cmd->add_option("--seed", seed, "random seed")->each([&](const std::string&) {
      seed_set = true;
    });
  };

  CLI::App* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
  gen->add_option("--family", family, "shape family");
  gen->add_option("--n", n, "number of shapes");
  gen->add_option("--config", config_path, "config file (n_points)");
  gen->add_option("--out", out_path, "output directory")->required();
  add_seed(gen);

  CLI::App* tr = app.add_subcommand("train", "train a canonicalization model");
  tr->add_option("manifest", manifest_dir, "dataset directory")->required();
  tr->add_option("--config", config_path, "training config file");
  tr->add_option("--out", out_path, "checkpoint output path")->required();
  add_seed(tr);

  CLI::App* canon = app.add_subcommand("canonicalize", "canonicalize an .xyz cloud");
  canon->add_option("input", input, "input .xyz")->required();
  canon->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
  canon->add_option("--out", out_path, "output .xyz")->required();
  canon->add_flag("--partial", partial, "treat input as partial (apply amodal placement)");

  CLI::App* ev = app.add_subcommand("evaluate", "compute canonicalization metrics");
  ev->add_option("manifest", manifest_dir, "dataset directory")->required();
  ev->add_option("--metric", metric, "ic, cc, gc, te, reg, or all");
  ev->add_option("--rotations", rotations, "rotations / samples per shape");
  ev->add_option("--checkpoint", checkpoint, "model checkpoint (PCA when absent)");
  ev->add_option("--baseline", baseline, "add a baseline (pca)");
  ev->add_option("--compare", compare, "second checkpoint for side-by-side rows");
  ev->add_option("--n", limit, "cap on evaluated shapes (0 = all)");
  ev->add_option("--crop", crop_kind, "partial generator for te: slice or depth");
  ev->add_option("--out", out_path, "metrics CSV path")->required();
  add_seed(ev);

  CLI::App* seg = app.add_subcommand("segment", "export per-point part labels");
  seg->add_option("input", input, "input .xyz")->required();
  seg->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
  seg->add_option("--out", out_path, "labeled .xyz output")->required();

  CLI::App* tk = app.add_subcommand("transfer-keypoints",
                                    "transfer labels from one shape to another");
  tk->add_option("source", input, "labeled source .xyz")->required();
  tk->add_option("target", input2, "target .xyz")->required();
  tk->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
  tk->add_option("--out", out_path, "labeled target .xyz output")->required();

  CLI::App* self = app.add_subcommand("selftest", "run the built-in property checks");
  add_seed(self);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(family, n, seed, out_path, config_path);
    if (tr->parsed()) return cmd_train(manifest_dir, config_path, seed_set, seed, out_path);
    if (canon->parsed()) return cmd_canonicalize(input, checkpoint, out_path, partial);
    if (ev->parsed())
      return cmd_evaluate(manifest_dir, metric, rotations, seed, checkpoint,
                          baseline, compare, limit, crop_kind, out_path);
    if (seg->parsed()) return cmd_segment(input, checkpoint, out_path);
    if (tk->parsed()) return cmd_transfer_keypoints(input, input2, checkpoint, out_path);
    if (self->parsed()) return cmd_selftest(seed);
  } catch (const validation_error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
