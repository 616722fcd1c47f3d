#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "densekd/detector.hpp"
#include "densekd/evaluation.hpp"
#include "densekd/losses.hpp"
#include "densekd/synthdata.hpp"

namespace densekd {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct OptimConfig {
  double learning_rate = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  int batch_size = 8;
  int warmup_iters = 50;                   // linear ramp from 10% of the base rate
  std::vector<double> lr_steps{0.67, 0.92};  // fractions of the epoch budget
  double lr_gamma = 0.1;
  double focal_gamma = 2.0;
  double loc_loss_weight = 1.0;
};

struct DistillConfig {
  double alpha1 = 1.0;
  double alpha2 = 4.0;
  bool use_cls = true;
  bool use_loc = true;
  Normalization normalization = Normalization::mean;
  bool self_kd = false;

  double effective_alpha1() const { return use_cls ? alpha1 : 0.0; }
  double effective_alpha2() const { return use_loc ? alpha2 : 0.0; }
};

struct ExperimentConfig {
  SceneSpec scene;
  int train_scenes = 200;
  int val_scenes = 100;
  std::uint64_t train_seed = 0;
  std::uint64_t val_seed = kValSeedBase;

  Architecture teacher_arch{16, 8, {64, 64}, 3};
  Architecture student_arch{16, 8, {16}, 3};
  OptimConfig optim;
  int student_epochs = 12;
  int teacher_epochs = 60;
  DistillConfig distill;
  EvalThresholds eval;
  int eval_every = 1;  // validation cadence in epochs; the last epoch is always evaluated
  std::uint64_t seed = 0;
  std::string output_dir = "runs";
};

inline void validate(const ExperimentConfig& c) {
  auto fail = [](const std::string& why) { throw ConfigError("config: " + why); };
  validate(c.scene);
  if (c.train_scenes < 1 || c.val_scenes < 1) fail("train_scenes and val_scenes must be >= 1");
  if (c.student_epochs < 1 || c.teacher_epochs < 1) fail("epochs must be >= 1");
  if (c.optim.batch_size < 1) fail("batch_size must be >= 1");
  if (!(c.optim.learning_rate > 0.0)) fail("learning_rate must be positive");
  if (!(c.distill.alpha1 >= 0.0) || !(c.distill.alpha2 >= 0.0)) fail("alpha1/alpha2 must be >= 0");
  for (const auto* a : {&c.teacher_arch, &c.student_arch}) {
    if (a->stride != c.scene.stride || a->num_classes != c.scene.num_classes) {
      fail("architecture stride/K must match the scene spec");
    }
  }
  if (c.eval_every < 1) fail("eval_every must be >= 1");
}

// ---------------------------------------------------------------------------
// JSON config

inline const char* to_string(Normalization n) { return n == Normalization::mean ? "mean" : "sum"; }

inline nlohmann::json arch_json(const Architecture& a) {
  return {{"patch", a.patch}, {"stride", a.stride}, {"widths", a.widths}, {"K", a.num_classes}};
}

inline nlohmann::json to_json(const ExperimentConfig& c) {
  return {
      {"scene", spec_to_json(c.scene)},
      {"train_scenes", c.train_scenes},
      {"val_scenes", c.val_scenes},
      {"train_seed", c.train_seed},
      {"val_seed", c.val_seed},
      {"teacher_arch", arch_json(c.teacher_arch)},
      {"student_arch", arch_json(c.student_arch)},
      {"optim",
       {{"learning_rate", c.optim.learning_rate},
        {"momentum", c.optim.momentum},
        {"weight_decay", c.optim.weight_decay},
        {"batch_size", c.optim.batch_size},
        {"warmup_iters", c.optim.warmup_iters},
        {"lr_steps", c.optim.lr_steps},
        {"lr_gamma", c.optim.lr_gamma},
        {"focal_gamma", c.optim.focal_gamma},
        {"loc_loss_weight", c.optim.loc_loss_weight}}},
      {"student_epochs", c.student_epochs},
      {"teacher_epochs", c.teacher_epochs},
      {"distill",
       {{"alpha1", c.distill.alpha1},
        {"alpha2", c.distill.alpha2},
        {"use_cls", c.distill.use_cls},
        {"use_loc", c.distill.use_loc},
        {"loss_normalization", to_string(c.distill.normalization)},
        {"self_kd", c.distill.self_kd}}},
      {"eval", {{"score_thresh", c.eval.score_thresh}, {"nms_iou", c.eval.nms_iou}}},
      {"eval_every", c.eval_every},
      {"seed", c.seed},
      {"output_dir", c.output_dir},
  };
}

namespace detail {

template <typename T>
void read_field(const nlohmann::json& j, const char* key, T& out, const std::string& path) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config field '" + path + key + "': " + e.what());
  }
}

inline Architecture arch_from_json(const nlohmann::json& j, Architecture a, const std::string& path) {
  read_field(j, "patch", a.patch, path);
  read_field(j, "stride", a.stride, path);
  read_field(j, "widths", a.widths, path);
  read_field(j, "K", a.num_classes, path);
  return a;
}

}  // namespace detail

/// Overlays the fields present in `j` onto `base`. Missing fields keep their
/// current values, so a partial document is a valid config.
inline ExperimentConfig config_from_json(const nlohmann::json& j, ExperimentConfig c = {}) {
  using detail::read_field;
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  try {
    if (j.contains("scene")) c.scene = spec_from_json(j["scene"], c.scene);
  } catch (const ParseError& e) {
    throw ConfigError(e.what());
  }
  read_field(j, "train_scenes", c.train_scenes, "");
  read_field(j, "val_scenes", c.val_scenes, "");
  read_field(j, "train_seed", c.train_seed, "");
  read_field(j, "val_seed", c.val_seed, "");
  if (j.contains("teacher_arch")) c.teacher_arch = detail::arch_from_json(j["teacher_arch"], c.teacher_arch, "teacher_arch.");
  if (j.contains("student_arch")) c.student_arch = detail::arch_from_json(j["student_arch"], c.student_arch, "student_arch.");
  if (j.contains("optim")) {
    const auto& o = j["optim"];
    read_field(o, "learning_rate", c.optim.learning_rate, "optim.");
    read_field(o, "momentum", c.optim.momentum, "optim.");
    read_field(o, "weight_decay", c.optim.weight_decay, "optim.");
    read_field(o, "batch_size", c.optim.batch_size, "optim.");
    read_field(o, "warmup_iters", c.optim.warmup_iters, "optim.");
    read_field(o, "lr_steps", c.optim.lr_steps, "optim.");
    read_field(o, "lr_gamma", c.optim.lr_gamma, "optim.");
    read_field(o, "focal_gamma", c.optim.focal_gamma, "optim.");
    read_field(o, "loc_loss_weight", c.optim.loc_loss_weight, "optim.");
  }
  read_field(j, "student_epochs", c.student_epochs, "");
  read_field(j, "teacher_epochs", c.teacher_epochs, "");
  if (j.contains("distill")) {
    const auto& d = j["distill"];
    read_field(d, "alpha1", c.distill.alpha1, "distill.");
    read_field(d, "alpha2", c.distill.alpha2, "distill.");
    read_field(d, "use_cls", c.distill.use_cls, "distill.");
    read_field(d, "use_loc", c.distill.use_loc, "distill.");
    read_field(d, "self_kd", c.distill.self_kd, "distill.");
    std::string norm = to_string(c.distill.normalization);
    read_field(d, "loss_normalization", norm, "distill.");
    if (norm == "mean") {
      c.distill.normalization = Normalization::mean;
    } else if (norm == "sum") {
      c.distill.normalization = Normalization::sum;
    } else {
      throw ConfigError("config field 'distill.loss_normalization' must be mean or sum");
    }
  }
  if (j.contains("eval")) {
    read_field(j["eval"], "score_thresh", c.eval.score_thresh, "eval.");
    read_field(j["eval"], "nms_iou", c.eval.nms_iou, "eval.");
  }
  read_field(j, "eval_every", c.eval_every, "");
  read_field(j, "seed", c.seed, "");
  read_field(j, "output_dir", c.output_dir, "");
  return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  try {
    return config_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Prepared data: patch matrices and targets computed once per split.

struct PreparedScene {
  std::shared_ptr<const Matrix> patches;
  AssignedTargets targets;
  std::vector<GroundTruth> gts;
};

struct PreparedSplit {
  AnchorGrid anchors;
  int patch = 0;
  std::vector<PreparedScene> scenes;

  std::vector<GroundTruth> all_gts() const {
    std::vector<GroundTruth> out;
    for (const auto& s : scenes) out.insert(out.end(), s.gts.begin(), s.gts.end());
    return out;
  }
};

inline PreparedSplit prepare_split(const Dataset& ds, int patch) {
  PreparedSplit split;
  split.anchors = build_anchor_grid(ds.spec.image_w, ds.spec.image_h, ds.spec.stride);
  split.patch = patch;
  split.scenes.reserve(ds.scenes.size());
  for (std::size_t i = 0; i < ds.scenes.size(); ++i) {
    const Scene& s = ds.scenes[i];
    PreparedScene ps;
    ps.patches = std::make_shared<const Matrix>(extract_patches(s.image, split.anchors, patch));
    ps.targets = assign_labels(s, split.anchors, ds.spec.num_classes);
    for (const auto& o : s.objects) ps.gts.push_back({o.class_id, o.box, i});
    split.scenes.push_back(std::move(ps));
  }
  return split;
}

inline std::vector<Prediction> predict_split(const DetectorParams& p, const PreparedSplit& split) {
  if (split.patch != p.arch.patch) throw InvalidInput("predict_split: patch size mismatch");
  std::vector<Prediction> out;
  out.reserve(split.scenes.size());
  for (const auto& s : split.scenes) out.push_back(forward_patches(p, s.patches));
  return out;
}

inline std::vector<Detection> detect_split(const std::vector<Prediction>& preds,
                                           const PreparedSplit& split, const EvalThresholds& th) {
  std::vector<Detection> dets;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    auto d = postprocess(preds[i], split.anchors, th.score_thresh, th.nms_iou, i);
    dets.insert(dets.end(), d.begin(), d.end());
  }
  return dets;
}

inline EvalReport evaluate_split(const DetectorParams& p, const PreparedSplit& split,
                                 const EvalThresholds& th) {
  return evaluate(detect_split(predict_split(p, split), split, th), split.all_gts());
}

// ---------------------------------------------------------------------------
// Training

struct EpochRecord {
  int epoch = 0;
  double sup_cls = 0.0;
  double sup_loc = 0.0;
  double dis_cls = 0.0;
  double dis_loc = 0.0;
  double learning_rate = 0.0;
  std::optional<EvalReport> val;

  double total(const DistillConfig* d) const {
    double t = sup_cls + sup_loc;
    if (d) t += d->effective_alpha1() * dis_cls + d->effective_alpha2() * dis_loc;
    return t;
  }
};

struct RunRecord {
  std::string mode;
  std::uint64_t seed = 0;
  std::vector<EpochRecord> epochs;
  EvalReport final_report;
  double best_mAP = 0.0;
  double wall_seconds = 0.0;
};

inline nlohmann::json to_json(const EpochRecord& e) {
  nlohmann::json j = {{"epoch", e.epoch},
                      {"learning_rate", e.learning_rate},
                      {"losses",
                       {{"sup_cls", e.sup_cls},
                        {"sup_loc", e.sup_loc},
                        {"dis_cls", e.dis_cls},
                        {"dis_loc", e.dis_loc}}}};
  j["val"] = e.val ? to_json(*e.val) : nlohmann::json(nullptr);
  return j;
}

inline nlohmann::json to_json(const RunRecord& r) {
  nlohmann::json epochs = nlohmann::json::array();
  for (const auto& e : r.epochs) epochs.push_back(to_json(e));
  return {{"mode", r.mode},
          {"seed", r.seed},
          {"epochs", epochs},
          {"final", to_json(r.final_report)},
          {"best_mAP", r.best_mAP},
          {"wall_seconds", r.wall_seconds}};
}

/// Frozen teacher outputs on the training split, indexed like its scenes.
struct TeacherTargets {
  std::vector<Prediction> predictions;
};

struct TrainJob {
  std::string mode;                       // "teacher", "student_baseline", "distill", ...
  DetectorParams init;
  int epochs = 1;
  std::uint64_t seed = 0;                 // batch order
  const TeacherTargets* teacher = nullptr;
  DistillConfig distill;                  // used only when `teacher` is set
  std::function<void(const EpochRecord&)> on_epoch;
};

struct TrainResult {
  DetectorParams params;
  RunRecord record;
};

inline double scheduled_lr(const OptimConfig& o, int epoch, int epochs, long iter) {
  double lr = o.learning_rate;
  for (double f : o.lr_steps) {
    if (epoch >= static_cast<int>(f * epochs)) lr *= o.lr_gamma;
  }
  if (iter < o.warmup_iters) {
    const double ramp = static_cast<double>(iter) / o.warmup_iters;
    lr *= 0.1 + 0.9 * ramp;
  }
  return lr;
}

/// Minibatch SGD over the training split. With a teacher, each image adds the
/// distillation objective to the supervised losses. Batch order comes from a
/// seeded Fisher-Yates shuffle and gradients are accumulated in batch order,
/// so a run is a pure function of its inputs.
inline TrainResult train(const TrainJob& job, const PreparedSplit& train_split,
                         const PreparedSplit& val_split, const ExperimentConfig& cfg) {
  const auto t0 = std::chrono::steady_clock::now();
  if (job.teacher && job.teacher->predictions.size() != train_split.scenes.size()) {
    throw InvalidInput("train: teacher predictions do not cover the training split");
  }
  const double alpha1 = job.teacher ? job.distill.effective_alpha1() : 0.0;
  const double alpha2 = job.teacher ? job.distill.effective_alpha2() : 0.0;
  const bool distilling = alpha1 > 0.0 || alpha2 > 0.0;

  TrainResult res;
  res.params = job.init;
  res.record.mode = job.mode;
  res.record.seed = job.seed;
  OptimizerState opt = OptimizerState::for_params(res.params, cfg.optim.learning_rate,
                                                  cfg.optim.momentum, cfg.optim.weight_decay);
  std::mt19937_64 order_rng(job.seed ^ 0x5eed0bade1f00dULL);
  std::vector<std::size_t> order(train_split.scenes.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  const auto& anchors = train_split.anchors;
  const std::size_t batch = static_cast<std::size_t>(cfg.optim.batch_size);
  long iter = 0;
  DetectorParams grads = zeros_like(res.params.arch);
  ForwardCache cache;

  for (int epoch = 0; epoch < job.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[order_rng() % i]);
    }
    EpochRecord rec;
    rec.epoch = epoch + 1;
    for (std::size_t start = 0; start < order.size(); start += batch) {
      const std::size_t end = std::min(order.size(), start + batch);
      for_each_tensor(grads, [](const std::string&, auto& t) { t.setZero(); });
      for (std::size_t b = start; b < end; ++b) {
        const PreparedScene& sc = train_split.scenes[order[b]];
        const Prediction pred = forward_patches(res.params, sc.patches, &cache);
        LossResult cls = supervised_cls_loss(pred.logits, sc.targets.labels, cfg.optim.focal_gamma);
        LossResult loc = supervised_loc_loss(pred.offsets, anchors, sc.targets.box_targets);
        Grid2 gl = std::move(*cls.grad_logits);
        Grid2 go = std::move(*loc.grad_offsets);
        if (cfg.optim.loc_loss_weight != 1.0) go *= cfg.optim.loc_loss_weight;
        rec.sup_cls += cls.value;
        rec.sup_loc += cfg.optim.loc_loss_weight * loc.value;
        if (distilling) {
          const auto dis = total_distill_loss(pred, job.teacher->predictions[order[b]], anchors,
                                              alpha1, alpha2, job.distill.normalization);
          gl += *dis.total.grad_logits;
          go += *dis.total.grad_offsets;
          rec.dis_cls += dis.cls;
          rec.dis_loc += dis.loc;
        }
        backward_accumulate(res.params, cache, gl, go, grads);
      }
      const double scale = 1.0 / static_cast<double>(end - start);
      for_each_tensor(grads, [scale](const std::string&, auto& t) { t *= scale; });
      opt.learning_rate = scheduled_lr(cfg.optim, epoch, job.epochs, iter);
      rec.learning_rate = opt.learning_rate;
      sgd_step(res.params, grads, opt);
      ++iter;
    }
    const double n = static_cast<double>(order.size());
    rec.sup_cls /= n;
    rec.sup_loc /= n;
    rec.dis_cls /= n;
    rec.dis_loc /= n;
    const bool last = epoch + 1 == job.epochs;
    if (last || (epoch + 1) % cfg.eval_every == 0) {
      rec.val = evaluate_split(res.params, val_split, cfg.eval);
      res.record.best_mAP = std::max(res.record.best_mAP, rec.val->mAP);
    }
    if (job.on_epoch) job.on_epoch(rec);
    res.record.epochs.push_back(std::move(rec));
  }
  res.record.final_report = *res.record.epochs.back().val;
  res.record.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return res;
}

// ---------------------------------------------------------------------------
// Experiment entry points shared by the CLI and the acceptance suite.

/// Training data for one experiment, prepared once and shared across runs.
struct Workspace {
  ExperimentConfig config;
  PreparedSplit train;
  PreparedSplit val;

  static Workspace from_datasets(const ExperimentConfig& cfg, const Dataset& train_ds,
                                 const Dataset& val_ds) {
    if (!(train_ds.spec == val_ds.spec)) throw ConfigError("train and val specs differ");
    ExperimentConfig c = cfg;
    c.scene = train_ds.spec;
    validate(c);
    if (c.teacher_arch.patch != c.student_arch.patch) {
      throw ConfigError("teacher and student must share the patch size");
    }
    return {c, prepare_split(train_ds, c.student_arch.patch),
            prepare_split(val_ds, c.student_arch.patch)};
  }

  static Workspace generate(const ExperimentConfig& cfg) {
    validate(cfg);
    return from_datasets(cfg, generate_dataset(cfg.scene, cfg.train_seed, cfg.train_scenes),
                         generate_dataset(cfg.scene, cfg.val_seed, cfg.val_scenes));
  }
};

inline TrainResult run_teacher(const Workspace& ws, std::uint64_t seed,
                               std::function<void(const EpochRecord&)> on_epoch = {}) {
  TrainJob job;
  job.mode = "teacher";
  job.init = init_params(ws.config.teacher_arch, seed);
  job.epochs = ws.config.teacher_epochs;
  job.seed = seed;
  job.on_epoch = std::move(on_epoch);
  return train(job, ws.train, ws.val, ws.config);
}

inline TrainResult run_student_baseline(const Workspace& ws, std::uint64_t seed,
                                        std::function<void(const EpochRecord&)> on_epoch = {}) {
  TrainJob job;
  job.mode = "student_baseline";
  job.init = init_params(ws.config.student_arch, seed);
  job.epochs = ws.config.student_epochs;
  job.seed = seed;
  job.on_epoch = std::move(on_epoch);
  return train(job, ws.train, ws.val, ws.config);
}

inline TeacherTargets teacher_targets(const DetectorParams& teacher, const PreparedSplit& split) {
  return {predict_split(teacher, split)};
}

/// Student trained with supervised losses plus distillation from a frozen
/// teacher. In self-KD mode the student takes the teacher's architecture and
/// starts from the teacher's weights; the configured student architecture must
/// then equal the teacher's.
inline TrainResult run_distill(const Workspace& ws, const DetectorParams& teacher,
                               const TeacherTargets& targets, const DistillConfig& distill,
                               std::uint64_t seed,
                               std::function<void(const EpochRecord&)> on_epoch = {}) {
  TrainJob job;
  if (distill.self_kd) {
    if (!(teacher.arch == ws.config.student_arch)) {
      throw ConfigError("self-KD needs the student architecture {" +
                        describe(ws.config.student_arch) + "} to equal the teacher's {" +
                        describe(teacher.arch) + "}");
    }
    job.mode = "self_kd";
    job.init = teacher;
  } else {
    if (!(teacher.arch.patch == ws.config.student_arch.patch &&
          teacher.arch.stride == ws.config.student_arch.stride &&
          teacher.arch.num_classes == ws.config.student_arch.num_classes)) {
      throw ConfigError("teacher patch/stride/K differ from the student's");
    }
    job.mode = "distill";
    job.init = init_params(ws.config.student_arch, seed);
  }
  job.epochs = ws.config.student_epochs;
  job.seed = seed;
  job.teacher = &targets;
  job.distill = distill;
  job.on_epoch = std::move(on_epoch);
  return train(job, ws.train, ws.val, ws.config);
}

// ---------------------------------------------------------------------------
// Inconsistency demonstration

struct InconsistencyReport {
  DemoReport demo;
  double bckd_loss = 0.0;
  Grid2 teacher_logits;
  std::vector<double> shift;
};

/// Teacher rows with per-row constant shifts applied to form the student.
/// The first row is the [2, 0] / shift -2 construction.
inline InconsistencyReport demo_inconsistency() {
  InconsistencyReport r;
  r.teacher_logits = Grid2{{2.0, 0.0}, {1.5, -1.0}, {-0.5, 3.0}, {0.0, 0.0}};
  r.shift = {-2.0, 1.0, -3.0, 0.5};
  r.demo = inconsistency_demo(r.teacher_logits, r.shift);
  Grid2 student = r.teacher_logits;
  for (std::size_t i = 0; i < student.rows(); ++i) {
    for (double& v : student.row(i)) v += r.shift[i];
  }
  r.bckd_loss = bc_distill_loss(student, r.teacher_logits).value;
  return r;
}

inline nlohmann::json to_json(const InconsistencyReport& r) {
  double total_gap = 0.0;
  for (double g : r.demo.sigmoid_l1_gap_per_row) total_gap += g;
  std::vector<std::vector<double>> teacher;
  for (std::size_t i = 0; i < r.teacher_logits.rows(); ++i) {
    auto row = r.teacher_logits.row(i);
    teacher.emplace_back(row.begin(), row.end());
  }
  return {{"teacher_logits", teacher},
          {"shift", r.shift},
          {"kl_loss", r.demo.kl_loss},
          {"sigmoid_l1_gap_per_row", r.demo.sigmoid_l1_gap_per_row},
          {"sigmoid_l1_gap", total_gap},
          {"argmax_preserved_per_row", r.demo.argmax_preserved_per_row},
          {"bckd_loss", r.bckd_loss}};
}

}  // namespace densekd
