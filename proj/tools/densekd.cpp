// Command-line driver for the dense-detector distillation experiments.
//
//   densekd gen-data            synthetic train/val datasets
//   densekd train-teacher       wide detector, supervised only
//   densekd train-student       narrow detector, supervised only
//   densekd distill             narrow detector plus distillation from a teacher checkpoint
//   densekd eval                EvalReport for a checkpoint on a dataset split
//   densekd demo-inconsistency  softmax vs sigmoid distillation on a shifted score map
//   densekd ablate              alpha1 x alpha2 grid of distillation runs
//   densekd score-gap           per-image teacher/student score-gap maps
//
// Outputs go under $DENSEKD_OUTPUT_ROOT when set, else under the config's
// output_dir.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "densekd/experiment.hpp"

namespace fs = std::filesystem;
using namespace densekd;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

fs::path output_root(const ExperimentConfig& cfg) {
  if (const char* env = std::getenv("DENSEKD_OUTPUT_ROOT"); env && *env) return env;
  return cfg.output_dir;
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << "\n";
  if (!out) throw IoError("short write to " + path.string());
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// Flags shared by every command that reads a config.
struct ConfigFlags {
  std::string config_path;
  std::optional<std::uint64_t> seed;

  void add(CLI::App* sub) {
    sub->add_option("--config", config_path, "experiment config JSON (fields missing keep defaults)");
    sub->add_option("--seed", seed, "run seed (weights init and batch order)");
  }

  ExperimentConfig load() const {
    ExperimentConfig cfg = config_path.empty() ? ExperimentConfig{} : load_config(config_path);
    if (seed) cfg.seed = *seed;
    return cfg;
  }
};

// Training commands read <data>/train and <data>/val.
Workspace load_workspace(const ExperimentConfig& cfg, const fs::path& data) {
  return Workspace::from_datasets(cfg, read_dataset(data / "train"), read_dataset(data / "val"));
}

void check_compatible(const Architecture& a, const SceneSpec& spec, const std::string& what) {
  if (a.stride != spec.stride || a.num_classes != spec.num_classes) {
    throw ArchitectureMismatch(what + " {" + describe(a) + "} does not fit the dataset (stride " +
                               std::to_string(spec.stride) + ", K " +
                               std::to_string(spec.num_classes) + ")");
  }
}

// Streams one JSON line per epoch and a short progress line to stderr.
class MetricsLog {
 public:
  MetricsLog(const fs::path& path, std::string command, const DistillConfig* distill, int epochs,
             std::uint64_t seed)
      : out_(path, std::ios::trunc),
        command_(std::move(command)),
        distill_(distill),
        epochs_(epochs),
        seed_(seed) {
    if (!out_) throw IoError("cannot write " + path.string());
  }

  void operator()(const EpochRecord& e) {
    nlohmann::json line = to_json(e);
    line["command"] = command_;
    line["seed"] = seed_;
    out_ << line.dump() << "\n";
    out_.flush();
    std::fprintf(stderr, "[%s] epoch %d/%d  loss %.4f", command_.c_str(), e.epoch, epochs_,
                 e.total(distill_));
    if (e.val) std::fprintf(stderr, "  val mAP %.4f", e.val->mAP);
    std::fprintf(stderr, "\n");
  }

 private:
  std::ofstream out_;
  std::string command_;
  const DistillConfig* distill_;
  int epochs_;
  std::uint64_t seed_;
};

// Writes checkpoint, run record and final report into `dir`.
void persist_run(const fs::path& dir, const TrainResult& r) {
  save_checkpoint(dir / "checkpoint.json", r.params,
                  {r.record.seed, static_cast<int>(r.record.epochs.size())});
  write_json(dir / "run.json", to_json(r.record));
  write_json(dir / "eval.json", to_json(r.record.final_report));
  std::printf("%s: mAP %.4f  AP50 %.4f  AP75 %.4f  (%.1f s)\n  -> %s\n", r.record.mode.c_str(),
              r.record.final_report.mAP, r.record.final_report.AP50, r.record.final_report.AP75,
              r.record.wall_seconds, dir.string().c_str());
}

fs::path prepare_run_dir(const std::string& out, const ExperimentConfig& cfg,
                         const std::string& default_name) {
  const fs::path dir = out.empty() ? output_root(cfg) / default_name : fs::path(out);
  fs::create_directories(dir);
  write_json(dir / "config.json", to_json(cfg));
  return dir;
}

std::vector<double> parse_grid(const std::string& s, const char* name) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(tok, &used));
      if (used != tok.size()) throw std::invalid_argument(tok);
    } catch (const std::exception&) {
      throw UsageError(std::string(name) + ": bad value '" + tok + "'");
    }
  }
  if (out.empty()) throw UsageError(std::string(name) + " must not be empty");
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

// ---------------------------------------------------------------------------

void cmd_gen_data(const ConfigFlags& cf, const std::string& out, std::optional<int> n_train,
                  std::optional<int> n_val, bool force) {
  ExperimentConfig cfg = cf.load();
  if (n_train) cfg.train_scenes = *n_train;
  if (n_val) cfg.val_scenes = *n_val;
  if (cfg.train_scenes < 1 || cfg.val_scenes < 1) {
    throw InvalidSpec("scene counts must be >= 1");
  }
  const fs::path dir = out.empty() ? output_root(cfg) / "data" : fs::path(out);
  if (fs::exists(dir) && !fs::is_empty(dir)) {
    if (!force) throw UsageError(dir.string() + " is not empty; pass --force to overwrite");
    fs::remove_all(dir / "train");
    fs::remove_all(dir / "val");
  }
  const Dataset train = generate_dataset(cfg.scene, cfg.train_seed, cfg.train_scenes);
  const Dataset val = generate_dataset(cfg.scene, cfg.val_seed, cfg.val_scenes);
  write_dataset(dir / "train", train);
  write_dataset(dir / "val", val);
  write_json(dir / "config.json", to_json(cfg));
  std::printf("wrote %d train + %d val scenes to %s\n", cfg.train_scenes, cfg.val_scenes,
              dir.string().c_str());
}

void cmd_train(const ConfigFlags& cf, const std::string& data, const std::string& out,
               std::optional<int> epochs, bool teacher) {
  ExperimentConfig cfg = cf.load();
  if (epochs) (teacher ? cfg.teacher_epochs : cfg.student_epochs) = *epochs;
  const Workspace ws = load_workspace(cfg, data);
  const std::string mode = teacher ? "teacher" : "student_baseline";
  const fs::path dir = prepare_run_dir(out, ws.config, mode + "_seed" + std::to_string(cfg.seed));
  MetricsLog log(dir / "metrics.jsonl", mode, nullptr,
                 teacher ? ws.config.teacher_epochs : ws.config.student_epochs, cfg.seed);
  const TrainResult r = teacher ? run_teacher(ws, cfg.seed, std::ref(log))
                                : run_student_baseline(ws, cfg.seed, std::ref(log));
  persist_run(dir, r);
}

struct DistillFlags {
  std::optional<double> alpha1, alpha2;
  bool cls_only = false, loc_only = false, self_kd = false;
  std::string normalization;

  void add(CLI::App* sub) {
    sub->add_option("--alpha1", alpha1, "classification distillation weight");
    sub->add_option("--alpha2", alpha2, "localization distillation weight");
    auto* c = sub->add_flag("--cls-only", cls_only, "drop the localization term");
    auto* l = sub->add_flag("--loc-only", loc_only, "drop the classification term");
    c->excludes(l);
    sub->add_flag("--self-kd", self_kd, "student takes the teacher's architecture and weights");
    sub->add_option("--normalization", normalization, "distillation loss normalization")
        ->check(CLI::IsMember({"mean", "sum"}));
  }

  void apply(ExperimentConfig& cfg) const {
    if (alpha1) cfg.distill.alpha1 = *alpha1;
    if (alpha2) cfg.distill.alpha2 = *alpha2;
    if (cls_only) cfg.distill.use_loc = false;
    if (loc_only) cfg.distill.use_cls = false;
    if (self_kd) cfg.distill.self_kd = true;
    if (!normalization.empty()) {
      cfg.distill.normalization = normalization == "sum" ? Normalization::sum : Normalization::mean;
    }
    if (cfg.distill.self_kd) cfg.student_arch = cfg.teacher_arch;
  }
};

void cmd_distill(const ConfigFlags& cf, const DistillFlags& df, const std::string& teacher_path,
                 const std::string& data, const std::string& out, std::optional<int> epochs) {
  ExperimentConfig cfg = cf.load();
  df.apply(cfg);
  if (epochs) cfg.student_epochs = *epochs;
  const Workspace ws = load_workspace(cfg, data);
  const DetectorParams teacher = load_checkpoint(teacher_path).params;
  check_compatible(teacher.arch, ws.config.scene, "teacher");
  const TeacherTargets targets = teacher_targets(teacher, ws.train);
  const std::string mode = cfg.distill.self_kd ? "self_kd" : "distill";
  const fs::path dir = prepare_run_dir(out, ws.config, mode + "_seed" + std::to_string(cfg.seed));
  MetricsLog log(dir / "metrics.jsonl", mode, &ws.config.distill,
                 ws.config.student_epochs, cfg.seed);
  const TrainResult r = run_distill(ws, teacher, targets, ws.config.distill, cfg.seed, std::ref(log));
  persist_run(dir, r);
}

void cmd_eval(const ConfigFlags& cf, const std::string& ckpt, const std::string& data,
              const std::string& out) {
  const ExperimentConfig cfg = cf.load();
  const DetectorParams p = load_checkpoint(ckpt).params;
  const Dataset ds = read_dataset(data);
  check_compatible(p.arch, ds.spec, "checkpoint");
  const PreparedSplit split = prepare_split(ds, p.arch.patch);
  const auto dets = detect_split(predict_split(p, split), split, cfg.eval);
  const EvalReport report = evaluate(dets, split.all_gts());
  const fs::path dir = out.empty() ? output_root(cfg) / "eval" : fs::path(out);
  write_json(dir / "eval.json", to_json(report));
  nlohmann::json dj = nlohmann::json::array();
  for (const auto& d : dets) dj.push_back(to_json(d));
  write_json(dir / "detections.json", dj);
  std::printf("mAP %.4f  AP50 %.4f  AP75 %.4f  cls_dAP %.4f  loc_dAP %.4f\n  -> %s\n", report.mAP,
              report.AP50, report.AP75, report.errors.cls_dAP, report.errors.loc_dAP,
              dir.string().c_str());
}

void cmd_demo(const std::string& out) {
  const InconsistencyReport r = demo_inconsistency();
  const nlohmann::json j = to_json(r);
  const fs::path path = out.empty() ? output_root(ExperimentConfig{}) / "demo_inconsistency.json"
                                    : fs::path(out);
  write_json(path, j);
  std::printf("%s\n", j.dump(2).c_str());
}

void cmd_ablate(const ConfigFlags& cf, const std::string& teacher_path, const std::string& data,
                const std::string& grid1, const std::string& grid2, const std::string& out) {
  ExperimentConfig cfg = cf.load();
  const auto a1s = parse_grid(grid1, "--alpha1-grid");
  const auto a2s = parse_grid(grid2, "--alpha2-grid");
  const Workspace ws = load_workspace(cfg, data);
  const DetectorParams teacher = load_checkpoint(teacher_path).params;
  check_compatible(teacher.arch, ws.config.scene, "teacher");
  const TeacherTargets targets = teacher_targets(teacher, ws.train);

  const fs::path csv = out.empty() ? output_root(cfg) / "ablation.csv" : fs::path(out);
  if (csv.has_parent_path()) fs::create_directories(csv.parent_path());
  write_json(csv.parent_path() / "ablation_config.json", to_json(ws.config));
  std::ofstream f(csv);
  if (!f) throw IoError("cannot write " + csv.string());
  f << "alpha1,alpha2,mAP,AP50,AP75\n";
  for (double a1 : a1s) {
    for (double a2 : a2s) {
      DistillConfig d = ws.config.distill;
      d.alpha1 = a1;
      d.alpha2 = a2;
      const EvalReport r = run_distill(ws, teacher, targets, d, cfg.seed).record.final_report;
      f << fmt(a1) << "," << fmt(a2) << "," << fmt(r.mAP) << "," << fmt(r.AP50) << ","
        << fmt(r.AP75) << "\n";
      f.flush();
      std::printf("alpha1 %-5g alpha2 %-5g  mAP %.4f  AP50 %.4f  AP75 %.4f\n", a1, a2, r.mAP,
                  r.AP50, r.AP75);
    }
  }
  std::printf("  -> %s\n", csv.string().c_str());
}

void cmd_score_gap(const ConfigFlags& cf, const std::string& teacher_path,
                   const std::vector<std::string>& students, const std::string& data,
                   const std::string& out) {
  const ExperimentConfig cfg = cf.load();
  const DetectorParams teacher = load_checkpoint(teacher_path).params;
  const Dataset ds = read_dataset(data);
  check_compatible(teacher.arch, ds.spec, "teacher");
  const PreparedSplit split = prepare_split(ds, teacher.arch.patch);
  const auto tp = predict_split(teacher, split);
  const fs::path dir = out.empty() ? output_root(cfg) / "score_gap" : fs::path(out);
  fs::create_directories(dir);

  nlohmann::json pairs = nlohmann::json::array();
  std::ofstream summary(dir / "summary.csv");
  if (!summary) throw IoError("cannot write " + (dir / "summary.csv").string());
  summary << "student,checkpoint,mean_gap\n";
  for (std::size_t s = 0; s < students.size(); ++s) {
    const DetectorParams student = load_checkpoint(students[s]).params;
    check_compatible(student.arch, ds.spec, "student");
    if (student.arch.patch != teacher.arch.patch) {
      throw ArchitectureMismatch("teacher and student patch sizes differ");
    }
    const auto sp = predict_split(student, split);
    const std::string label = "student_" + std::to_string(s);
    fs::create_directories(dir / label);
    double total = 0.0;
    std::size_t count = 0;
    std::vector<double> per_image;
    for (std::size_t i = 0; i < tp.size(); ++i) {
      const auto gap = score_gap_map(tp[i], sp[i]);
      write_grid_csv(dir / label / ("gap_" + std::to_string(i) + ".csv"), gap,
                     split.anchors.grid_rows(), split.anchors.grid_cols());
      double img = 0.0;
      for (double g : gap) img += g;
      per_image.push_back(img / static_cast<double>(gap.size()));
      total += img;
      count += gap.size();
    }
    const double mean = total / static_cast<double>(count);
    pairs.push_back({{"label", label},
                     {"teacher", teacher_path},
                     {"student", students[s]},
                     {"mean_gap", mean},
                     {"per_image_mean_gap", per_image}});
    summary << label << "," << students[s] << "," << fmt(mean) << "\n";
    std::printf("%s (%s): mean gap %.6f\n", label.c_str(), students[s].c_str(), mean);
  }
  write_json(dir / "summary.json", {{"pairs", pairs}});
  std::printf("  -> %s\n", dir.string().c_str());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dense-detector knowledge distillation on a synthetic benchmark"};
  app.require_subcommand(1);

  // gen-data
  ConfigFlags gen_cf;
  std::string gen_out;
  std::optional<int> gen_train, gen_val;
  bool gen_force = false;
  auto* gen = app.add_subcommand("gen-data", "generate train/val datasets");
  gen_cf.add(gen);
  gen->add_option("--out", gen_out, "dataset directory (default <root>/data)");
  gen->add_option("--train-scenes", gen_train, "number of training scenes");
  gen->add_option("--val-scenes", gen_val, "number of validation scenes");
  gen->add_flag("--force", gen_force, "replace an existing non-empty directory");

  // train-teacher / train-student
  ConfigFlags tt_cf, ts_cf;
  std::string tt_data, tt_out, ts_data, ts_out;
  std::optional<int> tt_epochs, ts_epochs;
  auto* tt = app.add_subcommand("train-teacher", "train the wide detector (supervised)");
  tt_cf.add(tt);
  tt->add_option("--data", tt_data, "dataset directory from gen-data")->required();
  tt->add_option("--out", tt_out, "run directory");
  tt->add_option("--epochs", tt_epochs, "override teacher_epochs");
  auto* ts = app.add_subcommand("train-student", "train the narrow detector (supervised)");
  ts_cf.add(ts);
  ts->add_option("--data", ts_data, "dataset directory from gen-data")->required();
  ts->add_option("--out", ts_out, "run directory");
  ts->add_option("--epochs", ts_epochs, "override student_epochs");

  // distill
  ConfigFlags di_cf;
  DistillFlags di_df;
  std::string di_teacher, di_data, di_out;
  std::optional<int> di_epochs;
  auto* di = app.add_subcommand("distill", "train a student with distillation from a teacher");
  di_cf.add(di);
  di_df.add(di);
  di->add_option("--teacher", di_teacher, "teacher checkpoint")->required();
  di->add_option("--data", di_data, "dataset directory from gen-data")->required();
  di->add_option("--out", di_out, "run directory");
  di->add_option("--epochs", di_epochs, "override student_epochs");

  // eval
  ConfigFlags ev_cf;
  std::string ev_ckpt, ev_data, ev_out;
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on one dataset split");
  ev_cf.add(ev);
  ev->add_option("--checkpoint", ev_ckpt, "checkpoint JSON")->required();
  ev->add_option("--data", ev_data, "split directory (holding annotations.json)")->required();
  ev->add_option("--out", ev_out, "output directory (default <root>/eval)");

  // demo-inconsistency
  std::string demo_out;
  auto* demo = app.add_subcommand("demo-inconsistency", "softmax KL vs sigmoid score gap demo");
  demo->add_option("--out", demo_out, "report path (default <root>/demo_inconsistency.json)");

  // ablate
  ConfigFlags ab_cf;
  std::string ab_teacher, ab_data, ab_out, ab_g1 = "0.5,1,2", ab_g2 = "2,4,8";
  auto* ab = app.add_subcommand("ablate", "distillation runs over an alpha1 x alpha2 grid");
  ab_cf.add(ab);
  ab->add_option("--teacher", ab_teacher, "teacher checkpoint")->required();
  ab->add_option("--data", ab_data, "dataset directory from gen-data")->required();
  ab->add_option("--alpha1-grid", ab_g1, "comma-separated alpha1 values")->capture_default_str();
  ab->add_option("--alpha2-grid", ab_g2, "comma-separated alpha2 values")->capture_default_str();
  ab->add_option("--out", ab_out, "CSV path (default <root>/ablation.csv)");

  // score-gap
  ConfigFlags sg_cf;
  std::string sg_teacher, sg_data, sg_out;
  std::vector<std::string> sg_students;
  auto* sg = app.add_subcommand("score-gap", "per-position teacher/student score gap maps");
  sg_cf.add(sg);
  sg->add_option("--teacher", sg_teacher, "teacher checkpoint")->required();
  sg->add_option("--student", sg_students, "student checkpoint (repeatable)")->required();
  sg->add_option("--data", sg_data, "split directory (holding annotations.json)")->required();
  sg->add_option("--out", sg_out, "output directory (default <root>/score_gap)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) cmd_gen_data(gen_cf, gen_out, gen_train, gen_val, gen_force);
    else if (*tt) cmd_train(tt_cf, tt_data, tt_out, tt_epochs, true);
    else if (*ts) cmd_train(ts_cf, ts_data, ts_out, ts_epochs, false);
    else if (*di) cmd_distill(di_cf, di_df, di_teacher, di_data, di_out, di_epochs);
    else if (*ev) cmd_eval(ev_cf, ev_ckpt, ev_data, ev_out);
    else if (*demo) cmd_demo(demo_out);
    else if (*ab) cmd_ablate(ab_cf, ab_teacher, ab_data, ab_g1, ab_g2, ab_out);
    else if (*sg) cmd_score_gap(sg_cf, sg_teacher, sg_students, sg_data, sg_out);
  } catch (const UsageError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
