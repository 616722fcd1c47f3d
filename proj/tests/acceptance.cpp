// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fails.
// Optional argv[1]: path for a JSON dump of every measured number.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ap_oracle.hpp"
#include "densekd/experiment.hpp"
#include "test_util.hpp"

using namespace densekd;
using densekd::testing::random_grid;
using Clock = std::chrono::steady_clock;

namespace {

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

double mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

struct Verdict {
  int id;
  std::string name;
  bool pass;
  std::string detail;
};

std::vector<Verdict> verdicts;
nlohmann::json dump = nlohmann::json::object();

void report(int id, const std::string& name, bool pass, const std::string& detail) {
  verdicts.push_back({id, name, pass, detail});
  std::printf("criterion %2d %s  %s: %s\n", id, pass ? "PASS" : "FAIL", name.c_str(),
              detail.c_str());
  std::fflush(stdout);
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

LabelMap random_labels(std::mt19937_64& rng, std::size_t n, std::size_t k) {
  LabelMap y(n, k);
  std::uniform_int_distribution<int> pick(-1, static_cast<int>(k) - 1);
  for (std::size_t i = 0; i < n; ++i) {
    const int c = pick(rng);
    if (c >= 0) y.set_positive(i, static_cast<std::size_t>(c));
  }
  return y;
}

// ---------------------------------------------------------------------------

void criterion1() {
  const auto t0 = Clock::now();
  const InconsistencyReport r = demo_inconsistency();
  const double secs = seconds_since(t0);
  double gap = 0.0;
  for (double g : r.demo.sigmoid_l1_gap_per_row) gap += g;
  const double row0 = r.demo.sigmoid_l1_gap_per_row.at(0);
  dump["c1"] = to_json(r);
  const bool pass = r.demo.kl_loss <= 1e-9 && row0 >= 0.3 && r.bckd_loss > 0.0 && secs < 1.0;
  report(1, "cross-task inconsistency", pass,
         fmt("kl=%.3g  sigmoid_gap[row0]=%.6f  sigmoid_gap[sum]=%.6f  bckd=%.6f  %.4fs", r.demo.kl_loss,
             row0, gap, r.bckd_loss, secs));
}

// Runs `check` for `count` instances; returns the worst relative error.
double worst_over(int count, const std::function<double(int)>& check) {
  double worst = 0.0;
  for (int t = 0; t < count; ++t) worst = std::max(worst, check(t));
  return worst;
}

void criterion2() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(20240602);
  const int n = 100;
  const AnchorGrid g = build_anchor_grid(16, 16, 8);

  const double sup_bce = worst_over(n, [&](int) {
    const Grid2 l = random_grid(rng, 6, 3, -4, 4);
    const LabelMap y = random_labels(rng, 6, 3);
    return compare_gradients(*supervised_cls_loss(l, y, 0.0).grad_logits,
                             finite_diff_grad([&](const Grid2& x) { return supervised_cls_loss(x, y, 0.0).value; }, l),
                             1e-4)
        .max_rel_err;
  });
  const double sup_focal = worst_over(n, [&](int) {
    const Grid2 l = random_grid(rng, 6, 3, -4, 4);
    const LabelMap y = random_labels(rng, 6, 3);
    Grid2 factor(6, 3);
    for (std::size_t i = 0; i < l.size(); ++i) {
      factor.values()[i] = std::pow(std::abs(y.grid().values()[i] - stable_sigmoid(l.values()[i])), 2.0);
    }
    const double norm = std::max<double>(1.0, static_cast<double>(y.positive_rows()));
    auto frozen = [&](const Grid2& x) {
      double s = 0;
      for (std::size_t i = 0; i < x.size(); ++i) {
        const double yv = y.grid().values()[i], v = x.values()[i];
        s += factor.values()[i] * -(yv * stable_log_sigmoid(v) + (1 - yv) * stable_log_sigmoid(-v));
      }
      return s / norm;
    };
    return compare_gradients(*supervised_cls_loss(l, y, 2.0).grad_logits, finite_diff_grad(frozen, l), 1e-4)
        .max_rel_err;
  });
  const double kl = worst_over(n, [&](int) {
    const Grid2 s = random_grid(rng, 5, 3, -4, 4);
    const Grid2 te = random_grid(rng, 5, 3, -4, 4);
    return compare_gradients(*kl_distill_loss(s, te).grad_logits,
                             finite_diff_grad([&](const Grid2& x) { return kl_distill_loss(x, te).value; }, s),
                             1e-4)
        .max_rel_err;
  });
  const double bckd = worst_over(n, [&](int) {
    const Grid2 s = random_grid(rng, 5, 3, -4, 4);
    const Grid2 te = random_grid(rng, 5, 3, -4, 4);
    const WeightMap w = build_weight_map(sigmoid_protocol(te), sigmoid_protocol(s));
    return compare_gradients(
               *bc_distill_loss(s, te).grad_logits,
               finite_diff_grad([&](const Grid2& x) { return weighted_bce_distill(x, te, w).value; }, s), 1e-4)
        .max_rel_err;
  });
  const double iou_kd = worst_over(n, [&](int) {
    const Grid2 s = random_grid(rng, g.size(), 4, -1, 1);
    const Grid2 te = random_grid(rng, g.size(), 4, -1, 1);
    const WeightMap w = WeightMap::from_values(random_grid(rng, g.size(), 3, 0, 1));
    return compare_gradients(
               *iou_distill_loss(s, te, g, w).grad_offsets,
               finite_diff_grad([&](const Grid2& x) { return iou_distill_loss(x, te, g, w).value; }, s), 1e-4)
        .max_rel_err;
  });

  // End to end: supervised BCE plus the frozen-weight distillation terms,
  // backpropagated through the detector, against perturbations of its weights.
  const Architecture arch{8, 8, {8}, 2};
  std::uniform_int_distribution<int> px(0, 255);
  int e2e_instances = 0;
  double e2e = 0.0;
  for (int trial = 0; e2e_instances < n && trial < 4 * n; ++trial) {
    DetectorParams p = init_params(arch, 1000 + trial);
    Image img(16, 16);
    for (auto& v : img.rgb) v = static_cast<std::uint8_t>(px(rng));
    const auto patches = std::make_shared<const Matrix>(extract_patches(img, g, arch.patch));
    Matrix pre = (*patches) * p.trunk[0].weight.transpose();
    pre.rowwise() += p.trunk[0].bias.transpose();
    if (pre.cwiseAbs().minCoeff() < 1e-4) continue;  // too close to a ReLU kink
    const LabelMap y = random_labels(rng, g.size(), 2);
    const Prediction teacher{random_grid(rng, g.size(), 2, -3, 3), random_grid(rng, g.size(), 4, -1, 1)};
    const Prediction at = forward_patches(p, patches);
    const WeightMap w = build_weight_map(sigmoid_protocol(teacher.logits), sigmoid_protocol(at.logits));
    auto objective = [&](const Prediction& q) {
      return supervised_cls_loss(q.logits, y, 0.0).value +
             weighted_bce_distill(q.logits, teacher.logits, w).value +
             4.0 * iou_distill_loss(q.offsets, teacher.offsets, g, w).value;
    };
    ForwardCache cache;
    const Prediction q = forward_patches(p, patches, &cache);
    Grid2 gl = *supervised_cls_loss(q.logits, y, 0.0).grad_logits;
    gl += *weighted_bce_distill(q.logits, teacher.logits, w).grad_logits;
    Grid2 go = *iou_distill_loss(q.offsets, teacher.offsets, g, w).grad_offsets;
    go *= 4.0;
    DetectorParams grads = backward(p, cache, gl, go);

    // Every tensor of the network, one random coordinate each.
    std::vector<std::pair<double*, double>> probes;
    auto collect = [&](Eigen::Ref<Matrix> pt, Eigen::Ref<Matrix> gt) {
      std::uniform_int_distribution<Eigen::Index> pick(0, pt.size() - 1);
      const Eigen::Index k = pick(rng);
      probes.push_back({pt.data() + k, gt.data()[k]});
    };
    auto collect_v = [&](Vector& pt, const Vector& gt) {
      std::uniform_int_distribution<Eigen::Index> pick(0, pt.size() - 1);
      const Eigen::Index k = pick(rng);
      probes.push_back({pt.data() + k, gt[k]});
    };
    collect(p.trunk[0].weight, grads.trunk[0].weight);
    collect_v(p.trunk[0].bias, grads.trunk[0].bias);
    collect(p.cls_head.weight, grads.cls_head.weight);
    collect_v(p.cls_head.bias, grads.cls_head.bias);
    collect(p.loc_head.weight, grads.loc_head.weight);
    collect_v(p.loc_head.bias, grads.loc_head.bias);
    const double h = 1e-6;
    for (auto& [ptr, analytic] : probes) {
      const double x0 = *ptr;
      *ptr = x0 + h;
      const double fp = objective(forward_patches(p, patches));
      *ptr = x0 - h;
      const double fm = objective(forward_patches(p, patches));
      *ptr = x0;
      const double numeric = (fp - fm) / (2 * h);
      e2e = std::max(e2e, std::abs(analytic - numeric) /
                              std::max({std::abs(analytic), std::abs(numeric), 1e-6}));
    }
    ++e2e_instances;
  }
  const double secs = seconds_since(t0);
  dump["c2"] = {{"instances", n},         {"sup_bce", sup_bce}, {"sup_focal_frozen", sup_focal},
                {"kl", kl},               {"bckd", bckd},       {"iou_distill", iou_kd},
                {"e2e_instances", e2e_instances}, {"e2e", e2e}, {"seconds", secs}};
  const bool pass = std::max({sup_bce, sup_focal, kl, bckd, iou_kd}) <= 1e-4 && e2e <= 1e-3 &&
                    e2e_instances >= n && secs < 30.0;
  report(2, "gradient correctness", pass,
         fmt("max rel err: sup %.2e focal %.2e kl %.2e bckd %.2e iou %.2e (x%d each), e2e %.2e (x%d)  %.2fs",
             sup_bce, sup_focal, kl, bckd, iou_kd, n, e2e, e2e_instances, secs));
}

void criterion3() {
  std::mt19937_64 rng(77);
  const AnchorGrid g = build_anchor_grid(32, 32, 8);
  bool bc_zero = true, iou_zero = true, bc_pos = true;
  double kl_worst = 0.0, bc_min = INFINITY;
  for (int t = 0; t < 1000; ++t) {
    const Grid2 l = random_grid(rng, g.size(), 3, -6, 6);
    bc_zero &= bc_distill_loss(l, l).value == 0.0;
    const Grid2 o = random_grid(rng, g.size(), 4, -2, 2);
    const WeightMap w = WeightMap::from_values(random_grid(rng, g.size(), 3, 0, 1));
    iou_zero &= iou_distill_loss(o, o, g, w).value == 0.0;

    // One random shift per trial, magnitude in [0.01, 5], random sign.
    const double mag = t == 0 ? 0.01 : std::uniform_real_distribution<double>(0.01, 5.0)(rng);
    const double c = (rng() & 1) ? mag : -mag;
    Grid2 shifted = l;
    for (double& v : shifted.values()) v += c;
    kl_worst = std::max(kl_worst, kl_distill_loss(shifted, l).value);
    const double b = bc_distill_loss(shifted, l).value;
    bc_min = std::min(bc_min, b);
    bc_pos &= b > 0.0;
  }
  dump["c3"] = {{"bc_self_zero", bc_zero}, {"iou_self_zero", iou_zero}, {"kl_shift_max", kl_worst},
                {"bc_shift_min", bc_min}};
  const bool pass = bc_zero && iou_zero && kl_worst <= 1e-12 && bc_pos;
  report(3, "loss identities", pass,
         fmt("bc(l,l)==0 %s, iou(o,o)==0 %s, max KL under shift %.2e, min BCKD under |c|>=0.01 %.3e (1000 trials)",
             bc_zero ? "yes" : "no", iou_zero ? "yes" : "no", kl_worst, bc_min));
}

// ---------------------------------------------------------------------------
// Benchmark runs shared by criteria 4 to 9.

struct SeedRuns {
  EvalReport teacher, baseline, distill, cls_only, loc_only, self_kd;
  double gap_baseline = 0.0, gap_distill = 0.0;
  double seconds_c4 = 0.0;
  DetectorParams teacher_params;
  TeacherTargets targets;
};

double mean_gap(const std::vector<Prediction>& t, const std::vector<Prediction>& s) {
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < t.size(); ++i) {
    for (double v : score_gap_map(t[i], s[i])) {
      total += v;
      ++count;
    }
  }
  return total / static_cast<double>(count);
}

nlohmann::json brief(const EvalReport& r) {
  return {{"mAP", r.mAP}, {"AP50", r.AP50}, {"AP75", r.AP75},
          {"cls_dAP", r.errors.cls_dAP}, {"loc_dAP", r.errors.loc_dAP}};
}

SeedRuns run_seed(const Workspace& ws, const Workspace& ws_self, std::uint64_t seed) {
  SeedRuns r;
  const auto t0 = Clock::now();
  const TrainResult teacher = run_teacher(ws, seed);
  r.teacher_params = teacher.params;
  r.targets = teacher_targets(teacher.params, ws.train);
  const TrainResult base = run_student_baseline(ws, seed);
  const TrainResult dist = run_distill(ws, teacher.params, r.targets, ws.config.distill, seed);
  r.seconds_c4 = seconds_since(t0);
  r.teacher = teacher.record.final_report;
  r.baseline = base.record.final_report;
  r.distill = dist.record.final_report;

  DistillConfig cls_only = ws.config.distill;
  cls_only.use_loc = false;
  DistillConfig loc_only = ws.config.distill;
  loc_only.use_cls = false;
  r.cls_only = run_distill(ws, teacher.params, r.targets, cls_only, seed).record.final_report;
  r.loc_only = run_distill(ws, teacher.params, r.targets, loc_only, seed).record.final_report;

  DistillConfig self = ws.config.distill;
  self.self_kd = true;
  r.self_kd = run_distill(ws_self, teacher.params, r.targets, self, seed).record.final_report;

  const auto tv = predict_split(teacher.params, ws.val);
  r.gap_baseline = mean_gap(tv, predict_split(base.params, ws.val));
  r.gap_distill = mean_gap(tv, predict_split(dist.params, ws.val));
  std::printf("# seed %llu: teacher %.4f  baseline %.4f  distill %.4f  cls-only %.4f  loc-only %.4f  "
              "self-kd %.4f  gap base %.5f dist %.5f\n",
              static_cast<unsigned long long>(seed), r.teacher.mAP, r.baseline.mAP, r.distill.mAP,
              r.cls_only.mAP, r.loc_only.mAP, r.self_kd.mAP, r.gap_baseline, r.gap_distill);
  std::fflush(stdout);
  return r;
}

void benchmark_criteria() {
  const ExperimentConfig cfg;
  const Workspace ws = Workspace::generate(cfg);
  Workspace ws_self = ws;
  ws_self.config.student_arch = cfg.teacher_arch;

  const int seeds = 5;
  std::vector<SeedRuns> runs;
  for (int s = 0; s < seeds; ++s) runs.push_back(run_seed(ws, ws_self, static_cast<std::uint64_t>(s)));

  auto collect = [&](auto field) {
    std::vector<double> v;
    for (const auto& r : runs) v.push_back(field(r));
    return v;
  };
  auto pts = [](double x) { return 100.0 * x; };
  const double teacher = pts(mean(collect([](const SeedRuns& r) { return r.teacher.mAP; })));
  const double base = pts(mean(collect([](const SeedRuns& r) { return r.baseline.mAP; })));
  const double dist = pts(mean(collect([](const SeedRuns& r) { return r.distill.mAP; })));
  const double c4_secs = mean(collect([](const SeedRuns& r) { return r.seconds_c4; })) * seeds;

  nlohmann::json per_seed = nlohmann::json::array();
  for (const auto& r : runs) {
    per_seed.push_back({{"teacher", brief(r.teacher)},   {"baseline", brief(r.baseline)},
                        {"distill", brief(r.distill)},   {"cls_only", brief(r.cls_only)},
                        {"loc_only", brief(r.loc_only)}, {"self_kd", brief(r.self_kd)},
                        {"gap_baseline", r.gap_baseline}, {"gap_distill", r.gap_distill}});
  }
  dump["per_seed"] = per_seed;

  // 4
  {
    const double gain = dist - base;
    const bool pass = gain >= 1.0 && teacher >= dist - 0.5 && c4_secs < 900.0;
    report(4, "distillation gain", pass,
           fmt("5-seed mean mAP: teacher %.2f, baseline %.2f, distill %.2f (gain %+.2f, need >= +1.00); "
               "teacher - distill %+.2f (need >= -0.50); %.0fs",
               teacher, base, dist, gain, teacher - dist, c4_secs));
  }
  // 5
  {
    auto m = [&](auto f) { return pts(mean(collect(f))); };
    const double b50 = m([](const SeedRuns& r) { return r.baseline.AP50; });
    const double b75 = m([](const SeedRuns& r) { return r.baseline.AP75; });
    const double c = m([](const SeedRuns& r) { return r.cls_only.mAP; }) - base;
    const double c50 = m([](const SeedRuns& r) { return r.cls_only.AP50; }) - b50;
    const double c75 = m([](const SeedRuns& r) { return r.cls_only.AP75; }) - b75;
    const double l = m([](const SeedRuns& r) { return r.loc_only.mAP; }) - base;
    const double l50 = m([](const SeedRuns& r) { return r.loc_only.AP50; }) - b50;
    const double l75 = m([](const SeedRuns& r) { return r.loc_only.AP75; }) - b75;
    dump["c5"] = {{"cls_only", {{"dmAP", c}, {"dAP50", c50}, {"dAP75", c75}}},
                  {"loc_only", {{"dmAP", l}, {"dAP50", l50}, {"dAP75", l75}}}};
    const bool pass = c >= 0.3 && l >= 0.3 && c50 > c75 && l75 > l50;
    report(5, "component ablation", pass,
           fmt("cls-only dmAP %+.2f (dAP50 %+.2f, dAP75 %+.2f); loc-only dmAP %+.2f (dAP50 %+.2f, dAP75 %+.2f); "
               "need both dmAP >= +0.30, cls dAP50 > dAP75, loc dAP75 > dAP50",
               c, c50, c75, l, l50, l75));
  }
  // 7: the same-architecture reference without distillation is the teacher run itself.
  {
    const double self = pts(mean(collect([](const SeedRuns& r) { return r.self_kd.mAP; })));
    const bool pass = self >= teacher - 0.2;
    dump["c7"] = {{"self_kd_mean", self}, {"same_arch_baseline_mean", teacher}};
    report(7, "self-KD non-degradation", pass,
           fmt("5-seed mean mAP: self-KD %.2f vs same-architecture baseline %.2f (diff %+.2f, need >= -0.20)",
               self, teacher, self - teacher));
  }
  // 8
  {
    int wins = 0;
    for (const auto& r : runs) wins += r.gap_distill < r.gap_baseline;
    const double gb = mean(collect([](const SeedRuns& r) { return r.gap_baseline; }));
    const double gd = mean(collect([](const SeedRuns& r) { return r.gap_distill; }));
    dump["c8"] = {{"wins", wins}, {"mean_gap_baseline", gb}, {"mean_gap_distill", gd}};
    report(8, "score-gap reduction", wins >= 4,
           fmt("distilled gap < baseline gap in %d/5 seeds (need >= 4); mean gap %.5f vs %.5f", wins, gd, gb));
  }
  // 9
  {
    auto m = [&](auto f) { return pts(mean(collect(f))); };
    const double bc = m([](const SeedRuns& r) { return r.baseline.errors.cls_dAP; });
    const double bl = m([](const SeedRuns& r) { return r.baseline.errors.loc_dAP; });
    const double cc = m([](const SeedRuns& r) { return r.cls_only.errors.cls_dAP; });
    const double ll = m([](const SeedRuns& r) { return r.loc_only.errors.loc_dAP; });
    dump["c9"] = {{"baseline_cls_dAP", bc}, {"cls_only_cls_dAP", cc}, {"baseline_loc_dAP", bl},
                  {"loc_only_loc_dAP", ll}};
    report(9, "error decomposition", cc < bc && ll < bl,
           fmt("cls_dAP baseline %.3f -> cls-only %.3f; loc_dAP baseline %.3f -> loc-only %.3f", bc, cc, bl, ll));
  }
  // 6: alpha grid at seed 0, against the seed-0 baseline.
  {
    const SeedRuns& r0 = runs.front();
    const double base0 = pts(r0.baseline.mAP);
    std::vector<std::array<double, 3>> grid;
    for (double a1 : {0.5, 1.0, 2.0}) {
      for (double a2 : {2.0, 4.0, 8.0}) {
        DistillConfig d = ws.config.distill;
        d.alpha1 = a1;
        d.alpha2 = a2;
        const double m = pts(run_distill(ws, r0.teacher_params, r0.targets, d, 0).record.final_report.mAP);
        grid.push_back({a1, a2, m});
        std::printf("# grid alpha1=%.1f alpha2=%.1f mAP %.2f\n", a1, a2, m);
      }
    }
    double hi = -INFINITY, lo = INFINITY;
    for (const auto& g : grid) hi = std::max(hi, g[2]), lo = std::min(lo, g[2]);
    dump["c6"] = {{"grid", grid}, {"baseline_seed0", base0}};
    const bool pass = hi - lo <= 1.5 && lo > base0;
    report(6, "alpha insensitivity", pass,
           fmt("grid mAP range [%.2f, %.2f] (spread %.2f, need <= 1.50); seed-0 baseline %.2f (need all above)",
               lo, hi, hi - lo, base0));
  }
}

// ---------------------------------------------------------------------------

void criterion10() {
  std::size_t cases = 0, mismatches = 0;
  densekd::testing::enumerate_oracle_cases([&](const densekd::testing::OracleCase& c) {
    ++cases;
    mismatches += average_precision(c.dets, c.gts, c.thresh) !=
                  densekd::testing::oracle_ap(c.dets, c.gts, c.thresh);
  });
  const double seventh = std::abs(iou(Box{0, 0, 6, 6}, Box{3, 3, 9, 9}) - 1.0 / 7.0);

  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "densekd_acceptance_roundtrip";
  fs::remove_all(dir);
  fs::create_directories(dir);
  SceneSpec spec;
  const Dataset ds = generate_dataset(spec, 4242, 6);
  write_dataset(dir / "ds", ds);
  const Dataset back = read_dataset(dir / "ds");
  bool ppm_ok = back.scenes.size() == ds.scenes.size(), json_ok = back.spec == ds.spec;
  for (std::size_t i = 0; i < ds.scenes.size() && ppm_ok; ++i) {
    ppm_ok &= back.scenes[i].image == ds.scenes[i].image;
    json_ok &= back.scenes[i].objects == ds.scenes[i].objects;
  }
  const ExperimentConfig cfg;
  json_ok &= to_json(config_from_json(to_json(cfg))) == to_json(cfg);
  const DetectorParams p = init_params(cfg.teacher_arch, 99);
  save_checkpoint(dir / "ck.json", p, {99, 3});
  const LoadedCheckpoint ck = load_checkpoint(dir / "ck.json", &cfg.teacher_arch);
  const bool ck_ok = ck.params == p && ck.meta.rng_seed == 99 && ck.meta.epoch == 3;
  fs::remove_all(dir);

  dump["c10"] = {{"cases", cases}, {"mismatches", mismatches}, {"iou_seventh_err", seventh},
                 {"ppm", ppm_ok}, {"json", json_ok}, {"checkpoint", ck_ok}};
  const bool pass = cases > 0 && mismatches == 0 && seventh <= 1e-12 && ppm_ok && json_ok && ck_ok;
  report(10, "oracle equivalence", pass,
         fmt("AP vs oracle: %zu/%zu cases exact; |iou - 1/7| = %.1e; round-trips ppm %s json %s checkpoint %s",
             cases - mismatches, cases, seventh, ppm_ok ? "ok" : "BAD", json_ok ? "ok" : "BAD",
             ck_ok ? "ok" : "BAD"));
}

}  // namespace

int main(int argc, char** argv) {
  const auto t0 = Clock::now();
  criterion1();
  criterion2();
  criterion3();
  benchmark_criteria();
  criterion10();

  std::sort(verdicts.begin(), verdicts.end(), [](const Verdict& a, const Verdict& b) { return a.id < b.id; });
  int failed = 0;
  nlohmann::json results = nlohmann::json::array();
  for (const auto& v : verdicts) {
    failed += !v.pass;
    results.push_back({{"id", v.id}, {"name", v.name}, {"pass", v.pass}, {"detail", v.detail}});
  }
  dump["verdicts"] = results;
  if (argc > 1) std::ofstream(argv[1]) << dump.dump(2) << "\n";
  std::printf("%d/%zu criteria passed in %.0fs\n", static_cast<int>(verdicts.size()) - failed,
              verdicts.size(), seconds_since(t0));
  return failed == 0 ? 0 : 1;
}
