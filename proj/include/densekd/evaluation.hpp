#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "densekd/geometry.hpp"
#include "densekd/image.hpp"
#include "densekd/prediction.hpp"
#include "densekd/protocols.hpp"

namespace densekd {

/// Raised when AP is requested for an empty set of ground-truth boxes.
class UndefinedAp : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Detection {
  Box box;
  int class_id = 0;
  double score = 0.0;
  std::size_t image = 0;
};

struct GroundTruth {
  int class_id = 0;
  Box box;
  std::size_t image = 0;
};

struct EvalThresholds {
  double score_thresh = 0.05;
  double nms_iou = 0.6;
};

/// Greedy NMS over one class, input already sorted by descending score.
inline std::vector<Detection> nms_sorted(const std::vector<Detection>& sorted, double nms_iou) {
  std::vector<Detection> kept;
  for (const auto& d : sorted) {
    const bool suppressed = std::any_of(kept.begin(), kept.end(), [&](const Detection& k) {
      return iou(k.box, d.box) > nms_iou;
    });
    if (!suppressed) kept.push_back(d);
  }
  return kept;
}

/// Score threshold, decode, clip to the image, per-class greedy NMS.
/// Output is grouped by class, each group in descending score.
inline std::vector<Detection> postprocess(const Prediction& pred, const AnchorGrid& anchors,
                                          double score_thresh, double nms_iou,
                                          std::size_t image_index = 0) {
  if (!(score_thresh > 0.0 && score_thresh < 1.0) || !(nms_iou > 0.0 && nms_iou < 1.0)) {
    throw InvalidInput("postprocess: thresholds must lie in (0, 1)");
  }
  const ScoreMap scores = sigmoid_protocol(pred.logits);
  const std::vector<Box> boxes = decode_boxes(anchors, pred.offsets);
  std::vector<Detection> out;
  for (std::size_t j = 0; j < scores.cols(); ++j) {
    std::vector<std::pair<double, std::size_t>> cand;
    for (std::size_t i = 0; i < scores.rows(); ++i) {
      if (scores(i, j) >= score_thresh) cand.emplace_back(scores(i, j), i);
    }
    std::stable_sort(cand.begin(), cand.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });
    std::vector<Detection> sorted;
    for (const auto& [s, i] : cand) {
      sorted.push_back({clip_box(boxes[i], anchors.image_w, anchors.image_h),
                        static_cast<int>(j), s, image_index});
    }
    for (auto& d : nms_sorted(sorted, nms_iou)) out.push_back(d);
  }
  return out;
}

namespace detail {

struct ClassMatch {
  std::vector<std::size_t> order;  // detection indices, descending score
  std::vector<int> matched_gt;     // per entry of `order`: gt index or -1
  std::size_t num_gt = 0;
};

// GT indices grouped by image.
inline std::map<std::size_t, std::vector<std::size_t>> gts_by_image(
    const std::vector<GroundTruth>& gts) {
  std::map<std::size_t, std::vector<std::size_t>> out;
  for (std::size_t g = 0; g < gts.size(); ++g) out[gts[g].image].push_back(g);
  return out;
}

// Greedy matching of one class: each detection, best score first, takes the
// unmatched same-image GT of highest IoU if that IoU reaches the threshold.
inline ClassMatch match_class(const std::vector<Detection>& dets,
                              const std::vector<GroundTruth>& gts, int cls, double thresh) {
  ClassMatch m;
  for (std::size_t i = 0; i < dets.size(); ++i) {
    if (dets[i].class_id == cls) m.order.push_back(i);
  }
  std::stable_sort(m.order.begin(), m.order.end(), [&](std::size_t a, std::size_t b) {
    return dets[a].score > dets[b].score;
  });
  std::map<std::size_t, std::vector<std::size_t>> by_image;
  for (std::size_t g = 0; g < gts.size(); ++g) {
    if (gts[g].class_id == cls) by_image[gts[g].image].push_back(g);
  }
  m.num_gt = 0;
  for (const auto& [img, list] : by_image) m.num_gt += list.size();
  std::vector<bool> taken(gts.size(), false);
  static const std::vector<std::size_t> none;
  for (std::size_t di : m.order) {
    auto it = by_image.find(dets[di].image);
    const auto& candidates = it == by_image.end() ? none : it->second;
    int best = -1;
    double best_iou = -1.0;
    for (std::size_t gi : candidates) {
      if (taken[gi]) continue;
      const double u = iou(dets[di].box, gts[gi].box);
      if (u > best_iou) {
        best_iou = u;
        best = static_cast<int>(gi);
      }
    }
    if (best_iou < thresh) best = -1;
    if (best >= 0) taken[static_cast<std::size_t>(best)] = true;
    m.matched_gt.push_back(best);
  }
  return m;
}

inline double interpolated_ap(const ClassMatch& m) {
  if (m.num_gt == 0) return 0.0;
  std::vector<double> recall, precision;
  std::size_t tp = 0;
  for (std::size_t k = 0; k < m.matched_gt.size(); ++k) {
    tp += m.matched_gt[k] >= 0;
    recall.push_back(static_cast<double>(tp) / static_cast<double>(m.num_gt));
    precision.push_back(static_cast<double>(tp) / static_cast<double>(k + 1));
  }
  // Precision envelope: running max from the right.
  for (std::size_t k = precision.size(); k-- > 1;) {
    precision[k - 1] = std::max(precision[k - 1], precision[k]);
  }
  double sum = 0.0;
  std::size_t k = 0;
  for (int r = 0; r <= 100; ++r) {
    const double level = r / 100.0;
    while (k < recall.size() && recall[k] < level - 1e-12) ++k;
    if (k < recall.size()) sum += precision[k];
  }
  return sum / 101.0;
}

inline std::set<int> gt_classes(const std::vector<GroundTruth>& gts) {
  std::set<int> classes;
  for (const auto& g : gts) classes.insert(g.class_id);
  return classes;
}

}  // namespace detail

/// 101-point interpolated AP per class present in `gts`.
inline std::map<int, double> per_class_ap(const std::vector<Detection>& dets,
                                          const std::vector<GroundTruth>& gts, double iou_thresh) {
  if (gts.empty()) throw UndefinedAp("average_precision: no ground-truth boxes");
  std::map<int, double> out;
  for (int c : detail::gt_classes(gts)) {
    out[c] = detail::interpolated_ap(detail::match_class(dets, gts, c, iou_thresh));
  }
  return out;
}

/// AP pooled over all images, averaged over the classes present in `gts`.
inline double average_precision(const std::vector<Detection>& dets,
                                const std::vector<GroundTruth>& gts, double iou_thresh) {
  const auto per_class = per_class_ap(dets, gts, iou_thresh);
  double sum = 0.0;
  for (const auto& [c, ap] : per_class) sum += ap;
  return sum / static_cast<double>(per_class.size());
}

struct ErrorDecomposition {
  double cls_dAP = 0.0;
  double loc_dAP = 0.0;
};

/// Two-type error analysis. A false positive (at fg_iou) is a Cls error when
/// it overlaps a GT of another class by at least fg_iou, otherwise a Loc error
/// when its best same-class overlap lies in [bg_iou, fg_iou). Fixing an error
/// means relabeling (Cls) or snapping the box onto that GT (Loc); a fix that
/// would duplicate an already-covered GT removes the detection instead.
/// dAP is the AP gain at fg_iou from fixing all errors of one type.
inline ErrorDecomposition error_decomposition(const std::vector<Detection>& dets,
                                              const std::vector<GroundTruth>& gts,
                                              double fg_iou = 0.5, double bg_iou = 0.1) {
  if (!(0.0 < bg_iou && bg_iou < fg_iou && fg_iou < 1.0)) {
    throw InvalidInput("error_decomposition: need 0 < bg_iou < fg_iou < 1");
  }
  ErrorDecomposition out;
  if (gts.empty()) return out;
  const double base = average_precision(dets, gts, fg_iou);

  // Base matching: which detections are false positives, which GTs are covered.
  std::vector<bool> is_fp(dets.size(), false);
  std::vector<bool> gt_covered(gts.size(), false);
  std::set<int> classes = detail::gt_classes(gts);
  for (const auto& d : dets) classes.insert(d.class_id);
  for (int c : classes) {
    const auto m = detail::match_class(dets, gts, c, fg_iou);
    for (std::size_t k = 0; k < m.order.size(); ++k) {
      if (m.matched_gt[k] >= 0) {
        gt_covered[static_cast<std::size_t>(m.matched_gt[k])] = true;
      } else {
        is_fp[m.order[k]] = true;
      }
    }
  }

  enum class Kind { none, cls, loc };
  std::vector<Kind> kind(dets.size(), Kind::none);
  std::vector<std::size_t> target(dets.size(), 0);
  const auto by_image = detail::gts_by_image(gts);
  for (std::size_t i = 0; i < dets.size(); ++i) {
    if (!is_fp[i]) continue;
    const auto it = by_image.find(dets[i].image);
    if (it == by_image.end()) continue;
    double best_other = -1.0, best_same = -1.0;
    std::size_t other_gt = 0, same_gt = 0;
    for (std::size_t g : it->second) {
      const double u = iou(dets[i].box, gts[g].box);
      if (gts[g].class_id == dets[i].class_id) {
        if (u > best_same) best_same = u, same_gt = g;
      } else if (u > best_other) {
        best_other = u, other_gt = g;
      }
    }
    if (best_other >= fg_iou) {
      kind[i] = Kind::cls;
      target[i] = other_gt;
    } else if (best_same >= bg_iou && best_same < fg_iou) {
      kind[i] = Kind::loc;
      target[i] = same_gt;
    }
  }

  std::vector<std::size_t> by_score(dets.size());
  std::iota(by_score.begin(), by_score.end(), std::size_t{0});
  std::stable_sort(by_score.begin(), by_score.end(),
                   [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });

  auto fixed_ap = [&](Kind which) {
    std::vector<bool> claimed = gt_covered;
    std::vector<Detection> fixed;
    for (std::size_t i : by_score) {
      Detection d = dets[i];
      if (kind[i] == which) {
        if (claimed[target[i]]) continue;
        claimed[target[i]] = true;
        if (which == Kind::cls) {
          d.class_id = gts[target[i]].class_id;
        } else {
          d.box = gts[target[i]].box;
        }
      }
      fixed.push_back(d);
    }
    return average_precision(fixed, gts, fg_iou);
  };
  out.cls_dAP = fixed_ap(Kind::cls) - base;
  out.loc_dAP = fixed_ap(Kind::loc) - base;
  return out;
}

struct EvalReport {
  double mAP = 0.0;
  double AP50 = 0.0;
  double AP75 = 0.0;
  std::vector<double> ap_per_threshold;  // IoU 0.50, 0.55, ..., 0.95
  std::map<int, double> per_class_mAP;
  ErrorDecomposition errors;
};

inline std::vector<double> coco_iou_thresholds() {
  std::vector<double> t;
  for (int i = 0; i < 10; ++i) t.push_back(0.5 + 0.05 * i);
  return t;
}

inline EvalReport evaluate(const std::vector<Detection>& dets, const std::vector<GroundTruth>& gts) {
  if (gts.empty()) throw UndefinedAp("evaluate: no ground-truth boxes");
  EvalReport rep;
  const auto thresholds = coco_iou_thresholds();
  for (std::size_t t = 0; t < thresholds.size(); ++t) {
    const auto pc = per_class_ap(dets, gts, thresholds[t]);
    double sum = 0.0;
    for (const auto& [c, ap] : pc) {
      sum += ap;
      rep.per_class_mAP[c] += ap / static_cast<double>(thresholds.size());
    }
    rep.ap_per_threshold.push_back(sum / static_cast<double>(pc.size()));
  }
  rep.mAP = std::accumulate(rep.ap_per_threshold.begin(), rep.ap_per_threshold.end(), 0.0) /
            static_cast<double>(thresholds.size());
  rep.AP50 = rep.ap_per_threshold[0];
  rep.AP75 = rep.ap_per_threshold[5];
  rep.errors = error_decomposition(dets, gts);
  return rep;
}

inline nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json per_class = nlohmann::json::object();
  for (const auto& [c, ap] : r.per_class_mAP) per_class[std::to_string(c)] = ap;
  return {{"mAP", r.mAP},
          {"AP50", r.AP50},
          {"AP75", r.AP75},
          {"ap_per_threshold", r.ap_per_threshold},
          {"per_class_mAP", per_class},
          {"error_decomposition", {{"cls_dAP", r.errors.cls_dAP}, {"loc_dAP", r.errors.loc_dAP}}}};
}

inline nlohmann::json to_json(const Detection& d) {
  return {{"image", d.image}, {"class", d.class_id}, {"score", d.score},
          {"x1", d.box.x1},   {"y1", d.box.y1},      {"x2", d.box.x2},  {"y2", d.box.y2}};
}

/// Per-position sum over classes of |sigmoid(teacher) - sigmoid(student)|.
inline std::vector<double> score_gap_map(const Prediction& teacher, const Prediction& student) {
  teacher.logits.require_same_shape(student.logits, "score_gap_map");
  const ScoreMap pt = sigmoid_protocol(teacher.logits);
  const ScoreMap ps = sigmoid_protocol(student.logits);
  std::vector<double> gap(pt.rows(), 0.0);
  for (std::size_t i = 0; i < pt.rows(); ++i) {
    for (std::size_t j = 0; j < pt.cols(); ++j) gap[i] += std::abs(pt(i, j) - ps(i, j));
  }
  return gap;
}

/// Writes a per-position map as a grid_rows x grid_cols CSV.
inline void write_grid_csv(const std::filesystem::path& path, const std::vector<double>& values,
                           int grid_rows, int grid_cols) {
  if (values.size() != static_cast<std::size_t>(grid_rows) * grid_cols) {
    throw InvalidInput("write_grid_csv: value count does not match the grid");
  }
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out.precision(17);
  for (int r = 0; r < grid_rows; ++r) {
    for (int c = 0; c < grid_cols; ++c) {
      out << (c ? "," : "") << values[static_cast<std::size_t>(r) * grid_cols + c];
    }
    out << "\n";
  }
}

}  // namespace densekd
