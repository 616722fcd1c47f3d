#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <vector>

#include "densekd/geometry.hpp"
#include "densekd/numerics.hpp"
#include "densekd/prediction.hpp"
#include "densekd/protocols.hpp"

namespace densekd {

/// How per-position sums are reduced for the distillation terms.
enum class Normalization { mean, sum };

/// Per-position class targets: each row is all zeros (background) or one-hot.
class LabelMap {
 public:
  LabelMap() = default;
  explicit LabelMap(Grid2 values) : values_(std::move(values)) {
    for (std::size_t r = 0; r < values_.rows(); ++r) {
      int ones = 0;
      for (double v : values_.row(r)) {
        if (v == 1.0) {
          ++ones;
        } else if (v != 0.0) {
          throw InvalidInput("LabelMap: entries must be 0 or 1");
        }
      }
      if (ones > 1) throw InvalidInput("LabelMap: row " + std::to_string(r) + " is not one-hot");
      positives_ += ones;
    }
  }
  LabelMap(std::size_t n, std::size_t k) : values_(n, k) {}

  void set_positive(std::size_t row, std::size_t cls) {
    auto r = values_.row(row);
    const bool was_pos = std::any_of(r.begin(), r.end(), [](double v) { return v != 0.0; });
    std::fill(r.begin(), r.end(), 0.0);
    r[cls] = 1.0;
    if (!was_pos) ++positives_;
  }

  const Grid2& grid() const { return values_; }
  std::size_t rows() const { return values_.rows(); }
  std::size_t cols() const { return values_.cols(); }
  std::size_t positive_rows() const { return positives_; }
  double operator()(std::size_t r, std::size_t c) const { return values_(r, c); }

 private:
  Grid2 values_;
  std::size_t positives_ = 0;
};

/// |sigmoid(teacher) - sigmoid(student)| captured at construction.
/// Consumers treat it as a constant: no gradient flows through it.
class WeightMap {
 public:
  WeightMap() = default;
  const Grid2& grid() const { return w_; }
  std::size_t rows() const { return w_.rows(); }
  std::size_t cols() const { return w_.cols(); }
  double operator()(std::size_t r, std::size_t c) const { return w_(r, c); }

  double row_max(std::size_t r) const {
    auto row = w_.row(r);
    return row.empty() ? 0.0 : *std::max_element(row.begin(), row.end());
  }

  // Wraps arbitrary values; used by tests to pin weights to a chosen point.
  static WeightMap from_values(Grid2 w) {
    WeightMap m;
    m.w_ = std::move(w);
    return m;
  }

 private:
  Grid2 w_;
};

struct LossResult {
  double value = 0.0;
  std::optional<Grid2> grad_logits;
  std::optional<Grid2> grad_offsets;
};

inline double normalizer(Normalization mode, std::size_t n) {
  return mode == Normalization::mean ? static_cast<double>(std::max<std::size_t>(n, 1)) : 1.0;
}

/// Sigmoid focal binary cross entropy against one-hot / all-zero targets,
/// normalized by max(1, #positive rows). With gamma = 0 this is plain BCE.
/// The modulating factor |y - p|^gamma is held constant in the gradient.
inline LossResult supervised_cls_loss(const Grid2& logits, const LabelMap& labels,
                                      double focal_gamma) {
  if (!logits.same_shape(labels.grid())) {
    throw InvalidInput("supervised_cls_loss: logits " + logits.shape_str() + " vs labels " +
                       labels.grid().shape_str());
  }
  if (!(focal_gamma >= 0.0)) throw InvalidInput("supervised_cls_loss: focal_gamma must be >= 0");
  require_finite(logits, "supervised_cls_loss");

  const double norm = static_cast<double>(std::max<std::size_t>(labels.positive_rows(), 1));
  LossResult res;
  Grid2 grad(logits.rows(), logits.cols());
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double x = logits.values()[i];
    const double y = labels.grid().values()[i];
    const double p = stable_sigmoid(x);
    const double mod = focal_gamma == 0.0 ? 1.0 : std::pow(std::abs(y - p), focal_gamma);
    const double bce = -y * stable_log_sigmoid(x) - (1.0 - y) * stable_log_sigmoid(-x);
    total += mod * bce;
    grad.values()[i] = mod * (p - y) / norm;
  }
  res.value = total / norm;
  res.grad_logits = std::move(grad);
  return res;
}

/// IoU regression on positive anchors: mean over positives of 1 - IoU between
/// the decoded prediction and the assigned box. Negatives contribute nothing.
inline LossResult supervised_loc_loss(const Grid2& offsets, const AnchorGrid& anchors,
                                      const std::vector<std::optional<Box>>& targets) {
  if (offsets.cols() != 4 || offsets.rows() != anchors.size() ||
      targets.size() != anchors.size()) {
    throw InvalidInput("supervised_loc_loss: offsets/anchors/targets count mismatch");
  }
  std::size_t positives = 0;
  for (const auto& t : targets) positives += t.has_value();
  const double norm = static_cast<double>(std::max<std::size_t>(positives, 1));

  LossResult res;
  Grid2 grad(offsets.rows(), 4);
  double total = 0.0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (!targets[i]) continue;
    const auto g = iou_grad_to_box(anchors.points[i], anchors.stride, offsets.row(i), *targets[i]);
    total += 1.0 - g.iou;
    for (int k = 0; k < 4; ++k) grad(i, k) = -g.grad[k] / norm;
  }
  res.value = total / norm;
  res.grad_offsets = std::move(grad);
  return res;
}

/// Softmax-KL baseline: sum over positions of KL(softmax(t_i) || softmax(s_i)) / n.
/// Softmax runs over the K foreground columns only.
inline LossResult kl_distill_loss(const Grid2& student_logits, const Grid2& teacher_logits) {
  student_logits.require_same_shape(teacher_logits, "kl_distill_loss");
  if (student_logits.cols() < 2) throw InvalidInput("kl_distill_loss: needs at least 2 classes");
  require_finite(student_logits, "kl_distill_loss");
  require_finite(teacher_logits, "kl_distill_loss");

  const std::size_t n = student_logits.rows();
  const std::size_t k = student_logits.cols();
  const double norm = static_cast<double>(std::max<std::size_t>(n, 1));
  std::vector<double> lt(k), ls(k);
  Grid2 grad(n, k);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    detail::log_softmax_row(teacher_logits.row(i), lt);
    detail::log_softmax_row(student_logits.row(i), ls);
    for (std::size_t j = 0; j < k; ++j) {
      const double pt = std::exp(lt[j]);
      total += pt * (lt[j] - ls[j]);
      grad(i, j) = (std::exp(ls[j]) - pt) / norm;
    }
  }
  LossResult res;
  res.value = std::max(0.0, total / norm);
  res.grad_logits = std::move(grad);
  return res;
}

inline WeightMap build_weight_map(const ScoreMap& teacher, const ScoreMap& student) {
  if (teacher.protocol != Protocol::sigmoid || student.protocol != Protocol::sigmoid) {
    throw InvalidInput(std::string("build_weight_map: both maps must be sigmoid scores, got ") +
                       to_string(teacher.protocol) + "/" + to_string(student.protocol));
  }
  teacher.scores.require_same_shape(student.scores, "build_weight_map");
  Grid2 w(teacher.rows(), teacher.cols());
  for (std::size_t i = 0; i < w.size(); ++i) {
    w.values()[i] = std::abs(teacher.scores.values()[i] - student.scores.values()[i]);
  }
  return WeightMap::from_values(std::move(w));
}

/// Weighted sigmoid BCE between student and teacher scores for a given
/// (frozen) weight map. Gradient: w * (p_s - p_t) / norm.
inline LossResult weighted_bce_distill(const Grid2& student_logits, const Grid2& teacher_logits,
                                       const WeightMap& weights,
                                       Normalization mode = Normalization::mean) {
  student_logits.require_same_shape(teacher_logits, "bc_distill_loss");
  student_logits.require_same_shape(weights.grid(), "bc_distill_loss weights");
  const double norm = normalizer(mode, student_logits.rows());
  Grid2 grad(student_logits.rows(), student_logits.cols());
  double total = 0.0;
  for (std::size_t i = 0; i < student_logits.size(); ++i) {
    const double w = weights.grid().values()[i];
    const double s = student_logits.values()[i];
    const double pt = stable_sigmoid(teacher_logits.values()[i]);
    const double ps = stable_sigmoid(s);
    if (w != 0.0) {
      total += w * -((1.0 - pt) * stable_log_sigmoid(-s) + pt * stable_log_sigmoid(s));
    }
    grad.values()[i] = w * (ps - pt) / norm;
  }
  LossResult res;
  res.value = total / norm;
  res.grad_logits = std::move(grad);
  return res;
}

/// Binary classification distillation: every class channel is its own
/// binary problem, and each cell is weighted by the current teacher/student
/// score gap.
inline LossResult bc_distill_loss(const Grid2& student_logits, const Grid2& teacher_logits,
                                  Normalization mode = Normalization::mean) {
  student_logits.require_same_shape(teacher_logits, "bc_distill_loss");
  require_finite(student_logits, "bc_distill_loss");
  require_finite(teacher_logits, "bc_distill_loss");
  const WeightMap w =
      build_weight_map(sigmoid_protocol(teacher_logits), sigmoid_protocol(student_logits));
  return weighted_bce_distill(student_logits, teacher_logits, w, mode);
}

/// IoU localization distillation: per position, (1 - IoU(student box,
/// teacher box)) weighted by the largest classification weight of that row.
inline LossResult iou_distill_loss(const Grid2& student_offsets, const Grid2& teacher_offsets,
                                   const AnchorGrid& anchors, const WeightMap& weights,
                                   Normalization mode = Normalization::mean) {
  if (student_offsets.cols() != 4 || !student_offsets.same_shape(teacher_offsets)) {
    throw InvalidInput("iou_distill_loss: offsets must both be n x 4, got " +
                       student_offsets.shape_str() + " and " + teacher_offsets.shape_str());
  }
  const std::size_t n = student_offsets.rows();
  if (anchors.size() != n || weights.rows() != n) {
    throw InvalidInput("iou_distill_loss: " + std::to_string(n) + " offset rows, " +
                       std::to_string(anchors.size()) + " anchors, " +
                       std::to_string(weights.rows()) + " weight rows");
  }
  require_finite(student_offsets, "iou_distill_loss");
  require_finite(teacher_offsets, "iou_distill_loss");

  const double norm = normalizer(mode, n);
  Grid2 grad(n, 4);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double m = weights.row_max(i);
    if (m == 0.0) continue;
    const auto g = iou_grad_student(anchors.points[i], anchors.stride, teacher_offsets.row(i),
                                    student_offsets.row(i));
    total += m * (1.0 - g.iou);
    for (int k = 0; k < 4; ++k) grad(i, k) = -m * g.grad[k] / norm;
  }
  LossResult res;
  res.value = total / norm;
  res.grad_offsets = std::move(grad);
  return res;
}

struct TotalDistillResult {
  LossResult total;  // alpha1 * cls + alpha2 * loc, gradients for both heads
  double cls = 0.0;  // unscaled classification term
  double loc = 0.0;  // unscaled localization term
};

/// Full distillation objective for one image: sigmoid both logit maps, take
/// their gap as the importance weight, then add the weighted BCE term and the
/// weighted IoU term. A zero alpha skips its term entirely.
inline TotalDistillResult total_distill_loss(const Prediction& student, const Prediction& teacher,
                                             const AnchorGrid& anchors, double alpha1,
                                             double alpha2,
                                             Normalization mode = Normalization::mean) {
  if (!(alpha1 >= 0.0) || !(alpha2 >= 0.0)) {
    throw InvalidInput("total_distill_loss: alpha weights must be >= 0");
  }
  student.logits.require_same_shape(teacher.logits, "total_distill_loss");
  TotalDistillResult out;
  out.total.grad_logits = Grid2(student.logits.rows(), student.logits.cols());
  out.total.grad_offsets = Grid2(student.offsets.rows(), student.offsets.cols());
  if (alpha1 == 0.0 && alpha2 == 0.0) return out;

  require_finite(student.logits, "total_distill_loss");
  require_finite(teacher.logits, "total_distill_loss");
  const WeightMap w =
      build_weight_map(sigmoid_protocol(teacher.logits), sigmoid_protocol(student.logits));

  if (alpha1 > 0.0) {
    LossResult cls = weighted_bce_distill(student.logits, teacher.logits, w, mode);
    out.cls = cls.value;
    out.total.value += alpha1 * cls.value;
    *cls.grad_logits *= alpha1;
    out.total.grad_logits = std::move(*cls.grad_logits);
  }
  if (alpha2 > 0.0) {
    LossResult loc = iou_distill_loss(student.offsets, teacher.offsets, anchors, w, mode);
    out.loc = loc.value;
    out.total.value += alpha2 * loc.value;
    *loc.grad_offsets *= alpha2;
    out.total.grad_offsets = std::move(*loc.grad_offsets);
  }
  return out;
}

}  // namespace densekd
