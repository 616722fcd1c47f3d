#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <vector>

#include "densekd/numerics.hpp"

namespace densekd {

struct Point {
  double x = 0.0;
  double y = 0.0;
  friend bool operator==(const Point&, const Point&) = default;
};

/// Axis-aligned rectangle in image pixels, corners (x1, y1) and (x2, y2).
struct Box {
  double x1 = 0.0;
  double y1 = 0.0;
  double x2 = 0.0;
  double y2 = 0.0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return width() * height(); }
  bool valid() const { return x1 < x2 && y1 < y2; }
  bool contains_strictly(Point p) const { return x1 < p.x && p.x < x2 && y1 < p.y && p.y < y2; }

  friend bool operator==(const Box&, const Box&) = default;
};

/// Anchor points of one stride level: the centers of a regular grid.
struct AnchorGrid {
  std::vector<Point> points;
  int stride = 0;
  int image_w = 0;
  int image_h = 0;

  std::size_t size() const { return points.size(); }
  int grid_cols() const { return stride == 0 ? 0 : image_w / stride; }
  int grid_rows() const { return stride == 0 ? 0 : image_h / stride; }
};

inline AnchorGrid build_anchor_grid(int image_w, int image_h, int stride) {
  if (stride <= 0 || image_w <= 0 || image_h <= 0) {
    throw InvalidInput("build_anchor_grid: dimensions and stride must be positive");
  }
  if (image_w % stride != 0 || image_h % stride != 0) {
    throw InvalidInput("build_anchor_grid: stride " + std::to_string(stride) +
                       " does not divide " + std::to_string(image_w) + "x" +
                       std::to_string(image_h));
  }
  AnchorGrid g;
  g.stride = stride;
  g.image_w = image_w;
  g.image_h = image_h;
  const int rows = image_h / stride;
  const int cols = image_w / stride;
  g.points.reserve(static_cast<std::size_t>(rows * cols));
  for (int i = 0; i < rows; ++i) {
    for (int j = 0; j < cols; ++j) {
      g.points.push_back({(j + 0.5) * stride, (i + 0.5) * stride});
    }
  }
  return g;
}

/// ltrb decoding: each side sits exp(o_k) * stride away from the center,
/// so any finite offset row gives a box of positive area.
inline Box decode_box(Point center, double stride, std::span<const double> o) {
  return {center.x - std::exp(o[0]) * stride, center.y - std::exp(o[1]) * stride,
          center.x + std::exp(o[2]) * stride, center.y + std::exp(o[3]) * stride};
}

inline std::vector<Box> decode_boxes(const AnchorGrid& anchors, const Grid2& offsets) {
  if (offsets.cols() != 4) {
    throw InvalidInput("decode_boxes: offsets need 4 columns, got " +
                       std::to_string(offsets.cols()));
  }
  if (offsets.rows() != anchors.size()) {
    throw InvalidInput("decode_boxes: " + std::to_string(offsets.rows()) + " offset rows for " +
                       std::to_string(anchors.size()) + " anchors");
  }
  std::vector<Box> out;
  out.reserve(anchors.size());
  for (std::size_t i = 0; i < anchors.size(); ++i) {
    out.push_back(decode_box(anchors.points[i], anchors.stride, offsets.row(i)));
  }
  return out;
}

inline Box clip_box(const Box& b, double w, double h) {
  return {std::clamp(b.x1, 0.0, w), std::clamp(b.y1, 0.0, h), std::clamp(b.x2, 0.0, w),
          std::clamp(b.y2, 0.0, h)};
}

inline double iou(const Box& a, const Box& b) {
  const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

struct IouWithGrad {
  double iou = 0.0;
  std::array<double, 4> grad{};  // d iou / d (o_l, o_t, o_r, o_b)
};

/// IoU between the box decoded from `student_offsets` and a fixed target box,
/// with its derivative with respect to the student offsets.
///
/// Where a student edge coincides with the target edge, the intersection is
/// differentiated as if the student edge were the inner one.
inline IouWithGrad iou_grad_to_box(Point center, double stride,
                                   std::span<const double> student_offsets, const Box& target) {
  const double dl = std::exp(student_offsets[0]) * stride;
  const double dt = std::exp(student_offsets[1]) * stride;
  const double dr = std::exp(student_offsets[2]) * stride;
  const double db = std::exp(student_offsets[3]) * stride;
  const Box s{center.x - dl, center.y - dt, center.x + dr, center.y + db};

  const double iw = std::min(s.x2, target.x2) - std::max(s.x1, target.x1);
  const double ih = std::min(s.y2, target.y2) - std::max(s.y1, target.y1);
  IouWithGrad out;
  if (iw <= 0.0 || ih <= 0.0) return out;

  const double inter = iw * ih;
  const double uni = s.area() + target.area() - inter;
  out.iou = inter / uni;

  // d(I/U) = (dI * (U + I) - I * dAs) / U^2, with U = As + At - I.
  const double sw = s.width();
  const double sh = s.height();
  const double inv_u2 = 1.0 / (uni * uni);
  auto d_iou = [&](double d_inter, double d_area) {
    return (d_inter * (uni + inter) - inter * d_area) * inv_u2;
  };
  // Derivatives with respect to the box coordinates.
  const double g_x1 = d_iou(s.x1 >= target.x1 ? -ih : 0.0, -sh);
  const double g_y1 = d_iou(s.y1 >= target.y1 ? -iw : 0.0, -sw);
  const double g_x2 = d_iou(s.x2 <= target.x2 ? ih : 0.0, sh);
  const double g_y2 = d_iou(s.y2 <= target.y2 ? iw : 0.0, sw);
  // Chain through x1 = cx - dl, dl = exp(o_l) * stride, and so on.
  out.grad = {-g_x1 * dl, -g_y1 * dt, g_x2 * dr, g_y2 * db};
  return out;
}

/// Same as iou_grad_to_box with the target decoded from teacher offsets at
/// the same anchor.
inline IouWithGrad iou_grad_student(Point center, double stride,
                                    std::span<const double> teacher_offsets,
                                    std::span<const double> student_offsets) {
  for (double v : teacher_offsets) require_finite(v, "iou_grad_student");
  for (double v : student_offsets) require_finite(v, "iou_grad_student");
  return iou_grad_to_box(center, stride, student_offsets,
                         decode_box(center, stride, teacher_offsets));
}

}  // namespace densekd
