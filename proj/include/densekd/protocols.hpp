#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "densekd/numerics.hpp"

namespace densekd {

enum class Protocol { sigmoid, softmax };

inline const char* to_string(Protocol p) {
  return p == Protocol::sigmoid ? "sigmoid" : "softmax";
}

/// Classification scores obtained from logits under a named protocol.
struct ScoreMap {
  Grid2 scores;
  Protocol protocol = Protocol::sigmoid;

  std::size_t rows() const { return scores.rows(); }
  std::size_t cols() const { return scores.cols(); }
  double operator()(std::size_t r, std::size_t c) const { return scores(r, c); }
};

/// Independent per-class binary scores.
inline ScoreMap sigmoid_protocol(const Grid2& logits) {
  require_finite(logits, "sigmoid_protocol");
  Grid2 out(logits.rows(), logits.cols());
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out.values()[i] = stable_sigmoid(logits.values()[i]);
  }
  return {std::move(out), Protocol::sigmoid};
}

namespace detail {

// Writes log-softmax of `in` into `out` (same length).
inline void log_softmax_row(std::span<const double> in, std::span<double> out) {
  double mx = in[0];
  for (double v : in) mx = std::max(mx, v);
  double sum = 0.0;
  for (double v : in) sum += std::exp(v - mx);
  const double lse = mx + std::log(sum);
  for (std::size_t j = 0; j < in.size(); ++j) out[j] = in[j] - lse;
}

}  // namespace detail

/// Row-wise normalized distribution over the K classes.
inline ScoreMap softmax_protocol(const Grid2& logits) {
  require_finite(logits, "softmax_protocol");
  if (logits.cols() < 2) throw InvalidInput("softmax_protocol: needs at least 2 columns");
  Grid2 out(logits.rows(), logits.cols());
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    auto in = logits.row(r);
    auto o = out.row(r);
    double mx = in[0];
    for (double v : in) mx = std::max(mx, v);
    double sum = 0.0;
    for (std::size_t j = 0; j < in.size(); ++j) {
      o[j] = std::exp(in[j] - mx);
      sum += o[j];
    }
    for (double& v : o) v /= sum;
  }
  return {std::move(out), Protocol::softmax};
}

/// Outcome of shifting every logit of a row by the same constant.
struct DemoReport {
  double kl_loss = 0.0;
  std::vector<double> sigmoid_l1_gap_per_row;
  std::vector<bool> argmax_preserved_per_row;
};

namespace detail {

inline std::size_t argmax(std::span<const double> row) {
  std::size_t best = 0;
  for (std::size_t j = 1; j < row.size(); ++j) {
    if (row[j] > row[best]) best = j;
  }
  return best;
}

// KL(softmax(t) || softmax(s)) summed over rows, divided by row count.
inline double softmax_kl_mean(const Grid2& teacher, const Grid2& student) {
  std::vector<double> lt(teacher.cols()), ls(teacher.cols());
  double total = 0.0;
  for (std::size_t r = 0; r < teacher.rows(); ++r) {
    log_softmax_row(teacher.row(r), lt);
    log_softmax_row(student.row(r), ls);
    for (std::size_t j = 0; j < lt.size(); ++j) total += std::exp(lt[j]) * (lt[j] - ls[j]);
  }
  return teacher.rows() == 0 ? 0.0 : total / static_cast<double>(teacher.rows());
}

}  // namespace detail

/// Builds the student map l_s = l_t + shift (one constant per row) and
/// reports how the softmax-KL objective and the sigmoid scores react.
/// The KL term is blind to the shift; the sigmoid scores are not.
inline DemoReport inconsistency_demo(const Grid2& teacher_logits, std::span<const double> shift) {
  require_finite(teacher_logits, "inconsistency_demo");
  if (shift.size() != teacher_logits.rows()) {
    throw InvalidInput("inconsistency_demo: need one shift per row, got " +
                       std::to_string(shift.size()) + " for " +
                       std::to_string(teacher_logits.rows()) + " rows");
  }
  if (teacher_logits.cols() < 2) throw InvalidInput("inconsistency_demo: needs >= 2 classes");
  for (double c : shift) require_finite(c, "inconsistency_demo");

  Grid2 student = teacher_logits;
  for (std::size_t r = 0; r < student.rows(); ++r) {
    for (double& v : student.row(r)) v += shift[r];
  }

  DemoReport rep;
  // Clamp tiny negative round-off; KL of identical distributions is 0.
  rep.kl_loss = std::max(0.0, detail::softmax_kl_mean(teacher_logits, student));
  const ScoreMap pt = sigmoid_protocol(teacher_logits);
  const ScoreMap ps = sigmoid_protocol(student);
  for (std::size_t r = 0; r < student.rows(); ++r) {
    double gap = 0.0;
    for (std::size_t j = 0; j < student.cols(); ++j) gap += std::abs(pt(r, j) - ps(r, j));
    rep.sigmoid_l1_gap_per_row.push_back(gap);
    rep.argmax_preserved_per_row.push_back(detail::argmax(teacher_logits.row(r)) ==
                                           detail::argmax(student.row(r)));
  }
  return rep;
}

}  // namespace densekd
