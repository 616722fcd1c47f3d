#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace densekd {

/// Raised when a caller hands an operation data outside its domain
/// (shape mismatch, non-finite value, bad tag).
class InvalidInput : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised by the finite-difference oracle when the probed function
/// stops returning finite values.
class OracleFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Dense row-major matrix of doubles. Holds per-position logit maps (n x K),
/// offset maps (n x 4) and most other dense per-anchor quantities.
class Grid2 {
 public:
  Grid2() = default;
  Grid2(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Grid2(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw InvalidInput("Grid2: data length " + std::to_string(data_.size()) +
                         " != rows*cols " + std::to_string(rows_ * cols_));
    }
  }
  Grid2(std::initializer_list<std::initializer_list<double>> rows) {
    rows_ = rows.size();
    cols_ = rows_ == 0 ? 0 : rows.begin()->size();
    data_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
      if (r.size() != cols_) throw InvalidInput("Grid2: ragged initializer");
      data_.insert(data_.end(), r.begin(), r.end());
    }
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const {
    return {data_.data() + r * cols_, cols_};
  }

  std::vector<double>& values() { return data_; }
  const std::vector<double>& values() const { return data_; }
  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

  bool same_shape(const Grid2& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(),
                       [](double v) { return std::isfinite(v); });
  }

  Grid2& operator+=(const Grid2& o) {
    require_same_shape(o, "Grid2::operator+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }
  Grid2& operator*=(double s) {
    for (double& v : data_) v *= s;
    return *this;
  }

  void require_same_shape(const Grid2& o, const char* who) const {
    if (!same_shape(o)) {
      throw InvalidInput(std::string(who) + ": shape mismatch (" + shape_str() +
                         " vs " + o.shape_str() + ")");
    }
  }

  std::string shape_str() const {
    return std::to_string(rows_) + "x" + std::to_string(cols_);
  }

  friend bool operator==(const Grid2&, const Grid2&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

inline void require_finite(double x, const char* who) {
  if (!std::isfinite(x)) throw InvalidInput(std::string(who) + ": non-finite input");
}

inline void require_finite(const Grid2& g, const char* who) {
  if (!g.all_finite()) throw InvalidInput(std::string(who) + ": non-finite input");
}

/// Logistic function. Branches on sign so exp() only ever sees a
/// non-positive argument.
inline double stable_sigmoid(double x) {
  require_finite(x, "stable_sigmoid");
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

/// log(sigmoid(x)) = -log(1 + e^{-x}) = min(x, 0) - log1p(e^{-|x|}).
inline double stable_log_sigmoid(double x) {
  require_finite(x, "stable_log_sigmoid");
  return std::min(x, 0.0) - std::log1p(std::exp(-std::abs(x)));
}

/// Central-difference gradient of a scalar function of a grid.
/// Each element is perturbed in place on a private copy and restored.
inline Grid2 finite_diff_grad(const std::function<double(const Grid2&)>& f, const Grid2& x,
                              double h = 1e-5) {
  if (!(h > 0.0)) throw InvalidInput("finite_diff_grad: step must be positive");
  Grid2 probe = x;
  Grid2 grad(x.rows(), x.cols());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    for (std::size_t c = 0; c < x.cols(); ++c) {
      const double orig = probe(r, c);
      probe(r, c) = orig + h;
      const double fp = f(probe);
      probe(r, c) = orig - h;
      const double fm = f(probe);
      probe(r, c) = orig;
      if (!std::isfinite(fp) || !std::isfinite(fm)) {
        throw OracleFailure("finite_diff_grad: non-finite objective when perturbing (" +
                            std::to_string(r) + ", " + std::to_string(c) + ")");
      }
      grad(r, c) = (fp - fm) / (2.0 * h);
    }
  }
  return grad;
}

struct GradCheckReport {
  double max_abs_err = 0.0;
  double max_rel_err = 0.0;
  std::pair<std::size_t, std::size_t> worst_index{0, 0};
  bool passed = true;
};

/// Compares an analytic gradient with a numeric one. The relative error of
/// an element is |a - n| / max(|a|, |n|, floor); the floor keeps elements
/// whose true gradient is ~0 from dominating through round-off.
inline GradCheckReport compare_gradients(const Grid2& analytic, const Grid2& numeric,
                                         double tolerance, double floor = 1e-6) {
  analytic.require_same_shape(numeric, "compare_gradients");
  GradCheckReport rep;
  for (std::size_t r = 0; r < analytic.rows(); ++r) {
    for (std::size_t c = 0; c < analytic.cols(); ++c) {
      const double a = analytic(r, c);
      const double n = numeric(r, c);
      const double abs_err = std::abs(a - n);
      const double rel_err = abs_err / std::max({std::abs(a), std::abs(n), floor});
      rep.max_abs_err = std::max(rep.max_abs_err, abs_err);
      if (rel_err > rep.max_rel_err) {
        rep.max_rel_err = rel_err;
        rep.worst_index = {r, c};
      }
    }
  }
  rep.passed = rep.max_rel_err <= tolerance;
  return rep;
}

}  // namespace densekd
