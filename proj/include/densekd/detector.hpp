#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "densekd/geometry.hpp"
#include "densekd/image.hpp"
#include "densekd/numerics.hpp"
#include "densekd/prediction.hpp"

namespace densekd {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

class ArchitectureMismatch : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shape of the shared per-anchor MLP.
struct Architecture {
  int patch = 16;             // P: side of the square RGB patch fed to the trunk
  int stride = 8;             // anchor spacing in pixels
  std::vector<int> widths;    // hidden layer widths (ReLU)
  int num_classes = 3;        // K

  int input_dim() const { return 3 * patch * patch; }
  friend bool operator==(const Architecture&, const Architecture&) = default;
};

inline std::string describe(const Architecture& a) {
  std::string s = "patch=" + std::to_string(a.patch) + " stride=" + std::to_string(a.stride) +
                  " K=" + std::to_string(a.num_classes) + " widths=[";
  for (std::size_t i = 0; i < a.widths.size(); ++i) {
    s += (i ? "," : "") + std::to_string(a.widths[i]);
  }
  return s + "]";
}

/// Fully connected layer, weight is (out x in).
struct Dense {
  Matrix weight;
  Vector bias;
  friend bool operator==(const Dense& a, const Dense& b) {
    return a.weight == b.weight && a.bias == b.bias;
  }
};

/// Trunk layers followed by the classification and the localization heads.
/// Also used for gradient and velocity buffers of the same shape.
struct DetectorParams {
  Architecture arch;
  std::vector<Dense> trunk;
  Dense cls_head;
  Dense loc_head;

  friend bool operator==(const DetectorParams&, const DetectorParams&) = default;
};

/// Visits every (name, tensor) pair in a fixed order.
template <typename Params, typename Fn>
void for_each_tensor(Params& p, Fn&& fn) {
  for (std::size_t l = 0; l < p.trunk.size(); ++l) {
    fn("trunk." + std::to_string(l) + ".weight", p.trunk[l].weight);
    fn("trunk." + std::to_string(l) + ".bias", p.trunk[l].bias);
  }
  fn(std::string("cls.weight"), p.cls_head.weight);
  fn(std::string("cls.bias"), p.cls_head.bias);
  fn(std::string("loc.weight"), p.loc_head.weight);
  fn(std::string("loc.bias"), p.loc_head.bias);
}

/// Same traversal over congruent parameter sets, one tensor from each.
template <typename Fn, typename First, typename... Rest>
void for_each_tensor_zip(Fn&& fn, First& first, Rest&... rest) {
  for (std::size_t l = 0; l < first.trunk.size(); ++l) {
    fn(first.trunk[l].weight, rest.trunk[l].weight...);
    fn(first.trunk[l].bias, rest.trunk[l].bias...);
  }
  fn(first.cls_head.weight, rest.cls_head.weight...);
  fn(first.cls_head.bias, rest.cls_head.bias...);
  fn(first.loc_head.weight, rest.loc_head.weight...);
  fn(first.loc_head.bias, rest.loc_head.bias...);
}

inline DetectorParams zeros_like(const Architecture& arch) {
  if (arch.patch <= 0 || arch.stride <= 0 || arch.num_classes <= 0) {
    throw InvalidInput("architecture needs positive patch, stride and K: " + describe(arch));
  }
  DetectorParams p;
  p.arch = arch;
  int in = arch.input_dim();
  for (int w : arch.widths) {
    if (w <= 0) throw InvalidInput("architecture has a non-positive hidden width");
    p.trunk.push_back({Matrix::Zero(w, in), Vector::Zero(w)});
    in = w;
  }
  p.cls_head = {Matrix::Zero(arch.num_classes, in), Vector::Zero(arch.num_classes)};
  p.loc_head = {Matrix::Zero(4, in), Vector::Zero(4)};
  return p;
}

inline constexpr double kClsPriorBias = -2.0;

/// Glorot-uniform weights from a seeded generator; zero biases except the
/// classification head, which starts at a low foreground prior.
inline DetectorParams init_params(const Architecture& arch, std::uint64_t seed) {
  DetectorParams p = zeros_like(arch);
  std::mt19937_64 rng(seed);
  auto fill = [&rng](Matrix& w) {
    const double limit = std::sqrt(6.0 / static_cast<double>(w.rows() + w.cols()));
    std::uniform_real_distribution<double> dist(-limit, limit);
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = dist(rng);
  };
  for (auto& layer : p.trunk) fill(layer.weight);
  fill(p.cls_head.weight);
  fill(p.loc_head.weight);
  p.cls_head.bias.setConstant(kClsPriorBias);
  return p;
}

inline std::size_t parameter_count(const DetectorParams& p) {
  std::size_t n = 0;
  for_each_tensor(p, [&n](const std::string&, const auto& t) { n += t.size(); });
  return n;
}

/// One row per anchor: the P x P RGB patch centered on the anchor, scaled to
/// [0, 1], zero outside the image. Layout is (channel, dy, dx).
inline Matrix extract_patches(const Image& img, const AnchorGrid& anchors, int patch) {
  if (img.width != anchors.image_w || img.height != anchors.image_h) {
    throw InvalidInput("extract_patches: image " + std::to_string(img.width) + "x" +
                       std::to_string(img.height) + " does not match anchor grid " +
                       std::to_string(anchors.image_w) + "x" + std::to_string(anchors.image_h));
  }
  const int half = patch / 2;
  const int pp = patch * patch;
  Matrix out = Matrix::Zero(static_cast<Eigen::Index>(anchors.size()), 3 * pp);
  for (std::size_t i = 0; i < anchors.size(); ++i) {
    const int x0 = static_cast<int>(std::floor(anchors.points[i].x)) - half;
    const int y0 = static_cast<int>(std::floor(anchors.points[i].y)) - half;
    for (int dy = 0; dy < patch; ++dy) {
      const int y = y0 + dy;
      if (y < 0 || y >= img.height) continue;
      for (int dx = 0; dx < patch; ++dx) {
        const int x = x0 + dx;
        if (x < 0 || x >= img.width) continue;
        for (int c = 0; c < 3; ++c) {
          out(static_cast<Eigen::Index>(i), c * pp + dy * patch + dx) = img.at(x, y, c) / 255.0;
        }
      }
    }
  }
  return out;
}

/// Activations kept from a forward pass for the backward pass.
/// layers[0] is the patch matrix; layers[l + 1] is the output of trunk layer l.
struct ForwardCache {
  std::shared_ptr<const Matrix> input;
  std::vector<Matrix> hidden;

  const Matrix& layer(std::size_t l) const { return l == 0 ? *input : hidden[l - 1]; }
};

inline Grid2 to_grid(const Matrix& m) {
  return Grid2(static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols()),
               std::vector<double>(m.data(), m.data() + m.size()));
}

inline Prediction forward_patches(const DetectorParams& p, std::shared_ptr<const Matrix> patches,
                                  ForwardCache* cache = nullptr) {
  if (patches->cols() != p.arch.input_dim()) {
    throw InvalidInput("forward: patch width " + std::to_string(patches->cols()) +
                       " does not match architecture input " +
                       std::to_string(p.arch.input_dim()));
  }
  std::vector<Matrix> hidden;
  hidden.reserve(p.trunk.size());
  const Matrix* x = patches.get();
  for (const auto& layer : p.trunk) {
    Matrix h = (*x) * layer.weight.transpose();
    h.rowwise() += layer.bias.transpose();
    h = h.cwiseMax(0.0);
    hidden.push_back(std::move(h));
    x = &hidden.back();
  }
  Matrix logits = (*x) * p.cls_head.weight.transpose();
  logits.rowwise() += p.cls_head.bias.transpose();
  Matrix offsets = (*x) * p.loc_head.weight.transpose();
  offsets.rowwise() += p.loc_head.bias.transpose();

  Prediction pred{to_grid(logits), to_grid(offsets)};
  if (cache) {
    cache->input = std::move(patches);
    cache->hidden = std::move(hidden);
  }
  return pred;
}

inline Prediction forward(const DetectorParams& p, const Image& img, const AnchorGrid& anchors,
                          ForwardCache* cache = nullptr) {
  if (anchors.stride != p.arch.stride) {
    throw InvalidInput("forward: anchor stride " + std::to_string(anchors.stride) +
                       " differs from architecture stride " + std::to_string(p.arch.stride));
  }
  auto patches = std::make_shared<const Matrix>(extract_patches(img, anchors, p.arch.patch));
  return forward_patches(p, std::move(patches), cache);
}

/// Adds d(loss)/d(params) into `grads` given d(loss)/d(logits) and
/// d(loss)/d(offsets) for the cached forward pass.
inline void backward_accumulate(const DetectorParams& p, const ForwardCache& cache,
                                const Grid2& grad_logits, const Grid2& grad_offsets,
                                DetectorParams& grads) {
  const auto n = static_cast<std::size_t>(cache.input->rows());
  if (grad_logits.rows() != n || grad_logits.cols() != static_cast<std::size_t>(p.arch.num_classes) ||
      grad_offsets.rows() != n || grad_offsets.cols() != 4) {
    throw InvalidInput("backward: gradient shapes " + grad_logits.shape_str() + " / " +
                       grad_offsets.shape_str() + " do not match the prediction");
  }
  using ConstMap = Eigen::Map<const Matrix>;
  const ConstMap dl(grad_logits.data(), static_cast<Eigen::Index>(n), p.arch.num_classes);
  const ConstMap doff(grad_offsets.data(), static_cast<Eigen::Index>(n), 4);
  const std::size_t depth = p.trunk.size();
  const Matrix& top = cache.layer(depth);

  grads.cls_head.weight.noalias() += dl.transpose() * top;
  grads.cls_head.bias += dl.colwise().sum().transpose();
  grads.loc_head.weight.noalias() += doff.transpose() * top;
  grads.loc_head.bias += doff.colwise().sum().transpose();
  if (depth == 0) return;

  Matrix dh = dl * p.cls_head.weight;
  dh.noalias() += doff * p.loc_head.weight;
  for (std::size_t l = depth; l-- > 0;) {
    const Matrix& out = cache.layer(l + 1);
    dh = dh.cwiseProduct((out.array() > 0.0).cast<double>().matrix());
    grads.trunk[l].weight.noalias() += dh.transpose() * cache.layer(l);
    grads.trunk[l].bias += dh.colwise().sum().transpose();
    if (l > 0) dh = dh * p.trunk[l].weight;
  }
}

inline DetectorParams backward(const DetectorParams& p, const ForwardCache& cache,
                               const Grid2& grad_logits, const Grid2& grad_offsets) {
  DetectorParams grads = zeros_like(p.arch);
  backward_accumulate(p, cache, grad_logits, grad_offsets, grads);
  return grads;
}

/// SGD with heavy-ball momentum and L2 weight decay folded into the velocity.
struct OptimizerState {
  double learning_rate = 0.05;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  DetectorParams velocity;

  static OptimizerState for_params(const DetectorParams& p, double lr, double momentum,
                                   double weight_decay) {
    return {lr, momentum, weight_decay, zeros_like(p.arch)};
  }
};

inline void sgd_step(DetectorParams& params, const DetectorParams& grads, OptimizerState& state) {
  if (!(params.arch == grads.arch) || !(params.arch == state.velocity.arch)) {
    throw InvalidInput("sgd_step: parameter, gradient and velocity shapes differ");
  }
  const double mu = state.momentum;
  const double wd = state.weight_decay;
  const double lr = state.learning_rate;
  for_each_tensor_zip(
      [mu, wd, lr](auto& param, auto& vel, const auto& grad) {
        vel = mu * vel + grad + wd * param;
        param -= lr * vel;
      },
      params, state.velocity, grads);
}

// ---------------------------------------------------------------------------
// Checkpoints

struct CheckpointMeta {
  std::uint64_t rng_seed = 0;
  int epoch = 0;
};

inline constexpr int kCheckpointFormatVersion = 1;

inline nlohmann::json architecture_to_json(const Architecture& a) {
  return {{"patch", a.patch}, {"strides", {a.stride}}, {"widths", a.widths}, {"K", a.num_classes}};
}

inline Architecture architecture_from_json(const nlohmann::json& j) {
  Architecture a;
  try {
    a.patch = j.at("patch").get<int>();
    const auto strides = j.at("strides").get<std::vector<int>>();
    if (strides.size() != 1) throw ParseError("checkpoint field architecture.strides: expected one level");
    a.stride = strides[0];
    a.widths = j.at("widths").get<std::vector<int>>();
    a.num_classes = j.at("K").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("checkpoint field architecture: ") + e.what());
  }
  return a;
}

inline void save_checkpoint(const std::filesystem::path& path, const DetectorParams& p,
                            const CheckpointMeta& meta) {
  nlohmann::json params = nlohmann::json::object();
  for_each_tensor(p, [&params](const std::string& name, const auto& t) {
    params[name] = {{"shape", {t.rows(), t.cols()}},
                    {"values", std::vector<double>(t.data(), t.data() + t.size())}};
  });
  nlohmann::json doc = {{"format_version", kCheckpointFormatVersion},
                        {"architecture", architecture_to_json(p.arch)},
                        {"params", params},
                        {"rng_seed", meta.rng_seed},
                        {"epoch", meta.epoch}};
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << doc.dump() << "\n";
  if (!out) throw IoError("short write to " + path.string());
}

struct LoadedCheckpoint {
  DetectorParams params;
  CheckpointMeta meta;
};

/// Reads a checkpoint. When `expected` is given the stored architecture must
/// match it exactly.
inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& path,
                                        const Architecture* expected = nullptr) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
  auto field = [&doc, &path](const char* name) -> const nlohmann::json& {
    if (!doc.is_object() || !doc.contains(name)) {
      throw ParseError(path.string() + ": missing field '" + name + "'");
    }
    return doc[name];
  };
  if (field("format_version") != kCheckpointFormatVersion) {
    throw ParseError(path.string() + ": unsupported format_version");
  }
  const Architecture arch = architecture_from_json(field("architecture"));
  if (expected && !(arch == *expected)) {
    throw ArchitectureMismatch("checkpoint " + path.string() + " has architecture {" +
                               describe(arch) + "}, expected {" + describe(*expected) + "}");
  }
  LoadedCheckpoint ck;
  ck.params = zeros_like(arch);
  const auto& params = field("params");
  for_each_tensor(ck.params, [&](const std::string& name, auto& t) {
    if (!params.contains(name)) throw ParseError(path.string() + ": missing field 'params." + name + "'");
    const auto& entry = params[name];
    std::vector<double> values;
    std::vector<long> shape;
    try {
      values = entry.at("values").get<std::vector<double>>();
      shape = entry.at("shape").get<std::vector<long>>();
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(path.string() + ": field 'params." + name + "': " + e.what());
    }
    if (shape.size() != 2 || shape[0] != t.rows() || shape[1] != t.cols() ||
        values.size() != static_cast<std::size_t>(t.size())) {
      throw ArchitectureMismatch(path.string() + ": tensor 'params." + name +
                                 "' does not fit architecture {" + describe(arch) + "}");
    }
    std::copy(values.begin(), values.end(), t.data());
  });
  try {
    ck.meta.rng_seed = field("rng_seed").get<std::uint64_t>();
    ck.meta.epoch = field("epoch").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
  return ck;
}

}  // namespace densekd
