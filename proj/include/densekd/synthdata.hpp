#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "densekd/geometry.hpp"
#include "densekd/image.hpp"
#include "densekd/losses.hpp"

namespace densekd {

class InvalidSpec : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Parameters of the synthetic scene generator.
struct SceneSpec {
  int image_w = 64;
  int image_h = 64;
  int num_classes = 3;
  int max_objects = 3;
  int stride = 8;
  int min_size = 16;     // >= 2 * stride so every object strictly contains an anchor
  int max_size = 24;
  double noise_amp = 96.0;  // background is uniform in [0, noise_amp] per channel
  double hue_span = 360.0;  // class hues sit at k * hue_span / K degrees

  friend bool operator==(const SceneSpec&, const SceneSpec&) = default;
};

inline void validate(const SceneSpec& s) {
  auto fail = [](const std::string& why) { throw InvalidSpec("scene spec: " + why); };
  if (s.image_w <= 0 || s.image_h <= 0) fail("image size must be positive");
  if (s.stride <= 0 || s.image_w % s.stride || s.image_h % s.stride) {
    fail("stride must divide the image size");
  }
  if (s.num_classes < 1) fail("need at least one class");
  if (s.max_objects < 1) fail("max_objects must be >= 1");
  if (s.min_size < 2 * s.stride) fail("min_size must be at least 2 * stride");
  if (s.max_size < s.min_size) fail("max_size < min_size");
  if (s.max_size > s.image_w || s.max_size > s.image_h) fail("objects larger than the image");
  if (!(s.noise_amp >= 0.0 && s.noise_amp <= 255.0)) fail("noise_amp must lie in [0, 255]");
  if (!(s.hue_span > 0.0 && s.hue_span <= 360.0)) fail("hue_span must lie in (0, 360]");
}

struct SceneObject {
  int class_id = 0;
  Box box;
  friend bool operator==(const SceneObject&, const SceneObject&) = default;
};

struct Scene {
  Image image;
  std::vector<SceneObject> objects;
};

/// Fully saturated-ish RGB for class `k` of `num_classes`: hues spread evenly
/// over the first `hue_span` degrees of the color wheel.
inline std::array<double, 3> canonical_color(int k, int num_classes, double hue_span = 360.0) {
  const double h = hue_span / 60.0 * k / num_classes;  // sector in [0, 6)
  const double v = 230.0;
  const double s = 0.85;
  const double c = v * s;
  const double x = c * (1.0 - std::abs(std::fmod(h, 2.0) - 1.0));
  const double m = v - c;
  std::array<double, 3> rgb{};
  switch (static_cast<int>(h)) {
    case 0: rgb = {c, x, 0}; break;
    case 1: rgb = {x, c, 0}; break;
    case 2: rgb = {0, c, x}; break;
    case 3: rgb = {0, x, c}; break;
    case 4: rgb = {x, 0, c}; break;
    default: rgb = {c, 0, x}; break;
  }
  for (double& ch : rgb) ch += m;
  return rgb;
}

/// Colored rectangles over uniform noise. Pure in (seed, spec).
inline Scene generate_scene(std::uint64_t seed, const SceneSpec& spec) {
  validate(spec);
  std::mt19937_64 rng(seed);
  auto uniform_int = [&rng](int lo, int hi) {
    return std::uniform_int_distribution<int>(lo, hi)(rng);
  };
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  Scene scene;
  scene.image = Image(spec.image_w, spec.image_h);
  for (auto& px : scene.image.rgb) {
    px = static_cast<std::uint8_t>(std::lround(unit(rng) * spec.noise_amp));
  }

  const int count = uniform_int(1, spec.max_objects);
  for (int o = 0; o < count; ++o) {
    const int cls = uniform_int(0, spec.num_classes - 1);
    const int w = uniform_int(spec.min_size, spec.max_size);
    const int h = uniform_int(spec.min_size, spec.max_size);
    const int x1 = uniform_int(0, spec.image_w - w);
    const int y1 = uniform_int(0, spec.image_h - h);
    auto color = canonical_color(cls, spec.num_classes, spec.hue_span);
    for (double& ch : color) ch = std::clamp(ch * (0.9 + 0.2 * unit(rng)), 0.0, 255.0);
    // Later objects are painted over earlier ones.
    for (int y = y1; y < y1 + h; ++y) {
      for (int x = x1; x < x1 + w; ++x) {
        for (int c = 0; c < 3; ++c) {
          scene.image.at(x, y, c) = static_cast<std::uint8_t>(std::lround(color[c]));
        }
      }
    }
    scene.objects.push_back(
        {cls, Box{double(x1), double(y1), double(x1 + w), double(y1 + h)}});
  }
  return scene;
}

/// Center-in-box assignment. Anchors strictly inside several boxes go to the
/// smallest one (lowest object index on equal areas).
struct AssignedTargets {
  LabelMap labels;
  std::vector<std::optional<Box>> box_targets;
  std::vector<bool> positive_mask;

  std::size_t positives() const {
    return static_cast<std::size_t>(std::count(positive_mask.begin(), positive_mask.end(), true));
  }
};

inline AssignedTargets assign_labels(const std::vector<SceneObject>& objects,
                                     const AnchorGrid& anchors, int num_classes) {
  AssignedTargets t;
  t.labels = LabelMap(anchors.size(), static_cast<std::size_t>(num_classes));
  t.box_targets.assign(anchors.size(), std::nullopt);
  t.positive_mask.assign(anchors.size(), false);
  for (std::size_t i = 0; i < anchors.size(); ++i) {
    const SceneObject* best = nullptr;
    for (const auto& obj : objects) {
      if (!obj.box.contains_strictly(anchors.points[i])) continue;
      if (best == nullptr || obj.box.area() < best->box.area()) best = &obj;
    }
    if (best == nullptr) continue;
    if (best->class_id < 0 || best->class_id >= num_classes) {
      throw InvalidInput("assign_labels: class id out of range");
    }
    t.labels.set_positive(i, static_cast<std::size_t>(best->class_id));
    t.box_targets[i] = best->box;
    t.positive_mask[i] = true;
  }
  return t;
}

inline AssignedTargets assign_labels(const Scene& scene, const AnchorGrid& anchors,
                                     int num_classes) {
  if (scene.image.width != anchors.image_w || scene.image.height != anchors.image_h) {
    throw InvalidInput("assign_labels: anchor grid built for a different image size");
  }
  return assign_labels(scene.objects, anchors, num_classes);
}

/// Inverse of decode_box at positive anchors: o_k = ln(d_k / stride).
/// Rows of negative anchors are left at zero.
inline Grid2 regression_targets_to_offsets(const AnchorGrid& anchors,
                                           const std::vector<std::optional<Box>>& targets) {
  if (targets.size() != anchors.size()) {
    throw InvalidInput("regression_targets_to_offsets: target count != anchor count");
  }
  Grid2 out(anchors.size(), 4);
  const double s = anchors.stride;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (!targets[i]) continue;
    const Point c = anchors.points[i];
    const Box& b = *targets[i];
    const std::array<double, 4> d{c.x - b.x1, c.y - b.y1, b.x2 - c.x, b.y2 - c.y};
    for (int k = 0; k < 4; ++k) {
      if (!(d[k] > 0.0)) {
        throw DomainError("regression_targets_to_offsets: anchor " + std::to_string(i) +
                          " is not strictly inside its target box");
      }
      out(i, k) = std::log(d[k] / s);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Datasets

inline constexpr std::uint64_t kValSeedBase = 1'000'000;

struct Dataset {
  SceneSpec spec;
  std::uint64_t base_seed = 0;
  std::vector<Scene> scenes;
};

inline Dataset generate_dataset(const SceneSpec& spec, std::uint64_t base_seed, int count) {
  validate(spec);
  if (count <= 0) throw InvalidSpec("dataset needs at least one scene");
  Dataset ds{spec, base_seed, {}};
  ds.scenes.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) ds.scenes.push_back(generate_scene(base_seed + i, spec));
  return ds;
}

inline nlohmann::json spec_to_json(const SceneSpec& s) {
  return {{"image_w", s.image_w},     {"image_h", s.image_h},   {"num_classes", s.num_classes},
          {"max_objects", s.max_objects}, {"stride", s.stride}, {"min_size", s.min_size},
          {"max_size", s.max_size},   {"noise_amp", s.noise_amp},
          {"hue_span", s.hue_span}};
}

/// Reads spec fields present in `j` over `base`; unknown fields are an error.
inline SceneSpec spec_from_json(const nlohmann::json& j, SceneSpec base = {}) {
  if (!j.is_object()) throw ParseError("scene spec must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    const auto& k = it.key();
    try {
      if (k == "image_w") base.image_w = it->get<int>();
      else if (k == "image_h") base.image_h = it->get<int>();
      else if (k == "num_classes") base.num_classes = it->get<int>();
      else if (k == "max_objects") base.max_objects = it->get<int>();
      else if (k == "stride") base.stride = it->get<int>();
      else if (k == "min_size") base.min_size = it->get<int>();
      else if (k == "max_size") base.max_size = it->get<int>();
      else if (k == "noise_amp") base.noise_amp = it->get<double>();
      else if (k == "hue_span") base.hue_span = it->get<double>();
      else throw ParseError("scene spec: unknown field '" + k + "'");
    } catch (const nlohmann::json::exception& e) {
      throw ParseError("scene spec field '" + k + "': " + e.what());
    }
  }
  return base;
}

inline std::string scene_filename(std::size_t idx) {
  return "scene_" + std::to_string(idx) + ".ppm";
}

/// Writes `scene_<idx>.ppm` files plus `annotations.json` into `dir`.
inline void write_dataset(const std::filesystem::path& dir, const Dataset& ds) {
  std::filesystem::create_directories(dir);
  nlohmann::json scenes = nlohmann::json::array();
  for (std::size_t i = 0; i < ds.scenes.size(); ++i) {
    write_ppm(dir / scene_filename(i), ds.scenes[i].image);
    nlohmann::json objs = nlohmann::json::array();
    for (const auto& o : ds.scenes[i].objects) {
      objs.push_back({{"class", o.class_id}, {"x1", o.box.x1}, {"y1", o.box.y1},
                      {"x2", o.box.x2}, {"y2", o.box.y2}});
    }
    scenes.push_back({{"idx", i}, {"objects", objs}});
  }
  nlohmann::json doc = {{"scenes", scenes}, {"spec", spec_to_json(ds.spec)},
                        {"base_seed", ds.base_seed}};
  std::ofstream out(dir / "annotations.json");
  if (!out) throw IoError("cannot write " + (dir / "annotations.json").string());
  out << doc.dump(1) << "\n";
}

inline Dataset read_dataset(const std::filesystem::path& dir) {
  const auto ann = dir / "annotations.json";
  std::ifstream in(ann);
  if (!in) throw IoError("dataset not found: " + ann.string());
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(ann.string() + ": " + e.what());
  }
  Dataset ds;
  try {
    ds.spec = spec_from_json(doc.at("spec"));
    ds.base_seed = doc.at("base_seed").get<std::uint64_t>();
    for (const auto& s : doc.at("scenes")) {
      const auto idx = s.at("idx").get<std::size_t>();
      if (idx != ds.scenes.size()) throw ParseError(ann.string() + ": scenes out of order");
      Scene scene;
      scene.image = read_ppm(dir / scene_filename(idx));
      for (const auto& o : s.at("objects")) {
        scene.objects.push_back({o.at("class").get<int>(),
                                 Box{o.at("x1").get<double>(), o.at("y1").get<double>(),
                                     o.at("x2").get<double>(), o.at("y2").get<double>()}});
      }
      ds.scenes.push_back(std::move(scene));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(ann.string() + ": " + e.what());
  }
  return ds;
}

}  // namespace densekd
