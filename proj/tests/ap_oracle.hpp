#pragma once

// Brute-force AP used as an oracle for densekd::average_precision.
// Recall levels are compared in integers (100 * tp >= r * num_gt), matching is
// a naive scan, and precision at each recall level is the max over every PR
// point that reaches it.

#include <algorithm>
#include <array>
#include <functional>
#include <set>
#include <vector>

#include "densekd/evaluation.hpp"

namespace densekd::testing {

inline double oracle_class_ap(const std::vector<Detection>& dets,
                              const std::vector<GroundTruth>& gts, int cls, double thresh) {
  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < dets.size(); ++i)
    if (dets[i].class_id == cls) order.push_back(i);
  // Descending score; equal scores keep input order.
  for (std::size_t a = 0; a < order.size(); ++a)
    for (std::size_t b = a + 1; b < order.size(); ++b)
      if (dets[order[b]].score > dets[order[a]].score) {
        const std::size_t moved = order[b];
        order.erase(order.begin() + static_cast<long>(b));
        order.insert(order.begin() + static_cast<long>(a), moved);
      }
  long num_gt = 0;
  for (const auto& g : gts) num_gt += g.class_id == cls;
  if (num_gt == 0) return 0.0;

  std::vector<bool> used(gts.size(), false);
  std::vector<long> tp_at;  // cumulative TPs after each detection
  long tp = 0;
  for (std::size_t di : order) {
    int best = -1;
    double best_iou = -1;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (gts[g].class_id != cls || gts[g].image != dets[di].image || used[g]) continue;
      const double u = iou(dets[di].box, gts[g].box);
      if (u > best_iou) best_iou = u, best = static_cast<int>(g);
    }
    if (best >= 0 && best_iou >= thresh) {
      used[static_cast<std::size_t>(best)] = true;
      ++tp;
    }
    tp_at.push_back(tp);
  }
  double sum = 0;
  for (long r = 0; r <= 100; ++r) {
    double best_p = 0;
    for (std::size_t k = 0; k < tp_at.size(); ++k) {
      if (100 * tp_at[k] >= r * num_gt) {
        best_p = std::max(best_p, static_cast<double>(tp_at[k]) / static_cast<double>(k + 1));
      }
    }
    sum += best_p;
  }
  return sum / 101.0;
}

inline double oracle_ap(const std::vector<Detection>& dets, const std::vector<GroundTruth>& gts,
                        double thresh) {
  std::set<int> classes;
  for (const auto& g : gts) classes.insert(g.class_id);
  double s = 0;
  for (int c : classes) s += oracle_class_ap(dets, gts, c, thresh);
  return s / static_cast<double>(classes.size());
}

struct OracleCase {
  std::vector<Detection> dets;
  std::vector<GroundTruth> gts;
  double thresh;
};

// Every multiset of up to four detections drawn from a pool of boxes x
// classes x scores, against several small GT layouts, at several thresholds.
inline void enumerate_oracle_cases(const std::function<void(const OracleCase&)>& visit) {
  const std::vector<std::vector<GroundTruth>> layouts = {
      {{0, Box{0, 0, 10, 10}, 0}},
      {{0, Box{0, 0, 10, 10}, 0}, {1, Box{20, 20, 30, 30}, 0}},
      {{0, Box{0, 0, 10, 10}, 0}, {0, Box{4, 0, 14, 10}, 0}, {1, Box{20, 20, 30, 30}, 0}},
      {{0, Box{0, 0, 10, 10}, 0}, {0, Box{0, 0, 10, 10}, 1}},
  };
  // Exact, IoU ~0.67, IoU ~0.33 with the first GT, and a box elsewhere.
  const std::array<Box, 4> boxes{Box{0, 0, 10, 10}, Box{2, 0, 12, 10}, Box{5, 0, 15, 10},
                                 Box{20, 20, 30, 30}};
  const std::array<double, 3> scores{0.9, 0.6, 0.3};
  struct Choice {
    std::size_t box, cls, score, image;
  };
  std::vector<Choice> pool;
  for (std::size_t b = 0; b < boxes.size(); ++b)
    for (std::size_t c = 0; c < 2; ++c)
      for (std::size_t s = 0; s < scores.size(); ++s)
        for (std::size_t im = 0; im < 2; ++im) pool.push_back({b, c, s, im});

  for (const auto& gts : layouts) {
    std::size_t images = 1;
    for (const auto& g : gts) images = std::max(images, g.image + 1);
    for (double thresh : {0.3, 0.5, 0.75}) {
      std::vector<std::size_t> idx;
      std::function<void(std::size_t)> rec = [&](std::size_t start) {
        OracleCase oc{{}, gts, thresh};
        for (std::size_t i : idx) {
          const Choice& ch = pool[i];
          oc.dets.push_back({boxes[ch.box], static_cast<int>(ch.cls), scores[ch.score], ch.image});
        }
        visit(oc);
        if (idx.size() == 4) return;
        for (std::size_t i = start; i < pool.size(); ++i) {
          if (pool[i].image >= images) continue;
          idx.push_back(i);
          rec(i);
          idx.pop_back();
        }
      };
      rec(0);
    }
  }
}

}  // namespace densekd::testing
