#pragma once

#include "densekd/numerics.hpp"

namespace densekd {

/// Raw dense head outputs for one image: n x K logits and n x 4 ltrb offsets.
struct Prediction {
  Grid2 logits;
  Grid2 offsets;

  std::size_t positions() const { return logits.rows(); }
  friend bool operator==(const Prediction&, const Prediction&) = default;
};

}  // namespace densekd
