// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <span>

#include "d2m/error.hpp"
#include "d2m/trajectory.hpp"

namespace d2m {

// Positive class = 1 (unsafe).
struct Confusion {
  std::size_t tp = 0, fp = 0, fn = 0, tn = 0;

  std::size_t total() const { return tp + fp + fn + tn; }
  bool operator==(const Confusion&) const = default;
};

inline Confusion confusion(std::span<const Label> preds, std::span<const Label> labels) {
  if (preds.size() != labels.size()) {
    throw Error(Errc::LengthMismatch, "predictions and labels differ in length");
  }
  Confusion c;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if ((preds[i] != 0 && preds[i] != 1) || (labels[i] != 0 && labels[i] != 1)) {
      throw Error(Errc::InvalidArgument, "predictions and labels must be binary");
    }
    if (preds[i] == 1) {
      labels[i] == 1 ? ++c.tp : ++c.fp;
    } else {
      labels[i] == 1 ? ++c.fn : ++c.tn;
    }
  }
  return c;
}

struct Scores {
  double accuracy = 0.0;
  double precision_pos = 0.0;
  double recall_pos = 0.0;
  double f1_pos = 0.0;
  double f1_neg = 0.0;
  double f1_macro = 0.0;
  double f2_pos = 0.0;
  double frr = 0.0;
};

namespace detail {
// 0/0 is defined as 0 throughout.
inline double ratio(double num, double den) { return den > 0.0 ? num / den : 0.0; }
}  // namespace detail

inline Scores scores(const Confusion& c) {
  using detail::ratio;
  const double tp = static_cast<double>(c.tp), fp = static_cast<double>(c.fp),
               fn = static_cast<double>(c.fn), tn = static_cast<double>(c.tn);
  Scores s;
  s.accuracy = ratio(tp + tn, tp + fp + fn + tn);
  s.precision_pos = ratio(tp, tp + fp);
  s.recall_pos = ratio(tp, tp + fn);
  s.f1_pos = ratio(2 * tp, 2 * tp + fp + fn);
  s.f1_neg = ratio(2 * tn, 2 * tn + fn + fp);
  s.f1_macro = 0.5 * (s.f1_pos + s.f1_neg);
  s.f2_pos = ratio(5 * s.precision_pos * s.recall_pos, 4 * s.precision_pos + s.recall_pos);
  s.frr = ratio(fp, fp + tn);
  return s;
}

inline double macro_f1(std::span<const Label> preds, std::span<const Label> labels) {
  return scores(confusion(preds, labels)).f1_macro;
}

}  // namespace d2m
