// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "d2m/error.hpp"
#include "d2m/trajectory.hpp"

namespace d2m {

enum class NormMode { PerFeature, PerStep };

inline constexpr double kStdFloor = 1e-6;

// mean/std have shape [dim] (PerFeature) or [steps, dim] (PerStep). Values are
// kept at f32 precision so a stats object and its serialized form agree.
struct NormStats {
  NormMode mode = NormMode::PerFeature;
  std::size_t steps = 1;
  std::size_t dim = 0;
  std::vector<float> mean;
  std::vector<float> std;

  std::span<const float> mean_row(std::size_t step) const {
    const std::size_t r = mode == NormMode::PerStep ? step : 0;
    return std::span<const float>(mean).subspan(r * dim, dim);
  }
  std::span<const float> std_row(std::size_t step) const {
    const std::size_t r = mode == NormMode::PerStep ? step : 0;
    return std::span<const float>(std).subspan(r * dim, dim);
  }

  static NormStats identity(std::size_t dim) {
    return {NormMode::PerFeature, 1, dim, std::vector<float>(dim, 0.0f),
            std::vector<float>(dim, 1.0f)};
  }

  bool operator==(const NormStats&) const = default;
};

namespace detail {

struct MomentAccumulator {
  std::vector<double> sum;
  std::vector<double> sum_sq;
  std::vector<double> count;

  MomentAccumulator(std::size_t rows, std::size_t dim)
      : sum(rows * dim, 0.0), sum_sq(rows * dim, 0.0), count(rows, 0.0) {}

  void add(std::size_t r, std::span<const float> x) {
    const std::size_t dim = x.size();
    for (std::size_t d = 0; d < dim; ++d) {
      const double v = x[d];
      sum[r * dim + d] += v;
      sum_sq[r * dim + d] += v * v;
    }
    count[r] += 1.0;
  }

  NormStats finish(NormMode mode, std::size_t rows, std::size_t dim) const {
    NormStats st{mode, rows, dim, std::vector<float>(rows * dim), std::vector<float>(rows * dim)};
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t d = 0; d < dim; ++d) {
        const std::size_t i = r * dim + d;
        const double mu = sum[i] / count[r];
        const double var = std::max(0.0, sum_sq[i] / count[r] - mu * mu);
        st.mean[i] = static_cast<float>(mu);
        float sd = static_cast<float>(std::max(std::sqrt(var), kStdFloor));
        // f32(1e-6) rounds below the floor
        if (sd < kStdFloor) sd = std::nextafter(static_cast<float>(kStdFloor), 1.0f);
        st.std[i] = sd;
      }
    }
    return st;
  }
};

}  // namespace detail

// Population statistics. PerFeature pools samples and steps; PerStep keeps one
// row per denoising step.
inline NormStats fit_stats(const Dataset& ds, NormMode mode) {
  if (ds.samples.empty()) throw Error(Errc::EmptyDataset, "cannot fit stats on an empty dataset");
  const std::size_t rows = mode == NormMode::PerStep ? ds.steps : 1;
  detail::MomentAccumulator acc(rows, ds.dim);
  for (const auto& t : ds.samples) {
    if (t.dim() != ds.dim || t.steps() != ds.steps) {
      throw Error(Errc::ShapeMismatch, "sample shape differs from dataset header");
    }
    for (std::size_t s = 0; s < t.steps(); ++s) acc.add(mode == NormMode::PerStep ? s : 0, t.states.row(s));
  }
  return acc.finish(mode, rows, ds.dim);
}

// PerFeature stats over an arbitrary collection of step blocks (e.g. windows
// of different lengths).
inline NormStats fit_feature_stats(std::span<const StepsView> blocks) {
  if (blocks.empty()) throw Error(Errc::EmptyDataset, "cannot fit stats on no blocks");
  const std::size_t dim = blocks.front().dim;
  detail::MomentAccumulator acc(1, dim);
  for (const auto& b : blocks) {
    if (b.dim != dim) throw Error(Errc::ShapeMismatch, "blocks disagree on dim");
    for (std::size_t s = 0; s < b.steps; ++s) acc.add(0, b.row(s));
  }
  return acc.finish(NormMode::PerFeature, 1, dim);
}

inline void check_compatible(const NormStats& stats, std::size_t steps, std::size_t dim) {
  if (stats.dim != dim) {
    throw Error(Errc::ShapeMismatch, "stats dim " + std::to_string(stats.dim) + " != input dim " +
                                         std::to_string(dim));
  }
  if (stats.mode == NormMode::PerStep && stats.steps != steps) {
    throw Error(Errc::ShapeMismatch, "per-step stats for " + std::to_string(stats.steps) +
                                         " steps applied to " + std::to_string(steps));
  }
}

inline StepMatrix apply(const StepMatrix& x, const NormStats& stats) {
  check_compatible(stats, x.steps, x.dim);
  StepMatrix out(x.steps, x.dim);
  for (std::size_t s = 0; s < x.steps; ++s) {
    const auto in = x.row(s);
    const auto mu = stats.mean_row(s);
    const auto sd = stats.std_row(s);
    auto o = out.row(s);
    for (std::size_t d = 0; d < x.dim; ++d) {
      o[d] = static_cast<float>((static_cast<double>(in[d]) - mu[d]) / static_cast<double>(sd[d]));
    }
  }
  return out;
}

inline Trajectory apply(const Trajectory& t, const NormStats& stats) {
  Trajectory out = t;
  out.states = apply(t.states, stats);
  return out;
}

inline Dataset apply(const Dataset& ds, const NormStats& stats) {
  check_compatible(stats, ds.steps, ds.dim);
  Dataset out = ds;
  for (auto& t : out.samples) t.states = apply(t.states, stats);
  return out;
}

}  // namespace d2m
