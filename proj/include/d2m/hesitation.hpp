// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "d2m/error.hpp"
#include "d2m/normalize.hpp"
#include "d2m/parallel.hpp"
#include "d2m/probes.hpp"
#include "d2m/random.hpp"
#include "d2m/train.hpp"
#include "d2m/trajectory.hpp"

namespace d2m {

// Signed base-probe logit per step, in stored (generation) order.
inline std::vector<double> step_margins(const Probe& base, const Trajectory& t) {
  if (base.spec.arch != Arch::LP) throw Error(Errc::InvalidArgument, "margins come from a linear probe");
  if (t.dim() != base.spec.dim) {
    throw Error(Errc::ShapeMismatch, "trajectory dim " + std::to_string(t.dim()) + " != probe dim " +
                                         std::to_string(base.spec.dim));
  }
  const StepMatrix x = apply(t.states, base.stats);
  std::vector<double> out(x.steps);
  for (std::size_t s = 0; s < x.steps; ++s) {
    out[s] = forward(base.spec, base.weights, StepsView{x.row(s), 1, x.dim});
  }
  return out;
}

struct HesitationProfile {
  std::vector<double> margins;
  std::vector<bool> flags;  // |d_s| < tau
  std::size_t severity = 0;  // n_tau
  std::optional<StepSpan> window;  // minimal span covering every flag
  double tau = 0.0;
};

inline HesitationProfile profile(std::span<const double> margins, double tau) {
  if (!(tau > 0.0)) throw Error(Errc::InvalidArgument, "tau must be > 0");
  HesitationProfile p{{margins.begin(), margins.end()}, std::vector<bool>(margins.size(), false), 0,
                      std::nullopt, tau};
  for (std::size_t s = 0; s < margins.size(); ++s) {
    if (std::abs(margins[s]) < tau) {
      p.flags[s] = true;
      ++p.severity;
      if (!p.window) {
        p.window = StepSpan{s, s};
      } else {
        p.window->hi = s;
      }
    }
  }
  return p;
}

struct ExtrinsicSeverity {
  std::size_t n_entropy = 0;
  std::size_t n_confidence = 0;
};

// Step counts for the token-distribution signals: E_s >= tau_E, C_s <= tau_C.
inline ExtrinsicSeverity extrinsic_severity(const Trajectory& t, double tau_entropy, double tau_confidence) {
  if (!t.entropy || !t.confidence) {
    throw Error(Errc::ChannelMissing, "entropy and confidence channels are required");
  }
  ExtrinsicSeverity out;
  for (float e : *t.entropy) out.n_entropy += e >= tau_entropy ? 1 : 0;
  for (float c : *t.confidence) out.n_confidence += c <= tau_confidence ? 1 : 0;
  return out;
}

// ---------------------------------------------------------------------------
// Out-of-fold margins
// ---------------------------------------------------------------------------

struct OofMargins {
  std::vector<std::vector<double>> margins;  // [sample][step]
  std::vector<std::size_t> fold;
  std::size_t k = 0;
};

// Stratified fold ids: each class is shuffled and dealt round-robin, the
// second class continuing where the first stopped.
inline std::vector<std::size_t> stratified_folds(std::span<const Label> labels, std::size_t k,
                                                 std::uint64_t seed) {
  if (k < 2) throw Error(Errc::InvalidArgument, "need at least 2 folds");
  std::vector<std::size_t> fold(labels.size(), 0);
  std::size_t dealt = 0;
  for (Label cls : {0, 1}) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] == cls) members.push_back(i);
    }
    if (members.size() < k) {
      throw Error(Errc::TooFewSamples, "class " + std::to_string(cls) + " has " +
                                           std::to_string(members.size()) + " samples for " +
                                           std::to_string(k) + " folds");
    }
    Rng rng(derive_seed(seed, 0xF01D + static_cast<std::uint64_t>(cls)));
    shuffle_indices(members, rng);
    for (auto i : members) fold[i] = dealt++ % k;
  }
  return fold;
}

// Configuration shared by the fold probes and the cascade base probe.
inline TrainConfig base_probe_config(std::uint64_t seed = 0) {
  TrainConfig cfg;
  cfg.lr = 1e-3;
  cfg.weight_decay = 1e-4;
  cfg.seed = seed;
  return cfg;
}

inline ProbeSpec base_probe_spec(std::size_t dim) {
  ProbeSpec spec;
  spec.arch = Arch::LP;
  spec.dim = dim;
  spec.readout = Readout::MV;
  return spec;
}

// Each fold is scored by an LP trained (with per-feature stats refit) on the
// other k-1 folds only. Fold f trains with seed derive_seed(seed, f).
inline OofMargins oof_margins(const Dataset& ds, std::size_t k, std::uint64_t seed,
                              const TrainConfig& cfg = base_probe_config(), unsigned threads = 1) {
  if (!ds.has_labels) throw Error(Errc::InvalidArgument, "OOF scoring needs labels");
  const auto labels = ds.labels();
  OofMargins out;
  out.k = k;
  out.fold = stratified_folds(labels, k, seed);
  out.margins.assign(ds.size(), {});
  const auto spec = base_probe_spec(ds.dim);
  parallel_for(k, threads, [&](std::size_t f) {
    std::vector<std::size_t> train_idx;
    for (std::size_t i = 0; i < ds.size(); ++i) {
      if (out.fold[i] != f) train_idx.push_back(i);
    }
    TrainConfig fold_cfg = cfg;
    fold_cfg.seed = derive_seed(seed, f);
    const Probe probe = fit_probe(subset(ds, train_idx), spec, fold_cfg);
    for (std::size_t i = 0; i < ds.size(); ++i) {
      if (out.fold[i] == f) out.margins[i] = step_margins(probe, ds.samples[i]);
    }
  });
  return out;
}

inline double min_abs(std::span<const double> margins) {
  double m = std::numeric_limits<double>::infinity();
  for (double d : margins) m = std::min(m, std::abs(d));
  return m;
}

// A trajectory is hesitant iff min_s |d_s| < tau. Returns the element of rank
// floor(target * N) among the sorted minimum margins, so strictly fewer than
// target * N + 1 trajectories are flagged.
inline double select_tau(std::span<const double> min_margins, double target_ratio) {
  if (!(target_ratio > 0.0 && target_ratio < 1.0)) {
    throw Error(Errc::InvalidArgument, "target ratio must lie in (0,1)");
  }
  if (min_margins.empty()) throw Error(Errc::EmptyDataset, "no margins to select tau from");
  std::vector<double> sorted(min_margins.begin(), min_margins.end());
  std::sort(sorted.begin(), sorted.end());
  const auto rank = std::min(sorted.size() - 1,
                             static_cast<std::size_t>(std::floor(target_ratio * static_cast<double>(sorted.size()))));
  const double tau = sorted[rank];
  return tau > 0.0 ? tau : std::nextafter(0.0, 1.0);
}

inline double select_tau(const OofMargins& oof, double target_ratio) {
  std::vector<double> mins;
  mins.reserve(oof.margins.size());
  for (const auto& m : oof.margins) mins.push_back(min_abs(m));
  return select_tau(mins, target_ratio);
}

// ---------------------------------------------------------------------------
// Trajectory dynamics
// ---------------------------------------------------------------------------

struct CrossingBin {
  double lo = 0.0;
  double hi = 0.0;
  std::size_t transitions = 0;
  std::size_t flips = 0;

  std::optional<double> probability() const {
    if (transitions == 0) return std::nullopt;
    return static_cast<double>(flips) / static_cast<double>(transitions);
  }
};

inline int sign_of(double x) { return (x > 0.0) - (x < 0.0); }

// For every step s < S-1, bins |d_s| and counts sign(d_{s+1}) != sign(d_s).
// Bins are [e_i, e_{i+1}); the last bin also absorbs values above the top
// edge. Values below the first edge are ignored.
inline std::vector<CrossingBin> crossing_probability(std::span<const std::vector<double>> sequences,
                                                     std::span<const double> edges) {
  if (edges.size() < 2) throw Error(Errc::InvalidArgument, "need at least two bin edges");
  for (std::size_t i = 1; i < edges.size(); ++i) {
    if (!(edges[i] > edges[i - 1])) throw Error(Errc::InvalidArgument, "bin edges must increase");
  }
  std::vector<CrossingBin> bins(edges.size() - 1);
  for (std::size_t b = 0; b < bins.size(); ++b) {
    bins[b].lo = edges[b];
    bins[b].hi = edges[b + 1];
  }
  for (const auto& seq : sequences) {
    for (std::size_t s = 0; s + 1 < seq.size(); ++s) {
      const double a = std::abs(seq[s]);
      if (a < edges.front()) continue;
      auto it = std::upper_bound(edges.begin(), edges.end(), a);
      std::size_t b = static_cast<std::size_t>(it - edges.begin()) - 1;
      b = std::min(b, bins.size() - 1);
      ++bins[b].transitions;
      if (sign_of(seq[s + 1]) != sign_of(seq[s])) ++bins[b].flips;
    }
  }
  return bins;
}

// `bins` equal-width bins over [0, 99th percentile of |d_s|].
inline std::vector<double> default_crossing_edges(std::span<const std::vector<double>> sequences,
                                                  std::size_t bins = 20) {
  if (bins < 1) throw Error(Errc::InvalidArgument, "need at least one bin");
  std::vector<double> mags;
  for (const auto& seq : sequences) {
    for (double d : seq) mags.push_back(std::abs(d));
  }
  double top = 1.0;
  if (!mags.empty()) {
    std::sort(mags.begin(), mags.end());
    const auto rank = static_cast<std::size_t>(std::floor(0.99 * static_cast<double>(mags.size() - 1)));
    if (mags[rank] > 0.0) top = mags[rank];
  }
  std::vector<double> edges(bins + 1);
  for (std::size_t i = 0; i <= bins; ++i) edges[i] = top * static_cast<double>(i) / static_cast<double>(bins);
  return edges;
}

struct PersistencePoint {
  std::size_t lag = 0;
  std::size_t pairs = 0;      // (s, s+lag) with |d_s| < tau
  std::size_t persisted = 0;  // ... and |d_{s+lag}| < tau

  std::optional<double> probability() const {
    if (pairs == 0) return std::nullopt;
    return static_cast<double>(persisted) / static_cast<double>(pairs);
  }
};

struct PersistenceCurve {
  std::vector<PersistencePoint> points;  // lags 1..K
  double baseline = 0.0;                 // fraction of hesitant steps overall
};

inline PersistenceCurve persistence_curve(std::span<const std::vector<double>> sequences, double tau,
                                          std::size_t max_lag) {
  if (max_lag < 1) throw Error(Errc::InvalidArgument, "max lag must be >= 1");
  PersistenceCurve out;
  out.points.resize(max_lag);
  std::size_t hesitant = 0, total = 0;
  for (std::size_t k = 1; k <= max_lag; ++k) out.points[k - 1].lag = k;
  for (const auto& seq : sequences) {
    const std::size_t S = seq.size();
    for (std::size_t s = 0; s < S; ++s) {
      const bool here = std::abs(seq[s]) < tau;
      hesitant += here ? 1 : 0;
      ++total;
      if (!here) continue;
      for (std::size_t k = 1; k <= max_lag && s + k < S; ++k) {
        auto& p = out.points[k - 1];
        ++p.pairs;
        if (std::abs(seq[s + k]) < tau) ++p.persisted;
      }
    }
  }
  out.baseline = total ? static_cast<double>(hesitant) / static_cast<double>(total) : 0.0;
  return out;
}

// ---------------------------------------------------------------------------
// CSV exports
// ---------------------------------------------------------------------------

inline void write_oof_csv(std::ostream& out, const OofMargins& oof) {
  out << "sample_id,fold,step,margin\n";
  const auto old = out.precision(17);
  for (std::size_t i = 0; i < oof.margins.size(); ++i) {
    for (std::size_t s = 0; s < oof.margins[i].size(); ++s) {
      out << i << ',' << oof.fold[i] << ',' << s << ',' << oof.margins[i][s] << '\n';
    }
  }
  out.precision(old);
}

// Empty probability field for bins without transitions.
inline void write_crossing_csv(std::ostream& out, std::span<const CrossingBin> bins) {
  out << "bin_lo,bin_hi,transitions,flips,probability\n";
  for (const auto& b : bins) {
    out << b.lo << ',' << b.hi << ',' << b.transitions << ',' << b.flips << ',';
    if (const auto p = b.probability()) out << *p;
    out << '\n';
  }
}

inline void write_persistence_csv(std::ostream& out, const PersistenceCurve& curve) {
  out << "lag,pairs,persisted,probability,baseline\n";
  for (const auto& p : curve.points) {
    out << p.lag << ',' << p.pairs << ',' << p.persisted << ',';
    if (const auto v = p.probability()) out << *v;
    out << ',' << curve.baseline << '\n';
  }
}

}  // namespace d2m
