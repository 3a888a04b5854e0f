// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "d2m/error.hpp"
#include "d2m/metrics.hpp"
#include "d2m/normalize.hpp"
#include "d2m/parallel.hpp"
#include "d2m/probes.hpp"
#include "d2m/random.hpp"
#include "d2m/trajectory.hpp"

namespace d2m {

struct TrainConfig {
  double lr = 1e-3;
  double weight_decay = 0.0;
  double dropout = 0.0;
  std::size_t epochs = 50;
  std::size_t batch_size = 256;
  std::uint64_t seed = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
};

inline void validate(const TrainConfig& cfg) {
  if (!(cfg.lr > 0.0) || !std::isfinite(cfg.lr)) throw Error(Errc::InvalidArgument, "lr must be finite and > 0");
  if (cfg.epochs < 1) throw Error(Errc::InvalidArgument, "epochs must be >= 1");
  if (cfg.batch_size < 1) throw Error(Errc::InvalidArgument, "batch_size must be >= 1");
  if (!(cfg.dropout >= 0.0 && cfg.dropout < 1.0)) throw Error(Errc::InvalidArgument, "dropout must lie in [0,1)");
}

// Search space over (lr, weight_decay, dropout).
struct GridSpace {
  std::vector<double> lr;
  std::vector<double> weight_decay;
  std::vector<double> dropout;

  std::size_t size() const { return lr.size() * weight_decay.size() * dropout.size(); }

  // Tuning grids used for the baseline probes.
  static GridSpace defaults_for(Arch arch) {
    switch (arch) {
      case Arch::LP: return {{1e-5, 1e-4, 1e-3, 1e-2}, {0.0, 1e-6, 1e-5, 1e-4}, {0.0}};
      case Arch::MLP: return {{1e-5, 1e-4, 1e-3}, {0.0, 1e-5, 1e-4, 1e-3}, {0.1, 0.2, 0.3, 0.5}};
      case Arch::TimeAttn: return {{1e-4, 1e-3, 4e-3, 1e-2}, {0.0, 1e-5}, {0.2, 0.3, 0.5}};
      case Arch::LSTM: return {{1e-5, 1e-4, 1e-3}, {0.0, 1e-6, 1e-5, 1e-4}, {0.0, 0.1, 0.2, 0.3}};
    }
    return {};
  }
};

// ---------------------------------------------------------------------------
// Splitting
// ---------------------------------------------------------------------------

struct SplitIndices {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
};

// Seeded stratified split. Each class sends round(ratio * n_c) samples to the
// training side, clamped so both sides see every class. Indices ascend.
inline SplitIndices stratified_split(std::span<const Label> labels, double ratio, std::uint64_t seed) {
  if (!(ratio > 0.0 && ratio < 1.0)) throw Error(Errc::InvalidArgument, "split ratio must be in (0,1)");
  SplitIndices out;
  for (Label cls : {0, 1}) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] == cls) members.push_back(i);
    }
    if (members.size() < 2) {
      throw Error(Errc::TooFewSamples, "class " + std::to_string(cls) + " has " +
                                           std::to_string(members.size()) + " samples; need >= 2");
    }
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(cls)));
    shuffle_indices(members, rng);
    auto n_train = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(members.size())));
    n_train = std::clamp<std::size_t>(n_train, 1, members.size() - 1);
    out.train.insert(out.train.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(n_train));
    out.val.insert(out.val.end(), members.begin() + static_cast<std::ptrdiff_t>(n_train), members.end());
  }
  std::sort(out.train.begin(), out.train.end());
  std::sort(out.val.begin(), out.val.end());
  return out;
}

inline std::pair<Dataset, Dataset> split_train_val(const Dataset& ds, double ratio, std::uint64_t seed) {
  if (!ds.has_labels) throw Error(Errc::InvalidArgument, "splitting needs a labeled dataset");
  const auto labels = ds.labels();
  const auto idx = stratified_split(labels, ratio, seed);
  return {subset(ds, idx.train), subset(ds, idx.val)};
}

// ---------------------------------------------------------------------------
// Adam with decoupled weight decay
// ---------------------------------------------------------------------------

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;

  explicit AdamState(std::size_t n = 0) : m(n, 0.0), v(n, 0.0) {}
};

// `step` is 1-based. Decay is applied to the pre-update weights, outside the
// moment estimates.
inline void adam_step(std::span<double> weights, std::span<const double> grad, AdamState& state,
                      std::size_t step, const TrainConfig& cfg) {
  if (grad.size() != weights.size() || state.m.size() != weights.size() ||
      state.v.size() != weights.size()) {
    throw Error(Errc::ShapeMismatch, "adam_step shape mismatch");
  }
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
  for (std::size_t i = 0; i < weights.size(); ++i) {
    const double g = grad[i];
    state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
    state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
    const double m_hat = state.m[i] / bc1;
    const double v_hat = state.v[i] / bc2;
    weights[i] -= cfg.lr * m_hat / (std::sqrt(v_hat) + cfg.adam_eps) + cfg.lr * cfg.weight_decay * weights[i];
  }
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainResult {
  ProbeSpec spec;  // input spec with the config's dropout applied
  ProbeWeights weights;
  std::vector<double> loss_history;  // mean loss per epoch
};

// Minibatch Adam over prepared inputs (already normalized and reduced to what
// the probe consumes). The last partial batch is kept. Deterministic in
// cfg.seed; the returned weights are rounded to f32 so they match their
// serialized form.
inline TrainResult train_probe(std::span<const StepMatrix> inputs, std::span<const Label> labels,
                               ProbeSpec spec, const TrainConfig& cfg) {
  validate(cfg);
  spec.dropout = cfg.dropout;
  validate(spec);
  if (inputs.empty()) throw Error(Errc::EmptyDataset, "no training inputs");
  if (inputs.size() != labels.size()) throw Error(Errc::LengthMismatch, "inputs/labels size mismatch");

  TrainResult out{spec, init_weights(spec, derive_seed(cfg.seed, 0xA11CE)), {}};
  AdamState adam(out.weights.size());
  Rng order_rng(derive_seed(cfg.seed, 0x5EED));
  auto order = iota_indices(inputs.size());
  std::vector<StepsView> batch;
  std::vector<Label> batch_labels;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    shuffle_indices(order, order_rng);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
      batch.clear();
      batch_labels.clear();
      for (std::size_t k = start; k < stop; ++k) {
        batch.push_back(inputs[order[k]].view());
        batch_labels.push_back(labels[order[k]]);
      }
      ++step;
      auto lg = gradient(spec, out.weights, batch, batch_labels, true, derive_seed(cfg.seed, 0xD0 + step));
      if (!std::isfinite(lg.loss)) {
        throw Error(Errc::NonFiniteLoss, "loss became non-finite at epoch " + std::to_string(epoch) +
                                             ", step " + std::to_string(step) + " (lr=" +
                                             std::to_string(cfg.lr) + ")");
      }
      adam_step(out.weights, lg.grad, adam, step, cfg);
      for (double w : out.weights) {
        if (!std::isfinite(w)) {
          throw Error(Errc::NonFiniteLoss, "weights diverged at epoch " + std::to_string(epoch) +
                                               " (lr=" + std::to_string(cfg.lr) + ")");
        }
      }
      epoch_loss += lg.loss * static_cast<double>(stop - start);
    }
    out.loss_history.push_back(epoch_loss / static_cast<double>(inputs.size()));
  }
  for (auto& w : out.weights) {
    const float f = static_cast<float>(w);
    if (!std::isfinite(f)) throw Error(Errc::NonFiniteLoss, "weights overflow f32");
    w = f;
  }
  return out;
}

// Builds per-readout inputs from an already-normalized labeled dataset.
inline std::vector<StepMatrix> training_inputs(const ProbeSpec& spec, const Dataset& normalized) {
  std::vector<StepMatrix> inputs;
  inputs.reserve(normalized.size());
  for (const auto& t : normalized.samples) inputs.push_back(training_input(spec, t.states));
  return inputs;
}

inline TrainResult train_probe(const Dataset& normalized, const ProbeSpec& spec, const TrainConfig& cfg) {
  if (!normalized.has_labels) throw Error(Errc::InvalidArgument, "training needs labels");
  const auto inputs = training_inputs(spec, normalized);
  const auto labels = normalized.labels();
  return train_probe(inputs, labels, spec, cfg);
}

// Fits stats for the readout, normalizes, trains: a complete probe from raw data.
inline Probe fit_probe(const Dataset& raw, const ProbeSpec& spec, const TrainConfig& cfg) {
  validate(spec);
  auto stats = fit_stats(raw, norm_mode_for(spec.readout));
  auto result = train_probe(apply(raw, stats), spec, cfg);
  return Probe{result.spec, std::move(stats), std::move(result.weights), raw.steps};
}

inline std::vector<Label> predict_labels(const Probe& probe, const Dataset& ds, unsigned threads = 1) {
  std::vector<Label> out(ds.size());
  parallel_for(ds.size(), threads, [&](std::size_t i) {
    out[i] = predict_with_readout(probe, ds.samples[i]).label;
  });
  return out;
}

// ---------------------------------------------------------------------------
// Grid search
// ---------------------------------------------------------------------------

struct GridPoint {
  TrainConfig cfg;
  std::optional<double> val_f1;  // empty when training failed
  std::string failure;
};

struct GridOutcome {
  std::vector<GridPoint> points;
  std::size_t best = 0;
};

// Enumerates the grid in (lr, weight_decay, dropout) order; point i trains
// with seed derive_seed(seed, i).
inline std::vector<TrainConfig> grid_configs(const GridSpace& grid, const TrainConfig& base, std::uint64_t seed) {
  if (grid.size() == 0) throw Error(Errc::InvalidArgument, "empty hyperparameter grid");
  std::vector<TrainConfig> out;
  for (double lr : grid.lr) {
    for (double wd : grid.weight_decay) {
      for (double p : grid.dropout) {
        TrainConfig c = base;
        c.lr = lr;
        c.weight_decay = wd;
        c.dropout = p;
        c.seed = derive_seed(seed, out.size());
        out.push_back(c);
      }
    }
  }
  return out;
}

// Scores each config with `evaluate` (validation macro-F1). Configs whose
// training diverges are recorded and skipped. Ties go to the lowest lr, then
// the lowest weight decay, then the lowest dropout.
inline GridOutcome run_grid(const std::vector<TrainConfig>& configs,
                            const std::function<double(const TrainConfig&)>& evaluate,
                            unsigned threads = 1) {
  GridOutcome out;
  out.points.resize(configs.size());
  parallel_for(configs.size(), threads, [&](std::size_t i) {
    out.points[i].cfg = configs[i];
    try {
      out.points[i].val_f1 = evaluate(configs[i]);
    } catch (const Error& e) {
      if (e.code() != Errc::NonFiniteLoss) throw;
      out.points[i].failure = e.what();
    }
  });
  std::optional<std::size_t> best;
  for (std::size_t i = 0; i < out.points.size(); ++i) {
    const auto& p = out.points[i];
    if (!p.val_f1) continue;
    if (!best) {
      best = i;
      continue;
    }
    const auto& b = out.points[*best];
    const auto key = [](const GridPoint& g) {
      return std::make_tuple(-*g.val_f1, g.cfg.lr, g.cfg.weight_decay, g.cfg.dropout);
    };
    if (key(p) < key(b)) best = i;
  }
  if (!best) throw Error(Errc::NonFiniteLoss, "every grid point diverged");
  out.best = *best;
  return out;
}

struct GridSearchResult {
  TrainConfig best;
  Probe probe;  // retrained on the full dataset with `best`
  GridOutcome outcome;
};

// Tunes on a seeded ratio:(1-ratio) split of `raw` by validation macro-F1,
// then retrains the winner on all of `raw`. One split is shared by every point.
inline GridSearchResult grid_search(const Dataset& raw, const ProbeSpec& spec, const GridSpace& grid,
                                    double ratio, std::uint64_t seed, const TrainConfig& base = {},
                                    unsigned threads = 1) {
  auto [train, val] = split_train_val(raw, ratio, derive_seed(seed, 0x5B17));
  const auto val_labels = val.labels();
  const auto configs = grid_configs(grid, base, seed);
  auto outcome = run_grid(
      configs,
      [&](const TrainConfig& cfg) {
        const Probe probe = fit_probe(train, spec, cfg);
        return macro_f1(predict_labels(probe, val), val_labels);
      },
      threads);
  TrainConfig best = outcome.points[outcome.best].cfg;
  Probe probe = fit_probe(raw, spec, best);
  return {best, std::move(probe), std::move(outcome)};
}

}  // namespace d2m
