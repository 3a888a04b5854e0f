// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "d2m/error.hpp"
#include "d2m/hesitation.hpp"
#include "d2m/metrics.hpp"
#include "d2m/parallel.hpp"
#include "d2m/probe_file.hpp"
#include "d2m/probes.hpp"
#include "d2m/train.hpp"
#include "d2m/trajectory.hpp"

namespace d2m {

struct CascadeOptions {
  Arch expert_arch = Arch::MLP;
  std::size_t folds = 5;
  double target_ratio = 0.5;
  std::uint64_t seed = 2026;
  TrainConfig base_cfg = base_probe_config();
  TrainConfig expert_cfg = [] {
    TrainConfig c;
    c.lr = 1e-3;
    c.weight_decay = 1e-4;
    c.dropout = 0.1;
    return c;
  }();
  // When set, the expert is tuned on a split of the hesitant trajectories.
  std::optional<GridSpace> expert_grid;
  double grid_ratio = 0.8;
  std::size_t hidden = 256;
  std::size_t attn_dim = 128;
};

struct CascadeBundle {
  Probe base;    // LP, MV readout, per-feature stats
  Probe expert;  // MLP or TimeAttn, Window readout, stats fit on windowed states
  double tau = 0.0;
  std::optional<std::size_t> lambda;  // set by select_lambda
  std::size_t folds = 0;
  double target_ratio = 0.0;
  std::uint64_t seed = 0;
  std::size_t expert_train_count = 0;
  TrainConfig base_cfg;
  TrainConfig expert_cfg;

  std::size_t steps() const { return base.trained_steps; }
};

struct RouteRecord {
  std::size_t severity = 0;  // n_tau
  bool routed = false;
  std::optional<StepSpan> window;  // set iff routed
  Label base_label = 0;
  Label final_label = 0;

  bool operator==(const RouteRecord&) const = default;
};

namespace detail {

struct WindowedSample {
  std::size_t index = 0;
  StepSpan window;
};

inline ProbeSpec expert_spec(const CascadeOptions& opts, std::size_t dim) {
  if (opts.expert_arch != Arch::MLP && opts.expert_arch != Arch::TimeAttn) {
    throw Error(Errc::InvalidArgument, "expert must be mlp or timeattn");
  }
  ProbeSpec spec;
  spec.arch = opts.expert_arch;
  spec.dim = dim;
  spec.hidden = opts.hidden;
  spec.attn_dim = opts.attn_dim;
  spec.readout = Readout::Window;
  return spec;
}

inline Probe fit_window_expert(const Dataset& ds, std::span<const WindowedSample> windows,
                               const ProbeSpec& spec, const TrainConfig& cfg) {
  std::vector<StepMatrix> raw;
  std::vector<StepsView> views;
  std::vector<Label> labels;
  raw.reserve(windows.size());
  for (const auto& w : windows) {
    raw.push_back(slice_window(ds.samples[w.index], w.window).states);
    labels.push_back(*ds.samples[w.index].label);
  }
  for (const auto& m : raw) views.push_back(m.view());
  NormStats stats = fit_feature_stats(views);
  std::vector<StepMatrix> inputs;
  inputs.reserve(raw.size());
  for (const auto& m : raw) inputs.push_back(training_input(spec, apply(m, stats)));
  auto result = train_probe(inputs, labels, spec, cfg);
  return Probe{result.spec, std::move(stats), std::move(result.weights), ds.steps};
}

inline Label expert_label(const Probe& expert, const Trajectory& t, StepSpan window) {
  const Trajectory sub = slice_window(t, window);
  return predict_with_readout(expert, sub, StepSpan{0, sub.steps() - 1}).label;
}

}  // namespace detail

// OOF margins -> tau -> base LP on everything -> expert on the hesitation
// windows of trajectories with n_tau > 0 (by OOF margins). Lambda stays unset.
inline CascadeBundle train_cascade(const Dataset& ds, const CascadeOptions& opts, unsigned threads = 1) {
  validate(ds);
  if (!ds.has_labels) throw Error(Errc::InvalidArgument, "cascade training needs labels");
  CascadeBundle b;
  b.folds = opts.folds;
  b.target_ratio = opts.target_ratio;
  b.seed = opts.seed;
  b.base_cfg = opts.base_cfg;
  b.base_cfg.seed = derive_seed(opts.seed, 2);

  const auto oof = oof_margins(ds, opts.folds, derive_seed(opts.seed, 1), opts.base_cfg, threads);
  b.tau = select_tau(oof, opts.target_ratio);
  b.base = fit_probe(ds, base_probe_spec(ds.dim), b.base_cfg);

  std::vector<detail::WindowedSample> windows;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto prof = profile(oof.margins[i], b.tau);
    if (prof.severity > 0) windows.push_back({i, *prof.window});
  }
  if (windows.empty()) throw Error(Errc::NoHesitationSamples, "no trajectory has a hesitation step");
  b.expert_train_count = windows.size();

  const ProbeSpec spec = detail::expert_spec(opts, ds.dim);
  b.expert_cfg = opts.expert_cfg;
  b.expert_cfg.seed = derive_seed(opts.seed, 3);
  if (opts.expert_grid) {
    std::vector<Label> wl;
    for (const auto& w : windows) wl.push_back(*ds.samples[w.index].label);
    const auto split = stratified_split(wl, opts.grid_ratio, derive_seed(opts.seed, 4));
    std::vector<detail::WindowedSample> tr, va;
    for (auto i : split.train) tr.push_back(windows[i]);
    for (auto i : split.val) va.push_back(windows[i]);
    std::vector<Label> va_labels;
    for (const auto& w : va) va_labels.push_back(*ds.samples[w.index].label);
    const auto configs = grid_configs(*opts.expert_grid, opts.expert_cfg, derive_seed(opts.seed, 3));
    const auto outcome = run_grid(
        configs,
        [&](const TrainConfig& cfg) {
          const Probe expert = detail::fit_window_expert(ds, tr, spec, cfg);
          std::vector<Label> preds;
          for (const auto& w : va) preds.push_back(detail::expert_label(expert, ds.samples[w.index], w.window));
          return macro_f1(preds, va_labels);
        },
        threads);
    b.expert_cfg = outcome.points[outcome.best].cfg;
  }
  b.expert = detail::fit_window_expert(ds, windows, spec, b.expert_cfg);
  return b;
}

// Route one trajectory with an explicit lambda (the bundle's may be unset).
inline RouteRecord classify_with(const CascadeBundle& b, const Trajectory& t, std::size_t lambda) {
  if (t.dim() != b.base.spec.dim) {
    throw Error(Errc::ShapeMismatch, "trajectory dim " + std::to_string(t.dim()) + " != bundle dim " +
                                         std::to_string(b.base.spec.dim));
  }
  const auto margins = step_margins(b.base, t);
  const auto prof = profile(margins, b.tau);
  RouteRecord r;
  r.severity = prof.severity;
  r.base_label = majority_vote(margins);
  r.routed = prof.severity > lambda;
  if (r.routed) {
    r.window = prof.window;
    r.final_label = detail::expert_label(b.expert, t, *prof.window);
  } else {
    r.final_label = r.base_label;
  }
  return r;
}

inline RouteRecord classify(const CascadeBundle& b, const Trajectory& t) {
  if (!b.lambda) throw Error(Errc::InvalidArgument, "bundle has no lambda; run select_lambda first");
  return classify_with(b, t, *b.lambda);
}

inline std::vector<RouteRecord> classify_all(const CascadeBundle& b, const Dataset& ds, unsigned threads = 1) {
  std::vector<RouteRecord> out(ds.size());
  parallel_for(ds.size(), threads, [&](std::size_t i) { out[i] = classify(b, ds.samples[i]); });
  return out;
}

struct LambdaSweep {
  std::size_t best = 0;
  std::vector<double> f1;  // cascade macro-F1 for lambda = 0..S
};

// Macro-F1 on `val` for every lambda in 0..S; ties go to the largest lambda.
inline LambdaSweep select_lambda(const CascadeBundle& b, const Dataset& val, unsigned threads = 1) {
  if (!val.has_labels) throw Error(Errc::InvalidArgument, "lambda selection needs labels");
  const auto labels = val.labels();
  const std::size_t S = b.steps();
  // One pass with lambda = 0 gives both candidate labels for every sample.
  std::vector<RouteRecord> recs(val.size());
  parallel_for(val.size(), threads, [&](std::size_t i) { recs[i] = classify_with(b, val.samples[i], 0); });
  LambdaSweep sweep;
  sweep.f1.resize(S + 1);
  std::vector<Label> preds(val.size());
  for (std::size_t lambda = 0; lambda <= S; ++lambda) {
    for (std::size_t i = 0; i < recs.size(); ++i) {
      preds[i] = recs[i].severity > lambda ? recs[i].final_label : recs[i].base_label;
    }
    sweep.f1[lambda] = macro_f1(preds, labels);
    if (sweep.f1[lambda] >= sweep.f1[sweep.best]) sweep.best = lambda;
  }
  return sweep;
}

struct TauLambdaChoice {
  double tau = 0.0;
  double ratio = 0.0;
  std::size_t lambda = 0;
  double f1 = 0.0;
};

// Joint (tau, lambda) grid on a target-domain validation set, for transfer
// where the training-time tau no longer matches the margin scale. Candidate
// taus are quantiles of the base probe's min-margins on `val`; the expert is
// left untouched. Ties keep the earlier ratio and, within it, the larger lambda.
inline TauLambdaChoice retune_tau_lambda(const CascadeBundle& b, const Dataset& val, std::span<const double> ratios,
                                         unsigned threads = 1) {
  if (ratios.empty()) throw Error(Errc::InvalidArgument, "no target ratios to search");
  std::vector<double> mins(val.size());
  parallel_for(val.size(), threads, [&](std::size_t i) { mins[i] = min_abs(step_margins(b.base, val.samples[i])); });
  std::optional<TauLambdaChoice> best;
  for (double r : ratios) {
    CascadeBundle trial = b;
    trial.tau = select_tau(mins, r);
    const auto sweep = select_lambda(trial, val, threads);
    const double f1 = sweep.f1[sweep.best];
    if (!best || f1 > best->f1) best = TauLambdaChoice{trial.tau, r, sweep.best, f1};
  }
  return *best;
}

// E[P] = |base| + rho * |expert|
inline double expected_params(const CascadeBundle& b, double routed_fraction) {
  if (!(routed_fraction >= 0.0 && routed_fraction <= 1.0)) {
    throw Error(Errc::InvalidArgument, "routed fraction must lie in [0,1]");
  }
  return static_cast<double>(param_count(b.base.spec)) +
         routed_fraction * static_cast<double>(param_count(b.expert.spec));
}

// 2SD for the always-on base margins plus the expert on its mean window,
// weighted by the escalation rate.
inline double expected_flops(const CascadeBundle& b, double p_escalate, double mean_window, std::size_t steps) {
  if (!(p_escalate >= 0.0 && p_escalate <= 1.0)) {
    throw Error(Errc::InvalidArgument, "escalation rate must lie in [0,1]");
  }
  const double base = 2.0 * static_cast<double>(steps) * static_cast<double>(b.base.spec.dim);
  if (p_escalate == 0.0) return base;
  return base + p_escalate * flops_estimate(b.expert.spec, mean_window);
}

// ---------------------------------------------------------------------------
// Bundle directory: base.d2p, expert.d2p, cascade.json
// ---------------------------------------------------------------------------

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"lr", c.lr},         {"weight_decay", c.weight_decay}, {"dropout", c.dropout},
          {"epochs", c.epochs}, {"batch_size", c.batch_size},     {"seed", c.seed}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.lr = j.at("lr").get<double>();
  c.weight_decay = j.at("weight_decay").get<double>();
  c.dropout = j.at("dropout").get<double>();
  c.epochs = j.at("epochs").get<std::size_t>();
  c.batch_size = j.at("batch_size").get<std::size_t>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

inline nlohmann::json cascade_metadata(const CascadeBundle& b) {
  nlohmann::json j;
  j["tau"] = b.tau;
  j["lambda"] = b.lambda ? nlohmann::json(*b.lambda) : nlohmann::json(nullptr);
  j["k"] = b.folds;
  j["target_ratio"] = b.target_ratio;
  j["seeds"] = {{"base", b.seed}, {"base_probe", b.base_cfg.seed}, {"expert", b.expert_cfg.seed}};
  j["expert_train_count"] = b.expert_train_count;
  j["base_config"] = to_json(b.base_cfg);
  j["expert_config"] = to_json(b.expert_cfg);
  return j;
}

inline void write_bundle(const CascadeBundle& b, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw Error(Errc::IoFailure, "cannot create " + dir.string() + ": " + ec.message());
  write_probe(b.base, dir / "base.d2p");
  write_probe(b.expert, dir / "expert.d2p");
  std::ofstream out(dir / "cascade.json", std::ios::trunc);
  if (!out) throw Error(Errc::IoFailure, "cannot write " + (dir / "cascade.json").string());
  out << cascade_metadata(b).dump(2) << '\n';
  if (!out) throw Error(Errc::IoFailure, "write failed for cascade.json");
}

inline CascadeBundle read_bundle(const std::filesystem::path& dir) {
  CascadeBundle b;
  b.base = read_probe(dir / "base.d2p");
  b.expert = read_probe(dir / "expert.d2p");
  std::ifstream in(dir / "cascade.json");
  if (!in) throw Error(Errc::IoFailure, "cannot open " + (dir / "cascade.json").string());
  try {
    const auto j = nlohmann::json::parse(in);
    b.tau = j.at("tau").get<double>();
    if (!j.at("lambda").is_null()) b.lambda = j.at("lambda").get<std::size_t>();
    b.folds = j.at("k").get<std::size_t>();
    b.target_ratio = j.at("target_ratio").get<double>();
    b.seed = j.at("seeds").at("base").get<std::uint64_t>();
    b.expert_train_count = j.at("expert_train_count").get<std::size_t>();
    b.base_cfg = train_config_from_json(j.at("base_config"));
    b.expert_cfg = train_config_from_json(j.at("expert_config"));
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::InvalidArgument, std::string("cascade.json: ") + e.what());
  }
  if (!(b.tau > 0.0)) throw Error(Errc::InvalidArgument, "cascade.json: tau must be > 0");
  if (b.base.spec.arch != Arch::LP || b.expert.spec.readout != Readout::Window) {
    throw Error(Errc::InvalidArgument, "bundle probes have the wrong roles");
  }
  if (b.lambda && *b.lambda > b.steps()) throw Error(Errc::InvalidArgument, "lambda exceeds S");
  return b;
}

}  // namespace d2m
