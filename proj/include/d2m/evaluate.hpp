// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "d2m/cascade.hpp"
#include "d2m/metrics.hpp"
#include "d2m/probes.hpp"
#include "d2m/train.hpp"

namespace d2m {

struct Report {
  Confusion confusion;
  Scores scores;
  std::optional<double> routed_fraction;  // cascades only
  std::optional<double> mean_window;      // mean routed window length
  double expected_params = 0.0;
  double expected_mflops = 0.0;
  std::vector<RouteRecord> routes;  // cascades only
  std::vector<Label> predictions;
};

inline Report evaluate(const CascadeBundle& b, const Dataset& ds, unsigned threads = 1) {
  if (!ds.has_labels) throw Error(Errc::InvalidArgument, "evaluation needs labels");
  Report r;
  r.routes = classify_all(b, ds, threads);
  std::size_t routed = 0, window_steps = 0;
  r.predictions.reserve(ds.size());
  for (const auto& rec : r.routes) {
    r.predictions.push_back(rec.final_label);
    if (rec.routed) {
      ++routed;
      window_steps += rec.window->size();
    }
  }
  r.confusion = confusion(r.predictions, ds.labels());
  r.scores = scores(r.confusion);
  const double rho = static_cast<double>(routed) / static_cast<double>(ds.size());
  r.routed_fraction = rho;
  const double s_win = routed ? static_cast<double>(window_steps) / static_cast<double>(routed) : 0.0;
  if (routed) r.mean_window = s_win;
  r.expected_params = expected_params(b, rho);
  r.expected_mflops = expected_flops(b, rho, s_win, ds.steps) / 1e6;
  return r;
}

inline Report evaluate(const Probe& probe, const Dataset& ds, unsigned threads = 1) {
  if (!ds.has_labels) throw Error(Errc::InvalidArgument, "evaluation needs labels");
  Report r;
  r.predictions = predict_labels(probe, ds, threads);
  r.confusion = confusion(r.predictions, ds.labels());
  r.scores = scores(r.confusion);
  r.expected_params = static_cast<double>(param_count(probe.spec));
  r.expected_mflops = flops_estimate(probe.spec, static_cast<double>(ds.steps)) / 1e6;
  return r;
}

inline nlohmann::json report_json(const Report& r) {
  nlohmann::json j = {
      {"accuracy", r.scores.accuracy},         {"f1_macro", r.scores.f1_macro},
      {"f2_pos", r.scores.f2_pos},             {"precision_pos", r.scores.precision_pos},
      {"recall_pos", r.scores.recall_pos},     {"frr", r.scores.frr},
      {"expected_params", r.expected_params}, {"expected_mflops", r.expected_mflops},
  };
  if (r.routed_fraction) j["routed_fraction"] = *r.routed_fraction;
  return j;
}

inline void write_routes_csv(std::ostream& out, std::span<const RouteRecord> routes) {
  out << "sample_id,n_tau,routed,window_lo,window_hi,base_label,final_label\n";
  for (std::size_t i = 0; i < routes.size(); ++i) {
    const auto& r = routes[i];
    out << i << ',' << r.severity << ',' << (r.routed ? 1 : 0) << ',';
    if (r.window) {
      out << r.window->lo << ',' << r.window->hi;
    } else {
      out << ',';
    }
    out << ',' << r.base_label << ',' << r.final_label << '\n';
  }
}

struct SeverityBucket {
  std::size_t count = 0;
  Confusion confusion;
  Scores scores;
};

// Per-n_tau scores of the given predictions.
inline std::map<std::size_t, SeverityBucket> scores_by_severity(std::span<const std::size_t> severity,
                                                                std::span<const Label> preds,
                                                                std::span<const Label> labels) {
  if (severity.size() != preds.size() || preds.size() != labels.size()) {
    throw Error(Errc::LengthMismatch, "severity, predictions and labels differ in length");
  }
  std::map<std::size_t, std::pair<std::vector<Label>, std::vector<Label>>> groups;
  for (std::size_t i = 0; i < severity.size(); ++i) {
    groups[severity[i]].first.push_back(preds[i]);
    groups[severity[i]].second.push_back(labels[i]);
  }
  std::map<std::size_t, SeverityBucket> out;
  for (const auto& [n, g] : groups) {
    SeverityBucket b;
    b.count = g.first.size();
    b.confusion = confusion(g.first, g.second);
    b.scores = scores(b.confusion);
    out.emplace(n, b);
  }
  return out;
}

}  // namespace d2m
