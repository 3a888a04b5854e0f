// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <sstream>

#include "d2m/hesitation.hpp"
#include "d2m/synth.hpp"
#include "oracles.hpp"
#include "support.hpp"

namespace d2m {
namespace {

using testing::error_code_of;
using testing::random_dataset;

Probe linear_probe(std::vector<double> w, NormStats stats) {
  Probe p;
  p.spec = base_probe_spec(w.size() - 1);
  p.stats = std::move(stats);
  p.weights = std::move(w);
  return p;
}

std::vector<std::vector<double>> ou_sequences(std::size_t n, std::size_t S, std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<std::vector<double>> out(n);
  for (auto& seq : out) {
    const double mu = normal(rng) * 0.3;
    double m = mu + 0.3 * normal(rng);
    for (std::size_t s = 0; s < S; ++s) {
      seq.push_back(m);
      m += 0.5 * (mu - m) + 0.3 * normal(rng);
    }
  }
  return out;
}

TEST(StepMargins, ConstantProbe) {
  const auto ds = random_dataset({1, 5, 3}, 1);
  const auto probe = linear_probe({0, 0, 0, 0.5}, NormStats::identity(3));
  for (double d : step_margins(probe, ds.samples[0])) EXPECT_EQ(d, 0.5);
}

TEST(StepMargins, ConstantTrajectory) {
  Trajectory t;
  t.states = StepMatrix(4, 2, {1.5f, -2.0f, 1.5f, -2.0f, 1.5f, -2.0f, 1.5f, -2.0f});
  const auto probe = linear_probe({0.3, 0.7, -0.1}, NormStats::identity(2));
  const auto d = step_margins(probe, t);
  for (double v : d) EXPECT_EQ(v, d[0]);
}

TEST(StepMargins, MatchesDotProducts) {
  const auto ds = random_dataset({100, 6, 4}, 2, 2.0);
  const auto stats = fit_stats(ds, NormMode::PerFeature);
  const auto probe = linear_probe({0.4, -1.2, 0.05, 0.9, -0.3}, stats);
  for (const auto& t : ds.samples) {
    const auto d = step_margins(probe, t);
    ASSERT_EQ(d.size(), 6u);
    for (std::size_t s = 0; s < 6; ++s) {
      double z = -0.3;
      for (std::size_t k = 0; k < 4; ++k) {
        z += probe.weights[k] * ((t.states.row(s)[k] - stats.mean[k]) / stats.std[k]);
      }
      EXPECT_NEAR(d[s], z, 1e-5);
    }
  }
}

TEST(StepMargins, DimMismatch) {
  const auto ds = random_dataset({1, 5, 3}, 1);
  const auto probe = linear_probe({0, 0, 0.5}, NormStats::identity(2));
  EXPECT_EQ(error_code_of([&] { step_margins(probe, ds.samples[0]); }), Errc::ShapeMismatch);
}

TEST(Profile, WorkedExample) {
  const std::vector<double> m{0.5, 0.05, -0.02, 0.8, 0.01, 0.9};
  const auto p = profile(m, 0.1);
  EXPECT_EQ(p.flags, (std::vector<bool>{false, true, true, false, true, false}));
  EXPECT_EQ(p.severity, 3u);
  ASSERT_TRUE(p.window);
  EXPECT_EQ(p.window->lo, 1u);
  EXPECT_EQ(p.window->hi, 4u);
}

TEST(Profile, NothingFlagged) {
  const std::vector<double> m{0.5, -0.3, 0.2};
  const auto p = profile(m, 0.2);
  EXPECT_EQ(p.severity, 0u);
  EXPECT_FALSE(p.window);
}

TEST(Profile, TauMustBePositive) {
  const std::vector<double> m{0.5};
  EXPECT_EQ(error_code_of([&] { profile(m, 0.0); }), Errc::InvalidArgument);
}

TEST(Profile, MatchesLinearScan) {
  Rng rng(3);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<double> m(1 + rng() % 20);
    for (auto& v : m) v = normal(rng);
    const double tau = 0.05 + uniform01(rng);
    const auto p = profile(m, tau);
    const auto ref = oracle::profile(m, tau);
    ASSERT_EQ(p.flags, ref.flags);
    ASSERT_EQ(p.severity, ref.count);
    ASSERT_EQ(p.window.has_value(), ref.window.has_value());
    if (ref.window) {
      EXPECT_EQ(p.window->lo, ref.window->first);
      EXPECT_EQ(p.window->hi, ref.window->second);
    }
  }
}

TEST(ProfileProperty, SeverityMonotoneInTau) {
  Rng rng(4);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> m(1 + rng() % 16);
    for (auto& v : m) v = normal(rng);
    std::size_t prev = 0;
    for (double tau = 0.01; tau < 3.0; tau *= 1.3) {
      const auto n = profile(m, tau).severity;
      EXPECT_GE(n, prev);
      prev = n;
    }
  }
}

TEST(ProfileProperty, WindowIsMinimal) {
  Rng rng(5);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (int trial = 0; trial < 300; ++trial) {
    std::vector<double> m(1 + rng() % 16);
    for (auto& v : m) v = normal(rng);
    const auto p = profile(m, 0.5);
    if (!p.window) continue;
    EXPECT_TRUE(p.flags[p.window->lo]);
    EXPECT_TRUE(p.flags[p.window->hi]);
    for (std::size_t s = 0; s < m.size(); ++s) {
      if (s < p.window->lo || s > p.window->hi) {
        EXPECT_FALSE(p.flags[s]);
      }
    }
  }
}

TEST(ProfileProperty, MinMarginCriterionEqualsAnyFlag) {
  Rng rng(6);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<double> m(1 + rng() % 16);
    for (auto& v : m) v = normal(rng);
    const double tau = 0.01 + uniform01(rng);
    EXPECT_EQ(min_abs(m) < tau, profile(m, tau).severity >= 1);
  }
}

TEST(ProfileProperty, JointRescalingInvariant) {
  Rng rng(7);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (int trial = 0; trial < 300; ++trial) {
    std::vector<double> m(1 + rng() % 16);
    for (auto& v : m) v = normal(rng);
    const double tau = 0.05 + uniform01(rng);
    const double c = std::ldexp(1.0, static_cast<int>(rng() % 11) - 5);  // exact powers of two
    auto scaled = m;
    for (auto& v : scaled) v *= c;
    const auto a = profile(m, tau), b = profile(scaled, tau * c);
    EXPECT_EQ(a.flags, b.flags);
    EXPECT_EQ(a.severity, b.severity);
    EXPECT_EQ(a.window.has_value(), b.window.has_value());
    if (a.window) {
      EXPECT_EQ(a.window->lo, b.window->lo);
    }
  }
}

TEST(Extrinsic, Counts) {
  Trajectory t;
  t.states = StepMatrix(3, 1);
  t.entropy = std::vector<float>{1.2f, 0.3f, 1.5f};
  t.confidence = std::vector<float>{0.9f, 0.4f, 0.5f};
  const auto e = extrinsic_severity(t, 1.0, 0.5);
  EXPECT_EQ(e.n_entropy, 2u);
  EXPECT_EQ(e.n_confidence, 2u);
  EXPECT_EQ(extrinsic_severity(t, 2.0, 0.1).n_entropy, 0u);
  t.entropy.reset();
  EXPECT_EQ(error_code_of([&] { extrinsic_severity(t, 1.0, 0.5); }), Errc::ChannelMissing);
}

TEST(Folds, StratifiedAndBalanced) {
  std::vector<Label> labels(53);
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = i % 3 == 0;
  const auto fold = stratified_folds(labels, 5, 1);
  for (Label cls : {0, 1}) {
    std::vector<int> count(5, 0);
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] == cls) ++count[fold[i]];
    }
    EXPECT_LE(*std::max_element(count.begin(), count.end()) - *std::min_element(count.begin(), count.end()), 1);
  }
  const std::vector<Label> few{0, 0, 0, 1, 1};
  EXPECT_EQ(error_code_of([&] { stratified_folds(few, 3, 1); }), Errc::TooFewSamples);
}

TEST(Oof, TotalAndDeterministic) {
  const auto ds = random_dataset({30, 4, 3}, 8);
  TrainConfig cfg = base_probe_config();
  cfg.epochs = 3;
  const auto a = oof_margins(ds, 3, 11, cfg);
  ASSERT_EQ(a.margins.size(), 30u);
  for (std::size_t i = 0; i < 30; ++i) {
    EXPECT_EQ(a.margins[i].size(), 4u);
    EXPECT_LT(a.fold[i], 3u);
  }
  const auto b = oof_margins(ds, 3, 11, cfg, 3);
  EXPECT_EQ(a.margins, b.margins);
  EXPECT_EQ(a.fold, b.fold);
}

TEST(Oof, ScriptedTwoFoldPipeline) {
  const auto ds = random_dataset({8, 3, 2}, 9);
  TrainConfig cfg = base_probe_config();
  cfg.epochs = 5;
  const auto oof = oof_margins(ds, 2, 12, cfg);
  for (std::size_t f = 0; f < 2; ++f) {
    std::vector<std::size_t> train_idx;
    for (std::size_t i = 0; i < 8; ++i) {
      if (oof.fold[i] != f) train_idx.push_back(i);
    }
    const auto train = subset(ds, train_idx);
    // stats from the training folds only, then the fixed LP config
    const auto stats = fit_stats(train, NormMode::PerFeature);
    TrainConfig c = cfg;
    c.seed = derive_seed(12, f);
    const auto result = train_probe(apply(train, stats), base_probe_spec(2), c);
    for (std::size_t i = 0; i < 8; ++i) {
      if (oof.fold[i] != f) continue;
      for (std::size_t s = 0; s < 3; ++s) {
        double z = result.weights[2];
        for (std::size_t d = 0; d < 2; ++d) {
          z += result.weights[d] * ((ds.samples[i].states.row(s)[d] - stats.mean[d]) / stats.std[d]);
        }
        EXPECT_NEAR(oof.margins[i][s], z, 1e-5);
      }
    }
  }
}

TEST(OofProperty, PerturbingASampleOnlyMovesOtherFolds) {
  const auto ds = random_dataset({20, 3, 3}, 10);
  TrainConfig cfg = base_probe_config();
  cfg.epochs = 4;
  const auto base = oof_margins(ds, 4, 13, cfg);
  for (std::size_t victim : {0u, 7u, 19u}) {
    auto changed = ds;
    for (auto& v : changed.samples[victim].states.values) v += 3.0f;
    const auto after = oof_margins(changed, 4, 13, cfg);
    ASSERT_EQ(after.fold, base.fold);
    for (std::size_t i = 0; i < 20; ++i) {
      if (i == victim) continue;
      if (base.fold[i] == base.fold[victim]) {
        EXPECT_EQ(after.margins[i], base.margins[i]) << "sample " << i << " shares the victim's fold";
      } else {
        EXPECT_NE(after.margins[i], base.margins[i]) << "sample " << i;
      }
    }
  }
}

TEST(SelectTau, SmallCase) {
  const std::vector<double> mins{0.3, 0.1, 0.4, 0.2};
  const double tau = select_tau(mins, 0.5);
  EXPECT_GT(tau, 0.2);
  EXPECT_LE(tau, 0.3);
  EXPECT_DOUBLE_EQ(oracle::fraction_below(mins, tau), 0.5);
}

TEST(SelectTau, ExtremeQuantile) {
  std::vector<double> mins;
  for (int i = 1; i <= 50; ++i) mins.push_back(0.01 * i);
  const double tau = select_tau(mins, 1.0 - 1e-9);
  EXPECT_GT(tau, 0.49);
  EXPECT_EQ(oracle::fraction_below(mins, tau), 49.0 / 50.0);
  EXPECT_EQ(error_code_of([&] { select_tau(mins, 1.0); }), Errc::InvalidArgument);
}

TEST(SelectTau, NeverOvershootsByMoreThanOneSample) {
  Rng rng(14);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> mins(1 + rng() % 200);
    for (auto& v : mins) v = std::round(uniform01(rng) * 20.0) / 20.0 + 1e-3;  // heavy ties
    const double r = 0.05 + 0.9 * uniform01(rng);
    const double frac = oracle::fraction_below(mins, select_tau(mins, r));
    EXPECT_LE(frac * mins.size(), r * mins.size() + 1.0);
  }
}

TEST(SelectTau, FlaggedFractionOnSyntheticOof) {
  SynthConfig sc;
  sc.samples = 5000;
  sc.seed = 2026;
  const auto ds = generate(sc);
  const auto oof = oof_margins(ds, 5, 1, base_probe_config());
  std::vector<double> mins;
  for (const auto& m : oof.margins) mins.push_back(min_abs(m));
  for (double r : {0.3, 0.5, 0.7}) {
    EXPECT_NEAR(oracle::fraction_below(mins, select_tau(oof, r)), r, 0.02);
  }
}

TEST(Crossing, HandTrace) {
  const std::vector<std::vector<double>> seqs{{0.02, -0.01, 0.5}};
  const std::vector<double> edges{0.0, 0.05, 1.0};
  const auto bins = crossing_probability(seqs, edges);
  EXPECT_EQ(bins[0].transitions, 2u);
  EXPECT_EQ(bins[0].flips, 2u);
  EXPECT_EQ(bins[0].probability(), 1.0);
  EXPECT_FALSE(bins[1].probability());
}

TEST(Crossing, ConstantSignNeverFlips) {
  const std::vector<std::vector<double>> seqs{{0.1, 0.5, 2.0, 0.01}, {3.0, 0.2}};
  const std::vector<double> edges{0.0, 0.5, 1.0, 5.0};
  for (const auto& b : crossing_probability(seqs, edges)) {
    if (b.probability()) {
      EXPECT_EQ(*b.probability(), 0.0);
    }
  }
}

TEST(Crossing, MatchesPairwiseScan) {
  const auto seqs = ou_sequences(1000, 16, 15);
  const auto edges = default_crossing_edges(seqs);
  ASSERT_EQ(edges.size(), 21u);
  const auto bins = crossing_probability(seqs, edges);
  const auto ref = oracle::crossing(seqs, edges);
  for (std::size_t b = 0; b < bins.size(); ++b) {
    EXPECT_EQ(bins[b].transitions, ref.transitions[b]);
    EXPECT_EQ(bins[b].flips, ref.flips[b]);
  }
}

TEST(Crossing, BadEdges) {
  const std::vector<std::vector<double>> seqs{{0.1, 0.2}};
  const std::vector<double> flat{0.0, 0.0};
  EXPECT_EQ(error_code_of([&] { crossing_probability(seqs, flat); }), Errc::InvalidArgument);
}

TEST(Persistence, HandTrace) {
  const std::vector<std::vector<double>> seqs{{0.05, 0.03, 0.8}};
  const auto c = persistence_curve(seqs, 0.1, 2);
  EXPECT_EQ(c.points[0].probability(), 0.5);
  EXPECT_EQ(c.points[1].pairs, 1u);
  EXPECT_EQ(c.points[1].probability(), 0.0);
  EXPECT_DOUBLE_EQ(c.baseline, 2.0 / 3.0);
}

TEST(Persistence, SaturatedCase) {
  const std::vector<std::vector<double>> seqs{{0.01, -0.02, 0.0, 0.03}};
  const auto c = persistence_curve(seqs, 0.1, 3);
  for (const auto& p : c.points) EXPECT_EQ(p.probability(), 1.0);
  EXPECT_EQ(c.baseline, 1.0);
}

TEST(Persistence, MatchesDoubleLoop) {
  const auto seqs = ou_sequences(1000, 16, 16);
  const auto c = persistence_curve(seqs, 0.2, 8);
  const auto ref = oracle::persistence(seqs, 0.2, 8);
  for (std::size_t k = 1; k <= 8; ++k) {
    EXPECT_EQ(c.points[k - 1].pairs, ref.pairs[k]);
    EXPECT_EQ(c.points[k - 1].persisted, ref.persisted[k]);
  }
  EXPECT_NEAR(c.baseline, ref.baseline, 1e-12);
}

TEST(Csv, Headers) {
  OofMargins oof{{{0.5, -0.25}}, {1}, 2};
  std::ostringstream a;
  write_oof_csv(a, oof);
  EXPECT_EQ(a.str(), "sample_id,fold,step,margin\n0,1,0,0.5\n0,1,1,-0.25\n");
  const std::vector<std::vector<double>> seqs{{0.02, -0.01, 0.5}};
  const std::vector<double> edges{0.0, 0.05, 1.0};
  std::ostringstream b;
  write_crossing_csv(b, crossing_probability(seqs, edges));
  EXPECT_EQ(b.str(), "bin_lo,bin_hi,transitions,flips,probability\n0,0.05,2,2,1\n0.05,1,0,0,\n");
  std::ostringstream c;
  write_persistence_csv(c, persistence_curve(seqs, 0.1, 1));
  EXPECT_EQ(c.str().substr(0, c.str().find('\n')), "lag,pairs,persisted,probability,baseline");
}

}  // namespace
}  // namespace d2m
