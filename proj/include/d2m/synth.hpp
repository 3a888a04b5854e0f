// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "d2m/error.hpp"
#include "d2m/parallel.hpp"
#include "d2m/random.hpp"
#include "d2m/trajectory.hpp"

namespace d2m {

// Synthetic trajectories with a stable/hesitant split. Each sample carries a
// scalar "margin" path m_s along a direction u. Easy samples mean-revert to
// +-mu_easy with little noise, so a linear probe separates them. Hard samples
// hover around +-mu_hard with large noise and encode the label as an XOR of
// two signed components along v1 and v2, which only a nonlinear probe reads.
struct SynthConfig {
  std::size_t samples = 1000;
  std::size_t steps = 16;
  std::size_t dim = 32;
  double hard_fraction = 0.4;
  std::uint64_t seed = 0;
  double ou_theta = 0.5;
  double sigma_easy = 0.1;
  double sigma_hard = 0.4;
  double mu_easy = 2.0;
  double mu_hard = 0.15;
  double noise = 0.3;
  double xor_amplitude = 1.5;
  double xor_jitter = 0.1;
};

inline void validate(const SynthConfig& c) {
  if (c.samples < 1 || c.steps < 1) throw Error(Errc::InvalidArgument, "synth needs N >= 1 and S >= 1");
  if (c.dim < 4) throw Error(Errc::InvalidArgument, "synth needs D >= 4");
  if (!(c.hard_fraction >= 0.0 && c.hard_fraction <= 1.0)) {
    throw Error(Errc::InvalidArgument, "hard fraction must lie in [0,1]");
  }
  if (!(c.sigma_easy > 0 && c.sigma_hard > 0 && c.noise > 0 && c.xor_jitter > 0)) {
    throw Error(Errc::InvalidArgument, "synth noise scales must be > 0");
  }
}

// Noise-free channel formulas; both depend only on |m|.
inline double synth_entropy_mean(double m) { return 1.0 + 2.0 * std::exp(-std::abs(m) / 0.5); }
inline double synth_confidence_mean(double m) { return 0.4 + 0.5 * (1.0 - std::exp(-std::abs(m) / 0.5)); }

struct SynthTruth {
  std::vector<bool> hard;
  std::vector<std::vector<double>> margin_paths;  // m_s per sample
  std::array<std::vector<double>, 3> basis;       // u, v1, v2
};

struct SynthOutput {
  Dataset dataset;
  SynthTruth truth;
};

// Seeded Gram-Schmidt on Gaussian draws.
inline std::array<std::vector<double>, 3> synth_basis(std::size_t dim, std::uint64_t seed) {
  Rng rng(derive_seed(seed, 0xBA515));
  std::normal_distribution<double> normal(0.0, 1.0);
  std::array<std::vector<double>, 3> basis;
  for (std::size_t k = 0; k < 3; ++k) {
    auto& v = basis[k];
    for (;;) {
      v.assign(dim, 0.0);
      for (auto& x : v) x = normal(rng);
      for (std::size_t j = 0; j < k; ++j) {
        double proj = 0.0;
        for (std::size_t d = 0; d < dim; ++d) proj += v[d] * basis[j][d];
        for (std::size_t d = 0; d < dim; ++d) v[d] -= proj * basis[j][d];
      }
      double norm = 0.0;
      for (double x : v) norm += x * x;
      norm = std::sqrt(norm);
      if (norm > 1e-8) {
        for (auto& x : v) x /= norm;
        break;
      }
    }
  }
  return basis;
}

// Sample i draws from its own stream derive_seed(seed, i + 1), so output is
// independent of the thread count.
inline SynthOutput generate_with_truth(const SynthConfig& cfg, unsigned threads = 1) {
  validate(cfg);
  const std::size_t N = cfg.samples, S = cfg.steps, D = cfg.dim;
  SynthOutput out;
  out.truth.basis = synth_basis(D, cfg.seed);
  const auto& [u, v1, v2] = out.truth.basis;
  auto& ds = out.dataset;
  ds.steps = S;
  ds.dim = D;
  ds.has_entropy = ds.has_confidence = ds.has_labels = true;
  ds.samples.resize(N);
  std::vector<char> hard(N, 0);
  out.truth.margin_paths.resize(N);

  parallel_for(N, threads, [&](std::size_t i) {
    Rng rng(derive_seed(cfg.seed, i + 1));
    std::normal_distribution<double> normal(0.0, 1.0);
    const Label y = uniform01(rng) < 0.5 ? 1 : 0;
    const bool is_hard = uniform01(rng) < cfg.hard_fraction;
    const double sy = 2.0 * y - 1.0;
    const double mu = sy * (is_hard ? cfg.mu_hard : cfg.mu_easy);
    const double sigma = is_hard ? cfg.sigma_hard : cfg.sigma_easy;
    const double sign_a = uniform01(rng) < 0.5 ? -1.0 : 1.0;
    const double sign_b = sign_a * sy;

    auto& m = out.truth.margin_paths[i];
    m.resize(S);
    m[0] = mu + sigma * normal(rng);
    for (std::size_t s = 1; s < S; ++s) {
      m[s] = m[s - 1] + cfg.ou_theta * (mu - m[s - 1]) + sigma * normal(rng);
    }

    Trajectory t;
    t.label = y;
    t.states = StepMatrix(S, D);
    t.entropy.emplace(S);
    t.confidence.emplace(S);
    for (std::size_t s = 0; s < S; ++s) {
      double a = 0.0, b = 0.0;
      if (is_hard) {
        a = sign_a * cfg.xor_amplitude + cfg.xor_jitter * normal(rng);
        b = sign_b * cfg.xor_amplitude + cfg.xor_jitter * normal(rng);
      }
      auto row = t.states.row(s);
      for (std::size_t d = 0; d < D; ++d) {
        row[d] = static_cast<float>(m[s] * u[d] + a * v1[d] + b * v2[d] + cfg.noise * normal(rng));
      }
      (*t.entropy)[s] = static_cast<float>(synth_entropy_mean(m[s]) + 0.05 * normal(rng));
      (*t.confidence)[s] =
          static_cast<float>(std::clamp(synth_confidence_mean(m[s]) + 0.02 * normal(rng), 0.0, 1.0));
    }
    ds.samples[i] = std::move(t);
    hard[i] = is_hard ? 1 : 0;
  });
  out.truth.hard.assign(hard.begin(), hard.end());
  return out;
}

inline Dataset generate(const SynthConfig& cfg, unsigned threads = 1) {
  return generate_with_truth(cfg, threads).dataset;
}

}  // namespace d2m
