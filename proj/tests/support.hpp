// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <random>
#include <string>

#include "d2m/random.hpp"
#include "d2m/trajectory.hpp"

namespace d2m::testing {

struct DatasetShape {
  std::size_t samples = 8;
  std::size_t steps = 4;
  std::size_t dim = 3;
  bool entropy = true;
  bool confidence = true;
  bool labels = true;
};

inline Dataset random_dataset(const DatasetShape& shape, std::uint64_t seed, double scale = 1.0) {
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, scale);
  Dataset ds;
  ds.steps = shape.steps;
  ds.dim = shape.dim;
  ds.has_entropy = shape.entropy;
  ds.has_confidence = shape.confidence;
  ds.has_labels = shape.labels;
  for (std::size_t i = 0; i < shape.samples; ++i) {
    Trajectory t;
    t.states = StepMatrix(shape.steps, shape.dim);
    for (auto& v : t.states.values) v = static_cast<float>(normal(rng));
    if (shape.entropy) {
      t.entropy.emplace(shape.steps);
      for (auto& v : *t.entropy) v = static_cast<float>(3.0 * uniform01(rng));
    }
    if (shape.confidence) {
      t.confidence.emplace(shape.steps);
      for (auto& v : *t.confidence) v = static_cast<float>(uniform01(rng));
    }
    if (shape.labels) t.label = static_cast<Label>(i % 2);
    ds.samples.push_back(std::move(t));
  }
  return ds;
}

// Scratch directory removed on scope exit.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() /
            ("d2m_" + tag + "_" + std::to_string(rd()) + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

template <typename Fn>
Errc error_code_of(Fn&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  throw std::logic_error("expected a d2m::Error");
}

}  // namespace d2m::testing
