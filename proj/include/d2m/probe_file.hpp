// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "d2m/error.hpp"
#include "d2m/probes.hpp"
#include "d2m/trajectory.hpp"

namespace d2m {

// Probe file (little-endian):
//   "D2PROBE1" | u32 version=1 | u32 json_len | JSON metadata
//   f32 mean[rows*D] | f32 std[rows*D] | f32 weights[param_count]
// rows = S_trained for per-step stats, else 1. Weights are widened to double
// on load; every in-memory probe produced by training is f32-representable.

inline constexpr std::array<char, 8> kProbeMagic = {'D', '2', 'P', 'R', 'O', 'B', 'E', '1'};
inline constexpr std::uint32_t kProbeVersion = 1;

inline nlohmann::json probe_metadata(const Probe& p) {
  return {
      {"arch", to_string(p.spec.arch)},
      {"D", p.spec.dim},
      {"K", p.spec.hidden},
      {"d_a", p.spec.attn_dim},
      {"d_p", p.spec.proj_dim},
      {"d_h", p.spec.lstm_hidden},
      {"dropout", p.spec.dropout},
      {"readout", to_string(p.spec.readout)},
      {"norm_mode", p.stats.mode == NormMode::PerStep ? "per_step" : "per_feature"},
      {"S_trained", p.trained_steps},
  };
}

inline std::vector<std::uint8_t> encode_probe(const Probe& p) {
  validate(p.spec);
  if (p.weights.size() != param_count(p.spec)) {
    throw Error(Errc::ShapeMismatch, "weights do not match the probe layout");
  }
  const std::size_t rows = p.stats.mode == NormMode::PerStep ? p.trained_steps : 1;
  if (p.stats.dim != p.spec.dim || p.stats.mean.size() != rows * p.spec.dim ||
      p.stats.std.size() != rows * p.spec.dim) {
    throw Error(Errc::ShapeMismatch, "normalization stats do not match the probe");
  }
  const std::string meta = probe_metadata(p).dump();
  io::ByteWriter w;
  w.raw(kProbeMagic.data(), kProbeMagic.size());
  w.u32(kProbeVersion);
  w.u32(static_cast<std::uint32_t>(meta.size()));
  w.raw(meta.data(), meta.size());
  w.f32s(p.stats.mean);
  w.f32s(p.stats.std);
  for (double v : p.weights) w.f32(static_cast<float>(v));
  return w.take();
}

inline Probe decode_probe(std::span<const std::uint8_t> bytes) {
  io::ByteReader r(bytes);
  auto magic = r.take(kProbeMagic.size(), "magic");
  if (std::memcmp(magic.data(), kProbeMagic.data(), kProbeMagic.size()) != 0) {
    throw Error(Errc::BadMagic, "not a D2PROBE1 file");
  }
  const auto version = r.u32("version");
  if (version != kProbeVersion) {
    throw Error(Errc::VersionUnsupported, "probe version " + std::to_string(version));
  }
  const auto json_len = r.u32("metadata length");
  auto meta_bytes = r.take(json_len, "metadata");
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(meta_bytes.begin(), meta_bytes.end());
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::InvalidArgument, std::string("probe metadata: ") + e.what());
  }
  Probe p;
  try {
    p.spec.arch = parse_arch(meta.at("arch").get<std::string>());
    p.spec.dim = meta.at("D").get<std::size_t>();
    p.spec.hidden = meta.at("K").get<std::size_t>();
    p.spec.attn_dim = meta.at("d_a").get<std::size_t>();
    p.spec.proj_dim = meta.at("d_p").get<std::size_t>();
    p.spec.lstm_hidden = meta.at("d_h").get<std::size_t>();
    p.spec.dropout = meta.at("dropout").get<double>();
    p.spec.readout = parse_readout(meta.at("readout").get<std::string>());
    p.trained_steps = meta.at("S_trained").get<std::size_t>();
    const auto mode = meta.at("norm_mode").get<std::string>();
    if (mode != "per_step" && mode != "per_feature") {
      throw Error(Errc::InvalidArgument, "unknown norm_mode '" + mode + "'");
    }
    p.stats.mode = mode == "per_step" ? NormMode::PerStep : NormMode::PerFeature;
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::InvalidArgument, std::string("probe metadata: ") + e.what());
  }
  validate(p.spec);
  const std::size_t rows = p.stats.mode == NormMode::PerStep ? p.trained_steps : 1;
  if (rows == 0) throw Error(Errc::InvalidArgument, "per-step stats need S_trained >= 1");
  p.stats.steps = rows;
  p.stats.dim = p.spec.dim;
  p.stats.mean = r.f32s(rows * p.spec.dim, "mean blob");
  p.stats.std = r.f32s(rows * p.spec.dim, "std blob");
  const auto wf = r.f32s(param_count(p.spec), "weight blob");
  io::check_finite(p.stats.mean, "normalization mean");
  io::check_finite(p.stats.std, "normalization std");
  io::check_finite(wf, "probe weight");
  p.weights.assign(wf.begin(), wf.end());
  if (r.remaining() != 0) throw Error(Errc::InvalidArgument, "trailing bytes after weight blob");
  return p;
}

inline Probe read_probe(const std::filesystem::path& path) {
  return decode_probe(io::read_file(path));
}

inline void write_probe(const Probe& p, const std::filesystem::path& path) {
  io::write_file(path, encode_probe(p));
}

}  // namespace d2m
