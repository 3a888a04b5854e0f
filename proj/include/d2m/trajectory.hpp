// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "d2m/error.hpp"

namespace d2m {

// Binary label; 1 = unsafe (positive class).
using Label = int;

// Inclusive range of denoising steps.
struct StepSpan {
  std::size_t lo = 0;
  std::size_t hi = 0;

  std::size_t size() const { return hi - lo + 1; }
  bool operator==(const StepSpan&) const = default;
};

// Non-owning steps x dim row-major block.
struct StepsView {
  std::span<const float> values;
  std::size_t steps = 0;
  std::size_t dim = 0;

  std::span<const float> row(std::size_t s) const { return values.subspan(s * dim, dim); }
};

// Owning steps x dim matrix, step-major. Row 0 is the first denoising step
// and row steps-1 the final, most refined one.
struct StepMatrix {
  std::size_t steps = 0;
  std::size_t dim = 0;
  std::vector<float> values;

  StepMatrix() = default;
  StepMatrix(std::size_t s, std::size_t d) : steps(s), dim(d), values(s * d, 0.0f) {}
  StepMatrix(std::size_t s, std::size_t d, std::vector<float> v)
      : steps(s), dim(d), values(std::move(v)) {
    if (values.size() != steps * dim) {
      throw Error(Errc::ShapeMismatch, "step matrix payload does not match steps*dim");
    }
  }

  std::span<const float> row(std::size_t s) const {
    return std::span<const float>(values).subspan(s * dim, dim);
  }
  std::span<float> row(std::size_t s) { return std::span<float>(values).subspan(s * dim, dim); }
  StepsView view() const { return {values, steps, dim}; }

  bool operator==(const StepMatrix&) const = default;
};

struct Trajectory {
  StepMatrix states;
  std::optional<std::vector<float>> entropy;
  std::optional<std::vector<float>> confidence;
  std::optional<Label> label;

  std::size_t steps() const { return states.steps; }
  std::size_t dim() const { return states.dim; }

  bool operator==(const Trajectory&) const = default;
};

// Token-resolved hidden states, steps x tokens x dim.
struct RawTrajectory {
  std::size_t steps = 0;
  std::size_t tokens = 0;
  std::size_t dim = 0;
  std::vector<float> values;

  float at(std::size_t s, std::size_t r, std::size_t d) const {
    return values[(s * tokens + r) * dim + d];
  }
};

namespace flags {
inline constexpr std::uint32_t kEntropy = 1u << 0;
inline constexpr std::uint32_t kConfidence = 1u << 1;
inline constexpr std::uint32_t kLabels = 1u << 2;
inline constexpr std::uint32_t kRawTokens = 1u << 3;
inline constexpr std::uint32_t kKnown = kEntropy | kConfidence | kLabels | kRawTokens;
}  // namespace flags

struct Dataset {
  std::size_t steps = 0;
  std::size_t dim = 0;
  bool has_entropy = false;
  bool has_confidence = false;
  bool has_labels = false;
  std::vector<Trajectory> samples;

  std::size_t size() const { return samples.size(); }

  std::uint32_t flags() const {
    return (has_entropy ? flags::kEntropy : 0u) | (has_confidence ? flags::kConfidence : 0u) |
           (has_labels ? flags::kLabels : 0u);
  }

  std::vector<Label> labels() const {
    std::vector<Label> out;
    out.reserve(samples.size());
    for (const auto& t : samples) out.push_back(t.label.value_or(0));
    return out;
  }

  bool operator==(const Dataset&) const = default;
};

// Sample subset in the given order; header fields are copied.
inline Dataset subset(const Dataset& ds, std::span<const std::size_t> indices) {
  Dataset out;
  out.steps = ds.steps;
  out.dim = ds.dim;
  out.has_entropy = ds.has_entropy;
  out.has_confidence = ds.has_confidence;
  out.has_labels = ds.has_labels;
  out.samples.reserve(indices.size());
  for (auto i : indices) out.samples.push_back(ds.samples.at(i));
  return out;
}

inline void validate(const Trajectory& t) {
  if (t.steps() < 1 || t.dim() < 1) throw Error(Errc::ShapeMismatch, "trajectory needs S>=1, D>=1");
  if (t.states.values.size() != t.steps() * t.dim()) {
    throw Error(Errc::ShapeMismatch, "state payload does not match S*D");
  }
  for (float v : t.states.values) {
    if (!std::isfinite(v)) throw Error(Errc::NonFiniteValue, "hidden state is not finite");
  }
  if (t.entropy) {
    if (t.entropy->size() != t.steps()) throw Error(Errc::ShapeMismatch, "entropy length != S");
    for (float v : *t.entropy) {
      if (!std::isfinite(v)) throw Error(Errc::NonFiniteValue, "entropy is not finite");
    }
  }
  if (t.confidence) {
    if (t.confidence->size() != t.steps()) throw Error(Errc::ShapeMismatch, "confidence length != S");
    for (float v : *t.confidence) {
      if (!std::isfinite(v)) throw Error(Errc::NonFiniteValue, "confidence is not finite");
      if (v < 0.0f || v > 1.0f) throw Error(Errc::InvalidArgument, "confidence outside [0,1]");
    }
  }
  if (t.label && *t.label != 0 && *t.label != 1) {
    throw Error(Errc::InvalidArgument, "label must be 0 or 1");
  }
}

inline void validate(const Dataset& ds) {
  if (ds.samples.empty()) throw Error(Errc::EmptyDataset, "dataset has no samples");
  if (ds.steps < 1 || ds.dim < 1) throw Error(Errc::ShapeMismatch, "dataset needs S>=1, D>=1");
  for (const auto& t : ds.samples) {
    if (t.steps() != ds.steps || t.dim() != ds.dim) {
      throw Error(Errc::ShapeMismatch, "sample shape differs from dataset header");
    }
    if (t.entropy.has_value() != ds.has_entropy || t.confidence.has_value() != ds.has_confidence ||
        t.label.has_value() != ds.has_labels) {
      throw Error(Errc::InvalidArgument, "sample channel presence differs from dataset flags");
    }
    validate(t);
  }
}

inline StepMatrix mean_pool_tokens(const RawTrajectory& raw) {
  if (raw.steps < 1 || raw.tokens < 1 || raw.dim < 1 ||
      raw.values.size() != raw.steps * raw.tokens * raw.dim) {
    throw Error(Errc::ShapeMismatch, "raw trajectory payload does not match S*L*D");
  }
  StepMatrix out(raw.steps, raw.dim);
  std::vector<double> acc(raw.dim);
  for (std::size_t s = 0; s < raw.steps; ++s) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (std::size_t r = 0; r < raw.tokens; ++r) {
      for (std::size_t d = 0; d < raw.dim; ++d) acc[d] += raw.at(s, r, d);
    }
    auto row = out.row(s);
    for (std::size_t d = 0; d < raw.dim; ++d) {
      row[d] = static_cast<float>(acc[d] / static_cast<double>(raw.tokens));
    }
  }
  return out;
}

inline Trajectory slice_window(const Trajectory& t, StepSpan span) {
  if (span.lo > span.hi || span.hi >= t.steps()) {
    throw Error(Errc::SpanOutOfRange, "window [" + std::to_string(span.lo) + "," +
                                          std::to_string(span.hi) + "] outside " +
                                          std::to_string(t.steps()) + " steps");
  }
  Trajectory out;
  const auto d = t.dim();
  out.states.steps = span.size();
  out.states.dim = d;
  out.states.values.assign(t.states.values.begin() + static_cast<std::ptrdiff_t>(span.lo * d),
                           t.states.values.begin() + static_cast<std::ptrdiff_t>((span.hi + 1) * d));
  auto cut = [&](const std::optional<std::vector<float>>& ch) -> std::optional<std::vector<float>> {
    if (!ch) return std::nullopt;
    return std::vector<float>(ch->begin() + static_cast<std::ptrdiff_t>(span.lo),
                              ch->begin() + static_cast<std::ptrdiff_t>(span.hi + 1));
  };
  out.entropy = cut(t.entropy);
  out.confidence = cut(t.confidence);
  out.label = t.label;
  return out;
}

// ---------------------------------------------------------------------------
// Dataset file (little-endian):
//   "D2TRAJ01" | u32 version=1 | u32 flags | u32 I | u32 S | u32 D | [u32 L]
//   per sample: [u8 label] f32[S*D or S*L*D] [f32[S] entropy] [f32[S] conf]
// ---------------------------------------------------------------------------

inline constexpr std::array<char, 8> kDatasetMagic = {'D', '2', 'T', 'R', 'A', 'J', '0', '1'};
inline constexpr std::uint32_t kDatasetVersion = 1;

namespace io {

class ByteWriter {
 public:
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    bytes_.insert(bytes_.end(), b, b + n);
  }
  void u8(std::uint8_t v) { bytes_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void f32s(std::span<const float> vs) {
    for (float v : vs) f32(v);
  }
  std::vector<std::uint8_t> take() { return std::move(bytes_); }

 private:
  std::vector<std::uint8_t> bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  void need(std::size_t n, const char* what) const {
    if (bytes_.size() - pos_ < n) {
      throw Error(Errc::Truncated, std::string("payload ends inside ") + what);
    }
  }
  std::span<const std::uint8_t> take(std::size_t n, const char* what) {
    need(n, what);
    auto out = bytes_.subspan(pos_, n);
    pos_ += n;
    return out;
  }
  std::uint8_t u8(const char* what) { return take(1, what)[0]; }
  std::uint32_t u32(const char* what) {
    auto b = take(4, what);
    return static_cast<std::uint32_t>(b[0]) | static_cast<std::uint32_t>(b[1]) << 8 |
           static_cast<std::uint32_t>(b[2]) << 16 | static_cast<std::uint32_t>(b[3]) << 24;
  }
  float f32(const char* what) { return std::bit_cast<float>(u32(what)); }
  std::vector<float> f32s(std::size_t n, const char* what) {
    need(n * 4, what);
    std::vector<float> out(n);
    for (auto& v : out) v = f32(what);
    return out;
  }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::IoFailure, "cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  if (in.bad()) throw Error(Errc::IoFailure, "read failed for " + path.string());
  return bytes;
}

inline void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(Errc::IoFailure, "cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  out.flush();
  if (!out) throw Error(Errc::IoFailure, "write failed for " + path.string());
}

inline void check_finite(std::span<const float> vs, const char* what) {
  for (float v : vs) {
    if (!std::isfinite(v)) throw Error(Errc::NonFiniteValue, std::string(what) + " is not finite");
  }
}

}  // namespace io

inline std::vector<std::uint8_t> encode_dataset(const Dataset& ds) {
  validate(ds);
  io::ByteWriter w;
  w.raw(kDatasetMagic.data(), kDatasetMagic.size());
  w.u32(kDatasetVersion);
  w.u32(ds.flags());
  w.u32(static_cast<std::uint32_t>(ds.size()));
  w.u32(static_cast<std::uint32_t>(ds.steps));
  w.u32(static_cast<std::uint32_t>(ds.dim));
  for (const auto& t : ds.samples) {
    if (ds.has_labels) w.u8(static_cast<std::uint8_t>(*t.label));
    w.f32s(t.states.values);
    if (ds.has_entropy) w.f32s(*t.entropy);
    if (ds.has_confidence) w.f32s(*t.confidence);
  }
  return w.take();
}

// Raw-token payloads (flag bit 3) are mean-pooled over tokens on load, so the
// returned Dataset is always S x D.
inline Dataset decode_dataset(std::span<const std::uint8_t> bytes) {
  io::ByteReader r(bytes);
  auto magic = r.take(kDatasetMagic.size(), "magic");
  if (std::memcmp(magic.data(), kDatasetMagic.data(), kDatasetMagic.size()) != 0) {
    throw Error(Errc::BadMagic, "not a D2TRAJ01 dataset");
  }
  const auto version = r.u32("version");
  if (version != kDatasetVersion) {
    throw Error(Errc::VersionUnsupported, "dataset version " + std::to_string(version));
  }
  const auto fl = r.u32("flags");
  if (fl & ~flags::kKnown) throw Error(Errc::VersionUnsupported, "unknown dataset flag bits");
  const std::size_t count = r.u32("sample count");
  Dataset ds;
  ds.steps = r.u32("steps");
  ds.dim = r.u32("dim");
  ds.has_entropy = fl & flags::kEntropy;
  ds.has_confidence = fl & flags::kConfidence;
  ds.has_labels = fl & flags::kLabels;
  const bool raw = fl & flags::kRawTokens;
  const std::size_t tokens = raw ? r.u32("token count") : 1;
  if (count == 0) throw Error(Errc::EmptyDataset, "dataset header declares zero samples");
  if (ds.steps == 0 || ds.dim == 0 || tokens == 0) {
    throw Error(Errc::ShapeMismatch, "dataset header has a zero dimension");
  }
  const std::size_t per_sample = (ds.has_labels ? 1 : 0) + 4 * ds.steps * tokens * ds.dim +
                                 (ds.has_entropy ? 4 * ds.steps : 0) +
                                 (ds.has_confidence ? 4 * ds.steps : 0);
  r.need(per_sample * count, "sample payload");

  ds.samples.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    Trajectory t;
    if (ds.has_labels) t.label = static_cast<Label>(r.u8("label"));
    if (raw) {
      RawTrajectory rt{ds.steps, tokens, ds.dim, r.f32s(ds.steps * tokens * ds.dim, "states")};
      io::check_finite(rt.values, "hidden state");
      t.states = mean_pool_tokens(rt);
    } else {
      t.states = StepMatrix(ds.steps, ds.dim, r.f32s(ds.steps * ds.dim, "states"));
    }
    if (ds.has_entropy) t.entropy = r.f32s(ds.steps, "entropy");
    if (ds.has_confidence) t.confidence = r.f32s(ds.steps, "confidence");
    validate(t);
    ds.samples.push_back(std::move(t));
  }
  if (r.remaining() != 0) throw Error(Errc::InvalidArgument, "trailing bytes after last sample");
  return ds;
}

inline Dataset read_dataset(const std::filesystem::path& path) {
  return decode_dataset(io::read_file(path));
}

inline void write_dataset(const Dataset& ds, const std::filesystem::path& path) {
  io::write_file(path, encode_dataset(ds));
}

// Token-resolved sample, for producers that leave pooling to the reader.
struct RawSample {
  RawTrajectory states;
  std::optional<std::vector<float>> entropy;
  std::optional<std::vector<float>> confidence;
  std::optional<Label> label;
};

inline std::vector<std::uint8_t> encode_raw_dataset(std::span<const RawSample> samples) {
  if (samples.empty()) throw Error(Errc::EmptyDataset, "no raw samples");
  const auto& first = samples.front();
  const std::uint32_t fl = flags::kRawTokens | (first.entropy ? flags::kEntropy : 0u) |
                           (first.confidence ? flags::kConfidence : 0u) |
                           (first.label ? flags::kLabels : 0u);
  io::ByteWriter w;
  w.raw(kDatasetMagic.data(), kDatasetMagic.size());
  w.u32(kDatasetVersion);
  w.u32(fl);
  w.u32(static_cast<std::uint32_t>(samples.size()));
  w.u32(static_cast<std::uint32_t>(first.states.steps));
  w.u32(static_cast<std::uint32_t>(first.states.dim));
  w.u32(static_cast<std::uint32_t>(first.states.tokens));
  for (const auto& s : samples) {
    if (s.states.steps != first.states.steps || s.states.tokens != first.states.tokens ||
        s.states.dim != first.states.dim ||
        s.states.values.size() != s.states.steps * s.states.tokens * s.states.dim) {
      throw Error(Errc::ShapeMismatch, "raw samples disagree on S, L or D");
    }
    if (s.entropy.has_value() != first.entropy.has_value() ||
        s.confidence.has_value() != first.confidence.has_value() ||
        s.label.has_value() != first.label.has_value()) {
      throw Error(Errc::InvalidArgument, "raw samples disagree on channel presence");
    }
    if (s.label) w.u8(static_cast<std::uint8_t>(*s.label));
    w.f32s(s.states.values);
    if (s.entropy) w.f32s(*s.entropy);
    if (s.confidence) w.f32s(*s.confidence);
  }
  return w.take();
}

}  // namespace d2m
