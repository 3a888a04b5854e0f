// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace d2m {

enum class Errc {
  BadMagic,
  VersionUnsupported,
  Truncated,
  NonFiniteValue,
  IoFailure,
  SpanOutOfRange,
  EmptyDataset,
  ShapeMismatch,
  InvalidArgument,
  TooFewSamples,
  NonFiniteLoss,
  ChannelMissing,
  NoHesitationSamples,
  LengthMismatch,
};

inline std::string_view errc_name(Errc code) {
  switch (code) {
    case Errc::BadMagic: return "BadMagic";
    case Errc::VersionUnsupported: return "VersionUnsupported";
    case Errc::Truncated: return "Truncated";
    case Errc::NonFiniteValue: return "NonFiniteValue";
    case Errc::IoFailure: return "IoFailure";
    case Errc::SpanOutOfRange: return "SpanOutOfRange";
    case Errc::EmptyDataset: return "EmptyDataset";
    case Errc::ShapeMismatch: return "ShapeMismatch";
    case Errc::InvalidArgument: return "InvalidArgument";
    case Errc::TooFewSamples: return "TooFewSamples";
    case Errc::NonFiniteLoss: return "NonFiniteLoss";
    case Errc::ChannelMissing: return "ChannelMissing";
    case Errc::NoHesitationSamples: return "NoHesitationSamples";
    case Errc::LengthMismatch: return "LengthMismatch";
  }
  return "Unknown";
}

// All library failures surface as d2m::Error; code() identifies the contract
// that was violated.
class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(errc_name(code)) + ": " + what), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

}  // namespace d2m
