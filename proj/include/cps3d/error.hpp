#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace cps3d {

/// Stable error identifiers. The CLI prints these verbatim as the first token
/// of its one-line diagnostics, so renaming one is a breaking change.
enum class ErrorCode {
  MalformedHeader,
  TruncatedPayload,
  IoFailure,
  InvalidVolume,
  MissingFile,
  EmptyLabeledSet,
  InvalidManifest,
  EmptyDataset,
  InfeasiblePlan,
  InvalidPlan,
  InterpolationOnLabels,
  ShapeMismatch,
  InvalidTarget,
  MissingGroundTruth,
  NonFiniteGradient,
  NonFiniteLoss,
  ResumeMismatch,
  InvalidCheckpoint,
  MissingCase,
  PlacementFailure,
  ConfigError,
};

constexpr std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::MalformedHeader: return "MalformedHeader";
    case ErrorCode::TruncatedPayload: return "TruncatedPayload";
    case ErrorCode::IoFailure: return "IoFailure";
    case ErrorCode::InvalidVolume: return "InvalidVolume";
    case ErrorCode::MissingFile: return "MissingFile";
    case ErrorCode::EmptyLabeledSet: return "EmptyLabeledSet";
    case ErrorCode::InvalidManifest: return "InvalidManifest";
    case ErrorCode::EmptyDataset: return "EmptyDataset";
    case ErrorCode::InfeasiblePlan: return "InfeasiblePlan";
    case ErrorCode::InvalidPlan: return "InvalidPlan";
    case ErrorCode::InterpolationOnLabels: return "InterpolationOnLabels";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::InvalidTarget: return "InvalidTarget";
    case ErrorCode::MissingGroundTruth: return "MissingGroundTruth";
    case ErrorCode::NonFiniteGradient: return "NonFiniteGradient";
    case ErrorCode::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorCode::ResumeMismatch: return "ResumeMismatch";
    case ErrorCode::InvalidCheckpoint: return "InvalidCheckpoint";
    case ErrorCode::MissingCase: return "MissingCase";
    case ErrorCode::PlacementFailure: return "PlacementFailure";
    case ErrorCode::ConfigError: return "ConfigError";
  }
  return "Unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace cps3d
