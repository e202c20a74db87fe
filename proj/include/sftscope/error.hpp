#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace sftscope {

enum class ErrorCode {
  // ingest
  MissingManifest,
  InvalidManifest,
  ShapeMismatch,
  PoolingInconsistent,
  UnsupportedDtype,
  LayerOutOfRange,
  SampleOutOfRange,
  MissingGranularity,
  IoError,
  ArchitectureMismatch,
  SampleSetMismatch,
  OrderMismatch,
  // spectral / geometry
  ZeroTrace,
  NonFiniteInput,
  NumericalBreakdown,
  InvalidAlpha,
  InvalidArgument,
  AllZeroSingularValues,
  TooFewTokens,
  DegenerateGram,
  ZeroVectorRow,
  // weights
  NameSetMismatch,
  LayerCountMismatch,
  // protocol
  MetricNotSampleLevel,
  MetricNotDatasetLevel,
  MetricNotAlignment,
  UnknownMetric,
  // planner
  InvalidSegmentCount,
  MaskLengthMismatch,
  MaskCharInvalid,
  ConstantProfile,
  LengthMismatch,
  DegenerateVariance,
  MissingRequiredProfile,
  InvalidFraction,
};

std::string_view to_string(ErrorCode code);
/// Inverse of to_string; unknown names map to InvalidArgument.
ErrorCode parse_error_code(std::string_view name);

/// Process exit code for a failure: 2 input, 3 planning, 4 numerical breakdown.
int exit_code_for(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message),
        code_(code),
        detail_(message) {}

  ErrorCode code() const noexcept { return code_; }
  const std::string& detail() const noexcept { return detail_; }

 private:
  ErrorCode code_;
  std::string detail_;
};

}  // namespace sftscope
