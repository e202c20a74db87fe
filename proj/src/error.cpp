#include "sftscope/error.hpp"

namespace sftscope {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::MissingManifest: return "MissingManifest";
    case ErrorCode::InvalidManifest: return "InvalidManifest";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::PoolingInconsistent: return "PoolingInconsistent";
    case ErrorCode::UnsupportedDtype: return "UnsupportedDtype";
    case ErrorCode::LayerOutOfRange: return "LayerOutOfRange";
    case ErrorCode::SampleOutOfRange: return "SampleOutOfRange";
    case ErrorCode::MissingGranularity: return "MissingGranularity";
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::ArchitectureMismatch: return "ArchitectureMismatch";
    case ErrorCode::SampleSetMismatch: return "SampleSetMismatch";
    case ErrorCode::OrderMismatch: return "OrderMismatch";
    case ErrorCode::ZeroTrace: return "ZeroTrace";
    case ErrorCode::NonFiniteInput: return "NonFiniteInput";
    case ErrorCode::NumericalBreakdown: return "NumericalBreakdown";
    case ErrorCode::InvalidAlpha: return "InvalidAlpha";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::AllZeroSingularValues: return "AllZeroSingularValues";
    case ErrorCode::TooFewTokens: return "TooFewTokens";
    case ErrorCode::DegenerateGram: return "DegenerateGram";
    case ErrorCode::ZeroVectorRow: return "ZeroVectorRow";
    case ErrorCode::NameSetMismatch: return "NameSetMismatch";
    case ErrorCode::LayerCountMismatch: return "LayerCountMismatch";
    case ErrorCode::MetricNotSampleLevel: return "MetricNotSampleLevel";
    case ErrorCode::MetricNotDatasetLevel: return "MetricNotDatasetLevel";
    case ErrorCode::MetricNotAlignment: return "MetricNotAlignment";
    case ErrorCode::UnknownMetric: return "UnknownMetric";
    case ErrorCode::InvalidSegmentCount: return "InvalidSegmentCount";
    case ErrorCode::MaskLengthMismatch: return "MaskLengthMismatch";
    case ErrorCode::MaskCharInvalid: return "MaskCharInvalid";
    case ErrorCode::ConstantProfile: return "ConstantProfile";
    case ErrorCode::LengthMismatch: return "LengthMismatch";
    case ErrorCode::DegenerateVariance: return "DegenerateVariance";
    case ErrorCode::MissingRequiredProfile: return "MissingRequiredProfile";
    case ErrorCode::InvalidFraction: return "InvalidFraction";
  }
  return "Unknown";
}

ErrorCode parse_error_code(std::string_view name) {
  for (int c = 0; c <= static_cast<int>(ErrorCode::InvalidFraction); ++c) {
    if (to_string(static_cast<ErrorCode>(c)) == name) return static_cast<ErrorCode>(c);
  }
  return ErrorCode::InvalidArgument;
}

int exit_code_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::NumericalBreakdown:
    case ErrorCode::ZeroTrace:
    case ErrorCode::NonFiniteInput:
    case ErrorCode::AllZeroSingularValues:
    case ErrorCode::DegenerateGram:
    case ErrorCode::ZeroVectorRow:
    case ErrorCode::TooFewTokens:
    case ErrorCode::DegenerateVariance:
    case ErrorCode::ConstantProfile:
      return 4;
    case ErrorCode::InvalidSegmentCount:
    case ErrorCode::MaskLengthMismatch:
    case ErrorCode::MaskCharInvalid:
    case ErrorCode::MissingRequiredProfile:
      return 3;
    default:
      return 2;
  }
}

}  // namespace sftscope
