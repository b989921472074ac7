#pragma once

#include <stdexcept>
#include <string>

namespace dfuse {

enum class Err {
  // geometry / stereo
  NonPositiveDepth,
  BehindCamera,
  OutOfBounds,
  DegenerateBaseline,
  NoMinimum,
  ZeroBaselineStep,
  DegenerateJacobian,
  BorderPixel,
  // prediction files
  BadMagic,
  DimensionMismatch,
  NonPositiveVariance,
  TruncatedFile,
  NonPositiveFocal,
  NonPositiveGroundTruth,
  // datasets
  MissingFile,
  MalformedLine,
  NonUnitQuaternion,
  BadImageFormat,
  NonPositiveScale,
  // fusion
  CgDivergence,
  NoSemiDenseSupport,
  // eval
  NoValidGroundTruth,
  MismatchedKeyframeSets,
  IoError,
  // config
  UnknownKey,
  TypeError,
  InvalidArgument,
};

inline const char* err_name(Err e) {
  switch (e) {
    case Err::NonPositiveDepth: return "NonPositiveDepth";
    case Err::BehindCamera: return "BehindCamera";
    case Err::OutOfBounds: return "OutOfBounds";
    case Err::DegenerateBaseline: return "DegenerateBaseline";
    case Err::NoMinimum: return "NoMinimum";
    case Err::ZeroBaselineStep: return "ZeroBaselineStep";
    case Err::DegenerateJacobian: return "DegenerateJacobian";
    case Err::BorderPixel: return "BorderPixel";
    case Err::BadMagic: return "BadMagic";
    case Err::DimensionMismatch: return "DimensionMismatch";
    case Err::NonPositiveVariance: return "NonPositiveVariance";
    case Err::TruncatedFile: return "TruncatedFile";
    case Err::NonPositiveFocal: return "NonPositiveFocal";
    case Err::NonPositiveGroundTruth: return "NonPositiveGroundTruth";
    case Err::MissingFile: return "MissingFile";
    case Err::MalformedLine: return "MalformedLine";
    case Err::NonUnitQuaternion: return "NonUnitQuaternion";
    case Err::BadImageFormat: return "BadImageFormat";
    case Err::NonPositiveScale: return "NonPositiveScale";
    case Err::CgDivergence: return "CgDivergence";
    case Err::NoSemiDenseSupport: return "NoSemiDenseSupport";
    case Err::NoValidGroundTruth: return "NoValidGroundTruth";
    case Err::MismatchedKeyframeSets: return "MismatchedKeyframeSets";
    case Err::IoError: return "IoError";
    case Err::UnknownKey: return "UnknownKey";
    case Err::TypeError: return "TypeError";
    case Err::InvalidArgument: return "InvalidArgument";
  }
  return "UnknownError";
}

/// Single exception type for all fatal errors; the code distinguishes the
/// failure class, the message carries the specifics (field, offset, line).
class Error : public std::runtime_error {
 public:
  Error(Err code, const std::string& detail)
      : std::runtime_error(std::string(err_name(code)) + ": " + detail), code_(code) {}

  Err code() const { return code_; }

 private:
  Err code_;
};

}  // namespace dfuse
