#pragma once

#include <stdexcept>
#include <string>

namespace ctcal {

// Typed failure categories. Readers and calibrators must fail with one of
// these, never with partial results.
enum class ErrorCode {
  InvalidArgument,
  IoFailure,
  FormatError,
  CropTooLarge,
  UnitMismatch,
  ShapeMismatch,
  EmptyBody,
  EmptyMask,
  EmptySoftMask,
  AllGroupsEmpty,
  EmptyCalibration,
  Saturated,
  Infeasible,
  TooFewSamples,
  ModeInputMissing,
  SpecInfeasible,
  BadMagic,
  BadUnits,
  TruncatedPayload,
  DuplicateRecord,
  MissingPair,
  BadRole,
  BadNiftiMagic,
  UnsupportedDatatype,
  CompressedInput,
  DigestMismatch,
  MethodMismatch,
  ConfigError,
};

const char* error_code_name(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, std::string message)
      : std::runtime_error(std::move(message)), code_(code) {}

  ErrorCode code() const { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void raise(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

}  // namespace ctcal
