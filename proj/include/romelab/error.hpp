#pragma once

#include <stdexcept>
#include <string>

namespace romelab {

enum class ErrorCode {
  kInvalidArgument = 1,
  kDimension,
  kSingular,
  kDegenerateKey,
  kBounds,
  kEmptyStatistics,
  kTrainingFailure,
  kOptimizationFailure,
  kTokenization,
  kInsufficientData,
  kIo,
  kFormat,
};

const char* error_code_name(ErrorCode code);

// All library failures are reported through this one exception type; the
// C API translates the code into a status value.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] void fail(ErrorCode code, const std::string& message);

}  // namespace romelab
