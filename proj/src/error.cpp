#include "romelab/error.hpp"

namespace romelab {

const char* error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInvalidArgument: return "invalid_argument";
    case ErrorCode::kDimension: return "dimension";
    case ErrorCode::kSingular: return "singular";
    case ErrorCode::kDegenerateKey: return "degenerate_key";
    case ErrorCode::kBounds: return "bounds";
    case ErrorCode::kEmptyStatistics: return "empty_statistics";
    case ErrorCode::kTrainingFailure: return "training_failure";
    case ErrorCode::kOptimizationFailure: return "optimization_failure";
    case ErrorCode::kTokenization: return "tokenization";
    case ErrorCode::kInsufficientData: return "insufficient_data";
    case ErrorCode::kIo: return "io";
    case ErrorCode::kFormat: return "format";
  }
  return "unknown";
}

void fail(ErrorCode code, const std::string& message) { throw Error(code, message); }

}  // namespace romelab
