#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace synthehr {

enum class ErrorCode {
  kUnknownCode,
  kSchemaMismatch,
  kMalformedLine,
  kDegenerateFraction,
  kInvalidSpec,
  kGrammarViolation,
  kUnknownModality,
  kDimensionMismatch,
  kNumericOverflow,
  kNonFiniteLoss,
  kUnknownToken,
  kEmptySupport,
  kEmptySequence,
  kNoEventsOfModality,
  kSizeMismatch,
  kDegenerateLabels,
  kEmptyGrid,
  kInsufficientHistory,
  kConfigInvalid,
  kSchemaHashMismatch,
  kIo,
};

const char* error_code_name(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(error_code_name(code)) + ": " + message), code_(code) {}

  ErrorCode code() const { return code_; }

 private:
  ErrorCode code_;
};

// Raised by the token grammar; position is the index of the first offending token.
class GrammarError : public Error {
 public:
  GrammarError(std::size_t position, const std::string& message)
      : Error(ErrorCode::kGrammarViolation,
              "at token " + std::to_string(position) + ": " + message),
        position_(position) {}

  std::size_t position() const { return position_; }

 private:
  std::size_t position_;
};

}  // namespace synthehr
