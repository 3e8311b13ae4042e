#include "synthehr/error.hpp"

namespace synthehr {

const char* error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::kUnknownCode: return "unknown-code";
    case ErrorCode::kSchemaMismatch: return "schema-mismatch";
    case ErrorCode::kMalformedLine: return "malformed-line";
    case ErrorCode::kDegenerateFraction: return "degenerate-fraction";
    case ErrorCode::kInvalidSpec: return "invalid-spec";
    case ErrorCode::kGrammarViolation: return "grammar-violation";
    case ErrorCode::kUnknownModality: return "unknown-modality";
    case ErrorCode::kDimensionMismatch: return "dimension-mismatch";
    case ErrorCode::kNumericOverflow: return "numeric-overflow";
    case ErrorCode::kNonFiniteLoss: return "non-finite-loss";
    case ErrorCode::kUnknownToken: return "unknown-token";
    case ErrorCode::kEmptySupport: return "empty-support";
    case ErrorCode::kEmptySequence: return "empty-sequence";
    case ErrorCode::kNoEventsOfModality: return "no-events-of-modality";
    case ErrorCode::kSizeMismatch: return "size-mismatch";
    case ErrorCode::kDegenerateLabels: return "degenerate-labels";
    case ErrorCode::kEmptyGrid: return "empty-grid";
    case ErrorCode::kInsufficientHistory: return "insufficient-history";
    case ErrorCode::kConfigInvalid: return "config-invalid";
    case ErrorCode::kSchemaHashMismatch: return "schema-hash-mismatch";
    case ErrorCode::kIo: return "io";
  }
  return "unknown";
}

}  // namespace synthehr
