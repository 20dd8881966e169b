#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace fedchat {

enum class ErrorCode {
  kSequenceTooLong,
  kIdOutOfRange,
  kEmptyMask,
  kMisalignedParams,
  kUnknownTarget,
  kNonMatrixTarget,
  kBaseHashMismatch,
  kEmptyDataset,
  kEmptyList,
  kNonFiniteValue,
  kInvalidEncoding,
  kEmptyBlock,
  kEmptyPromptSet,
  kEmptyText,
  kEmptyCorpus,
  kEmptyCandidates,
  kDimensionMismatch,
  kNoContext,
  kFormatVersionMismatch,
  kCorruptFile,
  kIoError,
  kInvalidConfig,
  kInvalidArgument,
};

std::string_view error_code_name(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(error_code_name(code)) + ": " + message),
        code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace fedchat
