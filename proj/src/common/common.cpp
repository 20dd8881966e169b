#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>

#include "fedchat/bytes.hpp"
#include "fedchat/error.hpp"

namespace fedchat {

std::string_view error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::kSequenceTooLong: return "SequenceTooLong";
    case ErrorCode::kIdOutOfRange: return "IdOutOfRange";
    case ErrorCode::kEmptyMask: return "EmptyMask";
    case ErrorCode::kMisalignedParams: return "MisalignedParams";
    case ErrorCode::kUnknownTarget: return "UnknownTarget";
    case ErrorCode::kNonMatrixTarget: return "NonMatrixTarget";
    case ErrorCode::kBaseHashMismatch: return "BaseHashMismatch";
    case ErrorCode::kEmptyDataset: return "EmptyDataset";
    case ErrorCode::kEmptyList: return "EmptyList";
    case ErrorCode::kNonFiniteValue: return "NonFiniteValue";
    case ErrorCode::kInvalidEncoding: return "InvalidEncoding";
    case ErrorCode::kEmptyBlock: return "EmptyBlock";
    case ErrorCode::kEmptyPromptSet: return "EmptyPromptSet";
    case ErrorCode::kEmptyText: return "EmptyText";
    case ErrorCode::kEmptyCorpus: return "EmptyCorpus";
    case ErrorCode::kEmptyCandidates: return "EmptyCandidates";
    case ErrorCode::kDimensionMismatch: return "DimensionMismatch";
    case ErrorCode::kNoContext: return "NoContext";
    case ErrorCode::kFormatVersionMismatch: return "FormatVersionMismatch";
    case ErrorCode::kCorruptFile: return "CorruptFile";
    case ErrorCode::kIoError: return "IoError";
    case ErrorCode::kInvalidConfig: return "InvalidConfig";
    case ErrorCode::kInvalidArgument: return "InvalidArgument";
  }
  return "Unknown";
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIoError, "cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file_bytes(const std::string& path, std::span<const std::uint8_t> bytes) {
  // Write-then-rename so readers never see a half-written file.
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::kIoError, "cannot write " + tmp);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error(ErrorCode::kIoError, "short write to " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw Error(ErrorCode::kIoError, "cannot rename " + tmp + ": " + ec.message());
}

std::string read_file_text(const std::string& path) {
  const auto bytes = read_file_bytes(path);
  return {bytes.begin(), bytes.end()};
}

void write_file_text(const std::string& path, std::string_view text) {
  write_file_bytes(path, std::span<const std::uint8_t>(
                             reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

}  // namespace fedchat
