#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace bseg {

enum class ErrorCode {
  ShapeMismatch,
  NonFinite,
  DisconnectedLeaf,
  TargetNotBinary,
  NotBinary,
  EmptySampleList,
  EmptySet,
  BadDims,
  BadMagic,
  TruncatedFile,
  UnsupportedMaxval,
  ChecksumMismatch,
  VersionMismatch,
  ConfigShapeMismatch,
  IoFailure,
  NonFiniteLoss,
  BadConfig,
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::NonFinite: return "NonFinite";
    case ErrorCode::DisconnectedLeaf: return "DisconnectedLeaf";
    case ErrorCode::TargetNotBinary: return "TargetNotBinary";
    case ErrorCode::NotBinary: return "NotBinary";
    case ErrorCode::EmptySampleList: return "EmptySampleList";
    case ErrorCode::EmptySet: return "EmptySet";
    case ErrorCode::BadDims: return "BadDims";
    case ErrorCode::BadMagic: return "BadMagic";
    case ErrorCode::TruncatedFile: return "TruncatedFile";
    case ErrorCode::UnsupportedMaxval: return "UnsupportedMaxval";
    case ErrorCode::ChecksumMismatch: return "ChecksumMismatch";
    case ErrorCode::VersionMismatch: return "VersionMismatch";
    case ErrorCode::ConfigShapeMismatch: return "ConfigShapeMismatch";
    case ErrorCode::IoFailure: return "IoFailure";
    case ErrorCode::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorCode::BadConfig: return "BadConfig";
  }
  return "Unknown";
}

/// Every failure raised by the library carries one of the codes above so
/// callers (the CLI in particular) can map it onto an exit status.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) { throw Error(code, what); }

}  // namespace bseg
