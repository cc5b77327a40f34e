#pragma once

#include <stdexcept>
#include <string>

namespace sdpl {

enum class ErrorCode {
  ShapeMismatch,
  DomainError,
  NotScalar,
  DetachedGraph,
  StaleTape,
  InvalidCount,
  IndexOutOfRange,
  OffsetExceedsThreshold,
  EmptyMask,
  CardinalityMismatch,
  LabelOutOfRange,
  BatchNormUninitialized,
  DimensionMismatch,
  EmptyGallery,
  NoRelevantItem,
  PadTooLarge,
  InvalidScale,
  ConfigMismatch,
  MalformedImage,
  InconsistentViewStructure,
  CorruptCheckpoint,
  VersionMismatch,
  UsageError,
  SchemaMismatch,
  IoError,
};

const char* to_string(ErrorCode code);

/// All library failures surface as Error; code() identifies the condition
/// so callers and tests can dispatch without parsing messages.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}
  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& msg) {
  throw Error(code, msg);
}

}  // namespace sdpl
