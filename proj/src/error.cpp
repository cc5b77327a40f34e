#include "sdpl/error.hpp"

namespace sdpl {

const char* to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::DomainError: return "DomainError";
    case ErrorCode::NotScalar: return "NotScalar";
    case ErrorCode::DetachedGraph: return "DetachedGraph";
    case ErrorCode::StaleTape: return "StaleTape";
    case ErrorCode::InvalidCount: return "InvalidCount";
    case ErrorCode::IndexOutOfRange: return "IndexOutOfRange";
    case ErrorCode::OffsetExceedsThreshold: return "OffsetExceedsThreshold";
    case ErrorCode::EmptyMask: return "EmptyMask";
    case ErrorCode::CardinalityMismatch: return "CardinalityMismatch";
    case ErrorCode::LabelOutOfRange: return "LabelOutOfRange";
    case ErrorCode::BatchNormUninitialized: return "BatchNormUninitialized";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::EmptyGallery: return "EmptyGallery";
    case ErrorCode::NoRelevantItem: return "NoRelevantItem";
    case ErrorCode::PadTooLarge: return "PadTooLarge";
    case ErrorCode::InvalidScale: return "InvalidScale";
    case ErrorCode::ConfigMismatch: return "ConfigMismatch";
    case ErrorCode::MalformedImage: return "MalformedImage";
    case ErrorCode::InconsistentViewStructure: return "InconsistentViewStructure";
    case ErrorCode::CorruptCheckpoint: return "CorruptCheckpoint";
    case ErrorCode::VersionMismatch: return "VersionMismatch";
    case ErrorCode::UsageError: return "UsageError";
    case ErrorCode::SchemaMismatch: return "SchemaMismatch";
    case ErrorCode::IoError: return "IoError";
  }
  return "UnknownError";
}

}  // namespace sdpl
