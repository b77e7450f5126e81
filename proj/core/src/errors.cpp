#include "fbn/errors.hpp"

namespace fbn {

const char* to_string(ErrorCode code) {
    switch (code) {
        case ErrorCode::MissingSequence: return "MissingSequence";
        case ErrorCode::CorruptBundle: return "CorruptBundle";
        case ErrorCode::InvalidMask: return "InvalidMask";
        case ErrorCode::DuplicateCase: return "DuplicateCase";
        case ErrorCode::InvalidLabel: return "InvalidLabel";
        case ErrorCode::TumorOutOfBounds: return "TumorOutOfBounds";
        case ErrorCode::WriteError: return "WriteError";
        case ErrorCode::EmptyRegion: return "EmptyRegion";
        case ErrorCode::ShapeError: return "ShapeError";
        case ErrorCode::ConfigError: return "ConfigError";
        case ErrorCode::CheckpointMismatch: return "CheckpointMismatch";
        case ErrorCode::EmptySplit: return "EmptySplit";
        case ErrorCode::DivergenceError: return "DivergenceError";
        case ErrorCode::StratificationError: return "StratificationError";
        case ErrorCode::DegenerateLabels: return "DegenerateLabels";
        case ErrorCode::PairingError: return "PairingError";
        case ErrorCode::InsufficientData: return "InsufficientData";
        case ErrorCode::MissingLabel: return "MissingLabel";
        case ErrorCode::IndexError: return "IndexError";
    }
    return "UnknownError";
}

int exit_code_for(ErrorCode code) {
    switch (code) {
        case ErrorCode::ConfigError:
            return 2;
        case ErrorCode::DivergenceError:
            return 4;
        case ErrorCode::WriteError:
            return 5;
        default:
            return 3;
    }
}

}  // namespace fbn
