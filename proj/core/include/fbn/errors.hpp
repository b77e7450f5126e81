#pragma once

#include <stdexcept>
#include <string>

namespace fbn {

// Every contract violation in the library throws fbn::Error with one of
// these codes, so callers (and the CLI exit-code mapping) can discriminate
// without string matching.
enum class ErrorCode {
    MissingSequence,
    CorruptBundle,
    InvalidMask,
    DuplicateCase,
    InvalidLabel,
    TumorOutOfBounds,
    WriteError,
    EmptyRegion,
    ShapeError,
    ConfigError,
    CheckpointMismatch,
    EmptySplit,
    DivergenceError,
    StratificationError,
    DegenerateLabels,
    PairingError,
    InsufficientData,
    MissingLabel,
    IndexError,
};

const char* to_string(ErrorCode code);

class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& what)
        : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

[[noreturn]] inline void raise(ErrorCode code, const std::string& what) {
    throw Error(code, what);
}

// CLI exit-code policy: 2 config, 3 data, 4 training divergence, 5 I/O.
int exit_code_for(ErrorCode code);

}  // namespace fbn
