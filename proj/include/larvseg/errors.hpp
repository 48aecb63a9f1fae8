#pragma once

#include <stdexcept>
#include <string>

namespace larvseg {

// Error hierarchy. The CLI maps each branch to a distinct exit code.

struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Operand shapes disagree (matmul inner dims, elementwise mismatch, ...).
struct DimensionError : Error {
    explicit DimensionError(const std::string& msg) : Error(msg) {}
};

// Value outside an op's mathematical domain (log of non-positive, div by zero,
// reduction over an empty or invalid axis).
struct DomainError : Error {
    explicit DomainError(const std::string& msg) : Error(msg) {}
};

// Caller violated a documented precondition.
struct ContractError : Error {
    explicit ContractError(const std::string& msg) : Error(msg) {}
};

// A memory slot was queried before it held any features; callers are expected
// to test fill level and skip instead of catching this.
struct ColdStartError : ContractError {
    explicit ColdStartError(const std::string& msg) : ContractError(msg) {}
};

// Corrupt or truncated on-disk payload (bad magic, short read, absurd extents).
struct FormatError : Error {
    explicit FormatError(const std::string& msg) : Error(msg) {}
};

// Bad or unknown configuration key/value.
struct ConfigError : Error {
    explicit ConfigError(const std::string& msg) : Error(msg) {}
};

// Filesystem-level failure (missing file, unwritable path).
struct IoError : Error {
    explicit IoError(const std::string& msg) : Error(msg) {}
};

// Training hit a non-finite loss or gradient and refused to continue.
struct TrainingAbort : Error {
    explicit TrainingAbort(const std::string& msg) : Error(msg) {}
};

}  // namespace larvseg
