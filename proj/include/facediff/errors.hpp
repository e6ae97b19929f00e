#pragma once

#include <stdexcept>
#include <string>

namespace facediff {

/// Base class for all library errors.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Invalid configuration value or inconsistent configuration.
struct ConfigError : Error {
    using Error::Error;
};

/// Tensor shape / dimension mismatch.
struct DimensionError : Error {
    using Error::Error;
};

/// Index out of the valid range (e.g. timestep outside [1, T]).
struct IndexError : Error {
    using Error::Error;
};

/// A documented precondition of an operation was violated.
struct ContractError : Error {
    using Error::Error;
};

/// Non-finite values or numerically unstable inputs.
struct NumericError : Error {
    using Error::Error;
};

/// Input that makes the operation meaningless (e.g. zero vector where a
/// direction is required).
struct DegenerateInputError : Error {
    using Error::Error;
};

/// File I/O failure.
struct IoError : Error {
    using Error::Error;
};

/// Stored digest does not match the file contents.
struct IntegrityError : IoError {
    using IoError::IoError;
};

/// Serialized format version is not supported.
struct VersionError : IoError {
    using IoError::IoError;
};

}  // namespace facediff
