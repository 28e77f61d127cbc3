#pragma once

#include <stdexcept>
#include <string>

namespace eduvqa {

// Base for every error raised by the library. Subclasses map onto CLI exit codes.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Tensor extents or ranks that do not fit an operation.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// Input that makes a statistic or pooling undefined (empty axis, empty mask, ...).
class DegenerateInputError : public Error {
public:
    using Error::Error;
};

/// API misuse, e.g. running backward on an empty tape.
class UsageError : public Error {
public:
    using Error::Error;
};

/// NaN/Inf produced by an operation, or a diverging computation.
class NumericalError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

/// Malformed file contents (tensor files, manifests, checkpoints, CSV).
class FormatError : public Error {
public:
    using Error::Error;
};

class BadMagicError : public FormatError {
public:
    using FormatError::FormatError;
};

class UnsupportedVersionError : public FormatError {
public:
    using FormatError::FormatError;
};

class TruncationError : public FormatError {
public:
    TruncationError(const std::string& what, std::size_t expected, std::size_t actual)
        : FormatError(what + ": expected " + std::to_string(expected) + " bytes, got " +
                      std::to_string(actual)),
          expected_(expected), actual_(actual) {}

    std::size_t expected() const noexcept { return expected_; }
    std::size_t actual() const noexcept { return actual_; }

private:
    std::size_t expected_;
    std::size_t actual_;
};

}  // namespace eduvqa
