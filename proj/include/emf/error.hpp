#pragma once

#include <stdexcept>
#include <string>

namespace emf {

/// Base class for all errors raised by this library.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Malformed file contents (bad magic, truncated record, unparseable line).
struct FormatError : Error {
    using Error::Error;
};

/// Well-formed input that violates a documented invariant.
struct ValidationError : Error {
    using Error::Error;
};

/// Tensor/parameter shape mismatch.
struct ShapeError : Error {
    using Error::Error;
};

/// Operation applied to an object in the wrong state (e.g. fusing an
/// already-fused model, stale LSTM state).
struct StateError : Error {
    using Error::Error;
};

/// Invalid argument to an operation.
struct ArgumentError : Error {
    using Error::Error;
};

/// Inconsistent run configuration.
struct ConfigError : Error {
    using Error::Error;
};

/// Filesystem-level failure (open/read/write/rename).
struct IoError : Error {
    using Error::Error;
};

/// Non-finite or otherwise unusable numeric value.
struct ValueError : Error {
    using Error::Error;
};

}  // namespace emf
