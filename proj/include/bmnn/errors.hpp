#pragma once

#include <stdexcept>
#include <string>

namespace bmnn {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Dimension or geometry mismatch between operands.
struct ShapeError : Error {
    using Error::Error;
};

/// Normal-equation (or other square) system has no reliable solution.
struct SingularSystemError : Error {
    using Error::Error;
};

/// Division by a zero norm, nonpositive factor or similar degenerate value.
struct NumericError : Error {
    using Error::Error;
};

/// Backward called without the matching forward cache.
struct CacheError : Error {
    using Error::Error;
};

/// Bad configuration file, flag or architecture description.
struct ConfigError : Error {
    using Error::Error;
};

/// Filesystem or serialization failure.
struct IoError : Error {
    using Error::Error;
};

/// Training produced a non-finite or runaway loss/update.
struct DivergenceError : Error {
    using Error::Error;
};

} // namespace bmnn
