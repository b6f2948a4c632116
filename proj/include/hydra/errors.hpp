#pragma once

#include <stdexcept>
#include <string>

namespace hydra {

/// Base class for all errors raised by the library.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Tensor shapes incompatible with the requested operation.
struct ShapeError : Error {
    using Error::Error;
};

/// A primitive op produced a non-finite value, or was fed degenerate
/// input (e.g. normalizing a zero vector).
struct NumericError : Error {
    using Error::Error;
};

/// Invalid configuration value (non-positive temperature, bad geometry, ...).
struct ConfigError : Error {
    using Error::Error;
};

/// Word not present in the fixed prompt vocabulary.
struct VocabError : Error {
    using Error::Error;
};

/// Malformed file content (bad magic bytes, unparseable header, ...).
struct FormatError : Error {
    using Error::Error;
};

/// Checkpoint format version not supported by this build.
struct VersionError : FormatError {
    using FormatError::FormatError;
};

/// File ends before the declared payload does.
struct TruncationError : FormatError {
    using FormatError::FormatError;
};

/// Stored checksum does not match the file contents.
struct ChecksumError : FormatError {
    using FormatError::FormatError;
};

/// Metric is undefined for the given inputs (e.g. AP with no positives).
struct MetricError : Error {
    using Error::Error;
};

/// Bad command line usage.
struct UsageError : Error {
    using Error::Error;
};

/// Refusing to overwrite existing output without --force.
struct OutputExistsError : Error {
    using Error::Error;
};

}  // namespace hydra
