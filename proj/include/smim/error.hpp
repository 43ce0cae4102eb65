#pragma once
#include <stdexcept>
#include <string>

namespace smim {

// Error taxonomy. Apart from CLI usage errors, everything derives from
// Error so callers can catch the whole family at once.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor/volume extents do not line up. Message names the offending axis.
struct DimensionError : Error {
    using Error::Error;
};

// Invalid configuration value (ratio out of range, non-divisible strides, ...).
struct ConfigError : Error {
    using Error::Error;
};

// A mask/active-set contract was violated. This is the bug class the sparse
// layer exists to catch, so it gets its own type.
struct ConsistencyError : Error {
    using Error::Error;
};

// Bad input data (missing files, crop larger than volume, non-binary labels).
struct DataError : Error {
    using Error::Error;
};

// Malformed serialized artifact (checkpoint, volume sidecar, mask dump).
struct FormatError : Error {
    using Error::Error;
};

// Training-time failure (non-finite gradients); message carries the step.
struct TrainingError : Error {
    using Error::Error;
};

// API misuse (backward on a non-scalar, ...).
struct UsageError : Error {
    using Error::Error;
};

// A reference oracle could not produce a trustworthy value.
struct OracleError : Error {
    using Error::Error;
};

struct IoError : Error {
    using Error::Error;
};

} // namespace smim
