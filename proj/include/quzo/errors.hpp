#pragma once

#include <stdexcept>
#include <string>

namespace quzo {

/// Invalid or unsupported configuration (formats, ranks, option values).
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed input data: non-finite values, shape mismatches, empty tensors.
class InputError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Failure during a forward pass or training step (NaN loss, NaN sensitivity).
class RunError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A state invariant was broken: weight recovery mismatch, seed/layout drift.
class IntegrityError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

} // namespace quzo
