#pragma once

#include <stdexcept>
#include <string>

namespace covft {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Tensor shapes that cannot be combined.
class DimensionError : public Error {
public:
    using Error::Error;
};

/// A caller broke an operation's precondition.
class ContractError : public Error {
public:
    using Error::Error;
};

/// Invalid configuration value. `field` names the offending key when known.
class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& msg, std::string field = {})
        : Error(field.empty() ? msg : field + ": " + msg), field_(std::move(field)) {}
    const std::string& field() const noexcept { return field_; }

private:
    std::string field_;
};

/// Malformed user data (datasets, files, token ids).
class InputError : public Error {
public:
    using Error::Error;
};

/// NaN or infinity where a finite value is required.
class NumericError : public Error {
public:
    using Error::Error;
};

/// Input is structurally valid but carries no usable signal (zero variance, all-zero vectors...).
class DegenerateInputError : public Error {
public:
    using Error::Error;
};

}  // namespace covft
