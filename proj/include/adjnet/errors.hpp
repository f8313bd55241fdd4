#pragma once

#include <stdexcept>
#include <string>

namespace adjnet {

/// Base of every error thrown by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Tensor shapes that cannot be combined by the requested operation.
class DimensionError : public Error {
public:
    using Error::Error;
};

/// A caller broke an operation precondition (non-scalar backward root, t outside [0,1], ...).
class ContractError : public Error {
public:
    using Error::Error;
};

/// Invalid network, mask or training configuration.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Malformed dataset or checkpoint bytes.
class FormatError : public Error {
public:
    using Error::Error;
};

/// Numerical failure during optimization (NaN gradient or loss).
class TrainingError : public Error {
public:
    using Error::Error;
};

/// The small network could not be materialized.
class ExportError : public Error {
public:
    using Error::Error;
};

namespace detail {

template <class E>
[[noreturn]] inline void raise(const std::string& what) {
    throw E(what);
}

template <class E>
inline void require(bool cond, const std::string& what) {
    if (!cond) {
        throw E(what);
    }
}

}  // namespace detail
}  // namespace adjnet
