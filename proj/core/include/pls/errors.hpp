#pragma once

#include <stdexcept>
#include <string>

namespace pls {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Shape mismatch or invalid rank for an operation.
struct DimensionError : Error {
    using Error::Error;
};

// Iterative kernel failed to converge, singular matrix, etc.
struct NumericalError : Error {
    using Error::Error;
};

// A construction does not fit into the requested embedding width.
struct CapacityError : Error {
    using Error::Error;
};

// Training or fixed-point iteration blew up.
struct DivergenceError : Error {
    using Error::Error;
};

// Bad config file, unknown keys, invalid CLI arguments.
struct ConfigError : Error {
    using Error::Error;
};

struct IoError : Error {
    using Error::Error;
};

}  // namespace pls
