#pragma once

#include <stdexcept>
#include <string>

namespace nvrelax {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Bad input: violated precondition, malformed file, unknown config key.
class InvalidArgument : public Error {
public:
    using Error::Error;
};

/// A numerical procedure could not produce a usable answer.
class NumericalError : public Error {
public:
    using Error::Error;
};

}  // namespace nvrelax
