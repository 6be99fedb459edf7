// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace layerfuse {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Invalid configuration, flags or declarative spec. The CLI maps this to exit code 2.
class ConfigError : public Error {
public:
  using Error::Error;
};

/// Malformed, truncated or inconsistent feature store / checkpoint file.
class FormatError : public Error {
public:
  using Error::Error;
};

class ShapeError : public Error {
public:
  using Error::Error;
};

/// Non-finite values where finite ones are required.
class NumericError : public Error {
public:
  using Error::Error;
};

/// Training produced a non-finite loss. The CLI maps this to exit code 3.
class DivergenceError : public Error {
public:
  using Error::Error;
};

} // namespace layerfuse
