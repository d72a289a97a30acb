#pragma once
#include <stdexcept>
#include <string>

namespace attempt {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DimensionError : Error {
  using Error::Error;
};

struct NumericError : Error {
  using Error::Error;
};

struct ConfigError : Error {
  using Error::Error;
};

struct DataError : Error {
  using Error::Error;
};

struct IoError : Error {
  using Error::Error;
};

}  // namespace attempt
