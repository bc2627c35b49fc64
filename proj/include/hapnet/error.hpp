#pragma once

#include <stdexcept>
#include <string>

namespace hapnet {

/// Tensor shapes or filter/fusion operands that do not line up.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Invalid hyper-parameters or run configuration.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Missing, corrupt or inconsistent input files.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Non-finite values or a diverging loss.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace hapnet
