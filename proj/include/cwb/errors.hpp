#pragma once

#include <stdexcept>
#include <string>

namespace cwb {

// Failure while reading a weight archive or resolving its tensors.
class ModelLoadError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A hook point or edit that does not address a valid site for this model/input.
class InvalidHookError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Bad configuration file, word list, or experiment parameters.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Precondition violated by arguments of an analysis operation.
class PreconditionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Unknown experiment, result, job or other named entity.
class NotFoundError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace cwb
