#pragma once

#include <stdexcept>

namespace moemamba {

// Operand shapes or dimensions do not agree.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A non-finite value reached an operation that requires finite input.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IndexError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

// API misuse, e.g. running backward twice over the same tape.
class UsageError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Training loss stayed above twice its initial value for too long.
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A loss curve never reaches the requested level.
class UndefinedAtLevel : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

}  // namespace moemamba
