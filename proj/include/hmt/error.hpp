#pragma once

#include <stdexcept>
#include <string>

namespace hmt {

// Broken precondition or shape contract. CLI exit code 1.
class ContractViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Bad configuration, unknown keys, missing inputs. CLI exit code 2.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Non-finite values in a loss or gradient.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define HMT_CHECK(cond, msg)                                  \
  do {                                                        \
    if (!(cond)) throw ::hmt::ContractViolation(std::string(msg)); \
  } while (0)

}  // namespace hmt
