#pragma once

#include <stdexcept>
#include <string>

namespace kacpotts {

// Failure categories. The CLI maps each one onto a distinct exit code.

/// Iterative solver or quadrature did not reach its tolerance.
class numerical_error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Malformed or inconsistent experiment configuration.
class config_error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// A structural property that must hold by construction was found violated.
class property_violation : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline void require(bool cond, const std::string& what) {
  if (!cond) throw std::invalid_argument(what);
}

}  // namespace detail
}  // namespace kacpotts
