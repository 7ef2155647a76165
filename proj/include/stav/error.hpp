#pragma once

#include <stdexcept>
#include <string>

namespace stav {

// Shape or axis mismatch between tensors.
struct dim_error : std::runtime_error {
  explicit dim_error(const std::string& msg) : std::runtime_error(msg) {}
};

// NaN/Inf where finite values are required, or numerical divergence.
struct numeric_error : std::runtime_error {
  explicit numeric_error(const std::string& msg) : std::runtime_error(msg) {}
};

// API misuse: invalid argument, out-of-range index, malformed file.
struct usage_error : std::runtime_error {
  explicit usage_error(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace stav
