// Shared error types and small helpers.
#pragma once

#include <stdexcept>
#include <string>

namespace nk {

// Bad configuration, bad file contents, contract violations at the API
// boundary. CLI maps this to exit code 2.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Numerical divergence (NaN/Inf in filter state). CLI maps this to exit 3.
struct DivergedError : std::runtime_error {
  explicit DivergedError(const std::string& msg) : std::runtime_error(msg) {}
};

struct IoError : std::runtime_error {
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

inline bool is_pow2(std::size_t n) { return n > 0 && (n & (n - 1)) == 0; }

}  // namespace nk
