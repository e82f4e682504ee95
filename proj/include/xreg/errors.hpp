#pragma once

#include <stdexcept>

namespace xreg {

// Malformed or truncated file content.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace xreg
