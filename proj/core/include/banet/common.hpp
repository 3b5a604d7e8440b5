#pragma once

#include <array>
#include <stdexcept>
#include <string>

namespace banet {

using Int3 = std::array<int, 3>;
using Real3 = std::array<double, 3>;

// Malformed or inconsistent input data: bad files, label/shape contract
// violations, configs that cannot be honored.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor shapes that do not satisfy an operation's contract.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Non-finite values or failed numerical checks.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::string to_string(const Int3& v) {
  return "[" + std::to_string(v[0]) + "," + std::to_string(v[1]) + "," +
         std::to_string(v[2]) + "]";
}

}  // namespace banet
