#pragma once

#include <stdexcept>
#include <string>

namespace lfm {

// Error taxonomy shared across the library. The CLI maps these onto process
// exit codes (config 2, data 3, numerical 4).
struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct SimulationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace lfm
