#ifndef MDM_ERROR_HPP
#define MDM_ERROR_HPP

#include <stdexcept>
#include <string>

namespace mdm {

struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// non-finite values, out-of-domain arguments
struct ValueError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// malformed files (weights, images, matrices, configs)
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct TrainingError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// autodiff session misuse (backward re-run, foreign nodes, ...)
struct SessionError : std::logic_error {
  using std::logic_error::logic_error;
};

inline void check_shape(bool ok, const std::string& msg) {
  if (!ok) throw ShapeError(msg);
}

inline void check_value(bool ok, const std::string& msg) {
  if (!ok) throw ValueError(msg);
}

}  // namespace mdm

#endif  // MDM_ERROR_HPP
