#pragma once

#include <stdexcept>
#include <string>

namespace tiltab {

// Precondition or configuration violation. Maps to CLI exit code 2.
class InvalidArgument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// The 2x2 innovation covariance of a single Kalman update could not be factored.
class SingularInnovation : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// The stacked 2N x 2N innovation covariance of a batch correction is not
// positive definite: a degenerate tilt sequence combined with near-zero noise.
class IllConditionedSchedule : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void require(bool condition, const std::string& message) {
  if (!condition) throw InvalidArgument(message);
}

}  // namespace tiltab
