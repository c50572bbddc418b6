#pragma once

// Common aliases and error types shared by every atbm header.

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace atbm {

using Index = Eigen::Index;
using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

/// Raised when a caller breaks a documented precondition (dimension
/// mismatch, non-positive radius, unordered bounds, ...).
class ContractViolation : public std::invalid_argument {
 public:
  explicit ContractViolation(const std::string& what) : std::invalid_argument(what) {}
};

/// A user-supplied function returned NaN or Inf at a sampled point.
class EvaluationError : public std::runtime_error {
 public:
  EvaluationError(const std::string& what, Index stage, Index sample)
      : std::runtime_error(what + " (stage " + std::to_string(stage) + ", sample " +
                           std::to_string(sample) + ")"),
        stage_(stage),
        sample_(sample) {}
  Index stage() const noexcept { return stage_; }
  Index sample() const noexcept { return sample_; }

 private:
  Index stage_;
  Index sample_;
};

/// Scenario files or configuration objects that fail validation.
class ValidationError : public std::runtime_error {
 public:
  explicit ValidationError(const std::string& what) : std::runtime_error(what) {}
};

inline void require(bool condition, const std::string& message) {
  if (!condition) throw ContractViolation(message);
}

inline bool all_finite(const Eigen::Ref<const Vector>& v) { return v.allFinite(); }

/// Element-wise negative part [v]_- = max(0, -v).
inline Vector negative_part(const Eigen::Ref<const Vector>& v) { return (-v).cwiseMax(0.0); }

}  // namespace atbm
