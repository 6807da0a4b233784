#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

namespace pckd {

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

// Row-major storage keeps one sample per contiguous row.
template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
using RowVector = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

using Index = Eigen::Index;

/// Pre-softmax class scores, one row per sample: [B_eff x C].
template <typename Scalar>
using LogitBatch = RowMatrix<Scalar>;

/// Classifier weight matrix [K x C]; column c is the center of class c.
template <typename Scalar>
using CategoryCenters = Matrix<Scalar>;

using LabelBatch = std::vector<int>;

/// Penultimate-layer features with rotation bookkeeping.
///
/// Row r is the copy `rotation[r]` (0..3) of original sample `source[r]`.
/// Empty index vectors mean "one row per original sample, no rotations".
template <typename Scalar>
struct FeatureBatch {
  RowMatrix<Scalar> values;
  std::vector<int> rotation;
  std::vector<int> source;

  Index rows() const { return values.rows(); }
  Index dim() const { return values.cols(); }

  int source_of(Index row) const { return source.empty() ? static_cast<int>(row) : source[row]; }
  int rotation_of(Index row) const { return rotation.empty() ? 0 : rotation[row]; }

  /// Number of distinct original samples (B).
  Index num_samples() const {
    if (source.empty()) return rows();
    int hi = -1;
    for (int s : source) hi = std::max(hi, s);
    return hi + 1;
  }
};

/// Broken precondition on shapes, ranges or configuration.
class ContractViolation : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// NaN/Inf input or an undefined numeric operation (zero-norm normalization).
class NumericError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

class IngestionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class UnsupportedArchitecture : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

template <typename Derived>
void require_finite(const Eigen::DenseBase<Derived>& values, const char* what) {
  if (!values.derived().allFinite()) throw NumericError(std::string(what) + " contains NaN or Inf");
}

inline void require(bool condition, const std::string& message) {
  if (!condition) throw ContractViolation(message);
}

}  // namespace pckd
