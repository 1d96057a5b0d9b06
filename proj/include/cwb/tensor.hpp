#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace cwb {

using MatrixRM = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::Matrix<float, 1, Eigen::Dynamic>;
using MatrixMap = Eigen::Map<MatrixRM>;
using ConstMatrixMap = Eigen::Map<const MatrixRM>;

// Dense row-major float32 array with an explicit shape.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int64_t> shape, float fill = 0.0f)
      : shape_(std::move(shape)), values_(count(shape_), fill) {}
  Tensor(std::vector<int64_t> shape, std::vector<float> values)
      : shape_(std::move(shape)), values_(std::move(values)) {
    if (static_cast<int64_t>(values_.size()) != count(shape_)) {
      throw std::invalid_argument("tensor value count does not match shape");
    }
  }

  const std::vector<int64_t>& shape() const { return shape_; }
  size_t rank() const { return shape_.size(); }
  int64_t dim(size_t axis) const { return shape_.at(axis); }
  int64_t numel() const { return static_cast<int64_t>(values_.size()); }
  bool empty() const { return values_.empty(); }

  float* data() { return values_.data(); }
  const float* data() const { return values_.data(); }
  std::span<float> values() { return values_; }
  std::span<const float> values() const { return values_; }

  // Row-major offset of a full index.
  int64_t offset(std::initializer_list<int64_t> index) const {
    int64_t off = 0;
    size_t axis = 0;
    for (int64_t i : index) {
      off = off * shape_[axis] + i;
      ++axis;
    }
    for (; axis < shape_.size(); ++axis) off *= shape_[axis];
    return off;
  }
  float& at(std::initializer_list<int64_t> index) { return values_[offset(index)]; }
  float at(std::initializer_list<int64_t> index) const { return values_[offset(index)]; }

  // Treat the tensor as a [rows, cols] matrix where cols is the last axis.
  ConstMatrixMap as_matrix() const {
    return ConstMatrixMap(values_.data(), numel() / shape_.back(), shape_.back());
  }
  MatrixMap as_matrix() { return MatrixMap(values_.data(), numel() / shape_.back(), shape_.back()); }

  static int64_t count(const std::vector<int64_t>& shape) {
    return std::accumulate(shape.begin(), shape.end(), int64_t{1}, std::multiplies<>());
  }

 private:
  std::vector<int64_t> shape_;
  std::vector<float> values_;
};

inline std::string shape_string(const std::vector<int64_t>& shape) {
  std::string out = "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

}  // namespace cwb
