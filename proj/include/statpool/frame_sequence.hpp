#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <stdexcept>
#include <utility>

#include <Eigen/Dense>

namespace statpool {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

// A T x D matrix of frame-level feature vectors, one frame per row.
// Construction rejects empty shapes and non-finite entries.
class FrameSequence {
 public:
  explicit FrameSequence(Matrix data) : data_(std::move(data)) { validate(); }

  FrameSequence(std::initializer_list<std::initializer_list<double>> rows) {
    const auto t = static_cast<Eigen::Index>(rows.size());
    const auto d = t > 0 ? static_cast<Eigen::Index>(rows.begin()->size()) : 0;
    data_.resize(t, d);
    Eigen::Index i = 0;
    for (const auto& row : rows) {
      if (static_cast<Eigen::Index>(row.size()) != d)
        throw std::invalid_argument("FrameSequence: ragged rows");
      Eigen::Index j = 0;
      for (double v : row) data_(i, j++) = v;
      ++i;
    }
    validate();
  }

  std::size_t frames() const { return static_cast<std::size_t>(data_.rows()); }
  std::size_t dim() const { return static_cast<std::size_t>(data_.cols()); }

  double operator()(std::size_t t, std::size_t d) const {
    return data_(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(d));
  }

  const Matrix& matrix() const { return data_; }

 private:
  void validate() const {
    if (data_.rows() < 1 || data_.cols() < 1)
      throw std::invalid_argument("FrameSequence: need T >= 1 and D >= 1");
    if (!data_.allFinite())
      throw std::invalid_argument("FrameSequence: non-finite entry");
  }

  Matrix data_;
};

}  // namespace statpool
