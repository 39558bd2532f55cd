#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace zsvd {

// Dense row-major matrix of doubles. Value semantics throughout; all entries
// must be finite on construction. Zero-sized dimensions are legal (a rank-0
// factor is an m x 0 or 0 x n matrix).
class Mat {
 public:
  Mat() = default;
  Mat(std::size_t rows, std::size_t cols);  // zero-filled
  Mat(std::size_t rows, std::size_t cols, std::vector<double> data);

  static Mat identity(std::size_t n);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  double* ptr() { return data_.data(); }
  const double* ptr() const { return data_.data(); }

  bool operator==(const Mat& other) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

Mat matmul(const Mat& a, const Mat& b);
Mat transpose(const Mat& a);
Mat add(const Mat& a, const Mat& b);
Mat sub(const Mat& a, const Mat& b);
Mat scale(const Mat& a, double c);

double frob_norm(const Mat& a);
double max_abs(const Mat& a);
bool all_finite(const Mat& a);

}  // namespace zsvd
