#include "zsvd/mat.hpp"

#include <Eigen/Core>
#include <cmath>
#include <stdexcept>

#include "zsvd/errors.hpp"

namespace zsvd {

using EigenRowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const EigenRowMajor>;
using MutMap = Eigen::Map<EigenRowMajor>;

namespace {

ConstMap map_of(const Mat& m) {
  return ConstMap(m.ptr(), static_cast<Eigen::Index>(m.rows()), static_cast<Eigen::Index>(m.cols()));
}

}  // namespace

Mat::Mat(std::size_t rows, std::size_t cols)
    : rows_(rows), cols_(cols), data_(rows * cols, 0.0) {}

Mat::Mat(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows_ * cols_) {
    throw std::invalid_argument("Mat: data length does not match rows*cols");
  }
  for (double v : data_) {
    if (!std::isfinite(v)) {
      throw std::invalid_argument("Mat: non-finite entry");
    }
  }
}

Mat Mat::identity(std::size_t n) {
  Mat m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

Mat matmul(const Mat& a, const Mat& b) {
  if (a.cols() != b.rows()) {
    throw std::invalid_argument("matmul: inner dimensions differ");
  }
  Mat out(a.rows(), b.cols());
  if (out.empty() || a.cols() == 0) return out;
  MutMap(out.ptr(), static_cast<Eigen::Index>(out.rows()), static_cast<Eigen::Index>(out.cols())) =
      map_of(a) * map_of(b);
  return out;
}

Mat transpose(const Mat& a) {
  Mat out(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  }
  return out;
}

Mat add(const Mat& a, const Mat& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument("add: shapes differ");
  }
  Mat out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] += b.data()[i];
  return out;
}

Mat sub(const Mat& a, const Mat& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument("sub: shapes differ");
  }
  Mat out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] -= b.data()[i];
  return out;
}

Mat scale(const Mat& a, double c) {
  Mat out = a;
  for (double& v : out.data()) v *= c;
  return out;
}

double frob_norm(const Mat& a) {
  double s = 0.0;
  for (double v : a.data()) s += v * v;
  return std::sqrt(s);
}

double max_abs(const Mat& a) {
  double m = 0.0;
  for (double v : a.data()) m = std::max(m, std::abs(v));
  return m;
}

bool all_finite(const Mat& a) {
  for (double v : a.data()) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

}  // namespace zsvd
