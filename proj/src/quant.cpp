#include "zsvd/quant.hpp"

#include <cmath>
#include <stdexcept>

namespace zsvd {

QuantTensor quantize_symmetric(const Mat& w, int bits) {
  if (bits != 8) {
    throw std::invalid_argument("quantize_symmetric: only 8-bit codes are supported");
  }
  const double levels = 127.0;
  QuantTensor q;
  q.rows = w.rows();
  q.cols = w.cols();
  q.codes.resize(w.rows() * w.cols());
  q.scales.resize(w.rows());
  for (std::size_t i = 0; i < w.rows(); ++i) {
    double m = 0.0;
    for (std::size_t j = 0; j < w.cols(); ++j) m = std::max(m, std::abs(w(i, j)));
    const double scale = (m == 0.0) ? 1.0 : m / levels;
    q.scales[i] = scale;
    for (std::size_t j = 0; j < w.cols(); ++j) {
      double c = std::round(w(i, j) / scale);
      if (c > levels) c = levels;
      if (c < -levels) c = -levels;
      q.codes[i * w.cols() + j] = static_cast<std::int8_t>(c);
    }
  }
  return q;
}

Mat dequantize(const QuantTensor& q) {
  Mat w(q.rows, q.cols);
  for (std::size_t i = 0; i < q.rows; ++i) {
    for (std::size_t j = 0; j < q.cols; ++j) {
      w(i, j) = static_cast<double>(q.codes[i * q.cols + j]) * q.scales[i];
    }
  }
  return w;
}

}  // namespace zsvd
