#pragma once

#include <cstdint>
#include <vector>

#include "zsvd/mat.hpp"

namespace zsvd {

// Symmetric per-row int8 quantization of a matrix. Row scale is
// max|row| / 127 (1.0 for an all-zero row); codes are round-half-away-from-
// zero of value/scale, clamped to [-127, 127]. Dequantization error is
// bounded elementwise by scale/2.
struct QuantTensor {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::int8_t> codes;  // row-major, rows*cols
  std::vector<double> scales;      // one per row
};

QuantTensor quantize_symmetric(const Mat& w, int bits = 8);
Mat dequantize(const QuantTensor& q);

}  // namespace zsvd
