#include "zsvd/whiten.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "zsvd/errors.hpp"

namespace zsvd {

Mat second_moment(const Mat& x) {
  if (x.rows() == 0 || x.cols() == 0) {
    throw std::invalid_argument("second_moment: empty activation matrix");
  }
  Mat c = matmul(x, transpose(x));
  // exact symmetry so cholesky_ridge never trips on accumulation order
  for (std::size_t i = 0; i < c.rows(); ++i) {
    for (std::size_t j = i + 1; j < c.cols(); ++j) {
      const double v = 0.5 * (c(i, j) + c(j, i));
      c(i, j) = v;
      c(j, i) = v;
    }
  }
  return c;
}

WhitenedLayer whiten_layer(int layer_id, const Mat& w, const Mat& x, const RidgeConfig& cfg) {
  if (w.rows() == 0 || w.cols() == 0) {
    throw std::invalid_argument("whiten_layer: empty weight matrix");
  }
  if (x.rows() != w.cols()) {
    throw std::invalid_argument("whiten_layer: activation rows do not match weight columns");
  }
  if (cfg.rel < 0.0 || cfg.floor < 0.0) {
    throw std::invalid_argument("whiten_layer: negative ridge configuration");
  }

  WhitenedLayer wl;
  wl.layer_id = layer_id;
  wl.rows = w.rows();
  wl.cols = w.cols();

  const Mat c = second_moment(x);
  double trace = 0.0;
  for (std::size_t i = 0; i < c.rows(); ++i) trace += c(i, i);
  wl.lambda = cfg.rel * trace / static_cast<double>(c.rows()) + cfg.floor;
  wl.whitener = cholesky_ridge(c, wl.lambda);
  wl.svd = svd(matmul(w, wl.whitener));

  const std::size_t m = wl.rows;
  const std::size_t n = wl.cols;
  wl.k_threshold = (m * n + m + n - 1) / (m + n);  // ceil(mn / (m+n))
  return wl;
}

void sensitivities(WhitenedLayer& wl, const Mat& g) {
  if (g.rows() != wl.rows || g.cols() != wl.cols) {
    throw std::invalid_argument("sensitivities: gradient shape does not match the layer");
  }
  wl.whitened_grad = solve_right_inverse_transpose(g, wl.whitener);

  const std::size_t r = wl.rank();
  wl.sigma_grad.resize(r);
  wl.loss_delta.resize(r);
  for (std::size_t i = 0; i < r; ++i) {
    // u_i^T H v_i as dot(u_i, H v_i)
    double acc = 0.0;
    for (std::size_t row = 0; row < wl.rows; ++row) {
      double hv = 0.0;
      for (std::size_t col = 0; col < wl.cols; ++col) {
        hv += wl.whitened_grad(row, col) * wl.svd.vt(i, col);
      }
      acc += wl.svd.u(row, i) * hv;
    }
    wl.sigma_grad[i] = acc;
    wl.loss_delta[i] = -wl.svd.sigma[i] * acc;
  }

  wl.ascending.resize(r);
  std::iota(wl.ascending.begin(), wl.ascending.end(), std::size_t{0});
  std::stable_sort(wl.ascending.begin(), wl.ascending.end(), [&](std::size_t a, std::size_t b) {
    return wl.svd.sigma[a] < wl.svd.sigma[b];
  });
  wl.pointer = 1;
}

Factors reconstruct(const WhitenedLayer& wl, std::span<const std::size_t> kept) {
  for (std::size_t i = 0; i < kept.size(); ++i) {
    if (kept[i] >= wl.rank()) {
      throw std::invalid_argument("reconstruct: component index out of range");
    }
    if (i + 1 < kept.size() && kept[i] >= kept[i + 1]) {
      throw std::invalid_argument("reconstruct: kept indices must be ascending and unique");
    }
  }
  const std::size_t k = kept.size();
  Factors f;
  f.wu = Mat(wl.rows, k);
  Mat vtk(k, wl.cols);
  for (std::size_t j = 0; j < k; ++j) {
    const std::size_t i = kept[j];
    const double rt = std::sqrt(wl.svd.sigma[i]);
    for (std::size_t row = 0; row < wl.rows; ++row) f.wu(row, j) = wl.svd.u(row, i) * rt;
    for (std::size_t col = 0; col < wl.cols; ++col) vtk(j, col) = wl.svd.vt(i, col) * rt;
  }
  f.wv = (k == 0) ? Mat(0, wl.cols) : solve_right_inverse(vtk, wl.whitener);
  return f;
}

Factors truncate_with_whitener(const Mat& w, const Mat& s, std::size_t k) {
  if (w.cols() != s.rows()) {
    throw std::invalid_argument("truncate_with_whitener: whitener does not match the matrix");
  }
  const Svd d = svd(matmul(w, s));
  if (k > d.sigma.size()) {
    throw std::invalid_argument("truncate_with_whitener: rank exceeds the spectrum");
  }
  Factors f;
  f.wu = Mat(w.rows(), k);
  Mat vtk(k, w.cols());
  for (std::size_t i = 0; i < k; ++i) {
    const double rt = std::sqrt(d.sigma[i]);
    for (std::size_t row = 0; row < w.rows(); ++row) f.wu(row, i) = d.u(row, i) * rt;
    for (std::size_t col = 0; col < w.cols(); ++col) vtk(i, col) = d.vt(i, col) * rt;
  }
  f.wv = (k == 0) ? Mat(0, w.cols()) : solve_right_inverse(vtk, s);
  return f;
}

}  // namespace zsvd
