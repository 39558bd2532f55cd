#include "zsvd/linalg.hpp"

#include <Eigen/Cholesky>
#include <Eigen/SVD>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "zsvd/errors.hpp"

namespace zsvd {

using EigenRowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

namespace {

std::string shape_str(const Mat& a) {
  std::ostringstream os;
  os << a.rows() << "x" << a.cols();
  return os.str();
}

// Flips each u column so its largest-magnitude entry (lowest row index on
// ties) is non-negative; the matching vt row flips with it.
void fix_signs(Mat& u, Mat& vt) {
  const std::size_t r = u.cols();
  for (std::size_t i = 0; i < r; ++i) {
    std::size_t arg = 0;
    double best = 0.0;
    for (std::size_t j = 0; j < u.rows(); ++j) {
      const double mag = std::abs(u(j, i));
      if (mag > best) {
        best = mag;
        arg = j;
      }
    }
    if (u(arg, i) < 0.0) {
      for (std::size_t j = 0; j < u.rows(); ++j) u(j, i) = -u(j, i);
      for (std::size_t j = 0; j < vt.cols(); ++j) vt(i, j) = -vt(i, j);
    }
  }
}

// Orders columns inside groups of exactly equal singular values by descending
// lexicographic comparison of the sign-fixed u columns, so repeated values
// still decompose deterministically.
void order_equal_groups(Mat& u, std::vector<double>& sigma, Mat& vt) {
  const std::size_t r = sigma.size();
  std::size_t lo = 0;
  while (lo < r) {
    std::size_t hi = lo + 1;
    while (hi < r && sigma[hi] == sigma[lo]) ++hi;
    if (hi - lo > 1) {
      std::vector<std::size_t> idx(hi - lo);
      std::iota(idx.begin(), idx.end(), lo);
      std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        for (std::size_t j = 0; j < u.rows(); ++j) {
          if (u(j, a) != u(j, b)) return u(j, a) > u(j, b);
        }
        return false;
      });
      Mat u2 = u;
      Mat vt2 = vt;
      for (std::size_t p = 0; p < idx.size(); ++p) {
        const std::size_t src = idx[p];
        const std::size_t dst = lo + p;
        for (std::size_t j = 0; j < u.rows(); ++j) u2(j, dst) = u(j, src);
        for (std::size_t j = 0; j < vt.cols(); ++j) vt2(dst, j) = vt(src, j);
      }
      u = std::move(u2);
      vt = std::move(vt2);
    }
    lo = hi;
  }
}

}  // namespace

Svd svd(const Mat& a) {
  if (a.rows() == 0 || a.cols() == 0) {
    throw std::invalid_argument("svd: empty matrix");
  }
  if (!all_finite(a)) {
    throw std::invalid_argument("svd: non-finite entry");
  }
  Eigen::Map<const EigenRowMajor> am(a.ptr(), static_cast<Eigen::Index>(a.rows()),
                                     static_cast<Eigen::Index>(a.cols()));
  Eigen::JacobiSVD<EigenRowMajor> jsvd(am, Eigen::ComputeThinU | Eigen::ComputeThinV);
  if (jsvd.info() != Eigen::Success) {
    throw NumericError("svd: decomposition of " + shape_str(a) + " matrix did not converge");
  }

  const std::size_t r = std::min(a.rows(), a.cols());
  Svd out;
  out.u = Mat(a.rows(), r);
  out.vt = Mat(r, a.cols());
  out.sigma.resize(r);
  for (std::size_t i = 0; i < r; ++i) out.sigma[i] = jsvd.singularValues()(static_cast<Eigen::Index>(i));
  for (std::size_t j = 0; j < a.rows(); ++j) {
    for (std::size_t i = 0; i < r; ++i) {
      out.u(j, i) = jsvd.matrixU()(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(i));
    }
  }
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < a.cols(); ++j) {
      out.vt(i, j) = jsvd.matrixV()(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(i));
    }
  }

  fix_signs(out.u, out.vt);
  order_equal_groups(out.u, out.sigma, out.vt);
  return out;
}

Mat cholesky_ridge(const Mat& c, double lambda) {
  if (c.rows() != c.cols()) {
    throw std::invalid_argument("cholesky_ridge: matrix not square");
  }
  if (lambda < 0.0) {
    throw std::invalid_argument("cholesky_ridge: negative ridge");
  }
  const std::size_t n = c.rows();
  double asym = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) asym = std::max(asym, std::abs(c(i, j) - c(j, i)));
  }
  if (asym > 1e-9 * std::max(1.0, max_abs(c))) {
    throw std::invalid_argument("cholesky_ridge: matrix not symmetric");
  }

  EigenRowMajor m(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) m(i, j) = c(i, j);
    m(i, i) += lambda;
  }
  Eigen::LLT<EigenRowMajor> llt(m);
  if (llt.info() != Eigen::Success) {
    std::ostringstream os;
    os << "cholesky_ridge: " << n << "x" << n
       << " matrix plus ridge not positive definite; increase the ridge (lambda=" << lambda << ")";
    throw NumericError(os.str());
  }
  Mat s(n, n);
  EigenRowMajor l = llt.matrixL();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j <= i; ++j) s(i, j) = l(i, j);
  }
  return s;
}

Mat solve_right_inverse_transpose(const Mat& g, const Mat& s) {
  if (s.rows() != s.cols() || g.cols() != s.rows()) {
    throw std::invalid_argument("solve_right_inverse_transpose: shape mismatch");
  }
  const std::size_t n = s.rows();
  for (std::size_t i = 0; i < n; ++i) {
    if (s(i, i) == 0.0) {
      throw NumericError("solve_right_inverse_transpose: singular triangular factor");
    }
  }
  // Row k of h solves sum_{j<=k} h_j * s(k,j) = g_k, forward in k.
  Mat h(g.rows(), n);
  for (std::size_t r = 0; r < g.rows(); ++r) {
    for (std::size_t k = 0; k < n; ++k) {
      double acc = g(r, k);
      for (std::size_t j = 0; j < k; ++j) acc -= h(r, j) * s(k, j);
      h(r, k) = acc / s(k, k);
    }
  }
  return h;
}

Mat solve_right_inverse(const Mat& m, const Mat& s) {
  if (s.rows() != s.cols() || m.cols() != s.rows()) {
    throw std::invalid_argument("solve_right_inverse: shape mismatch");
  }
  const std::size_t n = s.rows();
  for (std::size_t i = 0; i < n; ++i) {
    if (s(i, i) == 0.0) {
      throw NumericError("solve_right_inverse: singular triangular factor");
    }
  }
  // Column equation k: sum_{j>=k} z_j * s(j,k) = m_k, backward in k.
  Mat z(m.rows(), n);
  for (std::size_t r = 0; r < m.rows(); ++r) {
    for (std::size_t k = n; k-- > 0;) {
      double acc = m(r, k);
      for (std::size_t j = k + 1; j < n; ++j) acc -= z(r, j) * s(j, k);
      z(r, k) = acc / s(k, k);
    }
  }
  return z;
}

double frob_inner(const Mat& a, const Mat& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument("frob_inner: shapes differ");
  }
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a.data()[i] * b.data()[i];
  return s;
}

std::size_t effective_rank(std::span<const double> sigma, double tau) {
  if (sigma.empty()) {
    throw std::invalid_argument("effective_rank: empty spectrum");
  }
  if (!(tau > 0.0) || tau > 1.0) {
    throw std::invalid_argument("effective_rank: tau outside (0, 1]");
  }
  double total = 0.0;
  for (std::size_t i = 0; i < sigma.size(); ++i) {
    if (sigma[i] < 0.0 || (i + 1 < sigma.size() && sigma[i] < sigma[i + 1])) {
      throw std::invalid_argument("effective_rank: spectrum not non-negative descending");
    }
    total += sigma[i] * sigma[i];
  }
  if (total == 0.0) {
    throw std::invalid_argument("effective_rank: all-zero spectrum");
  }
  double cum = 0.0;
  for (std::size_t k = 0; k < sigma.size(); ++k) {
    cum += sigma[k] * sigma[k];
    if (cum >= tau * total) return k + 1;
  }
  return sigma.size();
}

}  // namespace zsvd
