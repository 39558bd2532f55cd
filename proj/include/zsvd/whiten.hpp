#pragma once

#include <span>
#include <vector>

#include "zsvd/linalg.hpp"
#include "zsvd/mat.hpp"

namespace zsvd {

// Ridge added to the activation second moment before factoring:
// lambda = rel * trace(C)/n + floor.
struct RidgeConfig {
  double rel = 1e-6;
  double floor = 1e-10;
};

// Everything selection and correction need to know about one target matrix.
// whitener is the lower-triangular S with S S^T = X X^T + lambda I; svd
// factors A = W S; whitened_grad is H = G S^{-T}; sigma_grad[i] = u_i^T H v_i
// is the exact loss slope along sigma_i, and loss_delta[i] = -sigma_i *
// sigma_grad_i is the predicted first-order loss change from dropping
// component i. ascending sorts components by sigma (ties by index); pointer
// is the 1-based position of the next removal candidate in that order.
struct WhitenedLayer {
  int layer_id = -1;
  std::size_t rows = 0;
  std::size_t cols = 0;
  Mat whitener;
  double lambda = 0.0;
  Svd svd;
  Mat whitened_grad;
  std::vector<double> sigma_grad;
  std::vector<double> loss_delta;
  std::vector<std::size_t> ascending;
  std::size_t pointer = 1;
  std::size_t k_threshold = 0;  // ceil(rows*cols / (rows+cols))

  std::size_t rank() const { return svd.sigma.size(); }
};

// Symmetrized activation second moment C = X X^T.
Mat second_moment(const Mat& x);

// Builds whitener and whitened spectrum for one target matrix against the
// activations it saw. Sensitivity fields stay empty until sensitivities().
WhitenedLayer whiten_layer(int layer_id, const Mat& w, const Mat& x, const RidgeConfig& cfg = {});

// Completes a whitened layer with the gradient-dependent fields from the
// weight gradient g of the token-mean loss.
void sensitivities(WhitenedLayer& wl, const Mat& g);

struct Factors {
  Mat wu;  // rows x k
  Mat wv;  // k x cols
};

// Low-rank factors keeping exactly the given components (indices into the
// descending spectrum, any subset): wu = U_K sqrt(Sigma_K) and
// wv = sqrt(Sigma_K) V_K^T S^{-1}, so wu * wv maps back out of the whitened
// space. kept must be sorted ascending and unique; empty kept is a rank-0
// pair.
Factors reconstruct(const WhitenedLayer& wl, std::span<const std::size_t> kept);

// Rank-k whitened truncation of an arbitrary matrix against an existing
// whitener: factors the top k components of w * s. Used by the correction
// loop, which re-truncates updated weights with the layer's original S.
Factors truncate_with_whitener(const Mat& w, const Mat& s, std::size_t k);

}  // namespace zsvd
