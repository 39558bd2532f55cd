#pragma once

#include <cstdint>
#include <vector>

#include "zsvd/mat.hpp"
#include "zsvd/quant.hpp"

namespace zsvd {

enum class Activation { GeluTanh, Tanh };

// Layer widths dims[0..L]; layer l maps dims[l-1] -> dims[l]. The last width
// is the class count. Weights are drawn uniform in [-1,1) scaled by
// 1/sqrt(fan_in) from the seed; biases start at zero.
struct ModelSpec {
  std::vector<std::size_t> dims;
  Activation activation = Activation::GeluTanh;
  std::uint64_t seed = 0;

  std::size_t layer_count() const { return dims.empty() ? 0 : dims.size() - 1; }
  std::size_t classes() const { return dims.empty() ? 0 : dims.back(); }
};

struct ToyModel {
  ModelSpec spec;
  std::vector<Mat> weights;                 // weights[l] is dims[l+1] x dims[l]
  std::vector<std::vector<double>> biases;  // biases[l] has dims[l+1] entries
};

// Calibration tokens: inputs is dims[0] x tokens, one label per column.
struct CalibSet {
  Mat inputs;
  std::vector<std::size_t> labels;

  std::size_t tokens() const { return labels.size(); }
};

// Per-layer capture from one backward pass: the input the layer saw and the
// exact gradient of the token-mean loss with respect to its weight matrix.
// Bias gradients ride along but are never compression targets.
struct LayerCapture {
  Mat x;  // dims[l] x tokens
  Mat g;  // dims[l+1] x dims[l]
  std::vector<double> bias_grad;
};

// Compressed counterpart of a ToyModel. A layer is either kept dense, stored
// as low-rank factors w ~= wu * wv, or stored with the wv factor quantized.
enum class LayerKind { Dense, Factored, FactoredQuant };

struct CompressedLayer {
  LayerKind kind = LayerKind::Dense;
  Mat dense;         // Dense
  Mat wu;            // Factored | FactoredQuant, dims[l+1] x k
  Mat wv;            // Factored, k x dims[l]
  QuantTensor wv_q;  // FactoredQuant, k x dims[l]
  std::vector<double> bias;

  std::size_t rank() const { return kind == LayerKind::Dense ? 0 : wu.cols(); }
};

struct CompressedModel {
  ModelSpec spec;
  std::vector<CompressedLayer> layers;
};

ToyModel build_model(const ModelSpec& spec);

// Unit-variance gaussian inputs; labels are the argmax (lowest index on ties)
// of a teacher model built from the same dims with teacher_seed.
CalibSet gen_calibration(const ModelSpec& spec, std::uint64_t teacher_seed, std::size_t tokens);

struct ForwardResult {
  double loss = 0.0;
  std::vector<Mat> layer_inputs;  // input to every linear layer
  Mat logits;
};

// Token-mean softmax cross entropy against the calibration labels.
ForwardResult forward_loss(const ToyModel& model, const CalibSet& calib);

// Exact reverse-mode gradients of forward_loss with respect to every weight
// matrix and bias.
std::vector<LayerCapture> backward(const ToyModel& model, const CalibSet& calib);

struct EvalResult {
  double loss = 0.0;
  double perplexity = 0.0;  // exp(loss)
};

EvalResult evaluate(const ToyModel& model, const CalibSet& calib);
EvalResult evaluate(const CompressedModel& model, const CalibSet& calib);

// Multiplies factors out (dequantizing wv codes where present) so gradient
// and spectrum code paths can treat a compressed model as a plain one.
ToyModel materialize(const CompressedModel& model);

// First `tokens` columns; 0 means the full set.
CalibSet take_tokens(const CalibSet& calib, std::size_t tokens);

}  // namespace zsvd
