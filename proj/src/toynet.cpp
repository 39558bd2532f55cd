#include "zsvd/toynet.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "zsvd/errors.hpp"
#include "zsvd/rng.hpp"

namespace zsvd {

namespace {

constexpr double kGeluC0 = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluC1 = 0.044715;

double act_value(Activation a, double z) {
  if (a == Activation::Tanh) return std::tanh(z);
  const double u = kGeluC0 * (z + kGeluC1 * z * z * z);
  return 0.5 * z * (1.0 + std::tanh(u));
}

double act_slope(Activation a, double z) {
  if (a == Activation::Tanh) {
    const double t = std::tanh(z);
    return 1.0 - t * t;
  }
  const double u = kGeluC0 * (z + kGeluC1 * z * z * z);
  const double t = std::tanh(u);
  return 0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * kGeluC0 * (1.0 + 3.0 * kGeluC1 * z * z);
}

void validate_spec(const ModelSpec& spec) {
  if (spec.dims.size() < 3) {
    throw ConfigError("model spec needs at least two layers (three widths)");
  }
  for (std::size_t d : spec.dims) {
    if (d == 0) throw ConfigError("model spec has a zero width");
  }
  if (spec.classes() < 2) {
    throw ConfigError("model spec needs at least two classes");
  }
}

void validate_calib(const ModelSpec& spec, const CalibSet& calib) {
  if (calib.tokens() == 0) throw ConfigError("calibration set is empty");
  if (calib.inputs.rows() != spec.dims.front() || calib.inputs.cols() != calib.tokens()) {
    throw ConfigError("calibration inputs do not match the model input width");
  }
  for (std::size_t lab : calib.labels) {
    if (lab >= spec.classes()) throw ConfigError("calibration label out of range");
  }
}

Mat linear(const Mat& w, const Mat& x, const std::vector<double>& bias) {
  Mat z = matmul(w, x);
  for (std::size_t i = 0; i < z.rows(); ++i) {
    for (std::size_t t = 0; t < z.cols(); ++t) z(i, t) += bias[i];
  }
  return z;
}

Mat activate(Activation a, const Mat& z) {
  Mat x(z.rows(), z.cols());
  for (std::size_t i = 0; i < z.size(); ++i) x.data()[i] = act_value(a, z.data()[i]);
  return x;
}

void check_finite(const Mat& z, std::size_t layer) {
  if (!all_finite(z)) {
    std::ostringstream os;
    os << "forward: non-finite activation at layer " << layer;
    throw NumericError(os.str());
  }
}

struct Trace {
  std::vector<Mat> xs;  // input to each linear layer
  std::vector<Mat> zs;  // pre-activation of each layer
  Mat logits;
};

Trace run_forward(const ToyModel& model, const Mat& inputs) {
  const std::size_t layers = model.spec.layer_count();
  Trace tr;
  tr.xs.reserve(layers);
  Mat x = inputs;
  for (std::size_t l = 0; l < layers; ++l) {
    tr.xs.push_back(x);
    Mat z = linear(model.weights[l], x, model.biases[l]);
    check_finite(z, l);
    if (l + 1 < layers) {
      x = activate(model.spec.activation, z);
      tr.zs.push_back(std::move(z));
    } else {
      tr.logits = std::move(z);
    }
  }
  return tr;
}

// Token-mean softmax cross entropy, max-shifted for stability.
double mean_ce(const Mat& logits, const std::vector<std::size_t>& labels) {
  const std::size_t classes = logits.rows();
  const std::size_t tokens = logits.cols();
  double total = 0.0;
  for (std::size_t t = 0; t < tokens; ++t) {
    double zmax = logits(0, t);
    for (std::size_t c = 1; c < classes; ++c) zmax = std::max(zmax, logits(c, t));
    double sum = 0.0;
    for (std::size_t c = 0; c < classes; ++c) sum += std::exp(logits(c, t) - zmax);
    total += std::log(sum) + zmax - logits(labels[t], t);
  }
  const double loss = total / static_cast<double>(tokens);
  if (!std::isfinite(loss)) throw NumericError("forward: non-finite loss");
  return loss;
}

// d(mean loss)/d(logits) = (softmax - onehot) / tokens.
Mat ce_grad(const Mat& logits, const std::vector<std::size_t>& labels) {
  const std::size_t classes = logits.rows();
  const std::size_t tokens = logits.cols();
  Mat d(classes, tokens);
  for (std::size_t t = 0; t < tokens; ++t) {
    double zmax = logits(0, t);
    for (std::size_t c = 1; c < classes; ++c) zmax = std::max(zmax, logits(c, t));
    double sum = 0.0;
    for (std::size_t c = 0; c < classes; ++c) sum += std::exp(logits(c, t) - zmax);
    for (std::size_t c = 0; c < classes; ++c) {
      d(c, t) = std::exp(logits(c, t) - zmax) / sum;
    }
    d(labels[t], t) -= 1.0;
  }
  const double inv = 1.0 / static_cast<double>(tokens);
  for (double& v : d.data()) v *= inv;
  return d;
}

}  // namespace

ToyModel build_model(const ModelSpec& spec) {
  validate_spec(spec);
  ToyModel model;
  model.spec = spec;
  Rng rng(spec.seed);
  for (std::size_t l = 0; l + 1 < spec.dims.size(); ++l) {
    const std::size_t fan_in = spec.dims[l];
    const std::size_t fan_out = spec.dims[l + 1];
    const double scale = 1.0 / std::sqrt(static_cast<double>(fan_in));
    Mat w(fan_out, fan_in);
    for (double& v : w.data()) v = rng.uniform_pm1() * scale;
    model.weights.push_back(std::move(w));
    model.biases.emplace_back(fan_out, 0.0);
  }
  return model;
}

CalibSet gen_calibration(const ModelSpec& spec, std::uint64_t teacher_seed, std::size_t tokens) {
  validate_spec(spec);
  if (tokens == 0) throw ConfigError("calibration needs at least one token");
  CalibSet calib;
  calib.inputs = Mat(spec.dims.front(), tokens);
  Rng rng(derive_seed(teacher_seed, 0xca11b));
  for (double& v : calib.inputs.data()) v = rng.gaussian();

  ModelSpec teacher_spec = spec;
  teacher_spec.seed = teacher_seed;
  const ToyModel teacher = build_model(teacher_spec);
  const Trace tr = run_forward(teacher, calib.inputs);

  calib.labels.resize(tokens);
  for (std::size_t t = 0; t < tokens; ++t) {
    std::size_t arg = 0;
    for (std::size_t c = 1; c < spec.classes(); ++c) {
      if (tr.logits(c, t) > tr.logits(arg, t)) arg = c;
    }
    calib.labels[t] = arg;
  }
  return calib;
}

ForwardResult forward_loss(const ToyModel& model, const CalibSet& calib) {
  validate_calib(model.spec, calib);
  Trace tr = run_forward(model, calib.inputs);
  ForwardResult out;
  out.loss = mean_ce(tr.logits, calib.labels);
  out.layer_inputs = std::move(tr.xs);
  out.logits = std::move(tr.logits);
  return out;
}

std::vector<LayerCapture> backward(const ToyModel& model, const CalibSet& calib) {
  validate_calib(model.spec, calib);
  const std::size_t layers = model.spec.layer_count();
  Trace tr = run_forward(model, calib.inputs);
  (void)mean_ce(tr.logits, calib.labels);  // surfaces non-finite loss early

  std::vector<LayerCapture> caps(layers);
  Mat dz = ce_grad(tr.logits, calib.labels);
  for (std::size_t l = layers; l-- > 0;) {
    caps[l].x = tr.xs[l];
    caps[l].g = matmul(dz, transpose(tr.xs[l]));
    caps[l].bias_grad.assign(dz.rows(), 0.0);
    for (std::size_t i = 0; i < dz.rows(); ++i) {
      for (std::size_t t = 0; t < dz.cols(); ++t) caps[l].bias_grad[i] += dz(i, t);
    }
    if (l > 0) {
      Mat dx = matmul(transpose(model.weights[l]), dz);
      const Mat& z = tr.zs[l - 1];
      dz = Mat(dx.rows(), dx.cols());
      for (std::size_t i = 0; i < dx.size(); ++i) {
        dz.data()[i] = dx.data()[i] * act_slope(model.spec.activation, z.data()[i]);
      }
    }
  }
  return caps;
}

EvalResult evaluate(const ToyModel& model, const CalibSet& calib) {
  const double loss = forward_loss(model, calib).loss;
  return {loss, std::exp(loss)};
}

EvalResult evaluate(const CompressedModel& model, const CalibSet& calib) {
  validate_calib(model.spec, calib);
  if (model.layers.size() != model.spec.layer_count()) {
    throw ConfigError("compressed model layer count does not match its spec");
  }
  const std::size_t layers = model.layers.size();
  Mat x = calib.inputs;
  Mat logits;
  for (std::size_t l = 0; l < layers; ++l) {
    const CompressedLayer& layer = model.layers[l];
    Mat z;
    switch (layer.kind) {
      case LayerKind::Dense:
        z = linear(layer.dense, x, layer.bias);
        break;
      case LayerKind::Factored:
        z = linear(layer.wu, matmul(layer.wv, x), layer.bias);
        break;
      case LayerKind::FactoredQuant:
        z = linear(layer.wu, matmul(dequantize(layer.wv_q), x), layer.bias);
        break;
    }
    check_finite(z, l);
    if (l + 1 < layers) {
      x = activate(model.spec.activation, z);
    } else {
      logits = std::move(z);
    }
  }
  const double loss = mean_ce(logits, calib.labels);
  return {loss, std::exp(loss)};
}

ToyModel materialize(const CompressedModel& model) {
  ToyModel out;
  out.spec = model.spec;
  for (const CompressedLayer& layer : model.layers) {
    switch (layer.kind) {
      case LayerKind::Dense:
        out.weights.push_back(layer.dense);
        break;
      case LayerKind::Factored:
        out.weights.push_back(matmul(layer.wu, layer.wv));
        break;
      case LayerKind::FactoredQuant:
        out.weights.push_back(matmul(layer.wu, dequantize(layer.wv_q)));
        break;
    }
    out.biases.push_back(layer.bias);
  }
  return out;
}

CalibSet take_tokens(const CalibSet& calib, std::size_t tokens) {
  if (tokens == 0 || tokens >= calib.tokens()) return calib;
  CalibSet out;
  out.inputs = Mat(calib.inputs.rows(), tokens);
  for (std::size_t i = 0; i < calib.inputs.rows(); ++i) {
    for (std::size_t t = 0; t < tokens; ++t) out.inputs(i, t) = calib.inputs(i, t);
  }
  out.labels.assign(calib.labels.begin(), calib.labels.begin() + static_cast<long>(tokens));
  return out;
}

}  // namespace zsvd
