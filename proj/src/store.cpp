#include "zsvd/store.hpp"

#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <stdexcept>

namespace zsvd {

namespace {

constexpr std::uint32_t kVersion = 1;
constexpr char kMagic[4] = {'Z', 'S', 'T', 'N'};

std::size_t dtype_size(Dtype d) {
  switch (d) {
    case Dtype::F64:
      return 8;
    case Dtype::F32:
      return 4;
    case Dtype::I8:
      return 1;
  }
  return 0;
}

void append_bytes(std::vector<unsigned char>& out, const void* p, std::size_t n) {
  const unsigned char* b = static_cast<const unsigned char*>(p);
  out.insert(out.end(), b, b + n);
}

void append_u16(std::vector<unsigned char>& out, std::uint16_t v) {
  out.push_back(static_cast<unsigned char>(v & 0xff));
  out.push_back(static_cast<unsigned char>(v >> 8));
}

void append_u32(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xff));
}

void append_u64(std::vector<unsigned char>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xff));
}

// Sequential little-endian reader over a byte buffer.
struct Cursor {
  const std::vector<unsigned char>& buf;
  std::size_t pos = 0;

  void need(std::size_t n) const {
    if (pos + n > buf.size()) throw StoreError(StoreErrorKind::Truncated, "tensor file truncated");
  }
  std::uint16_t u16() {
    need(2);
    std::uint16_t v = static_cast<std::uint16_t>(buf[pos] | (buf[pos + 1] << 8));
    pos += 2;
    return v;
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(buf[pos + i]) << (8 * i);
    pos += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf[pos + i]) << (8 * i);
    pos += 8;
    return v;
  }
  std::uint8_t u8() {
    need(1);
    return buf[pos++];
  }
  std::vector<unsigned char> bytes(std::size_t n) {
    need(n);
    std::vector<unsigned char> out(buf.begin() + static_cast<long>(pos),
                                   buf.begin() + static_cast<long>(pos + n));
    pos += n;
    return out;
  }
};

void atomic_write(const std::string& path, const void* data, std::size_t size) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + tmp);
    out.write(static_cast<const char*>(data), static_cast<std::streamsize>(size));
    if (!out) throw IoError("short write: " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp + " to " + path + ": " + ec.message());
}

std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw IoError("cannot open for reading: " + path);
  const std::streamsize size = in.tellg();
  in.seekg(0);
  std::vector<unsigned char> buf(static_cast<std::size_t>(size));
  if (size > 0) in.read(reinterpret_cast<char*>(buf.data()), size);
  if (!in) throw IoError("short read: " + path);
  return buf;
}

std::vector<double> decode_f64(const std::vector<unsigned char>& payload) {
  std::vector<double> out(payload.size() / 8);
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::uint64_t bits = 0;
    for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(payload[i * 8 + b]) << (8 * b);
    out[i] = std::bit_cast<double>(bits);
  }
  return out;
}

void encode_f64(std::vector<unsigned char>& out, const double* v, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    append_u64(out, std::bit_cast<std::uint64_t>(v[i]));
  }
}

// Exact non-negative integer check for values that ride in f64 tensors.
bool is_index(double v) {
  return std::isfinite(v) && v >= 0.0 && v == std::floor(v) && v <= 9007199254740992.0;
}

std::vector<double> seed_halves(std::uint64_t seed) {
  return {static_cast<double>(seed >> 32), static_cast<double>(seed & 0xffffffffULL)};
}

std::uint64_t seed_from_halves(const std::vector<double>& halves) {
  if (halves.size() != 2 || !is_index(halves[0]) || !is_index(halves[1]) ||
      halves[0] >= 4294967296.0 || halves[1] >= 4294967296.0) {
    throw StoreError(StoreErrorKind::Data, "malformed seed");
  }
  return (static_cast<std::uint64_t>(halves[0]) << 32) | static_cast<std::uint64_t>(halves[1]);
}

// Name-indexed view over a tensor list with required/optional lookup.
struct TensorIndex {
  std::map<std::string, const NamedTensor*> by_name;

  explicit TensorIndex(const std::vector<NamedTensor>& tensors) {
    for (const NamedTensor& t : tensors) by_name.emplace(t.name, &t);
  }
  const NamedTensor* find(const std::string& name) const {
    auto it = by_name.find(name);
    return it == by_name.end() ? nullptr : it->second;
  }
  const NamedTensor& require(const std::string& name) const {
    const NamedTensor* t = find(name);
    if (!t) throw StoreError(StoreErrorKind::Name, "missing tensor: " + name);
    return *t;
  }
};

ModelSpec spec_from_meta(const TensorIndex& idx) {
  ModelSpec spec;
  for (double d : idx.require("meta.dims").to_f64()) {
    if (!is_index(d) || d < 1.0) throw StoreError(StoreErrorKind::Data, "malformed meta.dims");
    spec.dims.push_back(static_cast<std::size_t>(d));
  }
  const std::vector<double> act = idx.require("meta.activation").to_f64();
  if (act.size() != 1 || (act[0] != 0.0 && act[0] != 1.0)) {
    throw StoreError(StoreErrorKind::Data, "malformed meta.activation");
  }
  spec.activation = act[0] == 0.0 ? Activation::GeluTanh : Activation::Tanh;
  spec.seed = seed_from_halves(idx.require("meta.seed").to_f64());
  if (spec.dims.size() < 3) throw StoreError(StoreErrorKind::Data, "model needs at least 3 widths");
  return spec;
}

std::vector<NamedTensor> meta_tensors(const ModelSpec& spec) {
  std::vector<double> dims;
  for (std::size_t d : spec.dims) dims.push_back(static_cast<double>(d));
  return {NamedTensor::from_f64("meta.dims", dims),
          NamedTensor::from_f64("meta.activation",
                                {spec.activation == Activation::GeluTanh ? 0.0 : 1.0}),
          NamedTensor::from_f64("meta.seed", seed_halves(spec.seed))};
}

std::vector<double> bias_checked(const TensorIndex& idx, std::size_t l, std::size_t want) {
  std::vector<double> bias = idx.require("layer" + std::to_string(l) + ".bias").to_f64();
  if (bias.size() != want) throw StoreError(StoreErrorKind::Data, "bias length mismatch");
  return bias;
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

void validate_report(const CompressedModel& model, const Report& report) {
  if (report.layers.size() != model.layers.size()) {
    throw std::invalid_argument("report layer count does not match the model");
  }
  double charged = 0.0;
  std::size_t params = 0;
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    if (report.layers[l].params != stored_params(model.layers[l])) {
      throw std::invalid_argument("report layer parameter count does not match the model");
    }
    params += report.layers[l].params;
    charged += report.layers[l].budget_charged;
  }
  if (report.params_after != params) {
    throw std::invalid_argument("report params_after does not match the model");
  }
  if (report.bytes_after != footprint_bytes(model, report.footprint_simulated)) {
    throw std::invalid_argument("report bytes_after does not match the model");
  }
  if (charged != report.budget_used) {
    throw std::invalid_argument("report budget_used does not match its per-layer costs");
  }
}

}  // namespace

NamedTensor NamedTensor::from_mat(const std::string& name, const Mat& m) {
  NamedTensor t;
  t.name = name;
  t.dtype = Dtype::F64;
  t.dims = {m.rows(), m.cols()};
  t.payload.reserve(m.size() * 8);
  encode_f64(t.payload, m.ptr(), m.size());
  return t;
}

NamedTensor NamedTensor::from_f64(const std::string& name, const std::vector<double>& v) {
  NamedTensor t;
  t.name = name;
  t.dtype = Dtype::F64;
  t.dims = {v.size()};
  t.payload.reserve(v.size() * 8);
  encode_f64(t.payload, v.data(), v.size());
  return t;
}

NamedTensor NamedTensor::from_i8(const std::string& name, const std::vector<std::int8_t>& v,
                                 std::vector<std::uint64_t> dims) {
  NamedTensor t;
  t.name = name;
  t.dtype = Dtype::I8;
  t.dims = std::move(dims);
  t.payload.resize(v.size());
  std::memcpy(t.payload.data(), v.data(), v.size());
  if (t.element_count() != v.size()) {
    throw std::invalid_argument("tensor dims do not match the value count");
  }
  return t;
}

std::uint64_t NamedTensor::element_count() const {
  std::uint64_t n = 1;
  for (std::uint64_t d : dims) n *= d;
  return n;
}

Mat NamedTensor::to_mat() const {
  if (dtype != Dtype::F64) throw StoreError(StoreErrorKind::Dtype, name + ": expected f64");
  if (dims.size() != 2) throw StoreError(StoreErrorKind::Data, name + ": expected 2 dims");
  std::vector<double> values = decode_f64(payload);
  for (double v : values) {
    if (!std::isfinite(v)) throw StoreError(StoreErrorKind::Data, name + ": non-finite value");
  }
  return Mat(static_cast<std::size_t>(dims[0]), static_cast<std::size_t>(dims[1]),
             std::move(values));
}

std::vector<double> NamedTensor::to_f64() const {
  if (dtype != Dtype::F64) throw StoreError(StoreErrorKind::Dtype, name + ": expected f64");
  std::vector<double> values = decode_f64(payload);
  for (double v : values) {
    if (!std::isfinite(v)) throw StoreError(StoreErrorKind::Data, name + ": non-finite value");
  }
  return values;
}

std::vector<std::int8_t> NamedTensor::to_i8() const {
  if (dtype != Dtype::I8) throw StoreError(StoreErrorKind::Dtype, name + ": expected i8");
  std::vector<std::int8_t> values(payload.size());
  std::memcpy(values.data(), payload.data(), payload.size());
  return values;
}

void write_tensors(const std::string& path, const std::vector<NamedTensor>& tensors) {
  std::set<std::string> names;
  for (const NamedTensor& t : tensors) {
    if (t.name.empty() || t.name.size() > 0xffff) {
      throw std::invalid_argument("tensor name empty or too long");
    }
    if (!names.insert(t.name).second) {
      throw StoreError(StoreErrorKind::DuplicateName, "duplicate tensor name: " + t.name);
    }
    if (t.payload.size() != t.element_count() * dtype_size(t.dtype)) {
      throw std::invalid_argument(t.name + ": payload does not match dims");
    }
    if (t.dtype == Dtype::F64) {
      for (double v : decode_f64(t.payload)) {
        if (!std::isfinite(v)) throw std::invalid_argument(t.name + ": non-finite value");
      }
    }
  }

  std::vector<unsigned char> buf;
  append_bytes(buf, kMagic, 4);
  append_u32(buf, kVersion);
  append_u32(buf, static_cast<std::uint32_t>(tensors.size()));
  for (const NamedTensor& t : tensors) {
    append_u16(buf, static_cast<std::uint16_t>(t.name.size()));
    append_bytes(buf, t.name.data(), t.name.size());
    buf.push_back(static_cast<unsigned char>(t.dtype));
    buf.push_back(static_cast<unsigned char>(t.dims.size()));
    for (std::uint64_t d : t.dims) append_u64(buf, d);
    append_bytes(buf, t.payload.data(), t.payload.size());
  }
  atomic_write(path, buf.data(), buf.size());
}

std::vector<NamedTensor> read_tensors(const std::string& path) {
  const std::vector<unsigned char> buf = read_file(path);
  Cursor cur{buf};

  cur.need(4);
  if (std::memcmp(buf.data(), kMagic, 4) != 0) {
    throw StoreError(StoreErrorKind::Magic, "not a tensor file: " + path);
  }
  cur.pos = 4;
  const std::uint32_t version = cur.u32();
  if (version != kVersion) {
    throw StoreError(StoreErrorKind::Version,
                     "unsupported tensor file version " + std::to_string(version));
  }
  const std::uint32_t count = cur.u32();

  std::vector<NamedTensor> tensors;
  std::set<std::string> names;
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    const std::uint16_t name_len = cur.u16();
    const std::vector<unsigned char> name = cur.bytes(name_len);
    t.name.assign(name.begin(), name.end());
    if (!names.insert(t.name).second) {
      throw StoreError(StoreErrorKind::DuplicateName, "duplicate tensor name: " + t.name);
    }
    const std::uint8_t dtype = cur.u8();
    if (dtype > 2) throw StoreError(StoreErrorKind::Dtype, "unknown dtype code");
    t.dtype = static_cast<Dtype>(dtype);
    const std::uint8_t ndim = cur.u8();
    std::uint64_t elems = 1;
    for (std::uint8_t d = 0; d < ndim; ++d) {
      const std::uint64_t dim = cur.u64();
      if (dim != 0 && elems > buf.size() / dim) {
        throw StoreError(StoreErrorKind::Truncated, "tensor dims exceed the file size");
      }
      elems *= dim;
      t.dims.push_back(dim);
    }
    t.payload = cur.bytes(static_cast<std::size_t>(elems * dtype_size(t.dtype)));
    tensors.push_back(std::move(t));
  }
  if (cur.pos != buf.size()) {
    throw StoreError(StoreErrorKind::LengthMismatch, "trailing bytes after the last tensor");
  }
  return tensors;
}

void save_model(const std::string& path, const ToyModel& model) {
  std::vector<NamedTensor> tensors = meta_tensors(model.spec);
  for (std::size_t l = 0; l < model.weights.size(); ++l) {
    tensors.push_back(NamedTensor::from_mat("layer" + std::to_string(l) + ".w",
                                            model.weights[l]));
    tensors.push_back(
        NamedTensor::from_f64("layer" + std::to_string(l) + ".bias", model.biases[l]));
  }
  write_tensors(path, tensors);
}

ToyModel load_model(const std::string& path) {
  const std::vector<NamedTensor> tensors = read_tensors(path);
  const TensorIndex idx(tensors);
  ToyModel model;
  model.spec = spec_from_meta(idx);
  for (std::size_t l = 0; l < model.spec.layer_count(); ++l) {
    Mat w = idx.require("layer" + std::to_string(l) + ".w").to_mat();
    if (w.rows() != model.spec.dims[l + 1] || w.cols() != model.spec.dims[l]) {
      throw StoreError(StoreErrorKind::Data, "weight shape mismatch");
    }
    model.weights.push_back(std::move(w));
    model.biases.push_back(bias_checked(idx, l, model.spec.dims[l + 1]));
  }
  return model;
}

void save_calib(const std::string& path, const CalibSet& calib) {
  std::vector<double> labels;
  for (std::size_t v : calib.labels) labels.push_back(static_cast<double>(v));
  write_tensors(path, {NamedTensor::from_mat("calib.inputs", calib.inputs),
                       NamedTensor::from_f64("calib.labels", labels)});
}

CalibSet load_calib(const std::string& path) {
  const std::vector<NamedTensor> tensors = read_tensors(path);
  const TensorIndex idx(tensors);
  CalibSet calib;
  calib.inputs = idx.require("calib.inputs").to_mat();
  for (double v : idx.require("calib.labels").to_f64()) {
    if (!is_index(v)) throw StoreError(StoreErrorKind::Data, "malformed calibration label");
    calib.labels.push_back(static_cast<std::size_t>(v));
  }
  if (calib.inputs.cols() != calib.labels.size()) {
    throw StoreError(StoreErrorKind::Data, "calibration token count mismatch");
  }
  return calib;
}

std::size_t stored_params(const CompressedLayer& layer) {
  switch (layer.kind) {
    case LayerKind::Dense:
      return layer.dense.size();
    case LayerKind::Factored:
      return layer.wu.size() + layer.wv.size();
    case LayerKind::FactoredQuant:
      return layer.wu.size() + layer.wv_q.codes.size();
  }
  return 0;
}

std::size_t stored_params(const CompressedModel& model) {
  std::size_t n = 0;
  for (const CompressedLayer& layer : model.layers) n += stored_params(layer);
  return n;
}

std::uint64_t footprint_bytes(const CompressedModel& model, bool simulated_half_width) {
  const std::uint64_t params = stored_params(model);
  if (!simulated_half_width) return 8 * params;
  std::uint64_t scales = 0;
  for (const CompressedLayer& layer : model.layers) {
    if (layer.kind == LayerKind::FactoredQuant) scales += layer.wv_q.scales.size();
  }
  return 4 * params + 8 * scales;
}

void save_compressed(const std::string& path, const CompressedModel& model,
                     const Report& report) {
  validate_report(model, report);
  std::vector<NamedTensor> tensors = meta_tensors(model.spec);
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    const CompressedLayer& layer = model.layers[l];
    const std::string prefix = "layer" + std::to_string(l) + ".";
    switch (layer.kind) {
      case LayerKind::Dense:
        tensors.push_back(NamedTensor::from_mat(prefix + "dense", layer.dense));
        break;
      case LayerKind::Factored:
        tensors.push_back(NamedTensor::from_mat(prefix + "wu", layer.wu));
        tensors.push_back(NamedTensor::from_mat(prefix + "wv", layer.wv));
        break;
      case LayerKind::FactoredQuant:
        tensors.push_back(NamedTensor::from_mat(prefix + "wu", layer.wu));
        tensors.push_back(NamedTensor::from_i8(prefix + "wv_q", layer.wv_q.codes,
                                               {layer.wv_q.rows, layer.wv_q.cols}));
        tensors.push_back(NamedTensor::from_f64(prefix + "scales", layer.wv_q.scales));
        break;
    }
    tensors.push_back(NamedTensor::from_f64(prefix + "bias", layer.bias));
  }
  write_tensors(path, tensors);
}

CompressedModel load_compressed(const std::string& path) {
  const std::vector<NamedTensor> tensors = read_tensors(path);
  const TensorIndex idx(tensors);
  CompressedModel model;
  model.spec = spec_from_meta(idx);
  for (std::size_t l = 0; l < model.spec.layer_count(); ++l) {
    const std::string prefix = "layer" + std::to_string(l) + ".";
    const std::size_t rows = model.spec.dims[l + 1];
    const std::size_t cols = model.spec.dims[l];
    CompressedLayer layer;
    if (const NamedTensor* dense = idx.find(prefix + "dense")) {
      layer.kind = LayerKind::Dense;
      layer.dense = dense->to_mat();
      if (layer.dense.rows() != rows || layer.dense.cols() != cols) {
        throw StoreError(StoreErrorKind::Data, "dense shape mismatch");
      }
    } else {
      layer.wu = idx.require(prefix + "wu").to_mat();
      if (layer.wu.rows() != rows) throw StoreError(StoreErrorKind::Data, "wu shape mismatch");
      const std::size_t rank = layer.wu.cols();
      if (const NamedTensor* wv_q = idx.find(prefix + "wv_q")) {
        layer.kind = LayerKind::FactoredQuant;
        if (wv_q->dims.size() != 2 || wv_q->dims[0] != rank || wv_q->dims[1] != cols) {
          throw StoreError(StoreErrorKind::Data, "wv_q shape mismatch");
        }
        layer.wv_q.rows = rank;
        layer.wv_q.cols = cols;
        layer.wv_q.codes = wv_q->to_i8();
        layer.wv_q.scales = idx.require(prefix + "scales").to_f64();
        if (layer.wv_q.scales.size() != rank) {
          throw StoreError(StoreErrorKind::Data, "scales length mismatch");
        }
      } else {
        layer.kind = LayerKind::Factored;
        layer.wv = idx.require(prefix + "wv").to_mat();
        if (layer.wv.rows() != rank || layer.wv.cols() != cols) {
          throw StoreError(StoreErrorKind::Data, "wv shape mismatch");
        }
      }
    }
    layer.bias = bias_checked(idx, l, rows);
    model.layers.push_back(std::move(layer));
  }
  return model;
}

std::string render_report(const Report& report) {
  std::string out;
  const auto line = [&](const std::string& key, const std::string& value) {
    out += key;
    out += ": ";
    out += value;
    out += "\n";
  };
  const auto flag = [](bool b) { return std::string(b ? "1" : "0"); };

  out += "zsvd-report schema " + std::to_string(report.schema) + "\n";
  line("mode", report.mode);
  line("strategy", report.strategy);
  line("per_w_sorted", flag(report.per_w_sorted));
  line("ratio", fmt(report.ratio));
  line("selection_ratio", fmt(report.selection_ratio));
  line("hq", flag(report.hq));
  line("hq_clamped", flag(report.hq_clamped));
  line("seed", std::to_string(report.seed));
  line("teacher_seed", std::to_string(report.teacher_seed));
  line("tokens", std::to_string(report.tokens));
  line("correction", report.correction);
  line("correction_iters", std::to_string(report.correction_iters));
  line("correction_subset", std::to_string(report.correction_subset));
  line("alpha", fmt(report.alpha));
  line("eta", fmt(report.eta));
  line("tau", fmt(report.tau));
  line("budget_total", fmt(report.budget_total));
  line("budget_used", fmt(report.budget_used));
  line("drift", fmt(report.drift));
  line("exhausted_early", flag(report.exhausted_early));
  line("params_before", std::to_string(report.params_before));
  line("params_after", std::to_string(report.params_after));
  line("bytes_before", std::to_string(report.bytes_before));
  line("bytes_after", std::to_string(report.bytes_after));
  line("footprint_simulated", flag(report.footprint_simulated));
  line("loss_before", fmt(report.loss_before));
  line("loss_after", fmt(report.loss_after));
  line("perplexity_before", fmt(report.ppl_before));
  line("perplexity_after", fmt(report.ppl_after));

  line("layers", std::to_string(report.layers.size()));
  for (const ReportLayer& l : report.layers) {
    out += "layer " + std::to_string(l.layer_id) + ": rows=" + std::to_string(l.rows) +
           " cols=" + std::to_string(l.cols) + " rank=" + std::to_string(l.rank) +
           " dense=" + flag(l.dense_fallback) + " quant=" + flag(l.quantized) +
           " params=" + std::to_string(l.params) + " cost=" + fmt(l.budget_charged) +
           " sigma_max=" + fmt(l.sigma_max) + " sigma_min_kept=" + fmt(l.sigma_min_kept) +
           " removed_dl=" + fmt(l.removed_loss_delta) + "\n";
  }

  line("rank_energy", std::to_string(report.rank_energy.size()));
  for (const RankEnergyRow& r : report.rank_energy) {
    out += "rank_energy " + std::to_string(r.layer_id) + ": k_w=" +
           std::to_string(r.k_tau_weight) + " k_g=" + std::to_string(r.k_tau_grad) +
           " ratio=" + fmt(r.ratio) + "\n";
  }
  out += "rank_energy_skipped:";
  for (int id : report.rank_energy_skipped) out += " " + std::to_string(id);
  out += "\n";
  return out;
}

void write_report(const std::string& path, const Report& report) {
  const std::string text = render_report(report);
  atomic_write(path, text.data(), text.size());
}

}  // namespace zsvd
