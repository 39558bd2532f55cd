#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "zsvd/errors.hpp"
#include "zsvd/mat.hpp"
#include "zsvd/toynet.hpp"

namespace zsvd {

// Tensor container file layout (all integers little-endian):
//   magic "ZSTN" | u32 version | u32 count
//   per tensor: u16 name length | UTF-8 name | u8 dtype | u8 ndim
//               | u64 per dim | raw payload
enum class Dtype : std::uint8_t { F64 = 0, F32 = 1, I8 = 2 };

struct NamedTensor {
  std::string name;
  Dtype dtype = Dtype::F64;
  std::vector<std::uint64_t> dims;
  std::vector<unsigned char> payload;  // little-endian element bytes

  static NamedTensor from_mat(const std::string& name, const Mat& m);
  static NamedTensor from_f64(const std::string& name, const std::vector<double>& v);
  static NamedTensor from_i8(const std::string& name, const std::vector<std::int8_t>& v,
                             std::vector<std::uint64_t> dims);

  Mat to_mat() const;
  std::vector<double> to_f64() const;
  std::vector<std::int8_t> to_i8() const;
  std::uint64_t element_count() const;
};

enum class StoreErrorKind {
  Truncated,      // bytes ran out mid-structure
  Magic,          // leading bytes are not "ZSTN"
  Version,        // container version unknown
  DuplicateName,  // tensor name repeated
  LengthMismatch, // trailing bytes after the last tensor
  Dtype,          // dtype code unknown, or tensor has the wrong dtype
  Data,           // payload decodes to invalid values (non-finite, bad shape)
  Name            // a required tensor is missing
};

class StoreError : public IoError {
 public:
  StoreError(StoreErrorKind kind, const std::string& msg) : IoError(msg), kind_(kind) {}
  StoreErrorKind kind() const { return kind_; }

 private:
  StoreErrorKind kind_;
};

// Atomic write (temp file + rename) of a version-1 container.
void write_tensors(const std::string& path, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> read_tensors(const std::string& path);

// Plain model file: meta.dims, meta.activation, meta.seed plus
// layer{l}.w and layer{l}.bias per layer.
void save_model(const std::string& path, const ToyModel& model);
ToyModel load_model(const std::string& path);

// Calibration file: calib.inputs (dims[0] x tokens) and calib.labels.
void save_calib(const std::string& path, const CalibSet& calib);
CalibSet load_calib(const std::string& path);

struct ReportLayer {
  int layer_id = -1;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t rank = 0;
  bool dense_fallback = false;
  bool quantized = false;
  std::size_t params = 0;          // stored weight parameters
  double budget_charged = 0.0;     // this layer's share of b
  double sigma_max = 0.0;
  double sigma_min_kept = 0.0;     // 0 when nothing is kept
  double removed_loss_delta = 0.0;
};

struct RankEnergyRow {
  int layer_id = -1;
  std::size_t k_tau_weight = 0;
  std::size_t k_tau_grad = 0;
  double ratio = 0.0;
};

struct Report {
  int schema = 1;
  std::string mode;      // standard | remap | exact | hq
  std::string strategy;  // zero_sum | most_negative | min_abs_dl | min_sigma | homogeneous
  bool per_w_sorted = true;
  double ratio = 1.0;            // requested keep ratio
  double selection_ratio = 1.0;  // actual selection ratio (doubled under hq)
  bool hq = false;
  bool hq_clamped = false;
  std::uint64_t seed = 0;
  std::uint64_t teacher_seed = 0;
  std::size_t tokens = 0;
  std::string correction = "none";  // none | proj_grad | alpha_blend | gd_step | proj_delta
  std::size_t correction_iters = 0;
  std::size_t correction_subset = 0;
  double alpha = 0.0;
  double eta = 0.0;
  double tau = 0.95;
  double budget_total = 0.0;
  double budget_used = 0.0;
  double drift = 0.0;
  bool exhausted_early = false;
  std::size_t params_before = 0;
  std::size_t params_after = 0;
  std::uint64_t bytes_before = 0;
  std::uint64_t bytes_after = 0;
  bool footprint_simulated = false;  // bytes_after uses the halved-width formula
  double loss_before = 0.0;
  double loss_after = 0.0;
  double ppl_before = 0.0;
  double ppl_after = 0.0;
  std::vector<ReportLayer> layers;
  std::vector<RankEnergyRow> rank_energy;
  std::vector<int> rank_energy_skipped;
};

// Compressed model file: meta tensors plus, per layer, either layer{l}.dense,
// or layer{l}.wu + layer{l}.wv, or layer{l}.wu + layer{l}.wv_q +
// layer{l}.scales, and always layer{l}.bias. The report is cross-checked
// against the model (parameter and byte counts) before anything is written.
void save_compressed(const std::string& path, const CompressedModel& model, const Report& report);
CompressedModel load_compressed(const std::string& path);

// Stored weight parameters of one layer / the whole model (biases excluded).
std::size_t stored_params(const CompressedLayer& layer);
std::size_t stored_params(const CompressedModel& model);

// Report footprint in bytes. Plain counting stores every weight parameter at
// 8 bytes. The simulated variant models the halved bit width: 4 bytes per
// stored weight parameter plus 8 per quantization scale.
std::uint64_t footprint_bytes(const CompressedModel& model, bool simulated_half_width);

// Deterministic key-per-line rendering, schema-versioned, doubles at full
// precision.
std::string render_report(const Report& report);
void write_report(const std::string& path, const Report& report);

}  // namespace zsvd
