#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "zsvd/correct.hpp"
#include "zsvd/errors.hpp"
#include "zsvd/quant.hpp"
#include "zsvd/rng.hpp"
#include "zsvd/select.hpp"
#include "zsvd/store.hpp"
#include "zsvd/toynet.hpp"
#include "zsvd/whiten.hpp"

using namespace zsvd;

namespace {

// Scratch file that cleans up after itself.
struct TempPath {
  std::string path;
  explicit TempPath(const std::string& name)
      : path((std::filesystem::temp_directory_path() / name).string()) {}
  ~TempPath() { std::filesystem::remove(path); }
};

std::vector<unsigned char> slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(in),
                                    std::istreambuf_iterator<char>());
}

void spit(const std::string& path, const std::vector<unsigned char>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  REQUIRE(out.good());
}

Mat random_mat(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  Rng rng(seed);
  Mat m(rows, cols);
  for (double& v : m.data()) v = rng.gaussian();
  return m;
}

StoreErrorKind kind_of(const std::string& path) {
  try {
    read_tensors(path);
  } catch (const StoreError& e) {
    return e.kind();
  }
  FAIL("expected a StoreError");
  return StoreErrorKind::Truncated;
}

// Report whose counting fields agree with the model; everything else zeroed.
Report consistent_report(const CompressedModel& model) {
  Report rep;
  rep.params_after = stored_params(model);
  rep.bytes_after = footprint_bytes(model, false);
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    ReportLayer rl;
    rl.layer_id = static_cast<int>(l);
    rl.params = stored_params(model.layers[l]);
    rep.layers.push_back(rl);
  }
  return rep;
}

struct Pipeline {
  ToyModel model;
  CalibSet calib;
  CompressedModel compressed;
};

Pipeline make_pipeline(std::uint64_t seed, double ratio) {
  ModelSpec spec;
  spec.dims = {6, 9, 5};
  spec.activation = Activation::GeluTanh;
  spec.seed = seed;
  Pipeline p{build_model(spec), gen_calibration(spec, seed + 1, 48), {}};
  std::vector<LayerCapture> caps = backward(p.model, p.calib);
  std::vector<WhitenedLayer> wls;
  std::vector<SelectorLayer> views;
  for (std::size_t l = 0; l < p.model.weights.size(); ++l) {
    wls.push_back(whiten_layer(static_cast<int>(l), p.model.weights[l], caps[l].x, RidgeConfig{}));
    sensitivities(wls[l], caps[l].g);
    views.push_back(selector_view(wls[l]));
  }
  SelectionState st = init_selection(views, BudgetMode{}, ratio);
  p.compressed = apply_assignment(p.model, wls, run_selection(st));
  return p;
}

}  // namespace

TEST_CASE("empty tensor set is a 12-byte header") {
  TempPath f("zsvd_store_empty.zstn");
  write_tensors(f.path, {});
  CHECK(std::filesystem::file_size(f.path) == 12);
  CHECK(read_tensors(f.path).empty());
}

TEST_CASE("single 2x3 tensor layout") {
  TempPath f("zsvd_store_single.zstn");
  Mat w(2, 3, {1.0, 2.0, 3.0, 4.0, 5.0, 6.0});
  write_tensors(f.path, {NamedTensor::from_mat("W", w)});
  // 12 header + 2 name length + 1 name + 1 dtype + 1 ndim + 16 dims + 48 payload
  CHECK(std::filesystem::file_size(f.path) == 81);

  std::vector<NamedTensor> back = read_tensors(f.path);
  REQUIRE(back.size() == 1);
  CHECK(back[0].name == "W");
  CHECK(back[0].dtype == Dtype::F64);
  CHECK(back[0].dims == std::vector<std::uint64_t>{2, 3});
  CHECK(back[0].payload.size() == 48);
  CHECK(back[0].to_mat() == w);
}

TEST_CASE("tensor files round trip byte for byte") {
  TempPath a("zsvd_store_rt_a.zstn");
  TempPath b("zsvd_store_rt_b.zstn");
  std::vector<NamedTensor> tensors;
  tensors.push_back(NamedTensor::from_mat("layer0.w", random_mat(4, 7, 1)));
  tensors.push_back(NamedTensor::from_f64("meta.dims", {4.0, 7.0}));
  tensors.push_back(NamedTensor::from_i8("codes", {-127, 0, 5, 127, -1, 64}, {2, 3}));
  write_tensors(a.path, tensors);

  std::vector<NamedTensor> back = read_tensors(a.path);
  REQUIRE(back.size() == tensors.size());
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    CHECK(back[i].name == tensors[i].name);
    CHECK(back[i].dtype == tensors[i].dtype);
    CHECK(back[i].dims == tensors[i].dims);
    CHECK(back[i].payload == tensors[i].payload);
  }

  write_tensors(b.path, back);
  CHECK(slurp(a.path) == slurp(b.path));
}

TEST_CASE("writer rejects malformed tensors") {
  TempPath f("zsvd_store_badwrite.zstn");
  NamedTensor ok = NamedTensor::from_f64("x", {1.0});

  CHECK_THROWS_AS(write_tensors(f.path, {ok, ok}), StoreError);

  NamedTensor unnamed = ok;
  unnamed.name.clear();
  CHECK_THROWS_AS(write_tensors(f.path, {unnamed}), std::invalid_argument);

  NamedTensor nan = ok;
  nan.payload.assign(8, 0xff);  // 0xffffffffffffffff is a NaN pattern
  CHECK_THROWS_AS(write_tensors(f.path, {nan}), std::invalid_argument);

  NamedTensor short_payload = ok;
  short_payload.dims = {2};
  CHECK_THROWS_AS(write_tensors(f.path, {short_payload}), std::invalid_argument);
}

TEST_CASE("reader distinguishes corruption kinds") {
  TempPath f("zsvd_store_good.zstn");
  TempPath bad("zsvd_store_bad.zstn");
  write_tensors(f.path, {NamedTensor::from_f64("a", {1.0}),
                         NamedTensor::from_f64("b", {2.0})});
  const std::vector<unsigned char> good = slurp(f.path);

  std::vector<unsigned char> magic = good;
  magic[0] = 'X';
  spit(bad.path, magic);
  CHECK(kind_of(bad.path) == StoreErrorKind::Magic);

  std::vector<unsigned char> version = good;
  version[4] = 2;
  spit(bad.path, version);
  CHECK(kind_of(bad.path) == StoreErrorKind::Version);

  std::vector<unsigned char> cut(good.begin(), good.end() - 1);
  spit(bad.path, cut);
  CHECK(kind_of(bad.path) == StoreErrorKind::Truncated);

  std::vector<unsigned char> empty_cut(good.begin(), good.begin() + 7);
  spit(bad.path, empty_cut);
  CHECK(kind_of(bad.path) == StoreErrorKind::Truncated);

  std::vector<unsigned char> trailing = good;
  trailing.push_back(0);
  spit(bad.path, trailing);
  CHECK(kind_of(bad.path) == StoreErrorKind::LengthMismatch);

  // tensor layout: 12-byte header, then name_len(2) name(1) dtype(1) ndim(1)
  // dim(8) payload(8) per tensor; the second name byte sits at 12+21+2 = 35
  std::vector<unsigned char> dup = good;
  REQUIRE(dup[35] == 'b');
  dup[35] = 'a';
  spit(bad.path, dup);
  CHECK(kind_of(bad.path) == StoreErrorKind::DuplicateName);

  std::vector<unsigned char> dtype = good;
  REQUIRE(dtype[15] == 0);
  dtype[15] = 9;
  spit(bad.path, dtype);
  CHECK(kind_of(bad.path) == StoreErrorKind::Dtype);

  std::vector<unsigned char> huge = good;
  for (int i = 0; i < 8; ++i) huge[17 + i] = 0xff;  // first tensor's dim
  spit(bad.path, huge);
  CHECK(kind_of(bad.path) == StoreErrorKind::Truncated);

  CHECK_THROWS_AS(read_tensors("/nonexistent/zsvd.zstn"), IoError);
}

TEST_CASE("byte-level fuzzing never crashes or misparses") {
  TempPath f("zsvd_store_fuzz_base.zstn");
  TempPath mut("zsvd_store_fuzz_mut.zstn");
  write_tensors(f.path, {NamedTensor::from_mat("w", random_mat(3, 5, 9)),
                         NamedTensor::from_i8("q", {1, -2, 3, -4}, {4}),
                         NamedTensor::from_f64("dims", {3.0, 5.0})});
  const std::vector<unsigned char> good = slurp(f.path);

  Rng rng(12345);
  for (int round = 0; round < 300; ++round) {
    std::vector<unsigned char> bytes = good;
    const int edits = 1 + static_cast<int>(rng.uniform() * 4.0);
    for (int e = 0; e < edits; ++e) {
      const double action = rng.uniform();
      if (action < 0.7 || bytes.empty()) {
        if (bytes.empty()) break;
        const std::size_t at = static_cast<std::size_t>(rng.uniform() * bytes.size());
        bytes[at] = static_cast<unsigned char>(rng.uniform() * 256.0);
      } else if (action < 0.9) {
        bytes.resize(static_cast<std::size_t>(rng.uniform() * bytes.size()));
      } else {
        bytes.push_back(static_cast<unsigned char>(rng.uniform() * 256.0));
      }
    }
    spit(mut.path, bytes);
    try {
      std::vector<NamedTensor> parsed = read_tensors(mut.path);
      // structurally valid mutants must still satisfy their own descriptors
      for (const NamedTensor& t : parsed) {
        std::uint64_t elems = 1;
        for (std::uint64_t d : t.dims) elems *= d;
        CHECK(t.payload.size() == elems * (t.dtype == Dtype::F64   ? 8
                                           : t.dtype == Dtype::F32 ? 4
                                                                   : 1));
      }
    } catch (const StoreError&) {
      // rejection is the expected outcome for structural damage
    }
  }
}

TEST_CASE("quantization closed forms and error bound") {
  QuantTensor zero = quantize_symmetric(Mat(2, 3));
  CHECK(zero.scales == std::vector<double>{1.0, 1.0});
  for (std::int8_t c : zero.codes) CHECK(c == 0);
  CHECK(dequantize(zero) == Mat(2, 3));

  Mat row(1, 2, {-1.0, 0.5});
  QuantTensor q = quantize_symmetric(row);
  CHECK(q.scales[0] == doctest::Approx(1.0 / 127.0));
  CHECK(q.codes[0] == -127);
  CHECK(q.codes[1] == 64);  // 0.5 * 127 = 63.5 rounds away from zero
  Mat back = dequantize(q);
  CHECK(back(0, 0) == doctest::Approx(-1.0));
  CHECK(back(0, 1) == doctest::Approx(64.0 / 127.0));

  for (std::uint64_t seed = 1; seed <= 50; ++seed) {
    Mat m = random_mat(4, 6, seed);
    QuantTensor qt = quantize_symmetric(m);
    Mat d = dequantize(qt);
    for (std::size_t i = 0; i < m.rows(); ++i) {
      for (std::size_t j = 0; j < m.cols(); ++j) {
        CHECK(std::abs(d(i, j) - m(i, j)) <= qt.scales[i] * 0.5 * (1.0 + 1e-12));
      }
    }
  }

  CHECK_THROWS_AS(quantize_symmetric(Mat(2, 2), 4), std::invalid_argument);
}

TEST_CASE("model file round trip") {
  TempPath f("zsvd_store_model.zstn");
  ModelSpec spec;
  spec.dims = {6, 8, 5};
  spec.activation = Activation::Tanh;
  spec.seed = 0xdeadbeefcafe1234ULL;
  ToyModel model = build_model(spec);
  save_model(f.path, model);

  ToyModel back = load_model(f.path);
  CHECK(back.spec.dims == spec.dims);
  CHECK(back.spec.activation == spec.activation);
  CHECK(back.spec.seed == spec.seed);
  REQUIRE(back.weights.size() == model.weights.size());
  for (std::size_t l = 0; l < model.weights.size(); ++l) {
    CHECK(back.weights[l] == model.weights[l]);
    CHECK(back.biases[l] == model.biases[l]);
  }

  CalibSet calib = gen_calibration(spec, 5, 32);
  CHECK(evaluate(back, calib).loss == evaluate(model, calib).loss);
}

TEST_CASE("calibration file round trip") {
  TempPath f("zsvd_store_calib.zstn");
  ModelSpec spec;
  spec.dims = {6, 8, 5};
  spec.seed = 2;
  CalibSet calib = gen_calibration(spec, 5, 40);
  save_calib(f.path, calib);
  CalibSet back = load_calib(f.path);
  CHECK(back.inputs == calib.inputs);
  CHECK(back.labels == calib.labels);
}

TEST_CASE("compressed model file round trip at full precision") {
  TempPath f("zsvd_store_comp.zstn");
  Pipeline p = make_pipeline(31, 0.6);
  save_compressed(f.path, p.compressed, consistent_report(p.compressed));

  CompressedModel back = load_compressed(f.path);
  REQUIRE(back.layers.size() == p.compressed.layers.size());
  for (std::size_t l = 0; l < back.layers.size(); ++l) {
    CHECK(back.layers[l].kind == p.compressed.layers[l].kind);
    CHECK(back.layers[l].dense == p.compressed.layers[l].dense);
    CHECK(back.layers[l].wu == p.compressed.layers[l].wu);
    CHECK(back.layers[l].wv == p.compressed.layers[l].wv);
    CHECK(back.layers[l].bias == p.compressed.layers[l].bias);
  }
  CHECK(evaluate(back, p.calib).loss == evaluate(p.compressed, p.calib).loss);
}

TEST_CASE("compressed model file round trip with quantized factors") {
  TempPath f("zsvd_store_comp_q.zstn");
  Pipeline p = make_pipeline(37, 0.5);
  // quantize every factored layer's wv
  for (CompressedLayer& layer : p.compressed.layers) {
    if (layer.kind != LayerKind::Factored) continue;
    layer.kind = LayerKind::FactoredQuant;
    layer.wv_q = quantize_symmetric(layer.wv);
    layer.wv = Mat();
  }
  save_compressed(f.path, p.compressed, consistent_report(p.compressed));

  CompressedModel back = load_compressed(f.path);
  REQUIRE(back.layers.size() == p.compressed.layers.size());
  bool saw_quant = false;
  for (std::size_t l = 0; l < back.layers.size(); ++l) {
    CHECK(back.layers[l].kind == p.compressed.layers[l].kind);
    if (back.layers[l].kind == LayerKind::FactoredQuant) {
      saw_quant = true;
      CHECK(back.layers[l].wu == p.compressed.layers[l].wu);
      CHECK(back.layers[l].wv_q.codes == p.compressed.layers[l].wv_q.codes);
      CHECK(back.layers[l].wv_q.scales == p.compressed.layers[l].wv_q.scales);
    }
  }
  CHECK(saw_quant);
  CHECK(evaluate(back, p.calib).loss == evaluate(p.compressed, p.calib).loss);
}

TEST_CASE("footprint accounting") {
  Pipeline p = make_pipeline(41, 0.6);
  const std::size_t params = stored_params(p.compressed);
  std::size_t by_layer = 0;
  for (const CompressedLayer& layer : p.compressed.layers) {
    if (layer.kind == LayerKind::Dense) {
      by_layer += layer.dense.rows() * layer.dense.cols();
    } else {
      // 8 bytes per element of both factors: k*(m+n) parameters
      CHECK(stored_params(layer) ==
            layer.wu.cols() * (layer.wu.rows() + layer.wv.cols()));
      by_layer += layer.wu.size() + layer.wv.size();
    }
  }
  CHECK(params == by_layer);
  CHECK(footprint_bytes(p.compressed, false) == 8 * params);

  // the simulated halved-width footprint charges 4 bytes per parameter plus
  // one full-width scale per quantized row
  CompressedModel quant = p.compressed;
  std::uint64_t scales = 0;
  for (CompressedLayer& layer : quant.layers) {
    if (layer.kind != LayerKind::Factored) continue;
    layer.kind = LayerKind::FactoredQuant;
    layer.wv_q = quantize_symmetric(layer.wv);
    layer.wv = Mat();
    scales += layer.wv_q.scales.size();
  }
  CHECK(footprint_bytes(quant, true) == 4 * stored_params(quant) + 8 * scales);
}

TEST_CASE("saving cross-checks the report against the model") {
  TempPath f("zsvd_store_check.zstn");
  Pipeline p = make_pipeline(43, 0.6);
  Report good = consistent_report(p.compressed);
  save_compressed(f.path, p.compressed, good);  // consistent report passes

  Report bad_params = good;
  bad_params.params_after += 1;
  CHECK_THROWS_AS(save_compressed(f.path, p.compressed, bad_params), std::invalid_argument);

  Report bad_bytes = good;
  bad_bytes.bytes_after += 8;
  CHECK_THROWS_AS(save_compressed(f.path, p.compressed, bad_bytes), std::invalid_argument);

  Report bad_budget = good;
  bad_budget.budget_used = 1.0;  // layers all charge 0
  CHECK_THROWS_AS(save_compressed(f.path, p.compressed, bad_budget), std::invalid_argument);

  Report bad_layer = good;
  bad_layer.layers[0].params += 1;
  bad_layer.params_after += 1;
  CHECK_THROWS_AS(save_compressed(f.path, p.compressed, bad_layer), std::invalid_argument);
}

TEST_CASE("loading rejects inconsistent compressed files") {
  TempPath f("zsvd_store_badcomp.zstn");
  Pipeline p = make_pipeline(47, 0.6);
  Report rep = consistent_report(p.compressed);
  save_compressed(f.path, p.compressed, rep);

  std::vector<NamedTensor> tensors = read_tensors(f.path);

  std::vector<NamedTensor> no_bias;
  for (const NamedTensor& t : tensors) {
    if (t.name != "layer0.bias") no_bias.push_back(t);
  }
  write_tensors(f.path, no_bias);
  CHECK_THROWS_AS(load_compressed(f.path), StoreError);

  std::size_t factored = p.compressed.layers.size();
  for (std::size_t l = 0; l < p.compressed.layers.size(); ++l) {
    if (p.compressed.layers[l].kind == LayerKind::Factored) factored = l;
  }
  REQUIRE(factored < p.compressed.layers.size());
  std::vector<NamedTensor> wrong_shape = tensors;
  for (NamedTensor& t : wrong_shape) {
    if (t.name == "layer" + std::to_string(factored) + ".wv") {
      t.dims = {t.dims[0] * t.dims[1], 1};  // same payload, wrong shape
    }
  }
  write_tensors(f.path, wrong_shape);
  CHECK_THROWS_AS(load_compressed(f.path), StoreError);
}

TEST_CASE("report rendering is deterministic and diffable") {
  Report rep;
  rep.mode = "standard";
  rep.strategy = "zero_sum";
  rep.ratio = 0.6;
  rep.selection_ratio = 0.6;
  rep.seed = 7;
  rep.teacher_seed = 8;
  rep.tokens = 512;
  rep.tau = 0.95;
  rep.budget_total = 2124.8;
  rep.budget_used = 2144.0;
  rep.drift = -0.03125;
  rep.params_before = 5312;
  rep.params_after = 3168;
  rep.bytes_before = 42496;
  rep.bytes_after = 25344;
  rep.loss_before = 2.302585092994046;
  rep.loss_after = 2.31;
  rep.ppl_before = 10.0;
  rep.ppl_after = 10.07;
  ReportLayer rl;
  rl.layer_id = 0;
  rl.rows = 64;
  rl.cols = 32;
  rl.rank = 13;
  rl.params = 1248;
  rl.budget_charged = 800.0;
  rl.sigma_max = 3.5;
  rl.sigma_min_kept = 0.25;
  rl.removed_loss_delta = -0.03125;
  rep.layers.push_back(rl);
  rep.rank_energy.push_back(RankEnergyRow{0, 13, 5, 5.0 / 13.0});
  rep.rank_energy_skipped = {2};

  const std::string text = render_report(rep);
  CHECK(render_report(rep) == text);
  CHECK(text.rfind("zsvd-report schema 1\n", 0) == 0);
  CHECK(text.find("ratio: 0.59999999999999998\n") != std::string::npos);
  CHECK(text.find("drift: -0.03125\n") != std::string::npos);
  CHECK(text.find("layer 0: rows=64 cols=32 rank=13 dense=0 quant=0 params=1248 cost=800") !=
        std::string::npos);
  CHECK(text.find("rank_energy_skipped: 2\n") != std::string::npos);

  TempPath f1("zsvd_store_rep1.txt");
  TempPath f2("zsvd_store_rep2.txt");
  write_report(f1.path, rep);
  write_report(f2.path, rep);
  CHECK(slurp(f1.path) == slurp(f2.path));
  const std::vector<unsigned char> bytes = slurp(f1.path);
  CHECK(std::string(bytes.begin(), bytes.end()) == text);
}
