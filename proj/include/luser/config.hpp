#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "luser/architectures.hpp"
#include "luser/training.hpp"

namespace luser {

/// One run: task + operator parameters, model descriptor, solver settings,
/// training settings, data source. Parsed from a sectioned key=value text
/// file; unknown keys are rejected with their line number.
struct OperatorSection {
  std::size_t image_size = 64;
  std::size_t channels = 1;
  double noise_sigma = 0.01;
  // deblur
  std::size_t kernel_size = 9;
  double kernel_variance = 5.0;
  // ct
  std::size_t angles_full = 1000;
  std::size_t angles_selected = 200;
  std::size_t detectors = 0;  // 0 = span the image diagonal
  // mri
  std::size_t acceleration = 4;
  std::string mask_axis = "rows";
  double center_fraction = 0.0;
  std::uint64_t mask_seed = 0;
};

struct ModelSection {
  std::string kind = "luser";  // lu_dncnn | luser | deq4ip
  std::string variant = "dw";  // sw | psw | dw
  int stages = 8;
  int psw_blocks = 4;
  std::size_t width = 32;
  std::size_t gn_groups = 8;
  double leaky_slope = 0.01;
  std::size_t dncnn_layers = 17;
  std::size_t dncnn_width = 64;
  double lambda_init = 1.0;
};

struct SolverSection {
  int max_iters = 0;  // 0 = resolve by model kind (50 deq4ip, 30 otherwise)
  double tol = 1e-3;
  int anderson_m = 5;
  double anderson_reg = 1e-4;
  double damping = 1.0;
};

struct TrainSection {
  int epochs = 50;
  int batch_size = 10;
  double learning_rate = 1e-4;
  std::string loss = "final";  // final | aux
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
};

struct DataSection {
  std::string source = "synthetic";  // synthetic | directory
  int train_count = 200;
  int val_count = 20;
  std::string dir;
  double field_sigma = 1.5;
  int phantom_ellipses = 6;
};

struct RunConfig {
  std::string task = "deblur";  // deblur | ct | mri
  std::uint64_t seed = 1234;
  std::string precision = "f32";  // f32 | f64
  std::string out_dir = "out";
  std::vector<std::string> bench_models = {"lu_dncnn", "luser_sw",
                                           "luser_dw"};
  OperatorSection op;
  ModelSection model;
  SolverSection solver;
  SolverSection solver_backward{50, 1e-4, 5, 1e-4, 1.0};
  TrainSection train;
  DataSection data;

  bool operator==(const RunConfig&) const = default;
};

RunConfig parse_config(const std::string& path);
RunConfig parse_config_text(const std::string& text, const std::string& where);
std::string serialize_config(const RunConfig& cfg);
void validate_config(const RunConfig& cfg);

/// Solver iteration budget resolved for the configured model kind.
int resolved_max_iters(const RunConfig& cfg);

// config -> module builders

template <typename T>
OperatorPtr<T> make_operator(const RunConfig& cfg);

template <typename T>
ModelConfig<T> make_model_config(const RunConfig& cfg);

/// Same run, different architecture (bench-mem comparisons). `name` is one
/// of lu_dncnn, luser_sw, luser_psw, luser_dw, deq4ip.
ModelSection model_section_for(const std::string& name,
                               const ModelSection& base);

template <typename T>
TrainConfig<T> make_train_config(const RunConfig& cfg);

template <typename T>
SyntheticSpec<T> make_synthetic_spec(const RunConfig& cfg, bool validation);

#define LUSER_CONFIG_EXTERN(T)                                               \
  extern template OperatorPtr<T> make_operator<T>(const RunConfig&);          \
  extern template ModelConfig<T> make_model_config<T>(const RunConfig&);      \
  extern template TrainConfig<T> make_train_config<T>(const RunConfig&);      \
  extern template SyntheticSpec<T> make_synthetic_spec<T>(const RunConfig&,   \
                                                          bool);

LUSER_CONFIG_EXTERN(float)
LUSER_CONFIG_EXTERN(double)
#undef LUSER_CONFIG_EXTERN

}  // namespace luser
