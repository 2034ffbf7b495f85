#include "luser/config.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

namespace luser {

namespace {

struct Entry {
  std::string value;
  int line = 0;
  bool consumed = false;
};

struct KvTree {
  // key is "section.name" ("" section for top-level keys)
  std::vector<std::pair<std::string, Entry>> entries;
  std::string where;

  Entry* find(const std::string& key) {
    for (auto& [k, e] : entries) {
      if (k == key) return &e;
    }
    return nullptr;
  }

  void check_all_consumed() const {
    for (const auto& [k, e] : entries) {
      if (!e.consumed) {
        throw ConfigError(where + ":" + std::to_string(e.line) +
                          ": unknown key '" + k + "'");
      }
    }
  }
};

std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

KvTree parse_kv(const std::string& text, const std::string& where) {
  KvTree tree;
  tree.where = where;
  std::istringstream in(text);
  std::string line, section;
  int lineno = 0;
  std::set<std::string> seen;
  while (std::getline(in, line)) {
    ++lineno;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') {
        throw ConfigError(where + ":" + std::to_string(lineno) +
                          ": unterminated section header");
      }
      section = trim(line.substr(1, line.size() - 2));
      if (section.empty()) {
        throw ConfigError(where + ":" + std::to_string(lineno) +
                          ": empty section name");
      }
      continue;
    }
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(where + ":" + std::to_string(lineno) +
                        ": expected key = value");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) {
      throw ConfigError(where + ":" + std::to_string(lineno) + ": empty key");
    }
    const std::string full = section.empty() ? key : section + "." + key;
    if (!seen.insert(full).second) {
      throw ConfigError(where + ":" + std::to_string(lineno) +
                        ": duplicate key '" + full + "'");
    }
    tree.entries.emplace_back(full, Entry{value, lineno, false});
  }
  return tree;
}

struct Extractor {
  KvTree& tree;

  template <typename F>
  void with(const std::string& key, F&& parse_fn) {
    Entry* e = tree.find(key);
    if (!e) return;
    e->consumed = true;
    try {
      parse_fn(e->value);
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception&) {
      throw ConfigError(tree.where + ":" + std::to_string(e->line) +
                        ": bad value for '" + key + "': " + e->value);
    }
  }

  void str(const std::string& key, std::string& out) {
    with(key, [&](const std::string& v) { out = v; });
  }
  void u64(const std::string& key, std::uint64_t& out) {
    with(key, [&](const std::string& v) { out = std::stoull(v); });
  }
  void usz(const std::string& key, std::size_t& out) {
    with(key, [&](const std::string& v) {
      const long long x = std::stoll(v);
      if (x < 0) throw ConfigError(tree.where + ": negative value for '" +
                                   key + "'");
      out = static_cast<std::size_t>(x);
    });
  }
  void i(const std::string& key, int& out) {
    with(key, [&](const std::string& v) { out = std::stoi(v); });
  }
  void f(const std::string& key, double& out) {
    with(key, [&](const std::string& v) {
      std::size_t used = 0;
      out = std::stod(v, &used);
      if (used != v.size()) throw std::invalid_argument(v);
    });
  }
  void list(const std::string& key, std::vector<std::string>& out) {
    with(key, [&](const std::string& v) {
      if (v.size() < 2 || v.front() != '[' || v.back() != ']') {
        throw std::invalid_argument(v);
      }
      out.clear();
      std::string body = v.substr(1, v.size() - 2);
      std::istringstream ss(body);
      std::string item;
      while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
      }
    });
  }
};

void extract_solver(Extractor& ex, const std::string& section,
                    SolverSection& out) {
  ex.i(section + ".max_iters", out.max_iters);
  ex.f(section + ".tol", out.tol);
  ex.i(section + ".anderson_m", out.anderson_m);
  ex.f(section + ".anderson_reg", out.anderson_reg);
  ex.f(section + ".damping", out.damping);
}

bool one_of(const std::string& v, std::initializer_list<const char*> opts) {
  for (const char* o : opts) {
    if (v == o) return true;
  }
  return false;
}

}  // namespace

RunConfig parse_config_text(const std::string& text,
                            const std::string& where) {
  KvTree tree = parse_kv(text, where);
  Extractor ex{tree};
  RunConfig cfg;

  ex.str("task", cfg.task);
  ex.u64("seed", cfg.seed);
  ex.str("precision", cfg.precision);
  ex.str("out_dir", cfg.out_dir);
  ex.list("bench_models", cfg.bench_models);

  ex.usz("operator.image_size", cfg.op.image_size);
  ex.usz("operator.channels", cfg.op.channels);
  ex.f("operator.noise_sigma", cfg.op.noise_sigma);
  ex.usz("operator.kernel_size", cfg.op.kernel_size);
  ex.f("operator.kernel_variance", cfg.op.kernel_variance);
  ex.usz("operator.angles_full", cfg.op.angles_full);
  ex.usz("operator.angles_selected", cfg.op.angles_selected);
  ex.usz("operator.detectors", cfg.op.detectors);
  ex.usz("operator.acceleration", cfg.op.acceleration);
  ex.str("operator.mask_axis", cfg.op.mask_axis);
  ex.f("operator.center_fraction", cfg.op.center_fraction);
  ex.u64("operator.mask_seed", cfg.op.mask_seed);

  ex.str("model.kind", cfg.model.kind);
  ex.str("model.variant", cfg.model.variant);
  ex.i("model.stages", cfg.model.stages);
  ex.i("model.psw_blocks", cfg.model.psw_blocks);
  ex.usz("model.width", cfg.model.width);
  ex.usz("model.gn_groups", cfg.model.gn_groups);
  ex.f("model.leaky_slope", cfg.model.leaky_slope);
  ex.usz("model.dncnn_layers", cfg.model.dncnn_layers);
  ex.usz("model.dncnn_width", cfg.model.dncnn_width);
  ex.f("model.lambda_init", cfg.model.lambda_init);

  extract_solver(ex, "solver", cfg.solver);
  extract_solver(ex, "solver_backward", cfg.solver_backward);

  ex.i("train.epochs", cfg.train.epochs);
  ex.i("train.batch_size", cfg.train.batch_size);
  ex.f("train.learning_rate", cfg.train.learning_rate);
  ex.str("train.loss", cfg.train.loss);
  ex.f("train.adam_beta1", cfg.train.adam_beta1);
  ex.f("train.adam_beta2", cfg.train.adam_beta2);
  ex.f("train.adam_eps", cfg.train.adam_eps);

  ex.str("data.source", cfg.data.source);
  ex.i("data.train_count", cfg.data.train_count);
  ex.i("data.val_count", cfg.data.val_count);
  ex.str("data.dir", cfg.data.dir);
  ex.f("data.field_sigma", cfg.data.field_sigma);
  ex.i("data.phantom_ellipses", cfg.data.phantom_ellipses);

  tree.check_all_consumed();
  validate_config(cfg);
  return cfg;
}

RunConfig parse_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config " + path);
  std::ostringstream os;
  os << f.rdbuf();
  return parse_config_text(os.str(), path);
}

void validate_config(const RunConfig& cfg) {
  auto fail = [](const std::string& msg) { throw ConfigError("config: " + msg); };

  if (!one_of(cfg.task, {"deblur", "ct", "mri"})) {
    fail("task must be deblur|ct|mri, got '" + cfg.task + "'");
  }
  if (!one_of(cfg.precision, {"f32", "f64"})) {
    fail("precision must be f32|f64");
  }
  if (cfg.op.image_size < 8) fail("operator.image_size must be >= 8");
  if (cfg.op.kernel_size % 2 == 0) fail("operator.kernel_size must be odd");
  if (cfg.op.kernel_variance <= 0) fail("operator.kernel_variance must be positive");
  if (cfg.op.noise_sigma < 0) fail("operator.noise_sigma must be >= 0");
  if (cfg.op.channels < 1 || cfg.op.channels > 3) {
    fail("operator.channels must be 1..3");
  }
  if (cfg.op.angles_selected == 0 ||
      cfg.op.angles_full % cfg.op.angles_selected != 0) {
    fail("operator.angles_selected must divide operator.angles_full");
  }
  if (!one_of(cfg.op.mask_axis, {"rows", "cols"})) {
    fail("operator.mask_axis must be rows|cols");
  }
  if (cfg.task == "mri") {
    if (cfg.op.acceleration == 0 ||
        cfg.op.image_size % cfg.op.acceleration != 0) {
      fail("operator.acceleration " + std::to_string(cfg.op.acceleration) +
           " does not divide the masked axis length " +
           std::to_string(cfg.op.image_size));
    }
    if (cfg.op.channels > 2) fail("mri carries at most 2 channels");
  }
  if (cfg.op.center_fraction < 0 || cfg.op.center_fraction > 1) {
    fail("operator.center_fraction must lie in [0,1]");
  }

  if (!one_of(cfg.model.kind, {"lu_dncnn", "luser", "deq4ip"})) {
    fail("model.kind must be lu_dncnn|luser|deq4ip");
  }
  if (!one_of(cfg.model.variant, {"sw", "psw", "dw"})) {
    fail("model.variant must be sw|psw|dw");
  }
  if (cfg.model.stages < 0) fail("model.stages must be >= 0");
  if (cfg.model.variant == "psw" && cfg.model.kind != "deq4ip") {
    if (cfg.model.psw_blocks < 1 ||
        cfg.model.stages % cfg.model.psw_blocks != 0) {
      fail("model.psw_blocks must divide model.stages");
    }
  }
  if (cfg.model.kind == "deq4ip" && cfg.model.variant != "sw") {
    fail("deq4ip is weight-tied; set model.variant = sw");
  }
  if (cfg.model.width == 0 || cfg.model.gn_groups == 0 ||
      cfg.model.width % cfg.model.gn_groups != 0) {
    fail("model.width must be a positive multiple of model.gn_groups");
  }
  if (cfg.model.leaky_slope <= 0 || cfg.model.leaky_slope >= 1) {
    fail("model.leaky_slope must lie in (0,1)");
  }
  if (cfg.model.dncnn_layers < 2) fail("model.dncnn_layers must be >= 2");

  for (const SolverSection* s : {&cfg.solver, &cfg.solver_backward}) {
    if (s->max_iters < 0) fail("solver max_iters must be >= 0");
    if (s->tol <= 0) fail("solver tol must be positive");
    if (s->anderson_m < 1) fail("solver anderson_m must be >= 1");
    if (s->anderson_reg < 0) fail("solver anderson_reg must be >= 0");
    if (s->damping <= 0 || s->damping > 1) {
      fail("solver damping must lie in (0,1]");
    }
  }

  if (cfg.train.epochs < 0) fail("train.epochs must be >= 0");
  if (cfg.train.batch_size < 1) fail("train.batch_size must be >= 1");
  if (cfg.train.learning_rate < 0) fail("train.learning_rate must be >= 0");
  if (!one_of(cfg.train.loss, {"final", "aux"})) {
    fail("train.loss must be final|aux");
  }
  if (cfg.train.loss == "aux" && cfg.model.kind == "deq4ip") {
    fail("aux loss needs an unrolled (lu) model");
  }

  if (!one_of(cfg.data.source, {"synthetic", "directory"})) {
    fail("data.source must be synthetic|directory");
  }
  if (cfg.data.source == "directory" && cfg.data.dir.empty()) {
    fail("data.dir required for directory datasets");
  }
  if (cfg.data.train_count < 0 || cfg.data.val_count < 0) {
    fail("data counts must be >= 0");
  }
  for (const std::string& m : cfg.bench_models) {
    if (!one_of(m, {"lu_dncnn", "luser_sw", "luser_psw", "luser_dw",
                    "deq4ip"})) {
      fail("bench_models entry '" + m + "' unknown");
    }
  }
}

namespace {

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

std::string serialize_config(const RunConfig& c) {
  std::ostringstream os;
  os << "task = " << c.task << "\n";
  os << "seed = " << c.seed << "\n";
  os << "precision = " << c.precision << "\n";
  os << "out_dir = " << c.out_dir << "\n";
  os << "bench_models = [";
  for (std::size_t i = 0; i < c.bench_models.size(); ++i) {
    os << (i ? ", " : "") << c.bench_models[i];
  }
  os << "]\n";

  os << "\n[operator]\n";
  os << "image_size = " << c.op.image_size << "\n";
  os << "channels = " << c.op.channels << "\n";
  os << "noise_sigma = " << fmt(c.op.noise_sigma) << "\n";
  os << "kernel_size = " << c.op.kernel_size << "\n";
  os << "kernel_variance = " << fmt(c.op.kernel_variance) << "\n";
  os << "angles_full = " << c.op.angles_full << "\n";
  os << "angles_selected = " << c.op.angles_selected << "\n";
  os << "detectors = " << c.op.detectors << "\n";
  os << "acceleration = " << c.op.acceleration << "\n";
  os << "mask_axis = " << c.op.mask_axis << "\n";
  os << "center_fraction = " << fmt(c.op.center_fraction) << "\n";
  os << "mask_seed = " << c.op.mask_seed << "\n";

  os << "\n[model]\n";
  os << "kind = " << c.model.kind << "\n";
  os << "variant = " << c.model.variant << "\n";
  os << "stages = " << c.model.stages << "\n";
  os << "psw_blocks = " << c.model.psw_blocks << "\n";
  os << "width = " << c.model.width << "\n";
  os << "gn_groups = " << c.model.gn_groups << "\n";
  os << "leaky_slope = " << fmt(c.model.leaky_slope) << "\n";
  os << "dncnn_layers = " << c.model.dncnn_layers << "\n";
  os << "dncnn_width = " << c.model.dncnn_width << "\n";
  os << "lambda_init = " << fmt(c.model.lambda_init) << "\n";

  auto solver = [&](const char* name, const SolverSection& s) {
    os << "\n[" << name << "]\n";
    os << "max_iters = " << s.max_iters << "\n";
    os << "tol = " << fmt(s.tol) << "\n";
    os << "anderson_m = " << s.anderson_m << "\n";
    os << "anderson_reg = " << fmt(s.anderson_reg) << "\n";
    os << "damping = " << fmt(s.damping) << "\n";
  };
  solver("solver", c.solver);
  solver("solver_backward", c.solver_backward);

  os << "\n[train]\n";
  os << "epochs = " << c.train.epochs << "\n";
  os << "batch_size = " << c.train.batch_size << "\n";
  os << "learning_rate = " << fmt(c.train.learning_rate) << "\n";
  os << "loss = " << c.train.loss << "\n";
  os << "adam_beta1 = " << fmt(c.train.adam_beta1) << "\n";
  os << "adam_beta2 = " << fmt(c.train.adam_beta2) << "\n";
  os << "adam_eps = " << fmt(c.train.adam_eps) << "\n";

  os << "\n[data]\n";
  os << "source = " << c.data.source << "\n";
  os << "train_count = " << c.data.train_count << "\n";
  os << "val_count = " << c.data.val_count << "\n";
  if (!c.data.dir.empty()) os << "dir = " << c.data.dir << "\n";
  os << "field_sigma = " << fmt(c.data.field_sigma) << "\n";
  os << "phantom_ellipses = " << c.data.phantom_ellipses << "\n";
  return os.str();
}

int resolved_max_iters(const RunConfig& cfg) {
  if (cfg.solver.max_iters > 0) return cfg.solver.max_iters;
  return cfg.model.kind == "deq4ip" ? 50 : 30;
}

template <typename T>
OperatorPtr<T> make_operator(const RunConfig& cfg) {
  const std::size_t n = cfg.op.image_size;
  if (cfg.task == "deblur") {
    return build_gaussian_blur<T>(cfg.op.kernel_size,
                                  static_cast<T>(cfg.op.kernel_variance),
                                  cfg.op.channels, n, n);
  }
  if (cfg.task == "ct") {
    std::size_t det = cfg.op.detectors;
    if (det == 0) {
      det = static_cast<std::size_t>(
          std::ceil(static_cast<double>(n) * std::sqrt(2.0)));
      if (det % 2 == 0) ++det;
    }
    return build_radon<T>(n, cfg.op.angles_full, cfg.op.angles_selected, det);
  }
  return build_fourier_mask<T>(
      n, n, cfg.op.acceleration,
      cfg.op.mask_axis == "rows" ? MaskAxis::rows : MaskAxis::cols,
      cfg.op.mask_seed, cfg.op.channels, cfg.op.center_fraction);
}

ModelSection model_section_for(const std::string& name,
                               const ModelSection& base) {
  ModelSection m = base;
  if (name == "lu_dncnn") {
    m.kind = "lu_dncnn";
    m.variant = "sw";
  } else if (name == "deq4ip") {
    m.kind = "deq4ip";
    m.variant = "sw";
  } else if (name == "luser_sw") {
    m.kind = "luser";
    m.variant = "sw";
  } else if (name == "luser_psw") {
    m.kind = "luser";
    m.variant = "psw";
  } else if (name == "luser_dw") {
    m.kind = "luser";
    m.variant = "dw";
  } else {
    throw ConfigError("unknown architecture '" + name + "'");
  }
  return m;
}

template <typename T>
ModelConfig<T> make_model_config(const RunConfig& cfg) {
  ModelConfig<T> mc;
  mc.kind = cfg.model.kind == "lu_dncnn" ? ModelKind::lu_dncnn
            : cfg.model.kind == "deq4ip" ? ModelKind::deq4ip
                                         : ModelKind::luser;
  mc.share = cfg.model.variant == "sw"    ? ShareMode::sw
             : cfg.model.variant == "psw" ? ShareMode::psw
                                          : ShareMode::dw;
  if (mc.kind == ModelKind::deq4ip) mc.share = ShareMode::sw;
  mc.stages = cfg.model.stages;
  mc.psw_blocks = cfg.model.psw_blocks;
  mc.lambda_init = static_cast<T>(cfg.model.lambda_init);

  mc.dncnn.channels = cfg.op.channels;
  if (cfg.task == "mri") mc.dncnn.channels = cfg.op.channels;
  mc.dncnn.layers = cfg.model.dncnn_layers;
  mc.dncnn.width = cfg.model.dncnn_width;

  mc.block.channels = cfg.op.channels;
  mc.block.width = cfg.model.width;
  mc.block.gn_groups = cfg.model.gn_groups;
  mc.block.leaky_slope = static_cast<T>(cfg.model.leaky_slope);

  mc.solver.forward.max_iters = resolved_max_iters(cfg);
  mc.solver.forward.tol = static_cast<T>(cfg.solver.tol);
  mc.solver.forward.anderson_m = cfg.solver.anderson_m;
  mc.solver.forward.anderson_reg = static_cast<T>(cfg.solver.anderson_reg);
  mc.solver.forward.damping = static_cast<T>(cfg.solver.damping);
  mc.solver.backward.max_iters =
      cfg.solver_backward.max_iters > 0 ? cfg.solver_backward.max_iters : 50;
  mc.solver.backward.tol = static_cast<T>(cfg.solver_backward.tol);
  mc.solver.backward.anderson_m = cfg.solver_backward.anderson_m;
  mc.solver.backward.anderson_reg =
      static_cast<T>(cfg.solver_backward.anderson_reg);
  mc.solver.backward.damping = static_cast<T>(cfg.solver_backward.damping);
  return mc;
}

template <typename T>
TrainConfig<T> make_train_config(const RunConfig& cfg) {
  TrainConfig<T> tc;
  tc.loss = cfg.train.loss == "aux" ? LossMode::aux : LossMode::final_only;
  tc.epochs = cfg.train.epochs;
  tc.batch_size = cfg.train.batch_size;
  tc.learning_rate = static_cast<T>(cfg.train.learning_rate);
  tc.adam_beta1 = static_cast<T>(cfg.train.adam_beta1);
  tc.adam_beta2 = static_cast<T>(cfg.train.adam_beta2);
  tc.adam_eps = static_cast<T>(cfg.train.adam_eps);
  tc.seed = cfg.seed;
  return tc;
}

template <typename T>
SyntheticSpec<T> make_synthetic_spec(const RunConfig& cfg, bool validation) {
  SyntheticSpec<T> s;
  s.count = validation ? cfg.data.val_count : cfg.data.train_count;
  s.noise_sigma = static_cast<T>(cfg.op.noise_sigma);
  s.field_sigma = static_cast<T>(cfg.data.field_sigma);
  s.phantom_ellipses = cfg.data.phantom_ellipses;
  s.seed = validation ? cfg.seed + 0x5eedull : cfg.seed;
  return s;
}

#define LUSER_CONFIG_INSTANTIATE(T)                                           \
  template OperatorPtr<T> make_operator<T>(const RunConfig&);                  \
  template ModelConfig<T> make_model_config<T>(const RunConfig&);              \
  template TrainConfig<T> make_train_config<T>(const RunConfig&);              \
  template SyntheticSpec<T> make_synthetic_spec<T>(const RunConfig&, bool);

LUSER_CONFIG_INSTANTIATE(float)
LUSER_CONFIG_INSTANTIATE(double)
#undef LUSER_CONFIG_INSTANTIATE

}  // namespace luser
