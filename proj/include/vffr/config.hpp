#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "vffr/toml.hpp"
#include "vffr/vesselgen.hpp"

namespace vffr {

/// One end-to-end run: dataset build, per-inflow training, evaluation.
struct RunConfig {
  std::string dataset_dir = "dataset";
  std::string run_dir = "run";

  int n_samples = 1700;
  int n_train = 1500;
  int n_val = 100;
  int n_test = 100;

  std::string variant = "msg";            // "msg" | "evg"
  std::vector<double> inflows_ml_s{3.0};  // one model per inflow
  int epochs = 500;
  int batch_size = 8;
  double learning_rate = 0.001;
  int subsample = 20000;
  int repetitions = 10;                   // inference passes per cloud
  std::vector<double> p_in_mmhg{80.0, 100.0, 120.0};
  int ring_vertices = 16;
  uint64_t seed = 1;

  GeneratorConfig generator;
};

inline void validate(const RunConfig& c) {
  if (c.n_train + c.n_val + c.n_test != c.n_samples)
    throw std::invalid_argument("run config: split sizes must sum to n_samples");
  if (c.n_train < 1 || c.n_val < 0 || c.n_test < 0)
    throw std::invalid_argument("run config: bad split sizes");
  if (c.variant != "msg" && c.variant != "evg")
    throw std::invalid_argument("run config: variant must be msg or evg");
  if (c.epochs < 0 || c.batch_size < 1 || c.subsample < 1 || c.repetitions < 1)
    throw std::invalid_argument("run config: bad training sizes");
  if (!(c.learning_rate >= 0)) throw std::invalid_argument("run config: bad learning rate");
  if (c.inflows_ml_s.empty() || c.p_in_mmhg.empty())
    throw std::invalid_argument("run config: need at least one inflow and p_in");
  for (double q : c.inflows_ml_s)
    if (!(q > 0)) throw std::invalid_argument("run config: inflow must be positive");
  for (double p : c.p_in_mmhg)
    if (!(p > 0)) throw std::invalid_argument("run config: p_in must be positive");
  validate(c.generator);
}

/// Scaled-down defaults that finish on a laptop: 35 vessels, 30/0/5 split,
/// 4096-point subsample, 200 epochs.
inline RunConfig desk_run_config() {
  RunConfig c;
  c.n_samples = 35;
  c.n_train = 30;
  c.n_val = 0;
  c.n_test = 5;
  c.epochs = 200;
  c.subsample = 4096;
  return c;
}

inline RunConfig run_config_from_toml(const TomlTable& t) {
  RunConfig d;  // library defaults
  RunConfig c = t.get_bool("run.desk", false) ? desk_run_config() : d;
  c.dataset_dir = t.get_string("run.dataset_dir", c.dataset_dir);
  c.run_dir = t.get_string("run.run_dir", c.run_dir);
  c.n_samples = static_cast<int>(t.get_int("run.n_samples", c.n_samples));
  c.n_train = static_cast<int>(t.get_int("run.n_train", c.n_train));
  c.n_val = static_cast<int>(t.get_int("run.n_val", c.n_val));
  c.n_test = static_cast<int>(t.get_int("run.n_test", c.n_test));
  c.variant = t.get_string("run.variant", c.variant);
  c.inflows_ml_s = t.get_double_array("run.inflows_ml_s", c.inflows_ml_s);
  c.epochs = static_cast<int>(t.get_int("train.epochs", c.epochs));
  c.batch_size = static_cast<int>(t.get_int("train.batch_size", c.batch_size));
  c.learning_rate = t.get_double("train.learning_rate", c.learning_rate);
  c.subsample = static_cast<int>(t.get_int("train.subsample", c.subsample));
  c.repetitions = static_cast<int>(t.get_int("infer.repetitions", c.repetitions));
  c.p_in_mmhg = t.get_double_array("infer.p_in_mmhg", c.p_in_mmhg);
  c.ring_vertices = static_cast<int>(t.get_int("run.ring_vertices", c.ring_vertices));
  c.seed = static_cast<uint64_t>(t.get_int("run.seed", static_cast<long>(c.seed)));

  GeneratorConfig& g = c.generator;
  auto range = [&](const std::string& key, Range r) {
    auto v = t.get_double_array(key, {r.min, r.max});
    if (v.size() != 2) throw std::invalid_argument(key + ": expected [min, max]");
    return Range{v[0], v[1]};
  };
  g.branch_length = range("generator.branch_length", g.branch_length);
  g.root_radius = range("generator.root_radius", g.root_radius);
  g.taper = range("generator.taper", g.taper);
  g.bifurcation_angle_deg = range("generator.bifurcation_angle_deg", g.bifurcation_angle_deg);
  g.murray_split = range("generator.murray_split", g.murray_split);
  g.bifurcations_min = static_cast<int>(t.get_int("generator.bifurcations_min", g.bifurcations_min));
  g.bifurcations_max = static_cast<int>(t.get_int("generator.bifurcations_max", g.bifurcations_max));
  g.node_step = t.get_double("generator.node_step", g.node_step);
  g.curvature_step_deg = t.get_double("generator.curvature_step_deg", g.curvature_step_deg);
  g.stenoses_min = static_cast<int>(t.get_int("generator.stenoses_min", g.stenoses_min));
  g.stenoses_max = static_cast<int>(t.get_int("generator.stenoses_max", g.stenoses_max));
  g.stenosis_length = range("generator.stenosis_length", g.stenosis_length);

  validate(c);
  return c;
}

inline RunConfig load_run_config(const std::string& path) {
  return run_config_from_toml(TomlTable::parse_file(path));
}

}  // namespace vffr
