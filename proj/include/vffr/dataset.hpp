#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "vffr/config.hpp"
#include "vffr/features.hpp"
#include "vffr/hemo.hpp"
#include "vffr/ply.hpp"
#include "vffr/surface.hpp"
#include "vffr/vesselgen.hpp"

namespace vffr {

/// splitmix64-style combiner for derived stream seeds.
inline uint64_t mix_seed(uint64_t a, uint64_t b) {
  uint64_t x = a + 0x9E3779B97F4A7C15ULL * (b + 1);
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

inline const std::vector<double>& dataset_inflows_ml_s() {
  static const std::vector<double> q{3.0, 5.0, 7.0};
  return q;
}

inline std::string drop_channel_name(double q_ml_s) {
  double r = std::round(q_ml_s);
  if (std::abs(q_ml_s - r) > 1e-12) throw std::invalid_argument("inflow must be a whole number of ml/s");
  return "drop_q" + std::to_string(static_cast<long>(r));
}

struct SampleMeta {
  uint64_t seed = 0;
  std::vector<StenosisSpec> stenoses;
  FluidModel fluid;
  NormRecord norm;
  std::vector<int> inlet_vertex_ids;
  int n_vertices = 0;
};

inline nlohmann::json to_json(const StenosisSpec& s) {
  return {{"branch_id", s.branch_id},
          {"start_arclength", s.start_arclength},
          {"length", s.length},
          {"severity_grade", s.severity_grade},
          {"profile", s.profile}};
}

inline StenosisSpec stenosis_from_json(const nlohmann::json& j) {
  StenosisSpec s;
  s.branch_id = j.at("branch_id").get<int>();
  s.start_arclength = j.at("start_arclength").get<double>();
  s.length = j.at("length").get<double>();
  s.severity_grade = j.at("severity_grade").get<double>();
  s.profile = j.at("profile").get<std::string>();
  return s;
}

inline nlohmann::json to_json(const SampleMeta& m) {
  nlohmann::json st = nlohmann::json::array();
  for (const auto& s : m.stenoses) st.push_back(to_json(s));
  return {{"seed", m.seed},
          {"stenoses", st},
          {"fluid",
           {{"viscosity", m.fluid.viscosity},
            {"density", m.fluid.density},
            {"loss_coefficient", m.fluid.loss_coefficient}}},
          {"norm", {{"center", {m.norm.center.x(), m.norm.center.y(), m.norm.center.z()}}, {"scale", m.norm.scale}}},
          {"inlet_vertex_ids", m.inlet_vertex_ids},
          {"n_vertices", m.n_vertices}};
}

inline SampleMeta sample_meta_from_json(const nlohmann::json& j) {
  SampleMeta m;
  m.seed = j.at("seed").get<uint64_t>();
  for (const auto& s : j.at("stenoses")) m.stenoses.push_back(stenosis_from_json(s));
  m.fluid.viscosity = j.at("fluid").at("viscosity").get<double>();
  m.fluid.density = j.at("fluid").at("density").get<double>();
  m.fluid.loss_coefficient = j.at("fluid").at("loss_coefficient").get<double>();
  auto c = j.at("norm").at("center");
  m.norm.center = {c.at(0).get<double>(), c.at(1).get<double>(), c.at(2).get<double>()};
  m.norm.scale = j.at("norm").at("scale").get<double>();
  m.inlet_vertex_ids = j.at("inlet_vertex_ids").get<std::vector<int>>();
  m.n_vertices = j.at("n_vertices").get<int>();
  return m;
}

struct ManifestEntry {
  int id = 0;
  std::string dir;
  std::string split;   // "train" | "val" | "test"
  uint64_t seed = 0;
};

struct BuildFailure {
  int slot = 0;
  int attempt = 0;
  uint64_t seed = 0;
  std::string error;
};

struct Manifest {
  std::vector<ManifestEntry> samples;
  std::vector<BuildFailure> failures;
};

inline nlohmann::json to_json(const Manifest& m) {
  nlohmann::json samples = nlohmann::json::array(), failures = nlohmann::json::array();
  for (const auto& s : m.samples)
    samples.push_back({{"id", s.id}, {"dir", s.dir}, {"split", s.split}, {"seed", s.seed}});
  for (const auto& f : m.failures)
    failures.push_back({{"slot", f.slot}, {"attempt", f.attempt}, {"seed", f.seed}, {"error", f.error}});
  return {{"samples", samples}, {"failures", failures}};
}

inline Manifest manifest_from_json(const nlohmann::json& j) {
  Manifest m;
  for (const auto& s : j.at("samples"))
    m.samples.push_back({s.at("id").get<int>(), s.at("dir").get<std::string>(),
                         s.at("split").get<std::string>(), s.at("seed").get<uint64_t>()});
  for (const auto& f : j.at("failures"))
    m.failures.push_back({f.at("slot").get<int>(), f.at("attempt").get<int>(), f.at("seed").get<uint64_t>(),
                          f.at("error").get<std::string>()});
  return m;
}

inline void save_json(const nlohmann::json& j, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << j.dump(2) << "\n";
}

inline nlohmann::json load_json(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot read " + path);
  return nlohmann::json::parse(f);
}

/// One fully materialized sample: stenosed centerline, lofted mesh with all
/// feature/label channels attached, and its metadata.
struct DatasetSample {
  CenterlineTree tree;  // with stenosis profile applied to radii
  SurfaceMesh mesh;
  SampleMeta meta;
};

/// Computes R/G channels and the three per-inflow drop channels in place.
inline void attach_channels(DatasetSample& s) {
  s.mesh.channels["radius"] = radius_feature(s.mesh, s.tree);
  s.mesh.channels["geodesic"] = geodesic_from_inlet(s.mesh);
  for (double q : dataset_inflows_ml_s()) {
    auto flows = split_flows(s.tree, q * 1e-6);
    auto drops = solve_pressure_drops(s.tree, flows, s.meta.fluid, s.meta.stenoses);
    s.mesh.channels[drop_channel_name(q)] = map_drops_to_surface(s.mesh, s.tree, drops).drop;
  }
  auto norm = normalize(extract_point_cloud(s.mesh), s.mesh.channels["radius"], s.mesh.channels["geodesic"]);
  s.meta.norm = norm.norm;
  s.meta.inlet_vertex_ids = s.mesh.inlet_vertex_ids;
  s.meta.n_vertices = s.mesh.vertex_count();
}

/// Generates one vessel end to end. Throws if the geometry is unbuildable
/// (e.g. the lofted tube self-intersects); callers retry with a new seed.
inline DatasetSample build_sample(const GeneratorConfig& gen, int ring_vertices, uint64_t seed) {
  DatasetSample s;
  s.meta.seed = seed;
  CenterlineTree bare = generate_centerline(gen, seed);
  s.meta.stenoses = sample_stenoses(bare, gen, mix_seed(seed, 1));
  s.tree = insert_stenoses(bare, s.meta.stenoses);
  s.mesh = loft_surface(s.tree, ring_vertices);
  attach_channels(s);
  return s;
}

inline void save_sample(const DatasetSample& s, const std::string& dir) {
  std::filesystem::create_directories(dir);
  save_centerline(s.tree, dir + "/centerline.json");
  save_ply(s.mesh, dir + "/mesh.ply");
  save_json(to_json(s.meta), dir + "/meta.json");
}

inline DatasetSample load_sample(const std::string& dir) {
  DatasetSample s;
  s.tree = load_centerline(dir + "/centerline.json");
  s.mesh = load_ply(dir + "/mesh.ply");
  s.meta = sample_meta_from_json(load_json(dir + "/meta.json"));
  s.mesh.inlet_vertex_ids = s.meta.inlet_vertex_ids;  // connectivity extras live in meta
  return s;
}

inline std::string sample_dir_name(int id) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "sample_%04d", id);
  return buf;
}

/// Builds the whole dataset; per-slot generation failures are retried with a
/// fresh derived seed and recorded in the manifest.
inline Manifest build_dataset(const RunConfig& cfg) {
  validate(cfg);
  std::filesystem::create_directories(cfg.dataset_dir);
  Manifest manifest;
  manifest.samples.resize(cfg.n_samples);
  std::vector<std::vector<BuildFailure>> slot_failures(cfg.n_samples);
  std::vector<std::string> fatal(cfg.n_samples);

#pragma omp parallel for schedule(dynamic)
  for (int slot = 0; slot < cfg.n_samples; ++slot) {
    const int kMaxAttempts = 50;
    for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
      uint64_t seed = mix_seed(cfg.seed, uint64_t(slot) * kMaxAttempts + attempt);
      try {
        DatasetSample s = build_sample(cfg.generator, cfg.ring_vertices, seed);
        std::string dir = sample_dir_name(slot);
        save_sample(s, cfg.dataset_dir + "/" + dir);
        std::string split = slot < cfg.n_train ? "train" : (slot < cfg.n_train + cfg.n_val ? "val" : "test");
        manifest.samples[slot] = {slot, dir, split, seed};
        break;
      } catch (const std::exception& e) {
        slot_failures[slot].push_back({slot, attempt, seed, e.what()});
        if (attempt + 1 == kMaxAttempts)
          fatal[slot] = "dataset: slot " + std::to_string(slot) + " failed " +
                        std::to_string(kMaxAttempts) + " times; last error: " + std::string(e.what());
      }
    }
  }
  for (const auto& msg : fatal)
    if (!msg.empty()) throw std::runtime_error(msg);
  for (const auto& fs : slot_failures)
    for (const auto& f : fs) manifest.failures.push_back(f);
  save_json(to_json(manifest), cfg.dataset_dir + "/manifest.json");
  return manifest;
}

inline Manifest load_manifest(const std::string& dataset_dir) {
  return manifest_from_json(load_json(dataset_dir + "/manifest.json"));
}

/// Recomputes every derived channel of every sample in place.
inline void featurize_dataset(const std::string& dataset_dir) {
  Manifest m = load_manifest(dataset_dir);
  for (const auto& entry : m.samples) {
    std::string dir = dataset_dir + "/" + entry.dir;
    DatasetSample s = load_sample(dir);
    attach_channels(s);
    save_sample(s, dir);
  }
}

/// Normalized network input with the chosen inflow's drops as labels.
inline FeaturedPointCloud featured_cloud(const DatasetSample& s, double inflow_ml_s) {
  auto name = drop_channel_name(inflow_ml_s);
  auto it = s.mesh.channels.find(name);
  if (it == s.mesh.channels.end()) throw std::invalid_argument("sample lacks channel " + name);
  return normalize(extract_point_cloud(s.mesh), s.mesh.channels.at("radius"),
                   s.mesh.channels.at("geodesic"), it->second);
}

}  // namespace vffr
