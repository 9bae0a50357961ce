#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "vffr/pipeline.hpp"

namespace {

vffr::RunConfig load_config(const std::string& config_path, bool desk) {
  if (!config_path.empty()) return vffr::load_run_config(config_path);
  return desk ? vffr::desk_run_config() : vffr::RunConfig{};
}

void apply_overrides(vffr::RunConfig& cfg, const std::string& variant, double inflow,
                     const std::vector<double>& p_in, long seed, const std::string& out) {
  if (!variant.empty()) cfg.variant = variant;
  if (inflow > 0) cfg.inflows_ml_s = {inflow};
  if (!p_in.empty()) cfg.p_in_mmhg = p_in;
  if (seed >= 0) cfg.seed = static_cast<uint64_t>(seed);
  if (!out.empty()) cfg.run_dir = out;
  validate(cfg);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"synthetic coronary vFFR pipeline"};
  app.require_subcommand(1);

  std::string config_path, variant, out, sample_dir;
  double inflow = -1.0;
  std::vector<double> p_in;
  long seed = -1;
  bool desk = false;

  app.add_option("--config", config_path, "TOML run configuration");
  app.add_option("--variant", variant, "network variant")->check(CLI::IsMember({"msg", "evg"}));
  app.add_option("--inflow", inflow, "inflow in ml/s")->check(CLI::IsMember({3.0, 5.0, 7.0}));
  app.add_option("--p-in", p_in, "inlet pressures in mmHg");
  app.add_option("--seed", seed, "master seed override");
  app.add_option("--out", out, "output directory override");
  app.add_flag("--desk", desk, "desk-scale defaults (35 vessels, 200 epochs)");

  auto* generate = app.add_subcommand("generate", "build the synthetic dataset");
  auto* featurize = app.add_subcommand("featurize", "recompute feature/label channels");
  auto* train = app.add_subcommand("train", "train one checkpoint per inflow");
  auto* infer = app.add_subcommand("infer", "predict drops and vFFR for one sample");
  infer->add_option("--sample", sample_dir, "sample directory")->required();
  auto* evaluate = app.add_subcommand("evaluate", "test-split metrics and report bundle");
  auto* report = app.add_subcommand("report", "regenerate the report from metrics.json");

  CLI11_PARSE(app, argc, argv);

  try {
    vffr::RunConfig cfg = load_config(config_path, desk);
    // --out points generate at the dataset, everything else at the run dir
    if (generate->parsed() && !out.empty()) {
      cfg.dataset_dir = out;
      out.clear();
    }
    apply_overrides(cfg, variant, inflow, p_in, seed, out);

    if (generate->parsed()) {
      auto manifest = vffr::build_dataset(cfg);
      std::cout << "built " << manifest.samples.size() << " samples in " << cfg.dataset_dir << " ("
                << manifest.failures.size() << " retried failures)\n";
    } else if (featurize->parsed()) {
      vffr::featurize_dataset(cfg.dataset_dir);
      std::cout << "featurized " << cfg.dataset_dir << "\n";
    } else if (train->parsed()) {
      vffr::run_train(cfg, &std::cout);
      std::cout << "checkpoints written to " << cfg.run_dir << "\n";
    } else if (infer->parsed()) {
      auto s = vffr::load_sample(sample_dir);
      for (double q : cfg.inflows_ml_s) {
        std::string state_json;
        auto mp = vffr::load_checkpoint<float>(vffr::checkpoint_path(cfg, q), &state_json);
        double label_scale = nlohmann::json::parse(state_json).at("label_scale").get<double>();
        auto cloud = vffr::featured_cloud(s, q);
        auto drops = vffr::infer_drops(mp, cloud, cfg.subsample, cfg.repetitions, cfg.seed,
                                       label_scale);
        std::string qtag = vffr::drop_channel_name(q).substr(5);
        std::string path = cfg.run_dir + "/infer_" + qtag + ".csv";
        std::ofstream f(path);
        f << "vertex,drop_pred";
        for (double p : cfg.p_in_mmhg) f << ",vffr_p" << static_cast<int>(p);
        f << "\n";
        std::vector<vffr::VffrField> fields;
        for (double p : cfg.p_in_mmhg) fields.push_back(vffr::reconstruct_vffr(drops, p, s.meta.fluid));
        for (size_t v = 0; v < drops.size(); ++v) {
          f << v << "," << drops[v];
          for (const auto& field : fields) f << "," << field.vffr[v];
          f << "\n";
        }
        std::cout << "wrote " << path << "\n";
      }
    } else if (evaluate->parsed()) {
      auto reports = vffr::run_evaluate(cfg);
      for (const auto& r : reports)
        std::cout << r.variant << " q" << r.inflow_ml_s << ": mean NMAE "
                  << 100 * r.mean.nmae << "%\n";
      std::cout << "report written to " << cfg.run_dir << "/report\n";
    } else if (report->parsed()) {
      vffr::run_report(cfg);
      std::cout << "report regenerated in " << cfg.run_dir << "/report\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
