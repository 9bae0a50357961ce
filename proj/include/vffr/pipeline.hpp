#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "vffr/dataset.hpp"
#include "vffr/nnet.hpp"

#ifdef __GLIBC__
#include <malloc.h>
#endif

namespace vffr {

namespace detail {

// Tape workloads allocate and free large buffers every iteration; keep that
// memory on the heap instead of round-tripping through mmap/munmap.
inline void tune_allocator() {
#ifdef __GLIBC__
  static const bool done = [] {
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
    return true;
  }();
  (void)done;
#endif
}

}  // namespace detail

// ---- training ----

struct TrainOptions {
  int epochs = 200;
  int batch_size = 8;
  int subsample = 4096;
  double learning_rate = 1e-3;
  uint64_t seed = 1;
  bool augment = true;
  double label_scale = 1.0;  // labels are divided by this before the loss
  std::ostream* log = nullptr;
};

struct TrainLog {
  std::vector<double> train_mse, val_mse;  // per epoch, in label-scaled units
  int best_epoch = -1;
};

inline double label_scale_of(const std::vector<FeaturedPointCloud>& clouds) {
  double m = 0.0;
  for (const auto& c : clouds)
    for (double y : c.label) m = std::max(m, std::abs(y));
  return std::max(m, 1e-12);
}

namespace detail {

template <class S>
inline ad::MatT<S> scaled_labels(const FeaturedPointCloud& cloud, double scale) {
  ad::MatT<S> y(cloud.size(), 1);
  for (int i = 0; i < cloud.size(); ++i) y(i, 0) = S(cloud.label[i] / scale);
  return y;
}

template <class S>
inline double validation_mse(const ModelParamsT<S>& mp, const std::vector<FeaturedPointCloud>& val,
                             const TrainOptions& opt) {
  if (val.empty()) return std::numeric_limits<double>::quiet_NaN();
  double sum = 0.0;
  for (size_t i = 0; i < val.size(); ++i) {
    auto sub = subsample(val[i], opt.subsample, mix_seed(opt.seed, 0xDE000000ULL + i));
    ad::TapeT<S> tape;
    int out = model_forward(tape, mp, sub);
    sum += static_cast<double>(tape.value(tape.mse(out, scaled_labels<S>(sub, opt.label_scale)))(0, 0));
  }
  return sum / static_cast<double>(val.size());
}

}  // namespace detail

/// Minibatch Adam training with per-iteration subsampling and rotation
/// augmentation. Bit-deterministic for a fixed seed: every worker uses its
/// own derived seed and gradients are reduced in slot order.
template <class S>
inline TrainLog train_model(ModelParamsT<S>& mp, const std::vector<FeaturedPointCloud>& train,
                            const std::vector<FeaturedPointCloud>& val, const TrainOptions& opt,
                            const std::vector<int>* sample_ids = nullptr) {
  if (train.empty()) throw std::invalid_argument("train: empty training set");
  detail::tune_allocator();
  const int n = static_cast<int>(train.size());
  TrainLog log;
  std::vector<ad::MatT<S>> best_tensors = mp.tensors;
  double best_score = std::numeric_limits<double>::infinity();

  for (int epoch = 0; epoch < opt.epochs; ++epoch) {
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 shuffler(mix_seed(opt.seed, 0x0Eull * 1000003 + epoch));
    std::shuffle(order.begin(), order.end(), shuffler);

    double epoch_loss = 0.0;
    for (int start = 0; start < n; start += opt.batch_size) {
      const int m = std::min(opt.batch_size, n - start);
      std::vector<std::vector<ad::MatT<S>>> slot_grads(m);
      std::vector<double> slot_loss(m, 0.0);
      std::vector<std::string> slot_error(m);

#pragma omp parallel for schedule(dynamic)
      for (int slot = 0; slot < m; ++slot) {
        try {
          const int item = order[start + slot];
          uint64_t stream = mix_seed(opt.seed, (uint64_t(epoch) * 100003 + start + slot) * 2);
          auto sub = subsample(train[item], opt.subsample, stream);
          if (opt.augment) sub = random_rotation(sub, stream + 1);
          ad::TapeT<S> tape;
          std::vector<int> param_ids;
          int out = model_forward(tape, mp, sub, &param_ids);
          int loss = tape.mse(out, detail::scaled_labels<S>(sub, opt.label_scale));
          tape.backward(loss);
          slot_loss[slot] = static_cast<double>(tape.value(loss)(0, 0));
          slot_grads[slot].reserve(param_ids.size());
          for (int id : param_ids) slot_grads[slot].push_back(tape.gradient(id));
        } catch (const std::exception& e) {
          slot_error[slot] = e.what();
        }
      }
      for (const auto& err : slot_error)
        if (!err.empty()) throw std::runtime_error("train: " + err);

      double batch_loss = 0.0;
      for (int slot = 0; slot < m; ++slot) batch_loss += slot_loss[slot];
      batch_loss /= m;
      if (!std::isfinite(batch_loss)) {
        std::string ids;
        for (int slot = 0; slot < m; ++slot) {
          int item = order[start + slot];
          ids += (slot ? ", " : "") + std::to_string(sample_ids ? (*sample_ids)[item] : item);
        }
        throw std::runtime_error("train: non-finite loss at epoch " + std::to_string(epoch) +
                                 ", batch samples [" + ids + "]");
      }
      epoch_loss += batch_loss * m;

      std::vector<ad::MatT<S>> grads = slot_grads[0];
      for (int slot = 1; slot < m; ++slot)
        for (size_t t = 0; t < grads.size(); ++t) grads[t] += slot_grads[slot][t];
      for (auto& g : grads) g /= S(m);
      ad::adam_step(mp.pointers(), grads, mp.adam, opt.learning_rate);
    }

    log.train_mse.push_back(epoch_loss / n);
    double vmse = detail::validation_mse(mp, val, opt);
    if (!val.empty()) log.val_mse.push_back(vmse);
    double score = val.empty() ? log.train_mse.back() : vmse;
    if (score < best_score) {
      best_score = score;
      log.best_epoch = epoch;
      best_tensors = mp.tensors;
    }
    if (opt.log) {
      (*opt.log) << "epoch " << epoch << " train_mse " << log.train_mse.back();
      if (!val.empty()) (*opt.log) << " val_mse " << vmse;
      (*opt.log) << "\n";
    }
  }
  mp.tensors = best_tensors;
  return log;
}

// ---- inference ----

/// Splits [0, n) into nearly equal chunks no larger than chunk_size; every
/// point appears exactly once.
inline std::vector<int> chunk_sizes(int n, int chunk_size) {
  if (n <= chunk_size) return {n};
  int count = (n + chunk_size - 1) / chunk_size;
  int base = n / count, rem = n % count;
  std::vector<int> sizes(count, base);
  for (int i = 0; i < rem; ++i) sizes[i] += 1;
  return sizes;
}

/// Chunked repeated inference: each repetition shuffles the cloud, predicts
/// every point exactly once in chunks, and the result is the mean over
/// repetitions, unscaled back to solver units.
template <class S>
inline std::vector<double> infer_drops(const ModelParamsT<S>& mp, const FeaturedPointCloud& cloud,
                                       int chunk_size, int repetitions, uint64_t seed,
                                       double label_scale) {
  const int n = cloud.size();
  if (n == 0) throw std::invalid_argument("infer: empty cloud");
  detail::tune_allocator();
  std::vector<std::vector<double>> rep_pred(repetitions, std::vector<double>(n, 0.0));
  std::vector<std::string> rep_error(repetitions);

#pragma omp parallel for schedule(dynamic)
  for (int rep = 0; rep < repetitions; ++rep) try {
    std::vector<int> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    std::mt19937_64 rng(mix_seed(seed, 0x1F000000ULL + rep));
    std::shuffle(perm.begin(), perm.end(), rng);
    int pos = 0;
    for (int sz : chunk_sizes(n, chunk_size)) {
      FeaturedPointCloud sub;
      sub.norm = cloud.norm;
      for (int i = 0; i < sz; ++i) {
        int v = perm[pos + i];
        sub.xyz.push_back(cloud.xyz[v]);
        sub.radius.push_back(cloud.radius[v]);
        sub.geodesic.push_back(cloud.geodesic[v]);
      }
      ad::TapeT<S> tape;
      ad::MatT<S> out = tape.value(model_forward(tape, mp, sub));
      for (int i = 0; i < sz; ++i)
        rep_pred[rep][perm[pos + i]] = static_cast<double>(out(i, 0)) * label_scale;
      pos += sz;
    }
  } catch (const std::exception& e) {
    rep_error[rep] = e.what();
  }
  for (const auto& err : rep_error)
    if (!err.empty()) throw std::runtime_error("infer: " + err);
  std::vector<double> mean(n, 0.0);
  for (int rep = 0; rep < repetitions; ++rep)
    for (int i = 0; i < n; ++i) mean[i] += rep_pred[rep][i];
  for (double& v : mean) v /= repetitions;
  return mean;
}

/// vFFR from a predicted (or ground-truth) drop field, one field per p_in.
inline VffrField reconstruct_vffr(const std::vector<double>& drops, double p_in_mmhg,
                                  const FluidModel& fluid) {
  PressureField pf;
  pf.drop = drops;
  return compute_vffr(pf, p_in_mmhg, fluid);
}

// ---- metrics ----

struct DropMetrics {
  double mae = 0.0, nmae = 0.0, r2 = 0.0;
};

inline double quantile(std::vector<double> v, double q) {
  if (v.empty()) throw std::invalid_argument("quantile: empty sample");
  std::sort(v.begin(), v.end());
  double pos = q * (v.size() - 1);
  size_t lo = static_cast<size_t>(std::floor(pos));
  size_t hi = static_cast<size_t>(std::ceil(pos));
  double frac = pos - lo;
  return v[lo] * (1.0 - frac) + v[hi] * frac;
}

inline DropMetrics drop_metrics(const std::vector<double>& pred, const std::vector<double>& label,
                                double y_max) {
  if (pred.size() != label.size() || pred.empty())
    throw std::invalid_argument("metrics: prediction/label size mismatch");
  if (!(y_max > 0)) throw std::invalid_argument("metrics: y_max must be positive");
  double abs_sum = 0.0, mean_y = 0.0;
  for (size_t i = 0; i < pred.size(); ++i) {
    abs_sum += std::abs(pred[i] - label[i]);
    mean_y += label[i];
  }
  mean_y /= label.size();
  double ss_res = 0.0, ss_tot = 0.0;
  for (size_t i = 0; i < pred.size(); ++i) {
    ss_res += (pred[i] - label[i]) * (pred[i] - label[i]);
    ss_tot += (label[i] - mean_y) * (label[i] - mean_y);
  }
  DropMetrics m;
  m.mae = abs_sum / pred.size();
  m.nmae = m.mae / y_max;
  m.r2 = ss_tot > 0 ? 1.0 - ss_res / ss_tot
                    : (ss_res == 0 ? 1.0 : -std::numeric_limits<double>::infinity());
  return m;
}

struct Classification {
  int tp = 0, tn = 0, fp = 0, fn = 0;
  int total() const { return tp + tn + fp + fn; }
  double accuracy() const { return total() ? double(tp + tn) / total() : 0.0; }
  double precision() const { return (tp + fp) ? double(tp) / (tp + fp) : 0.0; }
  double recall() const { return (tp + fn) ? double(tp) / (tp + fn) : 0.0; }
  double f1() const {
    double p = precision(), r = recall();
    return (p + r) > 0 ? 2 * p * r / (p + r) : 0.0;
  }
};

inline constexpr double kVffrThreshold = 0.8;  // significant when vFFR <= 0.8

struct LesionRecord {
  int sample_id = 0;
  int lesion_index = 0;
  double grade = 0.0;
  double p_in_mmhg = 0.0;
  double gt_vffr = 0.0;
  double pred_vffr = 0.0;
};

struct GradeBinRow {
  std::string bin;
  double p_in_mmhg = 0.0;
  int count = 0;
  double err_mean = 0.0, err_median = 0.0, err_p75 = 0.0;  // |vFFR error|
};

struct InflowReport {
  double inflow_ml_s = 0.0;
  std::string variant;
  std::vector<int> sample_ids;
  std::vector<DropMetrics> per_sample;
  DropMetrics mean, median, p75;
  double y_max = 0.0;
  std::map<int, double> vffr_mae;          // p_in (mmHg) -> MAE over all vertices
  std::map<int, Classification> lesion_cls;
  std::vector<LesionRecord> lesions;
  std::vector<GradeBinRow> grade_rows;
};

/// Same nearest-node rule hemosolver uses to paint drops on the surface.
inline std::vector<int> nearest_node_ids(const CenterlineTree& tree, const SurfaceMesh& mesh) {
  std::vector<int> out(mesh.vertex_count());
  for (int v = 0; v < mesh.vertex_count(); ++v) {
    int best = 0;
    double best_d = std::numeric_limits<double>::max();
    for (int i = 0; i < tree.node_count(); ++i) {
      double d = (mesh.vertices[v] - tree.nodes[i].p).squaredNorm();
      if (d < best_d) {
        best_d = d;
        best = i;
      }
    }
    out[v] = best;
  }
  return out;
}

/// Vertices of the lesion measurement window: mapped to centerline nodes in
/// [stenosis end, end + 5 mm] along the stenosed branch. Falls back to the
/// node closest past the stenosis when the window is empty.
inline std::vector<int> lesion_measurement_vertices(const DatasetSample& s,
                                                    const std::vector<int>& nearest,
                                                    const StenosisSpec& sten) {
  auto branches = s.tree.branch_nodes();
  auto it = branches.find(sten.branch_id);
  if (it == branches.end()) throw std::invalid_argument("lesion: unknown branch id");
  const auto& idx = it->second;
  std::vector<double> arc(idx.size(), 0.0);
  for (size_t i = 1; i < idx.size(); ++i)
    arc[i] = arc[i - 1] + (s.tree.nodes[idx[i]].p - s.tree.nodes[idx[i - 1]].p).norm();

  const double w0 = sten.start_arclength + sten.length;
  const double w1 = w0 + 0.005;
  std::vector<char> in_window(s.tree.node_count(), 0);
  bool any = false;
  for (size_t i = 0; i < idx.size(); ++i)
    if (arc[i] >= w0 && arc[i] <= w1) {
      in_window[idx[i]] = 1;
      any = true;
    }
  if (!any) {
    // short distal remainder: take the first node at/past the window start
    size_t pick = idx.size() - 1;
    for (size_t i = 0; i < idx.size(); ++i)
      if (arc[i] >= w0) {
        pick = i;
        break;
      }
    in_window[idx[pick]] = 1;
  }

  std::vector<int> verts;
  for (int v = 0; v < s.mesh.vertex_count(); ++v)
    if (in_window[nearest[v]]) verts.push_back(v);
  if (verts.empty()) {
    // the window nodes are never any vertex's nearest node; use the vertex
    // closest to the first window node
    int node = 0;
    for (int i = 0; i < s.tree.node_count(); ++i)
      if (in_window[i]) {
        node = i;
        break;
      }
    int best = 0;
    double best_d = std::numeric_limits<double>::max();
    for (int v = 0; v < s.mesh.vertex_count(); ++v) {
      double d = (s.mesh.vertices[v] - s.tree.nodes[node].p).squaredNorm();
      if (d < best_d) {
        best_d = d;
        best = v;
      }
    }
    verts.push_back(best);
  }
  return verts;
}

inline const std::vector<std::pair<std::string, Range>>& cad_rads_bins() {
  static const std::vector<std::pair<std::string, Range>> bins{
      {"1-24", {1, 24}}, {"25-49", {25, 49}}, {"50-69", {50, 69}}, {"70-99", {70, 99}}};
  return bins;
}

inline std::vector<GradeBinRow> grade_rows_of(const std::vector<LesionRecord>& lesions) {
  std::map<int, std::map<std::string, std::vector<double>>> errs;
  for (const auto& l : lesions)
    for (const auto& [name, bin] : cad_rads_bins())
      if (l.grade >= bin.min && l.grade <= bin.max)
        errs[static_cast<int>(std::lround(l.p_in_mmhg))][name].push_back(
            std::abs(l.pred_vffr - l.gt_vffr));
  std::vector<GradeBinRow> rows;
  for (const auto& [key, bins] : errs)
    for (const auto& [name, bin] : cad_rads_bins()) {
      GradeBinRow row;
      row.bin = name;
      row.p_in_mmhg = key;
      auto it = bins.find(name);
      if (it != bins.end() && !it->second.empty()) {
        row.count = static_cast<int>(it->second.size());
        double sum = 0.0;
        for (double e : it->second) sum += e;
        row.err_mean = sum / row.count;
        row.err_median = quantile(it->second, 0.5);
        row.err_p75 = quantile(it->second, 0.75);
      }
      rows.push_back(row);
    }
  return rows;
}

/// Full test-split evaluation for one inflow: drop metrics, vFFR errors per
/// p_in, and lesion-level classification at the 0.8 threshold.
inline InflowReport evaluate_inflow(const std::vector<DatasetSample>& samples,
                                    const std::vector<int>& sample_ids,
                                    const std::vector<std::vector<double>>& predictions,
                                    double inflow_ml_s, const std::vector<double>& p_in_list,
                                    const std::string& variant) {
  if (samples.size() != predictions.size() || samples.size() != sample_ids.size())
    throw std::invalid_argument("evaluate: sample/prediction count mismatch");
  InflowReport rep;
  rep.inflow_ml_s = inflow_ml_s;
  rep.variant = variant;
  rep.sample_ids = sample_ids;
  if (samples.empty()) return rep;

  const std::string channel = drop_channel_name(inflow_ml_s);
  for (const auto& s : samples)
    for (double y : s.mesh.channels.at(channel)) rep.y_max = std::max(rep.y_max, std::abs(y));
  if (!(rep.y_max > 0)) rep.y_max = 1e-12;

  std::map<int, double> vffr_abs_sum;
  std::map<int, long> vffr_count;

  for (size_t si = 0; si < samples.size(); ++si) {
    const auto& s = samples[si];
    const auto& label = s.mesh.channels.at(channel);
    const auto& pred = predictions[si];
    rep.per_sample.push_back(drop_metrics(pred, label, rep.y_max));

    auto nearest = nearest_node_ids(s.tree, s.mesh);
    for (double p_in : p_in_list) {
      const int key = static_cast<int>(std::lround(p_in));
      auto gt = reconstruct_vffr(label, p_in, s.meta.fluid);
      auto est = reconstruct_vffr(pred, p_in, s.meta.fluid);
      for (size_t v = 0; v < gt.vffr.size(); ++v) {
        vffr_abs_sum[key] += std::abs(est.vffr[v] - gt.vffr[v]);
        vffr_count[key] += 1;
      }
      for (size_t li = 0; li < s.meta.stenoses.size(); ++li) {
        auto verts = lesion_measurement_vertices(s, nearest, s.meta.stenoses[li]);
        double gt_m = 0.0, est_m = 0.0;
        for (int v : verts) {
          gt_m += gt.vffr[v];
          est_m += est.vffr[v];
        }
        gt_m /= verts.size();
        est_m /= verts.size();
        LesionRecord lr{sample_ids[si], static_cast<int>(li), s.meta.stenoses[li].severity_grade,
                        p_in, gt_m, est_m};
        rep.lesions.push_back(lr);
        bool gt_pos = gt_m <= kVffrThreshold, est_pos = est_m <= kVffrThreshold;
        auto& c = rep.lesion_cls[key];
        if (gt_pos && est_pos) c.tp++;
        else if (!gt_pos && !est_pos) c.tn++;
        else if (!gt_pos && est_pos) c.fp++;
        else c.fn++;
      }
    }
  }

  for (const auto& [key, sum] : vffr_abs_sum) rep.vffr_mae[key] = sum / vffr_count[key];
  rep.grade_rows = grade_rows_of(rep.lesions);

  auto agg = [&](auto pick, double q) {
    std::vector<double> v;
    for (const auto& m : rep.per_sample) v.push_back(pick(m));
    return quantile(v, q);
  };
  auto mean_of = [&](auto pick) {
    double s = 0.0;
    for (const auto& m : rep.per_sample) s += pick(m);
    return s / rep.per_sample.size();
  };
  auto mae = [](const DropMetrics& m) { return m.mae; };
  auto nmae = [](const DropMetrics& m) { return m.nmae; };
  auto r2 = [](const DropMetrics& m) { return m.r2; };
  rep.mean = {mean_of(mae), mean_of(nmae), mean_of(r2)};
  rep.median = {agg(mae, 0.5), agg(nmae, 0.5), agg(r2, 0.5)};
  rep.p75 = {agg(mae, 0.75), agg(nmae, 0.75), agg(r2, 0.75)};
  return rep;
}

// ---- report emission ----

inline nlohmann::json to_json(const InflowReport& r) {
  nlohmann::json per_sample = nlohmann::json::array();
  for (size_t i = 0; i < r.per_sample.size(); ++i)
    per_sample.push_back({{"sample_id", r.sample_ids[i]},
                          {"mae", r.per_sample[i].mae},
                          {"nmae", r.per_sample[i].nmae},
                          {"r2", r.per_sample[i].r2}});
  nlohmann::json cls = nlohmann::json::object();
  for (const auto& [p, c] : r.lesion_cls)
    cls[std::to_string(p)] = {{"tp", c.tp},       {"tn", c.tn},
                              {"fp", c.fp},       {"fn", c.fn},
                              {"accuracy", c.accuracy()}, {"precision", c.precision()},
                              {"recall", c.recall()},     {"f1", c.f1()}};
  nlohmann::json vffr = nlohmann::json::object();
  for (const auto& [p, m] : r.vffr_mae) vffr[std::to_string(p)] = m;
  nlohmann::json lesions = nlohmann::json::array();
  for (const auto& l : r.lesions)
    lesions.push_back({{"sample_id", l.sample_id}, {"lesion_index", l.lesion_index},
                       {"grade", l.grade},         {"p_in_mmhg", l.p_in_mmhg},
                       {"gt_vffr", l.gt_vffr},     {"pred_vffr", l.pred_vffr}});
  return {{"inflow_ml_s", r.inflow_ml_s},
          {"variant", r.variant},
          {"y_max", r.y_max},
          {"per_sample", per_sample},
          {"mean", {{"mae", r.mean.mae}, {"nmae", r.mean.nmae}, {"r2", r.mean.r2}}},
          {"median", {{"mae", r.median.mae}, {"nmae", r.median.nmae}, {"r2", r.median.r2}}},
          {"p75", {{"mae", r.p75.mae}, {"nmae", r.p75.nmae}, {"r2", r.p75.r2}}},
          {"vffr_mae", vffr},
          {"classification", cls},
          {"lesions", lesions}};
}

inline InflowReport inflow_report_from_json(const nlohmann::json& j) {
  InflowReport r;
  r.inflow_ml_s = j.at("inflow_ml_s").get<double>();
  r.variant = j.at("variant").get<std::string>();
  r.y_max = j.at("y_max").get<double>();
  for (const auto& s : j.at("per_sample")) {
    r.sample_ids.push_back(s.at("sample_id").get<int>());
    r.per_sample.push_back(
        {s.at("mae").get<double>(), s.at("nmae").get<double>(), s.at("r2").get<double>()});
  }
  auto dm = [&](const char* key) {
    const auto& m = j.at(key);
    return DropMetrics{m.at("mae").get<double>(), m.at("nmae").get<double>(), m.at("r2").get<double>()};
  };
  r.mean = dm("mean");
  r.median = dm("median");
  r.p75 = dm("p75");
  for (const auto& [key, v] : j.at("vffr_mae").items()) r.vffr_mae[std::stoi(key)] = v.get<double>();
  for (const auto& [key, c] : j.at("classification").items()) {
    Classification cl;
    cl.tp = c.at("tp").get<int>();
    cl.tn = c.at("tn").get<int>();
    cl.fp = c.at("fp").get<int>();
    cl.fn = c.at("fn").get<int>();
    r.lesion_cls[std::stoi(key)] = cl;
  }
  for (const auto& l : j.at("lesions"))
    r.lesions.push_back({l.at("sample_id").get<int>(), l.at("lesion_index").get<int>(),
                         l.at("grade").get<double>(), l.at("p_in_mmhg").get<double>(),
                         l.at("gt_vffr").get<double>(), l.at("pred_vffr").get<double>()});
  r.grade_rows = grade_rows_of(r.lesions);
  return r;
}

inline void write_report(const std::vector<InflowReport>& reports, const std::string& out_dir) {
  std::filesystem::create_directories(out_dir);
  std::ostringstream md;
  md.setf(std::ios::fixed);
  md.precision(6);
  md << "# Run summary\n\n";

  bool any = false;
  for (const auto& r : reports) any = any || !r.per_sample.empty();
  if (!any) {
    md << "no samples\n";
  }

  nlohmann::json metrics = nlohmann::json::array();
  for (const auto& r : reports) {
    metrics.push_back(to_json(r));
    if (r.per_sample.empty()) continue;
    md << "## " << r.variant << ", inflow " << r.inflow_ml_s << " ml/s\n\n";
    md << "Test samples: " << r.per_sample.size() << ", y_max " << r.y_max << "\n\n";
    md << "| metric | mean | median | 75th |\n|---|---|---|---|\n";
    md << "| MAE | " << r.mean.mae << " | " << r.median.mae << " | " << r.p75.mae << " |\n";
    md << "| NMAE (%) | " << 100 * r.mean.nmae << " | " << 100 * r.median.nmae << " | "
       << 100 * r.p75.nmae << " |\n";
    md << "| R2 | " << r.mean.r2 << " | " << r.median.r2 << " | " << r.p75.r2 << " |\n\n";

    md << "| p_in (mmHg) | vFFR MAE | accuracy | precision | recall | F1 | TP | TN | FP | FN |\n";
    md << "|---|---|---|---|---|---|---|---|---|---|\n";
    for (const auto& [p, c] : r.lesion_cls)
      md << "| " << p << " | " << r.vffr_mae.at(p) << " | " << c.accuracy() << " | "
         << c.precision() << " | " << c.recall() << " | " << c.f1() << " | " << c.tp << " | "
         << c.tn << " | " << c.fp << " | " << c.fn << " |\n";
    size_t n_pairs = r.lesions.size();
    size_t n_lesions = r.lesion_cls.empty() ? 0 : n_pairs / r.lesion_cls.size();
    md << "\nLesions: " << n_lesions << " distinct, " << n_pairs
       << " lesion-pressure pairs.\n\n";

    std::ostringstream csv;
    csv.setf(std::ios::fixed);
    csv.precision(9);
    csv << "sample_id,lesion_index,grade,p_in_mmhg,gt_vffr,pred_vffr\n";
    for (const auto& l : r.lesions)
      csv << l.sample_id << "," << l.lesion_index << "," << l.grade << "," << l.p_in_mmhg << ","
          << l.gt_vffr << "," << l.pred_vffr << "\n";
    std::string qtag = drop_channel_name(r.inflow_ml_s).substr(5);  // "q3" from "drop_q3"
    std::ofstream sf(out_dir + "/scatter_" + qtag + ".csv");
    sf << csv.str();
  }

  std::ostringstream gcsv;
  gcsv.setf(std::ios::fixed);
  gcsv.precision(9);
  gcsv << "variant,inflow_ml_s,p_in_mmhg,bin,count,abs_err_mean,abs_err_median,abs_err_p75\n";
  for (const auto& r : reports)
    for (const auto& row : r.grade_rows)
      gcsv << r.variant << "," << r.inflow_ml_s << "," << row.p_in_mmhg << "," << row.bin << ","
           << row.count << "," << row.err_mean << "," << row.err_median << "," << row.err_p75
           << "\n";
  std::ofstream gf(out_dir + "/grade_errors.csv");
  gf << gcsv.str();

  std::ofstream mf(out_dir + "/summary.md");
  mf << md.str();
  save_json(metrics, out_dir + "/metrics.json");
}

// ---- run orchestration ----

inline std::string checkpoint_path(const RunConfig& cfg, double inflow_ml_s) {
  std::string qtag = drop_channel_name(inflow_ml_s).substr(5);
  return cfg.run_dir + "/" + cfg.variant + "_" + qtag + ".ckpt";
}

namespace detail {

struct SplitSamples {
  std::vector<DatasetSample> samples;
  std::vector<int> ids;
};

inline SplitSamples load_split(const RunConfig& cfg, const std::string& split) {
  SplitSamples out;
  for (const auto& entry : load_manifest(cfg.dataset_dir).samples)
    if (entry.split == split) {
      out.samples.push_back(load_sample(cfg.dataset_dir + "/" + entry.dir));
      out.ids.push_back(entry.id);
    }
  return out;
}

}  // namespace detail

/// Trains one checkpoint per configured inflow for cfg.variant.
inline void run_train(const RunConfig& cfg, std::ostream* log = nullptr) {
  validate(cfg);
  std::filesystem::create_directories(cfg.run_dir);
  auto train_set = detail::load_split(cfg, "train");
  auto val_set = detail::load_split(cfg, "val");
  if (train_set.samples.empty()) throw std::runtime_error("run: no training samples in manifest");

  for (double q : cfg.inflows_ml_s) {
    std::vector<FeaturedPointCloud> train_clouds, val_clouds;
    for (const auto& s : train_set.samples) train_clouds.push_back(featured_cloud(s, q));
    for (const auto& s : val_set.samples) val_clouds.push_back(featured_cloud(s, q));

    TrainOptions opt;
    opt.epochs = cfg.epochs;
    opt.batch_size = cfg.batch_size;
    opt.subsample = cfg.subsample;
    opt.learning_rate = cfg.learning_rate;
    opt.seed = mix_seed(cfg.seed, 0x77000000ULL + static_cast<uint64_t>(std::lround(q)));
    opt.label_scale = label_scale_of(train_clouds);
    opt.log = log;

    uint64_t init_seed =
        mix_seed(cfg.seed, (cfg.variant == "evg" ? 0x200ULL : 0x100ULL) + std::lround(q));
    // bulk training runs in single precision; checkpoints stay double on disk
    auto mp = init_model<float>(default_model_config(cfg.variant, cfg.subsample), init_seed);
    TrainLog tl = train_model(mp, train_clouds, val_clouds, opt, &train_set.ids);

    nlohmann::json state{{"label_scale", opt.label_scale},
                         {"inflow_ml_s", q},
                         {"best_epoch", tl.best_epoch}};
    save_checkpoint(mp, checkpoint_path(cfg, q), state.dump());

    std::string qtag = drop_channel_name(q).substr(5);
    std::ofstream lf(cfg.run_dir + "/train_" + cfg.variant + "_" + qtag + ".csv");
    lf << "epoch,train_mse" << (tl.val_mse.empty() ? "" : ",val_mse") << "\n";
    lf.setf(std::ios::fixed);
    lf.precision(12);
    for (size_t e = 0; e < tl.train_mse.size(); ++e) {
      lf << e << "," << tl.train_mse[e];
      if (!tl.val_mse.empty()) lf << "," << tl.val_mse[e];
      lf << "\n";
    }
  }
}

/// Runs chunked inference over the test split and writes the report bundle.
inline std::vector<InflowReport> run_evaluate(const RunConfig& cfg) {
  validate(cfg);
  auto test_set = detail::load_split(cfg, "test");
  std::vector<InflowReport> reports;
  for (double q : cfg.inflows_ml_s) {
    std::string state_json;
    auto mp = load_checkpoint<float>(checkpoint_path(cfg, q), &state_json);
    auto state = nlohmann::json::parse(state_json);
    double label_scale = state.at("label_scale").get<double>();

    std::vector<std::vector<double>> predictions;
    for (size_t i = 0; i < test_set.samples.size(); ++i) {
      auto cloud = featured_cloud(test_set.samples[i], q);
      uint64_t seed = mix_seed(cfg.seed, 0x1E000000ULL + uint64_t(test_set.ids[i]) * 8 +
                                             static_cast<uint64_t>(std::lround(q)));
      predictions.push_back(
          infer_drops(mp, cloud, cfg.subsample, cfg.repetitions, seed, label_scale));
    }
    reports.push_back(evaluate_inflow(test_set.samples, test_set.ids, predictions, q,
                                      cfg.p_in_mmhg, cfg.variant));
  }
  write_report(reports, cfg.run_dir + "/report");
  return reports;
}

/// Regenerates the human-readable bundle from a stored metrics.json.
inline void run_report(const RunConfig& cfg) {
  auto metrics = load_json(cfg.run_dir + "/report/metrics.json");
  std::vector<InflowReport> reports;
  for (const auto& j : metrics) reports.push_back(inflow_report_from_json(j));
  write_report(reports, cfg.run_dir + "/report");
}

}  // namespace vffr
