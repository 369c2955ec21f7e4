#pragma once

#include <Eigen/Dense>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "shbmil/common.hpp"
#include "shbmil/feature_store.hpp"
#include "shbmil/mil_models.hpp"
#include "shbmil/shift_metrics.hpp"
#include "shbmil/tsne.hpp"

namespace shbmil {

// ---------------------------------------------------------------------------
// stratified k-fold
// ---------------------------------------------------------------------------

struct FoldSplit {
  int fold_id = 0;
  std::vector<std::string> train_ids;
  std::vector<std::string> test_ids;
};

/// Per class: members shuffled by the seed, then dealt round-robin to folds.
/// Returns the test index set of each fold, sorted ascending.
inline std::vector<std::vector<int>> stratified_kfold_indices(const std::vector<int>& labels,
                                                              int k, std::uint64_t seed) {
  if (k < 2) throw std::invalid_argument("stratified_kfold: need k >= 2");
  if (labels.empty()) throw std::invalid_argument("stratified_kfold: empty labels");
  int max_label = 0;
  for (int l : labels) {
    if (l < 0) throw std::invalid_argument("stratified_kfold: negative label");
    max_label = std::max(max_label, l);
  }
  std::vector<std::vector<int>> members(static_cast<std::size_t>(max_label + 1));
  for (std::size_t i = 0; i < labels.size(); ++i)
    members[static_cast<std::size_t>(labels[i])].push_back(static_cast<int>(i));

  Rng rng(seed);
  std::vector<std::vector<int>> folds(static_cast<std::size_t>(k));
  for (auto& cls : members) {
    if (cls.empty()) continue;
    if (static_cast<int>(cls.size()) < k)
      throw std::runtime_error("stratified_kfold: class with " + std::to_string(cls.size()) +
                               " members cannot fill " + std::to_string(k) + " folds");
    rng.shuffle(cls);
    for (std::size_t m = 0; m < cls.size(); ++m)
      folds[m % static_cast<std::size_t>(k)].push_back(cls[m]);
  }
  for (auto& f : folds) std::sort(f.begin(), f.end());
  return folds;
}

inline std::vector<FoldSplit> stratified_kfold(const Dataset& ds, int k, std::uint64_t seed) {
  std::vector<int> labels;
  labels.reserve(ds.bags.size());
  for (const auto& bag : ds.bags) labels.push_back(bag.class_label);
  const auto folds = stratified_kfold_indices(labels, k, seed);
  std::vector<FoldSplit> out;
  out.reserve(folds.size());
  for (int f = 0; f < k; ++f) {
    FoldSplit split;
    split.fold_id = f;
    std::vector<bool> in_test(ds.bags.size(), false);
    for (int idx : folds[static_cast<std::size_t>(f)]) {
      in_test[static_cast<std::size_t>(idx)] = true;
      split.test_ids.push_back(ds.bags[static_cast<std::size_t>(idx)].slide_id);
    }
    for (std::size_t i = 0; i < ds.bags.size(); ++i)
      if (!in_test[i]) split.train_ids.push_back(ds.bags[i].slide_id);
    out.push_back(std::move(split));
  }
  return out;
}

// ---------------------------------------------------------------------------
// statistics
// ---------------------------------------------------------------------------

/// Mean per-class recall over the classes present in y_true. Computed as an
/// exact integer ratio while the products stay below 2^53, which makes BACC
/// bitwise equal to plain accuracy on exactly class-balanced truth.
inline double balanced_accuracy(const std::vector<int>& y_true, const std::vector<int>& y_pred,
                                int num_classes) {
  if (y_true.empty()) throw std::invalid_argument("balanced_accuracy: empty input");
  if (y_true.size() != y_pred.size())
    throw std::invalid_argument("balanced_accuracy: length mismatch");
  std::vector<long long> count(static_cast<std::size_t>(num_classes), 0);
  std::vector<long long> correct(static_cast<std::size_t>(num_classes), 0);
  for (std::size_t i = 0; i < y_true.size(); ++i) {
    const int t = y_true[i];
    if (t < 0 || t >= num_classes)
      throw std::invalid_argument("balanced_accuracy: true label out of range");
    count[static_cast<std::size_t>(t)]++;
    if (y_pred[i] == t) correct[static_cast<std::size_t>(t)]++;
  }
  std::vector<int> present;
  for (int s = 0; s < num_classes; ++s)
    if (count[static_cast<std::size_t>(s)] > 0) present.push_back(s);

  // product of all present counts; exact while below 2^53
  constexpr double kExactLimit = 9007199254740992.0;  // 2^53
  double prod = 1.0;
  bool exact = true;
  for (int s : present) {
    prod *= static_cast<double>(count[static_cast<std::size_t>(s)]);
    if (prod * static_cast<double>(present.size()) >= kExactLimit) {
      exact = false;
      break;
    }
  }
  if (exact) {
    double numerator = 0.0;
    for (int s : present)
      numerator += static_cast<double>(correct[static_cast<std::size_t>(s)]) *
                   (prod / static_cast<double>(count[static_cast<std::size_t>(s)]));
    return numerator / (static_cast<double>(present.size()) * prod);
  }
  double acc = 0.0;
  for (int s : present)
    acc += static_cast<double>(correct[static_cast<std::size_t>(s)]) /
           static_cast<double>(count[static_cast<std::size_t>(s)]);
  return acc / static_cast<double>(present.size());
}

inline double pearson(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2)
    throw std::invalid_argument("pearson: need two equal-length samples of size >= 2");
  const double n = static_cast<double>(x.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - mx;
    const double dy = y[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0) throw std::runtime_error("pearson: zero variance");
  return sxy / std::sqrt(sxx * syy);
}

/// Average ranks (ties share the mean rank).
inline std::vector<double> average_ranks(const std::vector<double>& x) {
  std::vector<std::size_t> order(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> ranks(x.size(), 0.0);
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && x[order[j + 1]] == x[order[i]]) ++j;
    const double mean_rank = 0.5 * (static_cast<double>(i) + static_cast<double>(j)) + 1.0;
    for (std::size_t m = i; m <= j; ++m) ranks[order[m]] = mean_rank;
    i = j + 1;
  }
  return ranks;
}

inline double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  return pearson(average_ranks(x), average_ranks(y));
}

struct LinFit {
  double slope = 0.0;
  double intercept = 0.0;
  double r2 = 0.0;
};

/// Ordinary least squares y ~ slope * x + intercept with r2 = 1 - SSres/SStot.
inline LinFit linfit_r2(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 3)
    throw std::invalid_argument("linfit_r2: need two equal-length samples of size >= 3");
  const double n = static_cast<double>(x.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0.0) throw std::runtime_error("linfit_r2: degenerate x");
  if (syy == 0.0) throw std::runtime_error("linfit_r2: zero variance in y");
  LinFit fit;
  fit.slope = sxy / sxx;
  fit.intercept = my - fit.slope * mx;
  double ss_res = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double resid = y[i] - (fit.slope * x[i] + fit.intercept);
    ss_res += resid * resid;
  }
  fit.r2 = 1.0 - ss_res / syy;
  return fit;
}

// ---------------------------------------------------------------------------
// reference results fixture: per-model BACC (%) and center-shift metrics
// ---------------------------------------------------------------------------

struct ModelStatsRow {
  std::string name;
  double bacc_abmil = 0.0;       // percent
  double bacc_simpleshot = 0.0;  // percent
  double fm_si = 0.0;
  double ri = 0.0;
};

/// Published per-encoder results used as a cross-model statistics fixture.
inline const std::vector<ModelStatsRow>& reference_model_rows() {
  static const std::vector<ModelStatsRow> rows = {
      {"PLIP", 67.53, 59.86, 0.6857, 0.5790},
      {"GPFM", 80.88, 62.13, 0.6210, 0.5763},
      {"UNI", 80.77, 68.66, 0.5973, 0.6108},
      {"MUSK", 81.72, 71.92, 0.3067, 0.6945},
      {"VIRCHOW-2", 86.81, 77.83, 0.3011, 0.7848},
      {"CHIEF", 80.77, 62.50, 0.2798, 0.6200},
      {"CONCH", 83.00, 72.40, 0.0966, 0.8040},
      {"KEEP", 81.77, 72.91, 0.0283, 0.8382},
  };
  return rows;
}

struct PaperStatsSummary {
  double mean_gap_pp = 0.0;  // mean(bacc_abmil - bacc_simpleshot), percentage points
  double pearson_fmsi_ri = 0.0;
  double spearman_fmsi_ri = 0.0;
  double r2_simpleshot = 0.0;  // BACC_simpleshot ~ FM-SI
  double r2_abmil = 0.0;       // BACC_abmil ~ FM-SI
  double top_margin_simpleshot = 0.0;  // best minus second-best, pp
  double top_margin_abmil = 0.0;
  std::string top_model_simpleshot;
  std::string top_model_abmil;
  std::string best_fmsi_model;   // lowest FM-SI
  std::string worst_fmsi_model;  // highest FM-SI
};

/// Cross-model statistics over a row set (classifier gap, FM-SI/RI
/// correlation, BACC ~ FM-SI regressions, top-model margins).
inline PaperStatsSummary paper_stats_check(const std::vector<ModelStatsRow>& rows) {
  if (rows.size() < 3) throw std::invalid_argument("paper_stats_check: need at least 3 rows");
  PaperStatsSummary s;
  std::vector<double> fmsi, ri, abmil, simpleshot;
  for (const auto& r : rows) {
    fmsi.push_back(r.fm_si);
    ri.push_back(r.ri);
    abmil.push_back(r.bacc_abmil);
    simpleshot.push_back(r.bacc_simpleshot);
    s.mean_gap_pp += r.bacc_abmil - r.bacc_simpleshot;
  }
  s.mean_gap_pp /= static_cast<double>(rows.size());
  s.pearson_fmsi_ri = pearson(fmsi, ri);
  s.spearman_fmsi_ri = spearman(fmsi, ri);
  s.r2_simpleshot = linfit_r2(fmsi, simpleshot).r2;
  s.r2_abmil = linfit_r2(fmsi, abmil).r2;

  const auto top_margin = [&](const std::vector<double>& bacc, double& margin, std::string& name) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < bacc.size(); ++i)
      if (bacc[i] > bacc[best]) best = i;
    double second = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < bacc.size(); ++i)
      if (i != best) second = std::max(second, bacc[i]);
    margin = bacc[best] - second;
    name = rows[best].name;
  };
  top_margin(simpleshot, s.top_margin_simpleshot, s.top_model_simpleshot);
  top_margin(abmil, s.top_margin_abmil, s.top_model_abmil);

  std::size_t lo = 0, hi = 0;
  for (std::size_t i = 1; i < fmsi.size(); ++i) {
    if (fmsi[i] < fmsi[lo]) lo = i;
    if (fmsi[i] > fmsi[hi]) hi = i;
  }
  s.best_fmsi_model = rows[lo].name;
  s.worst_fmsi_model = rows[hi].name;
  return s;
}

// ---------------------------------------------------------------------------
// benchmark runner
// ---------------------------------------------------------------------------

struct BenchConfig {
  TsneConfig tsne;
  TrainConfig train;
  std::vector<std::uint64_t> fmsi_seeds{42};
  int ri_k = 25;
  int folds = 5;
  std::uint64_t cv_seed = 42;
  int threads = 1;
  bool simpleshot_center_l2 = false;
};

struct ClassifierCv {
  std::vector<double> fold_bacc;  // raw fractions
  double mean = 0.0;
  double stddev = 0.0;  // population std over folds
};

struct BenchReport {
  std::string dataset;
  std::string config_hash;
  std::vector<std::uint64_t> fmsi_seeds;
  std::uint64_t cv_seed = 0;
  std::uint64_t train_seed = 0;
  double fm_si = 0.0;
  double ri = 0.0;
  int ri_k = 25;
  ClassifierCv abmil;
  ClassifierCv simpleshot;
  // Cross-model statistics are undefined for a single-dataset run; the
  // `report` aggregation fills them over several per-model reports.
  std::optional<double> pearson_fmsi_ri;
  std::optional<double> spearman_fmsi_ri;
  std::optional<double> r2_abmil;
  std::optional<double> r2_simpleshot;

  Embedding2D embedding;                 // last FM-SI seed
  PooledSlides pooled;                   // slide embeddings used for metrics
  std::vector<AbmilParams> fold_params;  // one checkpoint per fold
};

namespace detail {

inline void summarize_folds(ClassifierCv& cv) {
  double acc = 0.0;
  for (double v : cv.fold_bacc) acc += v;
  cv.mean = acc / static_cast<double>(cv.fold_bacc.size());
  double var = 0.0;
  for (double v : cv.fold_bacc) var += (v - cv.mean) * (v - cv.mean);
  cv.stddev = std::sqrt(var / static_cast<double>(cv.fold_bacc.size()));
}

inline std::map<std::string, std::string> bench_config_kv(const BenchConfig& cfg) {
  auto kv = tsne_config_kv(cfg.tsne);
  kv["fmsi.seeds"] = join_seeds(cfg.fmsi_seeds);
  kv["ri.k"] = std::to_string(cfg.ri_k);
  kv["cv.folds"] = std::to_string(cfg.folds);
  kv["cv.seed"] = std::to_string(cfg.cv_seed);
  kv["train.epochs"] = std::to_string(cfg.train.epochs);
  kv["train.peak_lr"] = format_double(cfg.train.peak_lr);
  kv["train.weight_decay"] = format_double(cfg.train.weight_decay);
  kv["train.adam_beta1"] = format_double(cfg.train.adam_beta1);
  kv["train.adam_beta2"] = format_double(cfg.train.adam_beta2);
  kv["train.adam_eps"] = format_double(cfg.train.adam_eps);
  kv["train.seed"] = std::to_string(cfg.train.seed);
  kv["simpleshot.center_l2"] = cfg.simpleshot_center_l2 ? "1" : "0";
  return kv;
}

}  // namespace detail

/// Full benchmark on one dataset: FM-SI and RI on the pooled slides, then
/// k-fold CV for ABMIL and MI-SimpleShot. Folds are independent and may run
/// in parallel; assembly is by fold index, so results do not depend on the
/// thread count.
inline BenchReport run_benchmark(const Dataset& ds, const BenchConfig& cfg,
                                 const std::string& dataset_name) {
  if (ds.bags.size() < static_cast<std::size_t>(cfg.folds))
    throw std::invalid_argument("run_benchmark: fewer slides than folds");
  BenchReport report;
  report.dataset = dataset_name;
  report.config_hash = config_hash_of(detail::bench_config_kv(cfg));
  report.fmsi_seeds = cfg.fmsi_seeds;
  report.cv_seed = cfg.cv_seed;
  report.train_seed = cfg.train.seed;
  report.ri_k = cfg.ri_k;

  report.pooled = mean_pool_all(ds);
  log_info("bench: computing FM-SI over " + std::to_string(cfg.fmsi_seeds.size()) + " seed(s)");
  FmsiResult fmsi = fm_si_pooled(report.pooled, cfg.tsne, cfg.fmsi_seeds);
  report.fm_si = fmsi.score;
  report.embedding = std::move(fmsi.embedding);
  report.ri = robustness_index(report.pooled.z, report.pooled.labels, report.pooled.centers,
                               cfg.ri_k).ri;
  log_info("bench: FM-SI=" + format_double(report.fm_si) + ", RI=" + format_double(report.ri) +
           "; starting " + std::to_string(cfg.folds) + "-fold CV");

  const auto folds = stratified_kfold_indices(report.pooled.labels, cfg.folds, cfg.cv_seed);
  report.abmil.fold_bacc.resize(folds.size());
  report.simpleshot.fold_bacc.resize(folds.size());
  report.fold_params.resize(folds.size());

  parallel_for(folds.size(), cfg.threads, [&](std::size_t f) {
    const auto& test_idx = folds[f];
    std::vector<bool> in_test(ds.bags.size(), false);
    for (int idx : test_idx) in_test[static_cast<std::size_t>(idx)] = true;

    std::vector<FeatureBag> train_bags;
    std::vector<SlideEmbedding> train_embs;
    train_bags.reserve(ds.bags.size() - test_idx.size());
    for (std::size_t i = 0; i < ds.bags.size(); ++i) {
      if (in_test[i]) continue;
      train_bags.push_back(ds.bags[i]);
      SlideEmbedding emb;
      emb.slide_id = report.pooled.slide_ids[i];
      emb.class_label = report.pooled.labels[i];
      emb.center_label = report.pooled.centers[i];
      emb.z = report.pooled.z.row(static_cast<Eigen::Index>(i)).transpose();
      train_embs.push_back(std::move(emb));
    }

    TrainConfig fold_cfg = cfg.train;
    fold_cfg.seed = mix_seed(cfg.train.seed, static_cast<std::uint64_t>(f));
    const AbmilParams params = train_abmil(train_bags, ds.num_classes, fold_cfg);

    Eigen::VectorXd train_mean;
    std::vector<SlideEmbedding> proto_embs = train_embs;
    if (cfg.simpleshot_center_l2) {
      train_mean = embedding_mean(train_embs);
      for (auto& e : proto_embs) e.z = center_l2(e.z, train_mean);
    }
    const Prototypes protos = build_prototypes(proto_embs, ds.num_classes);

    std::vector<int> y_true, y_abmil, y_ss;
    for (int idx : test_idx) {
      const auto i = static_cast<std::size_t>(idx);
      y_true.push_back(report.pooled.labels[i]);
      y_abmil.push_back(predict_abmil(params, ds.bags[i].features).first);
      Eigen::VectorXd q = report.pooled.z.row(idx).transpose();
      if (cfg.simpleshot_center_l2) q = center_l2(q, train_mean);
      y_ss.push_back(simpleshot_predict(protos, q).first);
    }
    report.abmil.fold_bacc[f] = balanced_accuracy(y_true, y_abmil, ds.num_classes);
    report.simpleshot.fold_bacc[f] = balanced_accuracy(y_true, y_ss, ds.num_classes);
    report.fold_params[f] = params;
    log_debug("bench: fold " + std::to_string(f) + " abmil=" +
              format_double(report.abmil.fold_bacc[f]) + " simpleshot=" +
              format_double(report.simpleshot.fold_bacc[f]));
  });

  detail::summarize_folds(report.abmil);
  detail::summarize_folds(report.simpleshot);
  return report;
}

// ---------------------------------------------------------------------------
// report serialization
// ---------------------------------------------------------------------------

using ordered_json = nlohmann::ordered_json;

/// Stable key order: dataset, config_hash, seeds, fm_si, ri, classifiers,
/// stats.
inline ordered_json report_to_json(const BenchReport& report) {
  ordered_json j;
  j["dataset"] = report.dataset;
  j["config_hash"] = report.config_hash;
  j["seeds"] = ordered_json{{"fmsi", report.fmsi_seeds},
                            {"cv", report.cv_seed},
                            {"train", report.train_seed}};
  j["fm_si"] = report.fm_si;
  j["ri"] = report.ri;
  const auto classifier_json = [](const ClassifierCv& cv) {
    return ordered_json{{"folds", cv.fold_bacc}, {"mean", cv.mean}, {"std", cv.stddev}};
  };
  j["classifiers"] =
      ordered_json{{"abmil", classifier_json(report.abmil)},
                   {"simpleshot", classifier_json(report.simpleshot)}};
  const auto opt = [](const std::optional<double>& v) {
    return v ? ordered_json(*v) : ordered_json(nullptr);
  };
  j["stats"] = ordered_json{{"pearson_fmsi_ri", opt(report.pearson_fmsi_ri)},
                            {"spearman_fmsi_ri", opt(report.spearman_fmsi_ri)},
                            {"r2_abmil", opt(report.r2_abmil)},
                            {"r2_simpleshot", opt(report.r2_simpleshot)}};
  return j;
}

/// Plot CSV `model,fm_si,bacc,classifier`, BACC in percent.
inline void write_plot_csv(const std::vector<ModelStatsRow>& rows,
                           const std::filesystem::path& path) {
  std::string csv = "model,fm_si,bacc,classifier\n";
  for (const auto& r : rows) {
    csv += r.name + ',' + format_double(r.fm_si) + ',' + format_double(r.bacc_abmil) + ",abmil\n";
    csv += r.name + ',' + format_double(r.fm_si) + ',' + format_double(r.bacc_simpleshot) +
           ",simpleshot\n";
  }
  write_file(path, csv);
}

}  // namespace shbmil
