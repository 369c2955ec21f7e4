#pragma once

#include <Eigen/Dense>
#include <set>
#include <string>
#include <vector>

#include "shbmil/common.hpp"
#include "shbmil/feature_store.hpp"
#include "shbmil/tsne.hpp"

namespace shbmil {

// ---------------------------------------------------------------------------
// silhouette coefficient
// ---------------------------------------------------------------------------

namespace detail {

/// Euclidean distance with an explicit coordinate loop; oracle-compatible
/// arithmetic order.
inline double euclid(const Eigen::MatrixXd& pts, Eigen::Index a, Eigen::Index b) {
  double acc = 0.0;
  for (Eigen::Index j = 0; j < pts.cols(); ++j) {
    const double diff = pts(a, j) - pts(b, j);
    acc += diff * diff;
  }
  return std::sqrt(acc);
}

}  // namespace detail

/// Per-point silhouette s(i) = (b - a) / max(a, b): a is the mean distance to
/// the rest of i's cluster, b the smallest mean distance to another cluster.
/// Singleton clusters and the a = b = 0 degenerate case score 0.
inline std::vector<double> silhouette_scores(const Eigen::MatrixXd& points,
                                             const std::vector<int>& labels) {
  const Eigen::Index n = points.rows();
  if (n < 2) throw std::invalid_argument("silhouette: need n >= 2 points");
  if (static_cast<Eigen::Index>(labels.size()) != n)
    throw std::invalid_argument("silhouette: labels size mismatch");
  int max_label = 0;
  for (int l : labels) {
    if (l < 0) throw std::invalid_argument("silhouette: negative label");
    max_label = std::max(max_label, l);
  }
  const int k = max_label + 1;
  std::vector<long> counts(static_cast<std::size_t>(k), 0);
  for (int l : labels) counts[static_cast<std::size_t>(l)]++;
  int distinct = 0;
  for (long c : counts)
    if (c > 0) distinct++;
  if (distinct < 2) throw std::runtime_error("silhouette undefined: fewer than 2 clusters");

  std::vector<double> scores(static_cast<std::size_t>(n), 0.0);
  std::vector<double> cluster_sum(static_cast<std::size_t>(k));
  for (Eigen::Index i = 0; i < n; ++i) {
    std::fill(cluster_sum.begin(), cluster_sum.end(), 0.0);
    for (Eigen::Index j = 0; j < n; ++j) {
      if (j == i) continue;
      cluster_sum[static_cast<std::size_t>(labels[static_cast<std::size_t>(j)])] +=
          detail::euclid(points, i, j);
    }
    const int li = labels[static_cast<std::size_t>(i)];
    const long own = counts[static_cast<std::size_t>(li)];
    if (own <= 1) {
      scores[static_cast<std::size_t>(i)] = 0.0;  // singleton convention
      continue;
    }
    const double a = cluster_sum[static_cast<std::size_t>(li)] / static_cast<double>(own - 1);
    double b = std::numeric_limits<double>::infinity();
    for (int c = 0; c < k; ++c) {
      if (c == li || counts[static_cast<std::size_t>(c)] == 0) continue;
      b = std::min(b, cluster_sum[static_cast<std::size_t>(c)] / static_cast<double>(counts[static_cast<std::size_t>(c)]));
    }
    const double denom = std::max(a, b);
    scores[static_cast<std::size_t>(i)] = denom > 0.0 ? (b - a) / denom : 0.0;
  }
  return scores;
}

inline double silhouette_mean(const Eigen::MatrixXd& points, const std::vector<int>& labels) {
  const std::vector<double> s = silhouette_scores(points, labels);
  double acc = 0.0;
  for (double v : s) acc += v;
  return acc / static_cast<double>(s.size());
}

// ---------------------------------------------------------------------------
// FM-SI: silhouette of the center labels on the 2-D embedding of mean-pooled
// slide features
// ---------------------------------------------------------------------------

struct FmsiResult {
  double score = 0.0;                  // mean of per_seed_scores
  std::vector<double> per_seed_scores;
  Embedding2D embedding;               // of the last seed
  std::string config_hash;
};

namespace detail {

inline std::map<std::string, std::string> tsne_config_kv(const TsneConfig& cfg) {
  return {
      {"tsne.perplexity", format_double(cfg.perplexity)},
      {"tsne.n_iter", std::to_string(cfg.n_iter)},
      {"tsne.early_exaggeration_factor", format_double(cfg.early_exaggeration_factor)},
      {"tsne.early_exaggeration_iters", std::to_string(cfg.early_exaggeration_iters)},
      {"tsne.learning_rate", format_double(cfg.learning_rate)},
      {"tsne.initial_momentum", format_double(cfg.initial_momentum)},
      {"tsne.final_momentum", format_double(cfg.final_momentum)},
      {"tsne.momentum_switch_iter", std::to_string(cfg.momentum_switch_iter)},
      {"tsne.init_std", format_double(cfg.init_std)},
  };
}

inline std::string join_seeds(const std::vector<std::uint64_t>& seeds) {
  std::string s;
  for (std::size_t i = 0; i < seeds.size(); ++i) {
    if (i) s += ',';
    s += std::to_string(seeds[i]);
  }
  return s;
}

}  // namespace detail

/// FM-SI over already pooled slide embeddings.
inline FmsiResult fm_si_pooled(const PooledSlides& pooled, const TsneConfig& tsne_cfg,
                               const std::vector<std::uint64_t>& seeds) {
  if (seeds.empty()) throw std::invalid_argument("fm_si: need at least one seed");
  if (pooled.z.rows() < 4) throw std::invalid_argument("fm_si: need at least 4 slides");
  std::set<int> centers(pooled.centers.begin(), pooled.centers.end());
  if (centers.size() < 2) throw std::runtime_error("fm_si: single-center dataset");

  FmsiResult result;
  for (std::size_t i = 0; i < seeds.size(); ++i) {
    TsneConfig cfg = tsne_cfg;
    cfg.seed = seeds[i];
    Embedding2D emb = tsne_embed(pooled.z, cfg);
    result.per_seed_scores.push_back(silhouette_mean(emb.points, pooled.centers));
    if (i + 1 == seeds.size()) result.embedding = std::move(emb);
  }
  double acc = 0.0;
  for (double v : result.per_seed_scores) acc += v;
  result.score = acc / static_cast<double>(result.per_seed_scores.size());

  auto kv = detail::tsne_config_kv(tsne_cfg);
  kv["fmsi.seeds"] = detail::join_seeds(seeds);
  result.config_hash = config_hash_of(kv);
  return result;
}

inline FmsiResult fm_si(const Dataset& ds, const TsneConfig& tsne_cfg,
                        const std::vector<std::uint64_t>& seeds = {42}) {
  return fm_si_pooled(mean_pool_all(ds), tsne_cfg, seeds);
}

// ---------------------------------------------------------------------------
// exact k-NN and the Robustness Index
// ---------------------------------------------------------------------------

/// Indices of the k nearest points per row (self excluded), Euclidean
/// distance, ties broken by the lower index.
inline std::vector<std::vector<int>> knn_indices(const Eigen::MatrixXd& Z, int k) {
  const Eigen::Index n = Z.rows();
  if (k < 1) throw std::invalid_argument("knn_indices: k must be >= 1");
  if (k >= n) throw std::invalid_argument("knn_indices: k must be < n");
  std::vector<std::vector<int>> out(static_cast<std::size_t>(n));
  std::vector<std::pair<double, int>> cand;
  cand.reserve(static_cast<std::size_t>(n - 1));
  for (Eigen::Index i = 0; i < n; ++i) {
    cand.clear();
    for (Eigen::Index j = 0; j < n; ++j) {
      if (j == i) continue;
      double d2 = 0.0;
      for (Eigen::Index c = 0; c < Z.cols(); ++c) {
        const double diff = Z(i, c) - Z(j, c);
        d2 += diff * diff;
      }
      cand.emplace_back(d2, static_cast<int>(j));
    }
    std::sort(cand.begin(), cand.end());
    auto& nbrs = out[static_cast<std::size_t>(i)];
    nbrs.reserve(static_cast<std::size_t>(k));
    for (int m = 0; m < k; ++m) nbrs.push_back(cand[static_cast<std::size_t>(m)].second);
  }
  return out;
}

/// RI_k = (# same-class neighbors) / (# same-center neighbors) over the k-NN
/// of every point, in the original embedding space.
struct RiResult {
  double ri = 0.0;
  int k = 0;
  long long numerator = 0;
  long long denominator = 0;
};

inline RiResult robustness_index(const Eigen::MatrixXd& Z, const std::vector<int>& class_labels,
                                 const std::vector<int>& center_labels, int k = 25) {
  const Eigen::Index n = Z.rows();
  if (static_cast<Eigen::Index>(class_labels.size()) != n ||
      static_cast<Eigen::Index>(center_labels.size()) != n)
    throw std::invalid_argument("robustness_index: label size mismatch");
  const auto nbrs = knn_indices(Z, k);
  RiResult res;
  res.k = k;
  for (Eigen::Index i = 0; i < n; ++i) {
    for (int j : nbrs[static_cast<std::size_t>(i)]) {
      if (class_labels[static_cast<std::size_t>(j)] == class_labels[static_cast<std::size_t>(i)])
        res.numerator++;
      if (center_labels[static_cast<std::size_t>(j)] == center_labels[static_cast<std::size_t>(i)])
        res.denominator++;
    }
  }
  if (res.denominator == 0) throw std::runtime_error("robustness_index: no same-center neighbors");
  res.ri = static_cast<double>(res.numerator) / static_cast<double>(res.denominator);
  return res;
}

// ---------------------------------------------------------------------------
// exports
// ---------------------------------------------------------------------------

/// CSV `slide_id,x,y,center,label` of a 2-D embedding.
inline void write_embedding_csv(const PooledSlides& pooled, const Embedding2D& emb,
                                const std::filesystem::path& path) {
  if (emb.points.rows() != static_cast<Eigen::Index>(pooled.slide_ids.size()))
    throw std::invalid_argument("write_embedding_csv: size mismatch");
  std::string csv = "slide_id,x,y,center,label\n";
  for (Eigen::Index i = 0; i < emb.points.rows(); ++i) {
    const auto idx = static_cast<std::size_t>(i);
    csv += pooled.slide_ids[idx];
    csv += ',';
    csv += format_double(emb.points(i, 0));
    csv += ',';
    csv += format_double(emb.points(i, 1));
    csv += ',';
    csv += std::to_string(pooled.centers[idx]);
    csv += ',';
    csv += std::to_string(pooled.labels[idx]);
    csv += '\n';
  }
  write_file(path, csv);
}

}  // namespace shbmil
