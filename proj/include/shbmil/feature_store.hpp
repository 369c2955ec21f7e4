#pragma once

#include <Eigen/Dense>
#include <filesystem>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "shbmil/common.hpp"

namespace shbmil {

using RowMatrixXf = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// ---------------------------------------------------------------------------
// data model
// ---------------------------------------------------------------------------

/// One slide: an N x d matrix of patch features plus its labels. Features are
/// stored as float32 (the on-disk payload type); all downstream math runs in
/// double.
struct FeatureBag {
  std::string slide_id;
  int class_label = 0;
  int center_label = 0;
  RowMatrixXf features;  // N x d, row-major
  std::string extractor_id;

  Eigen::Index n_patches() const { return features.rows(); }
  Eigen::Index dim() const { return features.cols(); }
};

inline void validate_bag(const FeatureBag& bag) {
  if (bag.features.rows() < 1 || bag.features.cols() < 1)
    throw std::invalid_argument("bag '" + bag.slide_id + "': needs at least 1 patch and 1 feature dim");
  if (!bag.features.allFinite())
    throw std::invalid_argument("bag '" + bag.slide_id + "': non-finite feature values");
  if (bag.class_label < 0 || bag.center_label < 0)
    throw std::invalid_argument("bag '" + bag.slide_id + "': negative label");
}

struct Dataset {
  std::vector<FeatureBag> bags;
  int num_classes = 0;   // S
  int num_centers = 0;   // C
  Eigen::Index dim = 0;  // d
};

/// Mean-pooled d-vector for one slide.
struct SlideEmbedding {
  std::string slide_id;
  Eigen::VectorXd z;
  int class_label = 0;
  int center_label = 0;
};

/// Slide embeddings of a whole dataset stacked into a matrix, row i matching
/// bag i of the source dataset.
struct PooledSlides {
  Eigen::MatrixXd z;  // n x d
  std::vector<std::string> slide_ids;
  std::vector<int> labels;
  std::vector<int> centers;
};

// ---------------------------------------------------------------------------
// bag binary format
//
// offset 0..7   magic "SHBMIL01" (ASCII)
// offset 8..11  u32 LE  N
// offset 12..15 u32 LE  d
// offset 16     u8      format version (1)
// offset 17..   N*d float32 LE, row-major
// ---------------------------------------------------------------------------

inline constexpr std::string_view kBagMagic = "SHBMIL01";
inline constexpr unsigned char kBagVersion = 1;
inline constexpr std::size_t kBagHeaderSize = 17;

inline void write_bag(const FeatureBag& bag, const std::filesystem::path& path) {
  validate_bag(bag);
  const auto n = static_cast<std::uint32_t>(bag.features.rows());
  const auto d = static_cast<std::uint32_t>(bag.features.cols());
  std::string bytes;
  bytes.reserve(kBagHeaderSize + static_cast<std::size_t>(n) * d * 4);
  bytes.append(kBagMagic);
  put_u32_le(bytes, n);
  put_u32_le(bytes, d);
  bytes.push_back(static_cast<char>(kBagVersion));
  for (Eigen::Index i = 0; i < bag.features.rows(); ++i)
    for (Eigen::Index j = 0; j < bag.features.cols(); ++j)
      put_f32_le(bytes, bag.features(i, j));
  write_file(path, bytes);
}

/// Reads the stored N, d and payload. Labels and slide id are populated from
/// the manifest by the caller.
inline FeatureBag read_bag(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  const std::size_t magic_prefix = std::min<std::size_t>(bytes.size(), kBagMagic.size());
  if (std::string_view(bytes.data(), magic_prefix) != kBagMagic.substr(0, magic_prefix))
    throw std::runtime_error("bad magic in " + path.string());
  if (bytes.size() < kBagHeaderSize)
    throw std::runtime_error("truncated header in " + path.string());
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::uint32_t n = get_u32_le(p + 8);
  const std::uint32_t d = get_u32_le(p + 12);
  const unsigned char version = p[16];
  if (version != kBagVersion)
    throw std::runtime_error("unsupported bag version " + std::to_string(version) + " in " + path.string());
  if (n < 1 || d < 1)
    throw std::runtime_error("bag dimensions must be positive in " + path.string());
  const std::uint64_t cells = static_cast<std::uint64_t>(n) * d;
  if (cells > (std::numeric_limits<std::size_t>::max() - kBagHeaderSize) / 4)
    throw std::runtime_error("N*d overflow in " + path.string());
  const std::size_t expected = kBagHeaderSize + static_cast<std::size_t>(cells) * 4;
  if (bytes.size() < expected)
    throw std::runtime_error("truncated payload in " + path.string());
  if (bytes.size() > expected)
    throw std::runtime_error("trailing bytes after payload in " + path.string());
  FeatureBag bag;
  bag.features.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  const unsigned char* cursor = p + kBagHeaderSize;
  for (Eigen::Index i = 0; i < bag.features.rows(); ++i)
    for (Eigen::Index j = 0; j < bag.features.cols(); ++j, cursor += 4)
      bag.features(i, j) = get_f32_le(cursor);
  if (!bag.features.allFinite())
    throw std::runtime_error("non-finite feature values in " + path.string());
  return bag;
}

// ---------------------------------------------------------------------------
// manifest CSV: header `slide_id,label,center,path,n_patches,dim`
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      fields.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  fields.push_back(cur);
  return fields;
}

inline long parse_long(const std::string& s, const std::string& what) {
  long v = 0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size())
    throw std::runtime_error("manifest: cannot parse " + what + " from '" + s + "'");
  return v;
}

}  // namespace detail

inline constexpr std::string_view kManifestHeader = "slide_id,label,center,path,n_patches,dim";

/// Loads a manifest and every bag it references, preserving row order. S and C
/// are inferred as max label + 1 unless overridden. Bag loading may run on
/// several threads; the output order always matches the manifest.
inline Dataset load_manifest(const std::filesystem::path& manifest_path,
                             std::optional<int> num_classes_override = std::nullopt,
                             std::optional<int> num_centers_override = std::nullopt,
                             int threads = 1) {
  const std::string text = read_file(manifest_path);
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line))
    throw std::runtime_error("empty manifest: " + manifest_path.string());
  {
    const auto header = detail::split_csv_line(line);
    const auto expected = detail::split_csv_line(std::string(kManifestHeader));
    if (header.size() != expected.size())
      throw std::runtime_error("manifest: expected header '" + std::string(kManifestHeader) + "'");
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] != expected[i])
        throw std::runtime_error("manifest: unknown column '" + header[i] + "'");
  }

  struct Row {
    std::string slide_id;
    int label;
    int center;
    std::filesystem::path bag_path;
    long n_patches;
    long dim;
  };
  std::vector<Row> rows;
  const std::filesystem::path base = manifest_path.parent_path();
  std::set<std::string> seen_ids;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = detail::split_csv_line(line);
    if (f.size() != 6)
      throw std::runtime_error("manifest: row with " + std::to_string(f.size()) + " fields: " + line);
    Row r;
    r.slide_id = f[0];
    r.label = static_cast<int>(detail::parse_long(f[1], "label"));
    r.center = static_cast<int>(detail::parse_long(f[2], "center"));
    std::filesystem::path p(f[3]);
    r.bag_path = p.is_absolute() ? p : base / p;
    r.n_patches = detail::parse_long(f[4], "n_patches");
    r.dim = detail::parse_long(f[5], "dim");
    if (r.label < 0 || r.center < 0)
      throw std::runtime_error("manifest: negative label for slide '" + r.slide_id + "'");
    if (!seen_ids.insert(r.slide_id).second)
      throw std::runtime_error("manifest: duplicate slide_id '" + r.slide_id + "'");
    rows.push_back(std::move(r));
  }
  if (rows.empty()) throw std::runtime_error("empty manifest: " + manifest_path.string());

  Dataset ds;
  ds.bags.resize(rows.size());
  parallel_for(rows.size(), threads, [&](std::size_t i) {
    const Row& r = rows[i];
    FeatureBag bag = read_bag(r.bag_path);
    if (bag.features.rows() != r.n_patches || bag.features.cols() != r.dim)
      throw std::runtime_error("manifest: declared shape " + std::to_string(r.n_patches) + "x" +
                               std::to_string(r.dim) + " does not match bag file for slide '" +
                               r.slide_id + "'");
    bag.slide_id = r.slide_id;
    bag.class_label = r.label;
    bag.center_label = r.center;
    ds.bags[i] = std::move(bag);
  });

  ds.dim = ds.bags.front().dim();
  int max_label = 0, max_center = 0;
  for (const auto& bag : ds.bags) {
    if (bag.dim() != ds.dim)
      throw std::runtime_error("manifest: dim mismatch across bags (slide '" + bag.slide_id + "')");
    max_label = std::max(max_label, bag.class_label);
    max_center = std::max(max_center, bag.center_label);
  }
  ds.num_classes = num_classes_override.value_or(max_label + 1);
  ds.num_centers = num_centers_override.value_or(max_center + 1);
  if (max_label >= ds.num_classes || max_center >= ds.num_centers)
    throw std::runtime_error("manifest: label outside [0, S) or center outside [0, C)");
  log_info("loaded " + std::to_string(ds.bags.size()) + " bags (S=" +
           std::to_string(ds.num_classes) + ", C=" + std::to_string(ds.num_centers) +
           ", d=" + std::to_string(ds.dim) + ") from " + manifest_path.string());
  return ds;
}

/// Writes every bag of `ds` as `<slide_id>.bag` under `dir` plus a manifest
/// CSV referencing them with relative paths. Returns the manifest path.
inline std::filesystem::path write_dataset(const Dataset& ds, const std::filesystem::path& dir,
                                           const std::string& manifest_name = "manifest.csv") {
  std::filesystem::create_directories(dir);
  std::string csv(kManifestHeader);
  csv += '\n';
  for (const auto& bag : ds.bags) {
    const std::string file = bag.slide_id + ".bag";
    write_bag(bag, dir / file);
    csv += bag.slide_id;
    csv += ',';
    csv += std::to_string(bag.class_label);
    csv += ',';
    csv += std::to_string(bag.center_label);
    csv += ',';
    csv += file;
    csv += ',';
    csv += std::to_string(bag.n_patches());
    csv += ',';
    csv += std::to_string(bag.dim());
    csv += '\n';
  }
  const std::filesystem::path manifest = dir / manifest_name;
  write_file(manifest, csv);
  return manifest;
}

// ---------------------------------------------------------------------------
// mean pooling
// ---------------------------------------------------------------------------

/// Column means of the bag's patch features, accumulated in double.
inline SlideEmbedding mean_pool(const FeatureBag& bag) {
  validate_bag(bag);
  const Eigen::Index n = bag.features.rows();
  const Eigen::Index d = bag.features.cols();
  SlideEmbedding emb;
  emb.slide_id = bag.slide_id;
  emb.class_label = bag.class_label;
  emb.center_label = bag.center_label;
  emb.z.resize(d);
  for (Eigen::Index j = 0; j < d; ++j) {
    double acc = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) acc += static_cast<double>(bag.features(i, j));
    emb.z[j] = acc / static_cast<double>(n);
  }
  return emb;
}

inline PooledSlides mean_pool_all(const Dataset& ds) {
  PooledSlides pooled;
  const auto n = static_cast<Eigen::Index>(ds.bags.size());
  pooled.z.resize(n, ds.dim);
  pooled.slide_ids.reserve(ds.bags.size());
  pooled.labels.reserve(ds.bags.size());
  pooled.centers.reserve(ds.bags.size());
  for (Eigen::Index i = 0; i < n; ++i) {
    const SlideEmbedding emb = mean_pool(ds.bags[static_cast<std::size_t>(i)]);
    pooled.z.row(i) = emb.z.transpose();
    pooled.slide_ids.push_back(emb.slide_id);
    pooled.labels.push_back(emb.class_label);
    pooled.centers.push_back(emb.center_label);
  }
  return pooled;
}

// ---------------------------------------------------------------------------
// synthetic generator
// ---------------------------------------------------------------------------

/// Shape defaults follow the benchmark's reference cohort: 6 classes, 2
/// centers. Patch features are drawn as
///   mu_class + center_bias * mu_center + noise_std * N(0, I).
struct SynthConfig {
  int num_classes = 6;            // S
  int num_centers = 2;            // C
  Eigen::Index dim = 64;          // d
  int slides_per_class_center = 10;
  int min_patches = 16;
  int max_patches = 64;
  double class_separation = 1.0;
  double center_bias = 1.0;       // beta
  double noise_std = 1.0;
};

inline void validate_synth_config(const SynthConfig& cfg) {
  if (cfg.num_classes < 1 || cfg.num_centers < 1 || cfg.dim < 1 || cfg.slides_per_class_center < 1)
    throw std::invalid_argument("synth config: all counts must be >= 1");
  if (cfg.min_patches < 1 || cfg.min_patches > cfg.max_patches)
    throw std::invalid_argument("synth config: need 1 <= min_patches <= max_patches");
  if (cfg.class_separation < 0.0 || cfg.center_bias < 0.0)
    throw std::invalid_argument("synth config: separation and bias must be >= 0");
  if (!(cfg.noise_std > 0.0))
    throw std::invalid_argument("synth config: noise_std must be > 0");
}

struct SynthMeans {
  Eigen::MatrixXd class_means;  // S x d, scaled by class_separation
  Eigen::MatrixXd center_dirs;  // C x d, unit norm
};

namespace detail {

inline Eigen::VectorXd random_unit_vector(Eigen::Index d, Rng& rng) {
  Eigen::VectorXd v(d);
  do {
    for (Eigen::Index j = 0; j < d; ++j) v[j] = rng.normal();
  } while (v.norm() == 0.0);
  return v / v.norm();
}

/// Draws the class/center mean directions; consumes a fixed prefix of the rng
/// stream so synth_generate can continue from the same state.
inline SynthMeans synth_means_impl(const SynthConfig& cfg, Rng& rng) {
  SynthMeans means;
  means.class_means.setZero(cfg.num_classes, cfg.dim);
  if (cfg.dim >= cfg.num_classes) {
    for (int s = 0; s < cfg.num_classes; ++s)
      means.class_means(s, s) = cfg.class_separation;
  } else {
    // d < S: greedy max-min selection over a seeded candidate pool of unit
    // vectors, keeping the directions as mutually spread as the space allows.
    const int pool_size = 32 * cfg.num_classes;
    std::vector<Eigen::VectorXd> pool;
    pool.reserve(static_cast<std::size_t>(pool_size));
    for (int i = 0; i < pool_size; ++i) pool.push_back(random_unit_vector(cfg.dim, rng));
    std::vector<int> chosen{0};
    while (static_cast<int>(chosen.size()) < cfg.num_classes) {
      int best = -1;
      double best_score = -1.0;
      for (int i = 0; i < pool_size; ++i) {
        double min_dist = std::numeric_limits<double>::infinity();
        for (int c : chosen) min_dist = std::min(min_dist, (pool[i] - pool[c]).norm());
        if (min_dist > best_score) {
          best_score = min_dist;
          best = i;
        }
      }
      chosen.push_back(best);
    }
    for (int s = 0; s < cfg.num_classes; ++s)
      means.class_means.row(s) = cfg.class_separation * pool[chosen[static_cast<std::size_t>(s)]].transpose();
  }
  means.center_dirs.resize(cfg.num_centers, cfg.dim);
  for (int c = 0; c < cfg.num_centers; ++c)
    means.center_dirs.row(c) = random_unit_vector(cfg.dim, rng).transpose();
  return means;
}

}  // namespace detail

/// The exact mean directions synth_generate(cfg, seed) uses.
inline SynthMeans synth_means(const SynthConfig& cfg, std::uint64_t seed) {
  validate_synth_config(cfg);
  Rng rng(seed);
  return detail::synth_means_impl(cfg, rng);
}

/// Deterministic synthetic dataset: pure function of (cfg, seed).
inline Dataset synth_generate(const SynthConfig& cfg, std::uint64_t seed) {
  validate_synth_config(cfg);
  Rng rng(seed);
  const SynthMeans means = detail::synth_means_impl(cfg, rng);

  Dataset ds;
  ds.num_classes = cfg.num_classes;
  ds.num_centers = cfg.num_centers;
  ds.dim = cfg.dim;
  const std::size_t total = static_cast<std::size_t>(cfg.num_classes) * cfg.num_centers *
                            cfg.slides_per_class_center;
  ds.bags.reserve(total);
  std::size_t index = 0;
  for (int s = 0; s < cfg.num_classes; ++s) {
    for (int c = 0; c < cfg.num_centers; ++c) {
      const Eigen::VectorXd mu =
          means.class_means.row(s).transpose() + cfg.center_bias * means.center_dirs.row(c).transpose();
      for (int r = 0; r < cfg.slides_per_class_center; ++r, ++index) {
        FeatureBag bag;
        char id[32];
        std::snprintf(id, sizeof(id), "slide_%05zu", index);
        bag.slide_id = id;
        bag.class_label = s;
        bag.center_label = c;
        bag.extractor_id = "synthetic";
        const int n = cfg.min_patches +
                      static_cast<int>(rng.bounded(static_cast<std::uint64_t>(cfg.max_patches - cfg.min_patches + 1)));
        bag.features.resize(n, cfg.dim);
        for (int i = 0; i < n; ++i)
          for (Eigen::Index j = 0; j < cfg.dim; ++j)
            bag.features(i, j) = static_cast<float>(mu[j] + cfg.noise_std * rng.normal());
        ds.bags.push_back(std::move(bag));
      }
    }
  }
  return ds;
}

}  // namespace shbmil
