#include <catch2/catch.hpp>

#include "oracles.hpp"
#include "shbmil/feature_store.hpp"

using namespace shbmil;

namespace {

FeatureBag random_bag(Rng& rng, Eigen::Index n, Eigen::Index d, const std::string& id = "bag") {
  FeatureBag bag;
  bag.slide_id = id;
  bag.features.resize(n, d);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < d; ++j)
      bag.features(i, j) = static_cast<float>(rng.normal());
  return bag;
}

bool features_bitwise_equal(const RowMatrixXf& a, const RowMatrixXf& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) return false;
  return std::memcmp(a.data(), b.data(), sizeof(float) * static_cast<std::size_t>(a.size())) == 0;
}

}  // namespace

TEST_CASE("bag file: smallest bag is 21 bytes and round-trips", "[feature_store]") {
  oracle::TempDir tmp("bag_min");
  FeatureBag bag;
  bag.slide_id = "tiny";
  bag.features.resize(1, 1);
  bag.features(0, 0) = 0.0f;
  const auto path = tmp.path / "tiny.bag";
  write_bag(bag, path);
  REQUIRE(std::filesystem::file_size(path) == 21);
  const FeatureBag back = read_bag(path);
  REQUIRE(back.features.rows() == 1);
  REQUIRE(back.features.cols() == 1);
  REQUIRE(back.features(0, 0) == 0.0f);
}

TEST_CASE("bag file: 3x4 round trip is bitwise", "[feature_store]") {
  oracle::TempDir tmp("bag_rt");
  Rng rng(11);
  const FeatureBag bag = random_bag(rng, 3, 4);
  const auto path = tmp.path / "b.bag";
  write_bag(bag, path);
  const FeatureBag back = read_bag(path);
  REQUIRE(features_bitwise_equal(bag.features, back.features));
}

TEST_CASE("bag file: seeded random bags round-trip bit-identically", "[feature_store]") {
  oracle::TempDir tmp("bag_prop");
  Rng rng(2024);
  const auto path = tmp.path / "b.bag";
  for (int trial = 0; trial < 100; ++trial) {
    const auto n = static_cast<Eigen::Index>(1 + rng.bounded(64));
    const auto d = static_cast<Eigen::Index>(2 + rng.bounded(2047));
    const FeatureBag bag = random_bag(rng, n, d);
    write_bag(bag, path);
    const FeatureBag back = read_bag(path);
    REQUIRE(features_bitwise_equal(bag.features, back.features));
  }
}

TEST_CASE("bag file: corrupted magic and truncated payload are rejected", "[feature_store]") {
  oracle::TempDir tmp("bag_err");
  Rng rng(3);
  const FeatureBag bag = random_bag(rng, 2, 3);
  const auto path = tmp.path / "b.bag";
  write_bag(bag, path);

  std::string bytes = read_file(path);
  SECTION("bad magic") {
    bytes[0] = 'X';
    write_file(path, bytes);
    REQUIRE_THROWS_WITH(read_bag(path), Catch::Contains("bad magic"));
  }
  SECTION("truncated payload") {
    bytes.resize(bytes.size() - 5);
    write_file(path, bytes);
    REQUIRE_THROWS_WITH(read_bag(path), Catch::Contains("truncated"));
  }
  SECTION("trailing bytes") {
    bytes += "zz";
    write_file(path, bytes);
    REQUIRE_THROWS_WITH(read_bag(path), Catch::Contains("trailing"));
  }
}

TEST_CASE("write_bag rejects non-finite values", "[feature_store]") {
  oracle::TempDir tmp("bag_nan");
  FeatureBag bag;
  bag.slide_id = "nan";
  bag.features.resize(1, 2);
  bag.features(0, 0) = 1.0f;
  bag.features(0, 1) = std::numeric_limits<float>::quiet_NaN();
  REQUIRE_THROWS_WITH(write_bag(bag, tmp.path / "x.bag"), Catch::Contains("non-finite"));
}

TEST_CASE("manifest: row order preserved, labels attached", "[feature_store]") {
  oracle::TempDir tmp("manifest_order");
  Rng rng(5);
  Dataset ds;
  ds.num_classes = 2;
  ds.num_centers = 1;
  ds.dim = 3;
  for (int i = 0; i < 2; ++i) {
    FeatureBag bag = random_bag(rng, 2 + i, 3, "s" + std::to_string(i));
    bag.class_label = i;
    bag.center_label = 0;
    ds.bags.push_back(std::move(bag));
  }
  const auto manifest = write_dataset(ds, tmp.path);
  const Dataset back = load_manifest(manifest);
  REQUIRE(back.bags.size() == 2);
  REQUIRE(back.bags[0].slide_id == "s0");
  REQUIRE(back.bags[1].slide_id == "s1");
  REQUIRE(back.bags[1].class_label == 1);
  REQUIRE(back.num_classes == 2);
  REQUIRE(back.num_centers == 1);
}

TEST_CASE("manifest: duplicate slide_id rejected", "[feature_store]") {
  oracle::TempDir tmp("manifest_dup");
  Rng rng(6);
  write_bag(random_bag(rng, 1, 2), tmp.path / "a.bag");
  const std::string csv =
      "slide_id,label,center,path,n_patches,dim\n"
      "s0,0,0,a.bag,1,2\n"
      "s0,1,0,a.bag,1,2\n";
  write_file(tmp.path / "manifest.csv", csv);
  REQUIRE_THROWS_WITH(load_manifest(tmp.path / "manifest.csv"), Catch::Contains("duplicate"));
}

TEST_CASE("manifest: unknown column and empty manifest rejected", "[feature_store]") {
  oracle::TempDir tmp("manifest_bad");
  write_file(tmp.path / "bad_header.csv",
             "slide_id,label,center,path,n_patches,dimension\nx,0,0,a.bag,1,2\n");
  REQUIRE_THROWS_WITH(load_manifest(tmp.path / "bad_header.csv"), Catch::Contains("unknown column"));
  write_file(tmp.path / "empty.csv", "slide_id,label,center,path,n_patches,dim\n");
  REQUIRE_THROWS_WITH(load_manifest(tmp.path / "empty.csv"), Catch::Contains("empty manifest"));
}

TEST_CASE("manifest: reference cohort marginals load intact", "[feature_store]") {
  // per-(class, center) counts with column sums (266, 355) and row sums
  // (104, 44, 194, 55, 122, 102); 621 slides total
  const int cells[6][2] = {{31, 73}, {21, 23}, {101, 93}, {21, 34}, {48, 74}, {44, 58}};
  oracle::TempDir tmp("manifest_cohort");
  Rng rng(7);
  Dataset ds;
  ds.num_classes = 6;
  ds.num_centers = 2;
  ds.dim = 2;
  int index = 0;
  for (int s = 0; s < 6; ++s)
    for (int c = 0; c < 2; ++c)
      for (int r = 0; r < cells[s][c]; ++r) {
        FeatureBag bag = random_bag(rng, 1, 2, "s" + std::to_string(index++));
        bag.class_label = s;
        bag.center_label = c;
        ds.bags.push_back(std::move(bag));
      }
  REQUIRE(ds.bags.size() == 621);
  const auto manifest = write_dataset(ds, tmp.path);
  const Dataset back = load_manifest(manifest);
  REQUIRE(back.num_classes == 6);
  REQUIRE(back.num_centers == 2);
  std::vector<int> class_counts(6, 0), center_counts(2, 0);
  for (const auto& bag : back.bags) {
    class_counts[static_cast<std::size_t>(bag.class_label)]++;
    center_counts[static_cast<std::size_t>(bag.center_label)]++;
  }
  REQUIRE(class_counts == std::vector<int>{104, 44, 194, 55, 122, 102});
  REQUIRE(center_counts == std::vector<int>{266, 355});
}

TEST_CASE("manifest: parallel loading matches serial order", "[feature_store]") {
  oracle::TempDir tmp("manifest_par");
  SynthConfig cfg;
  cfg.dim = 4;
  cfg.slides_per_class_center = 3;
  cfg.min_patches = 1;
  cfg.max_patches = 3;
  const auto manifest = write_dataset(synth_generate(cfg, 9), tmp.path);
  const Dataset serial = load_manifest(manifest, std::nullopt, std::nullopt, 1);
  const Dataset parallel = load_manifest(manifest, std::nullopt, std::nullopt, 4);
  REQUIRE(serial.bags.size() == parallel.bags.size());
  for (std::size_t i = 0; i < serial.bags.size(); ++i) {
    REQUIRE(serial.bags[i].slide_id == parallel.bags[i].slide_id);
    REQUIRE(features_bitwise_equal(serial.bags[i].features, parallel.bags[i].features));
  }
}

TEST_CASE("mean_pool: hand cases", "[feature_store]") {
  FeatureBag bag;
  bag.slide_id = "m";
  bag.features.resize(2, 2);
  bag.features << 1.0f, 3.0f, 3.0f, 1.0f;
  const SlideEmbedding emb = mean_pool(bag);
  REQUIRE(emb.z[0] == 2.0);
  REQUIRE(emb.z[1] == 2.0);

  FeatureBag single;
  single.slide_id = "s";
  single.features.resize(1, 3);
  single.features << 0.5f, -1.25f, 7.0f;
  const SlideEmbedding se = mean_pool(single);
  for (Eigen::Index j = 0; j < 3; ++j)
    REQUIRE(se.z[j] == static_cast<double>(single.features(0, j)));
}

TEST_CASE("mean_pool: matches the column-sum oracle", "[feature_store]") {
  Rng rng(17);
  const FeatureBag bag = random_bag(rng, 5, 4);
  const SlideEmbedding emb = mean_pool(bag);
  const Eigen::VectorXd expect = oracle::column_means(bag.features);
  for (Eigen::Index j = 0; j < 4; ++j)
    REQUIRE(emb.z[j] == Approx(expect[j]).epsilon(1e-12));
}

TEST_CASE("mean_pool: weighted-average identity over concatenation", "[feature_store]") {
  Rng rng(23);
  for (int trial = 0; trial < 20; ++trial) {
    const auto na = static_cast<Eigen::Index>(1 + rng.bounded(12));
    const auto nb = static_cast<Eigen::Index>(1 + rng.bounded(12));
    const FeatureBag a = random_bag(rng, na, 6);
    const FeatureBag b = random_bag(rng, nb, 6);
    FeatureBag both;
    both.slide_id = "ab";
    both.features.resize(na + nb, 6);
    both.features.topRows(na) = a.features;
    both.features.bottomRows(nb) = b.features;
    const Eigen::VectorXd za = mean_pool(a).z;
    const Eigen::VectorXd zb = mean_pool(b).z;
    const Eigen::VectorXd zc = mean_pool(both).z;
    const Eigen::VectorXd expect =
        (static_cast<double>(na) * za + static_cast<double>(nb) * zb) / static_cast<double>(na + nb);
    REQUIRE((zc - expect).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("mean_pool: permutation invariant to 1e-12", "[feature_store]") {
  Rng rng(29);
  const FeatureBag bag = random_bag(rng, 17, 5);
  FeatureBag shuffled = bag;
  std::vector<int> perm(17);
  for (int i = 0; i < 17; ++i) perm[static_cast<std::size_t>(i)] = i;
  rng.shuffle(perm);
  for (int i = 0; i < 17; ++i)
    shuffled.features.row(i) = bag.features.row(perm[static_cast<std::size_t>(i)]);
  REQUIRE((mean_pool(bag).z - mean_pool(shuffled).z).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("synth_generate: deterministic given (cfg, seed)", "[feature_store]") {
  SynthConfig cfg;
  cfg.dim = 8;
  cfg.slides_per_class_center = 2;
  cfg.min_patches = 2;
  cfg.max_patches = 6;
  const Dataset a = synth_generate(cfg, 31);
  const Dataset b = synth_generate(cfg, 31);
  REQUIRE(a.bags.size() == b.bags.size());
  for (std::size_t i = 0; i < a.bags.size(); ++i) {
    REQUIRE(a.bags[i].slide_id == b.bags[i].slide_id);
    REQUIRE(features_bitwise_equal(a.bags[i].features, b.bags[i].features));
  }
  const Dataset c = synth_generate(cfg, 32);
  REQUIRE_FALSE(features_bitwise_equal(a.bags[0].features, c.bags[0].features));
}

TEST_CASE("synth_generate: beta=0, separation=0 gives pure noise", "[feature_store]") {
  SynthConfig cfg;
  cfg.dim = 8;
  cfg.slides_per_class_center = 10;  // 120 slides
  cfg.min_patches = 32;
  cfg.max_patches = 32;
  cfg.class_separation = 0.0;
  cfg.center_bias = 0.0;
  cfg.noise_std = 1.0;
  const Dataset ds = synth_generate(cfg, 41);
  const PooledSlides pooled = mean_pool_all(ds);
  const Eigen::VectorXd grand_mean = pooled.z.colwise().mean();
  const double bound =
      4.0 * cfg.noise_std / std::sqrt(32.0 * static_cast<double>(ds.bags.size()));
  for (Eigen::Index j = 0; j < cfg.dim; ++j) REQUIRE(std::abs(grand_mean[j]) < bound);
}

TEST_CASE("synth_generate: center bias moves embeddings by beta * center dirs",
          "[feature_store]") {
  SynthConfig cfg;
  cfg.dim = 8;
  cfg.slides_per_class_center = 10;
  cfg.min_patches = 32;
  cfg.max_patches = 32;
  cfg.center_bias = 10.0;
  cfg.noise_std = 0.1;
  const std::uint64_t seed = 53;
  const Dataset ds = synth_generate(cfg, seed);
  const SynthMeans means = synth_means(cfg, seed);
  const PooledSlides pooled = mean_pool_all(ds);

  Eigen::VectorXd mean_c0 = Eigen::VectorXd::Zero(cfg.dim);
  Eigen::VectorXd mean_c1 = Eigen::VectorXd::Zero(cfg.dim);
  int n0 = 0, n1 = 0;
  for (Eigen::Index i = 0; i < pooled.z.rows(); ++i) {
    if (pooled.centers[static_cast<std::size_t>(i)] == 0) {
      mean_c0 += pooled.z.row(i).transpose();
      n0++;
    } else {
      mean_c1 += pooled.z.row(i).transpose();
      n1++;
    }
  }
  mean_c0 /= n0;
  mean_c1 /= n1;

  // classes are balanced within each center, so their means cancel in the
  // difference and beta * (mu_c0 - mu_c1) remains
  const Eigen::VectorXd expect =
      cfg.center_bias * (means.center_dirs.row(0) - means.center_dirs.row(1)).transpose();
  REQUIRE((mean_c0 - mean_c1 - expect).norm() < 0.1);
  const double expected_gap = cfg.center_bias * (means.center_dirs.row(0) - means.center_dirs.row(1)).norm();
  REQUIRE((mean_c0 - mean_c1).norm() == Approx(expected_gap).margin(0.1));
}

TEST_CASE("synth_generate: invalid configs rejected", "[feature_store]") {
  SynthConfig cfg;
  cfg.min_patches = 5;
  cfg.max_patches = 4;
  REQUIRE_THROWS_AS(synth_generate(cfg, 1), std::invalid_argument);
  SynthConfig zero;
  zero.slides_per_class_center = 0;
  REQUIRE_THROWS_AS(synth_generate(zero, 1), std::invalid_argument);
}
