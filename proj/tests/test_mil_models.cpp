#include <catch2/catch.hpp>

#include "oracles.hpp"
#include "shbmil/bench_harness.hpp"
#include "shbmil/mil_models.hpp"

using namespace shbmil;

namespace {

RowMatrixXf random_features(Rng& rng, Eigen::Index n, Eigen::Index d) {
  RowMatrixXf F(n, d);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < d; ++j) F(i, j) = static_cast<float>(rng.normal());
  return F;
}

double max_rel_error(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  double worst = 0.0;
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < a.cols(); ++j) {
      const double denom = std::max({std::abs(a(i, j)), std::abs(b(i, j)), 1e-8});
      worst = std::max(worst, std::abs(a(i, j) - b(i, j)) / denom);
    }
  return worst;
}

double grads_max_rel_error(const AbmilGrads& a, const AbmilGrads& b) {
  return std::max({max_rel_error(a.V, b.V), max_rel_error(a.w, b.w), max_rel_error(a.Wc, b.Wc),
                   max_rel_error(a.bc, b.bc)});
}

}  // namespace

TEST_CASE("abmil_forward: identical patches get uniform attention", "[mil_models]") {
  Rng rng(301);
  AbmilParams params = abmil_init(4, 3, rng);
  RowMatrixXf F(4, 4);
  for (int i = 0; i < 4; ++i) F.row(i) << 0.5f, -1.25f, 2.0f, 0.0f;
  const AbmilForward fwd = abmil_forward(params, F);
  for (Eigen::Index i = 0; i < 4; ++i) REQUIRE(fwd.attention[i] == 0.25);
  for (Eigen::Index j = 0; j < 4; ++j)
    REQUIRE(fwd.pooled[j] == static_cast<double>(F(0, j)));
}

TEST_CASE("abmil_forward: singleton bag", "[mil_models]") {
  Rng rng(307);
  AbmilParams params = abmil_init(6, 2, rng);
  const RowMatrixXf F = random_features(rng, 1, 6);
  const AbmilForward fwd = abmil_forward(params, F);
  REQUIRE(fwd.attention.size() == 1);
  REQUIRE(fwd.attention[0] == 1.0);
  for (Eigen::Index j = 0; j < 6; ++j) REQUIRE(fwd.pooled[j] == static_cast<double>(F(0, j)));
}

TEST_CASE("abmil_forward: matches a straight-line reimplementation", "[mil_models]") {
  Rng rng(311);
  AbmilParams params = abmil_init(8, 3, rng);
  const RowMatrixXf F = random_features(rng, 3, 8);
  const AbmilForward fwd = abmil_forward(params, F);
  const oracle::NaiveForward naive = oracle::abmil_forward(params, F);
  REQUIRE((fwd.pooled - naive.pooled).cwiseAbs().maxCoeff() < 1e-12);
  REQUIRE((fwd.logits - naive.logits).cwiseAbs().maxCoeff() < 1e-12);
  REQUIRE((fwd.attention - naive.attention).cwiseAbs().maxCoeff() < 1e-12);
  REQUIRE(fwd.attention.sum() == Approx(1.0).margin(1e-12));
  REQUIRE((fwd.attention.array() > 0.0).all());
}

TEST_CASE("abmil_forward: bitwise invariant under row permutation", "[mil_models]") {
  Rng rng(313);
  AbmilParams params = abmil_init(6, 4, rng);
  const RowMatrixXf F = random_features(rng, 7, 6);
  std::vector<int> perm(7);
  for (int i = 0; i < 7; ++i) perm[static_cast<std::size_t>(i)] = i;
  rng.shuffle(perm);
  RowMatrixXf G(7, 6);
  for (int i = 0; i < 7; ++i) G.row(i) = F.row(perm[static_cast<std::size_t>(i)]);

  const AbmilForward a = abmil_forward(params, F);
  const AbmilForward b = abmil_forward(params, G);
  REQUIRE(std::memcmp(a.pooled.data(), b.pooled.data(), sizeof(double) * 6) == 0);
  REQUIRE(std::memcmp(a.logits.data(), b.logits.data(), sizeof(double) * 4) == 0);

  const auto pa = predict_abmil(params, F);
  const auto pb = predict_abmil(params, G);
  REQUIRE(pa.first == pb.first);
  REQUIRE(std::memcmp(pa.second.data(), pb.second.data(), sizeof(double) * 4) == 0);
}

TEST_CASE("weighted_ce: hand values and the naive oracle", "[mil_models]") {
  const Eigen::VectorXd uniform = Eigen::VectorXd::Constant(4, 0.7);
  const Eigen::VectorXd ones = Eigen::VectorXd::Ones(4);
  REQUIRE(weighted_ce(uniform, 2, ones) == Approx(std::log(4.0)).epsilon(1e-12));

  Eigen::VectorXd dominant(3);
  dominant << 30.0, 0.0, -2.0;
  REQUIRE(weighted_ce(dominant, 0, Eigen::VectorXd::Ones(3)) < 1e-9);

  Rng rng(317);
  for (int trial = 0; trial < 10; ++trial) {
    Eigen::VectorXd logits(5);
    for (int i = 0; i < 5; ++i) logits[i] = 3.0 * rng.normal();
    Eigen::VectorXd weights(5);
    for (int i = 0; i < 5; ++i) weights[i] = 0.25 + rng.uniform01();
    const int label = static_cast<int>(rng.bounded(5));
    REQUIRE(weighted_ce(logits, label, weights) ==
            Approx(oracle::naive_weighted_ce(logits, label, weights)).margin(1e-10));
  }

  REQUIRE_THROWS_AS(weighted_ce(dominant, 3, Eigen::VectorXd::Ones(3)), std::invalid_argument);
  Eigen::VectorXd bad = Eigen::VectorXd::Ones(3);
  bad[1] = 0.0;
  REQUIRE_THROWS_AS(weighted_ce(dominant, 0, bad), std::invalid_argument);
}

TEST_CASE("abmil_backward: closed form for the classifier bias", "[mil_models]") {
  Rng rng(331);
  AbmilParams params = abmil_init(8, 3, rng);
  params.V.setZero();
  params.w.setZero();
  const RowMatrixXf F = random_features(rng, 5, 8);
  const AbmilForward fwd = abmil_forward(params, F);
  for (Eigen::Index i = 0; i < 5; ++i) REQUIRE(fwd.attention[i] == Approx(0.2).margin(1e-15));

  Eigen::VectorXd weights(3);
  weights << 0.5, 1.5, 1.0;
  const int label = 1;
  const AbmilGrads grads = abmil_backward(params, F, label, weights);
  Eigen::VectorXd expect = stable_softmax(fwd.logits);
  expect[label] -= 1.0;
  expect *= weights[label];
  REQUIRE((grads.bc - expect).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("abmil_backward: matches central finite differences", "[mil_models]") {
  // acceptance runs the full 50-instance sweep; keep a fast 10-instance check here
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(400 + seed);
    AbmilParams params = abmil_init(8, 3, rng);
    const RowMatrixXf F = random_features(rng, 4, 8);
    const int label = static_cast<int>(rng.bounded(3));
    Eigen::VectorXd weights(3);
    for (int i = 0; i < 3; ++i) weights[i] = 0.5 + rng.uniform01();
    const AbmilGrads analytic = abmil_backward(params, F, label, weights);
    const AbmilGrads fd = oracle::fd_abmil_grads(params, F, label, weights, 1e-6);
    REQUIRE(grads_max_rel_error(analytic, fd) <= 1e-5);
  }
}

TEST_CASE("abmil_backward: duplicating every patch leaves gradients unchanged", "[mil_models]") {
  Rng rng(353);
  AbmilParams params = abmil_init(6, 3, rng);
  const RowMatrixXf F = random_features(rng, 4, 6);
  RowMatrixXf doubled(8, 6);
  doubled.topRows(4) = F;
  doubled.bottomRows(4) = F;
  const Eigen::VectorXd w = Eigen::VectorXd::Ones(3);
  const AbmilGrads a = abmil_backward(params, F, 1, w);
  const AbmilGrads b = abmil_backward(params, doubled, 1, w);
  REQUIRE(grads_max_rel_error(a, b) < 1e-12);
}

TEST_CASE("cosine_lr: endpoints, midpoint, monotone", "[mil_models]") {
  REQUIRE(cosine_lr(0, 100, 1e-4) == 1e-4);
  REQUIRE(cosine_lr(100, 100, 1e-4) == Approx(0.0).margin(1e-20));
  REQUIRE(cosine_lr(50, 100, 1e-4) == Approx(0.5e-4).epsilon(1e-12));
  double prev = std::numeric_limits<double>::infinity();
  for (long step = 0; step <= 200; ++step) {
    const double lr = cosine_lr(step, 200, 3.0);
    REQUIRE(lr <= prev);
    prev = lr;
  }
  REQUIRE_THROWS_AS(cosine_lr(-1, 10, 1.0), std::invalid_argument);
  REQUIRE_THROWS_AS(cosine_lr(11, 10, 1.0), std::invalid_argument);
}

TEST_CASE("adamw_step: first-step closed form and pure decay", "[mil_models]") {
  TrainConfig cfg;
  cfg.weight_decay = 0.0;
  Eigen::VectorXd theta(3);
  theta << 1.0, -2.0, 0.5;
  Eigen::VectorXd grad(3);
  grad << 0.3, -0.7, 0.0;
  AdamWState state;
  const double lr = 1e-2;
  Eigen::VectorXd updated = theta;
  adamw_step(updated, grad, state, lr, cfg);
  for (int i = 0; i < 3; ++i) {
    const double expect = theta[i] - lr * grad[i] / (std::abs(grad[i]) + cfg.adam_eps);
    REQUIRE(updated[i] == Approx(expect).margin(1e-9));
  }

  TrainConfig decay_cfg;
  decay_cfg.weight_decay = 0.1;
  AdamWState s2;
  Eigen::VectorXd t2(2);
  t2 << 4.0, -8.0;
  const Eigen::VectorXd zero = Eigen::VectorXd::Zero(2);
  Eigen::VectorXd t2_after = t2;
  adamw_step(t2_after, zero, s2, lr, decay_cfg);
  for (int i = 0; i < 2; ++i)
    REQUIRE(t2_after[i] == Approx(t2[i] * (1.0 - lr * decay_cfg.weight_decay)).epsilon(1e-12));
}

TEST_CASE("adamw_step: descends a quadratic", "[mil_models]") {
  TrainConfig cfg;
  cfg.weight_decay = 0.0;
  Eigen::VectorXd theta = Eigen::VectorXd::Ones(4);
  AdamWState state;
  double prev_norm = theta.norm();
  for (int step = 0; step < 100; ++step) {
    const Eigen::VectorXd grad = theta;  // gradient of 0.5 * |theta|^2
    adamw_step(theta, grad, state, 1e-2, cfg);
    const double norm = theta.norm();
    REQUIRE(norm <= prev_norm);
    prev_norm = norm;
  }
  REQUIRE(theta.norm() < 0.5 * std::sqrt(4.0));
}

TEST_CASE("train_abmil: deterministic and validates inputs", "[mil_models]") {
  SynthConfig synth;
  synth.num_classes = 3;
  synth.num_centers = 1;
  synth.dim = 16;
  synth.slides_per_class_center = 4;
  synth.min_patches = 2;
  synth.max_patches = 4;
  synth.class_separation = 2.0;
  synth.noise_std = 0.5;
  const Dataset ds = synth_generate(synth, 61);
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.seed = 5;
  const AbmilParams a = train_abmil(ds.bags, 3, cfg);
  const AbmilParams b = train_abmil(ds.bags, 3, cfg);
  REQUIRE(std::memcmp(a.V.data(), b.V.data(), sizeof(double) * static_cast<std::size_t>(a.V.size())) == 0);
  REQUIRE(std::memcmp(a.Wc.data(), b.Wc.data(), sizeof(double) * static_cast<std::size_t>(a.Wc.size())) == 0);
  REQUIRE(a.w == b.w);
  REQUIRE(a.bc == b.bc);

  REQUIRE_THROWS_AS(train_abmil(ds.bags, 1, cfg), std::invalid_argument);
  REQUIRE_THROWS_WITH(train_abmil(ds.bags, 4, cfg), Catch::Contains("absent"));
}

TEST_CASE("train_abmil: fits separable data and generalizes", "[mil_models]") {
  SynthConfig synth;
  synth.num_classes = 6;
  synth.num_centers = 2;
  synth.dim = 1024;
  synth.slides_per_class_center = 10;  // 120 slides
  synth.min_patches = 2;
  synth.max_patches = 4;
  synth.class_separation = 5.0;
  synth.center_bias = 0.0;
  synth.noise_std = 0.1;
  const Dataset ds = synth_generate(synth, 71);

  // hold out the last 2 replicates of every (class, center) cell
  std::vector<FeatureBag> train_bags, test_bags;
  for (std::size_t i = 0; i < ds.bags.size(); ++i) {
    if (i % 10 < 8)
      train_bags.push_back(ds.bags[i]);
    else
      test_bags.push_back(ds.bags[i]);
  }

  TrainConfig cfg;  // 20 epochs, AdamW, cosine schedule, peak 1e-4
  cfg.seed = 7;
  const AbmilParams params = train_abmil(train_bags, ds.num_classes, cfg);

  const auto bacc_on = [&](const std::vector<FeatureBag>& bags) {
    std::vector<int> y_true, y_pred;
    for (const auto& bag : bags) {
      y_true.push_back(bag.class_label);
      y_pred.push_back(predict_abmil(params, bag.features).first);
    }
    return balanced_accuracy(y_true, y_pred, ds.num_classes);
  };
  REQUIRE(bacc_on(train_bags) >= 0.99);
  REQUIRE(bacc_on(test_bags) >= 0.95);
}

TEST_CASE("training defaults follow the documented recipe", "[mil_models]") {
  const TrainConfig cfg;
  REQUIRE(cfg.epochs == 20);
  REQUIRE(cfg.peak_lr == 1e-4);
  REQUIRE(cfg.weight_decay == 0.01);
  REQUIRE(cfg.adam_beta1 == 0.9);
  REQUIRE(cfg.adam_beta2 == 0.999);
  REQUIRE(cfg.adam_eps == 1e-8);
  REQUIRE(attention_hidden_dim(1024) == 256);  // a quarter of the feature size
  REQUIRE(attention_hidden_dim(3) == 1);

  // inverse-frequency weights: n_total / (S * n_s), mean 1 on balanced data
  const Eigen::VectorXd w = inverse_frequency_weights({0, 0, 0, 1, 2, 2}, 3);
  REQUIRE(w[0] == Approx(6.0 / 9.0));
  REQUIRE(w[1] == Approx(6.0 / 3.0));
  REQUIRE(w[2] == Approx(6.0 / 6.0));
}

TEST_CASE("predict_abmil: tie rule and uniform probabilities", "[mil_models]") {
  Rng rng(367);
  AbmilParams params = abmil_init(5, 4, rng);
  params.Wc.setZero();
  params.bc.setZero();
  const RowMatrixXf F = random_features(rng, 3, 5);
  const auto [cls, probs] = predict_abmil(params, F);
  REQUIRE(cls == 0);
  for (Eigen::Index s = 0; s < 4; ++s) REQUIRE(probs[s] == 0.25);
}

TEST_CASE("build_prototypes: hand cases and the group-mean oracle", "[mil_models]") {
  std::vector<SlideEmbedding> one_per_class;
  for (int s = 0; s < 3; ++s) {
    SlideEmbedding e;
    e.slide_id = "p" + std::to_string(s);
    e.class_label = s;
    e.z = Eigen::VectorXd::Constant(4, static_cast<double>(s) + 0.5);
    one_per_class.push_back(std::move(e));
  }
  const Prototypes identity = build_prototypes(one_per_class, 3);
  for (int s = 0; s < 3; ++s)
    REQUIRE((identity.P.row(s).transpose() - one_per_class[static_cast<std::size_t>(s)].z).norm() == 0.0);

  std::vector<SlideEmbedding> pair;
  for (int sign : {1, -1}) {
    SlideEmbedding e;
    e.class_label = 0;
    e.z = sign * Eigen::VectorXd::LinSpaced(4, 1.0, 4.0);
    pair.push_back(std::move(e));
  }
  REQUIRE(build_prototypes(pair, 1).P.cwiseAbs().maxCoeff() == 0.0);

  Rng rng(373);
  std::vector<SlideEmbedding> many;
  for (int i = 0; i < 30; ++i) {
    SlideEmbedding e;
    e.class_label = i % 3;
    e.z.resize(5);
    for (int j = 0; j < 5; ++j) e.z[j] = rng.normal();
    many.push_back(std::move(e));
  }
  const Prototypes protos = build_prototypes(many, 3);
  const Eigen::MatrixXd expect = oracle::group_means(many, 3);
  REQUIRE((protos.P - expect).cwiseAbs().maxCoeff() < 1e-12);
  REQUIRE(protos.counts == std::vector<long>{10, 10, 10});

  std::vector<SlideEmbedding> missing = one_per_class;
  missing.pop_back();
  REQUIRE_THROWS_WITH(build_prototypes(missing, 3), Catch::Contains("empty class"));
}

TEST_CASE("simpleshot_predict: similarity structure and scale invariance", "[mil_models]") {
  Prototypes protos;
  protos.P = Eigen::MatrixXd::Identity(3, 3);
  protos.counts = {1, 1, 1};

  Eigen::VectorXd q(3);
  q << 0.0, 2.0, 0.0;
  const auto [cls, sims] = simpleshot_predict(protos, q);
  REQUIRE(cls == 1);
  REQUIRE(sims[1] == Approx(1.0).margin(1e-15));
  REQUIRE(sims[0] == 0.0);
  REQUIRE(sims[2] == 0.0);

  Rng rng(379);
  Prototypes rnd;
  rnd.P.resize(4, 6);
  for (Eigen::Index i = 0; i < 4; ++i)
    for (Eigen::Index j = 0; j < 6; ++j) rnd.P(i, j) = rng.normal();
  rnd.counts = {1, 1, 1, 1};
  Eigen::VectorXd z(6);
  for (int j = 0; j < 6; ++j) z[j] = rng.normal();
  const auto base = simpleshot_predict(rnd, z);
  for (double alpha : {0.5, 2.0, 1024.0}) {
    const auto scaled = simpleshot_predict(rnd, (alpha * z).eval());
    REQUIRE(scaled.first == base.first);
    REQUIRE(std::memcmp(scaled.second.data(), base.second.data(), sizeof(double) * 4) == 0);
  }
  for (double alpha : {3.7, 0.013}) {
    const auto scaled = simpleshot_predict(rnd, (alpha * z).eval());
    REQUIRE(scaled.first == base.first);
    REQUIRE((scaled.second - base.second).cwiseAbs().maxCoeff() < 1e-12);
  }

  REQUIRE_THROWS_WITH(simpleshot_predict(rnd, Eigen::VectorXd::Zero(6)),
                      Catch::Contains("degenerate cosine"));
  Prototypes degenerate = rnd;
  degenerate.P.row(2).setZero();
  REQUIRE_THROWS_WITH(simpleshot_predict(degenerate, z), Catch::Contains("degenerate cosine"));
}

TEST_CASE("center_l2 preprocessing is an explicit opt-in ablation", "[mil_models]") {
  std::vector<SlideEmbedding> embs;
  for (int i = 0; i < 4; ++i) {
    SlideEmbedding e;
    e.class_label = i % 2;
    e.z = Eigen::VectorXd::LinSpaced(3, static_cast<double>(i), static_cast<double>(i) + 2.0);
    embs.push_back(std::move(e));
  }
  const Eigen::VectorXd mean = embedding_mean(embs);
  for (const auto& e : embs) {
    const Eigen::VectorXd v = center_l2(e.z, mean);
    REQUIRE(v.norm() == Approx(1.0).epsilon(1e-12));
  }
  REQUIRE_THROWS_WITH(center_l2(mean, mean), Catch::Contains("zero-norm"));
}

TEST_CASE("checkpoint: bitwise round trip and corruption errors", "[mil_models]") {
  Rng rng(383);
  const AbmilParams params = abmil_init(12, 5, rng);
  oracle::TempDir tmp("ckpt");
  const auto path = tmp.path / "model.bin";
  save_abmil(params, path);
  const AbmilParams back = load_abmil(path);
  REQUIRE(std::memcmp(params.V.data(), back.V.data(), sizeof(double) * static_cast<std::size_t>(params.V.size())) == 0);
  REQUIRE(params.w == back.w);
  REQUIRE(std::memcmp(params.Wc.data(), back.Wc.data(), sizeof(double) * static_cast<std::size_t>(params.Wc.size())) == 0);
  REQUIRE(params.bc == back.bc);

  std::string bytes = read_file(path);
  bytes[0] = 'x';
  write_file(path, bytes);
  REQUIRE_THROWS_WITH(load_abmil(path), Catch::Contains("bad magic"));
  REQUIRE_THROWS_AS(load_abmil(tmp.path / "missing.bin"), std::runtime_error);
}
