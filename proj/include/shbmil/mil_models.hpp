#pragma once

#include <Eigen/Dense>
#include <filesystem>
#include <string>
#include <vector>

#include "shbmil/common.hpp"
#include "shbmil/feature_store.hpp"

namespace shbmil {

// ---------------------------------------------------------------------------
// ABMIL: softmax attention over patches, linear classifier on the pooled
// feature. Attention hidden size is a quarter of the feature dimension.
// ---------------------------------------------------------------------------

inline Eigen::Index attention_hidden_dim(Eigen::Index d) {
  return std::max<Eigen::Index>(1, d / 4);
}

struct AbmilParams {
  Eigen::MatrixXd V;   // h x d, attention hidden projection
  Eigen::VectorXd w;   // h, attention scorer
  Eigen::MatrixXd Wc;  // S x d, classifier weights
  Eigen::VectorXd bc;  // S, classifier bias

  Eigen::Index dim() const { return V.cols(); }
  Eigen::Index hidden() const { return V.rows(); }
  Eigen::Index num_classes() const { return Wc.rows(); }
};

inline void check_bag_shape(const AbmilParams& params, const RowMatrixXf& features) {
  if (features.cols() != params.dim())
    throw std::invalid_argument("abmil: bag dim " + std::to_string(features.cols()) +
                                " does not match model dim " + std::to_string(params.dim()));
  if (features.rows() < 1) throw std::invalid_argument("abmil: empty bag");
}

/// Seeded uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init. Draw order: V
/// row-major, w, Wc row-major, bc.
inline AbmilParams abmil_init(Eigen::Index d, int num_classes, Rng& rng) {
  if (d < 1 || num_classes < 1) throw std::invalid_argument("abmil_init: bad shape");
  const Eigen::Index h = attention_hidden_dim(d);
  AbmilParams p;
  p.V.resize(h, d);
  p.w.resize(h);
  p.Wc.resize(num_classes, d);
  p.bc.resize(num_classes);
  const double bound_d = 1.0 / std::sqrt(static_cast<double>(d));
  const double bound_h = 1.0 / std::sqrt(static_cast<double>(h));
  for (Eigen::Index i = 0; i < h; ++i)
    for (Eigen::Index j = 0; j < d; ++j) p.V(i, j) = rng.uniform(-bound_d, bound_d);
  for (Eigen::Index i = 0; i < h; ++i) p.w[i] = rng.uniform(-bound_h, bound_h);
  for (Eigen::Index i = 0; i < num_classes; ++i)
    for (Eigen::Index j = 0; j < d; ++j) p.Wc(i, j) = rng.uniform(-bound_d, bound_d);
  for (Eigen::Index i = 0; i < num_classes; ++i) p.bc[i] = rng.uniform(-bound_d, bound_d);
  return p;
}

struct AbmilForward {
  Eigen::VectorXd attention;  // N, sums to 1
  Eigen::VectorXd pooled;     // d
  Eigen::VectorXd logits;     // S
};

/// e_n = w^T tanh(V f_n); a = softmax(e); pooled = sum a_n f_n;
/// logits = Wc pooled + bc. All reductions over patches run in sorted value
/// order, so the result is bit-identical under any permutation of bag rows.
inline AbmilForward abmil_forward(const AbmilParams& params, const RowMatrixXf& features) {
  check_bag_shape(params, features);
  const Eigen::Index n = features.rows();
  const Eigen::Index d = features.cols();
  const Eigen::Index h = params.hidden();

  AbmilForward out;
  Eigen::VectorXd scores(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    double e = 0.0;
    for (Eigen::Index k = 0; k < h; ++k) {
      double pre = 0.0;
      for (Eigen::Index j = 0; j < d; ++j)
        pre += params.V(k, j) * static_cast<double>(features(i, j));
      e += params.w[k] * std::tanh(pre);
    }
    scores[i] = e;
  }
  const double emax = scores.maxCoeff();
  std::vector<double> exps(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) exps[static_cast<std::size_t>(i)] = std::exp(scores[i] - emax);
  std::vector<double> buf = exps;
  const double sum_exp = sorted_sum(buf);
  out.attention.resize(n);
  for (Eigen::Index i = 0; i < n; ++i)
    out.attention[i] = exps[static_cast<std::size_t>(i)] / sum_exp;

  out.pooled.resize(d);
  for (Eigen::Index j = 0; j < d; ++j) {
    buf.resize(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i)
      buf[static_cast<std::size_t>(i)] = out.attention[i] * static_cast<double>(features(i, j));
    out.pooled[j] = sorted_sum(buf);
  }

  out.logits.resize(params.num_classes());
  for (Eigen::Index s = 0; s < params.num_classes(); ++s) {
    double acc = params.bc[s];
    for (Eigen::Index j = 0; j < d; ++j) acc += params.Wc(s, j) * out.pooled[j];
    out.logits[s] = acc;
  }
  return out;
}

/// Numerically stable softmax; reductions in sorted order.
inline Eigen::VectorXd stable_softmax(const Eigen::VectorXd& logits) {
  const double m = logits.maxCoeff();
  std::vector<double> exps(static_cast<std::size_t>(logits.size()));
  for (Eigen::Index i = 0; i < logits.size(); ++i)
    exps[static_cast<std::size_t>(i)] = std::exp(logits[i] - m);
  std::vector<double> buf = exps;
  const double total = sorted_sum(buf);
  Eigen::VectorXd probs(logits.size());
  for (Eigen::Index i = 0; i < logits.size(); ++i)
    probs[i] = exps[static_cast<std::size_t>(i)] / total;
  return probs;
}

/// Weighted categorical cross-entropy: weight[label] * (-log softmax[label]),
/// computed with max subtraction.
inline double weighted_ce(const Eigen::VectorXd& logits, int label,
                          const Eigen::VectorXd& class_weights) {
  if (label < 0 || label >= logits.size())
    throw std::invalid_argument("weighted_ce: label out of range");
  if (class_weights.size() != logits.size())
    throw std::invalid_argument("weighted_ce: weight size mismatch");
  if ((class_weights.array() <= 0.0).any())
    throw std::invalid_argument("weighted_ce: weights must be positive");
  const double m = logits.maxCoeff();
  double sum = 0.0;
  for (Eigen::Index i = 0; i < logits.size(); ++i) sum += std::exp(logits[i] - m);
  return class_weights[label] * (m - logits[label] + std::log(sum));
}

struct AbmilGrads {
  Eigen::MatrixXd V;
  Eigen::VectorXd w;
  Eigen::MatrixXd Wc;
  Eigen::VectorXd bc;
};

/// Analytic gradients of weighted_ce(abmil_forward(...)) with respect to all
/// parameters: classifier, pooling, softmax attention and tanh backprop.
inline AbmilGrads abmil_backward(const AbmilParams& params, const RowMatrixXf& features, int label,
                                 const Eigen::VectorXd& class_weights) {
  check_bag_shape(params, features);
  const Eigen::Index n = features.rows();
  const Eigen::Index d = features.cols();
  const Eigen::Index h = params.hidden();
  const Eigen::Index S = params.num_classes();
  if (label < 0 || label >= S) throw std::invalid_argument("abmil_backward: label out of range");

  // Forward pass, keeping tanh activations.
  Eigen::MatrixXd t(n, h);  // tanh(V f_n)
  Eigen::VectorXd scores(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    double e = 0.0;
    for (Eigen::Index k = 0; k < h; ++k) {
      double pre = 0.0;
      for (Eigen::Index j = 0; j < d; ++j)
        pre += params.V(k, j) * static_cast<double>(features(i, j));
      t(i, k) = std::tanh(pre);
      e += params.w[k] * t(i, k);
    }
    scores[i] = e;
  }
  const double emax = scores.maxCoeff();
  Eigen::VectorXd attn(n);
  double sum_exp = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    attn[i] = std::exp(scores[i] - emax);
    sum_exp += attn[i];
  }
  attn /= sum_exp;
  Eigen::VectorXd pooled = Eigen::VectorXd::Zero(d);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < d; ++j) pooled[j] += attn[i] * static_cast<double>(features(i, j));
  Eigen::VectorXd logits = params.Wc * pooled + params.bc;

  // loss = omega * (-log softmax(logits)[label])
  const double omega = class_weights[label];
  Eigen::VectorXd g_logits = stable_softmax(logits);
  g_logits[label] -= 1.0;
  g_logits *= omega;

  AbmilGrads grads;
  grads.Wc = g_logits * pooled.transpose();
  grads.bc = g_logits;

  const Eigen::VectorXd g_pooled = params.Wc.transpose() * g_logits;  // d
  Eigen::VectorXd r(n);                                               // dL/da_n
  for (Eigen::Index i = 0; i < n; ++i) {
    double acc = 0.0;
    for (Eigen::Index j = 0; j < d; ++j) acc += g_pooled[j] * static_cast<double>(features(i, j));
    r[i] = acc;
  }
  const double rho = attn.dot(r);
  const Eigen::VectorXd g_scores = attn.array() * (r.array() - rho);  // softmax backprop

  grads.w = Eigen::VectorXd::Zero(h);
  grads.V = Eigen::MatrixXd::Zero(h, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index k = 0; k < h; ++k) {
      grads.w[k] += g_scores[i] * t(i, k);
      const double s_ik = g_scores[i] * params.w[k] * (1.0 - t(i, k) * t(i, k));
      for (Eigen::Index j = 0; j < d; ++j)
        grads.V(k, j) += s_ik * static_cast<double>(features(i, j));
    }
  }
  return grads;
}

// ---------------------------------------------------------------------------
// optimizer: AdamW with a cosine learning-rate schedule
// ---------------------------------------------------------------------------

/// peak * 0.5 * (1 + cos(pi * step / total_steps)); no warmup.
inline double cosine_lr(long step, long total_steps, double peak) {
  if (total_steps < 1) throw std::invalid_argument("cosine_lr: total_steps must be >= 1");
  if (step < 0 || step > total_steps) throw std::invalid_argument("cosine_lr: step out of range");
  return peak * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) /
                                      static_cast<double>(total_steps)));
}

struct TrainConfig {
  int epochs = 20;
  double peak_lr = 1e-4;
  double weight_decay = 0.01;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 42;
  Eigen::VectorXd class_weights;  // empty -> inverse-frequency default
};

struct AdamWState {
  Eigen::VectorXd m;
  Eigen::VectorXd v;
  long t = 0;
};

/// Bias-corrected AdamW step with decoupled weight decay:
/// theta -= lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * theta).
inline void adamw_step(Eigen::VectorXd& theta, const Eigen::VectorXd& grad, AdamWState& state,
                       double lr, const TrainConfig& cfg) {
  if (state.t == 0) {
    state.m = Eigen::VectorXd::Zero(theta.size());
    state.v = Eigen::VectorXd::Zero(theta.size());
  }
  if (grad.size() != theta.size() || state.m.size() != theta.size())
    throw std::invalid_argument("adamw_step: size mismatch");
  state.t += 1;
  state.m = cfg.adam_beta1 * state.m + (1.0 - cfg.adam_beta1) * grad;
  state.v = cfg.adam_beta2 * state.v + (1.0 - cfg.adam_beta2) * grad.cwiseProduct(grad);
  const double bias1 = 1.0 - std::pow(cfg.adam_beta1, static_cast<double>(state.t));
  const double bias2 = 1.0 - std::pow(cfg.adam_beta2, static_cast<double>(state.t));
  const Eigen::ArrayXd m_hat = state.m.array() / bias1;
  const Eigen::ArrayXd v_hat = state.v.array() / bias2;
  theta.array() -=
      lr * (m_hat / (v_hat.sqrt() + cfg.adam_eps) + cfg.weight_decay * theta.array());
}

// ---------------------------------------------------------------------------
// parameter packing (flat order: V row-major, w, Wc row-major, bc; the same
// order as the checkpoint payload)
// ---------------------------------------------------------------------------

namespace detail {

inline Eigen::Index abmil_param_count(const AbmilParams& p) {
  return p.V.size() + p.w.size() + p.Wc.size() + p.bc.size();
}

inline Eigen::VectorXd pack_abmil(const AbmilParams& p) {
  Eigen::VectorXd flat(abmil_param_count(p));
  Eigen::Index pos = 0;
  for (Eigen::Index i = 0; i < p.V.rows(); ++i)
    for (Eigen::Index j = 0; j < p.V.cols(); ++j) flat[pos++] = p.V(i, j);
  for (Eigen::Index i = 0; i < p.w.size(); ++i) flat[pos++] = p.w[i];
  for (Eigen::Index i = 0; i < p.Wc.rows(); ++i)
    for (Eigen::Index j = 0; j < p.Wc.cols(); ++j) flat[pos++] = p.Wc(i, j);
  for (Eigen::Index i = 0; i < p.bc.size(); ++i) flat[pos++] = p.bc[i];
  return flat;
}

inline void unpack_abmil(const Eigen::VectorXd& flat, AbmilParams& p) {
  Eigen::Index pos = 0;
  for (Eigen::Index i = 0; i < p.V.rows(); ++i)
    for (Eigen::Index j = 0; j < p.V.cols(); ++j) p.V(i, j) = flat[pos++];
  for (Eigen::Index i = 0; i < p.w.size(); ++i) p.w[i] = flat[pos++];
  for (Eigen::Index i = 0; i < p.Wc.rows(); ++i)
    for (Eigen::Index j = 0; j < p.Wc.cols(); ++j) p.Wc(i, j) = flat[pos++];
  for (Eigen::Index i = 0; i < p.bc.size(); ++i) p.bc[i] = flat[pos++];
}

inline Eigen::VectorXd pack_grads(const AbmilGrads& g) {
  AbmilParams view;
  view.V = g.V;
  view.w = g.w;
  view.Wc = g.Wc;
  view.bc = g.bc;
  return pack_abmil(view);
}

}  // namespace detail

/// Inverse-frequency weights omega_s = n_total / (S * n_s).
inline Eigen::VectorXd inverse_frequency_weights(const std::vector<int>& labels, int num_classes) {
  Eigen::VectorXd counts = Eigen::VectorXd::Zero(num_classes);
  for (int l : labels) {
    if (l < 0 || l >= num_classes) throw std::invalid_argument("class label out of range");
    counts[l] += 1.0;
  }
  for (int s = 0; s < num_classes; ++s)
    if (counts[s] == 0.0)
      throw std::runtime_error("class " + std::to_string(s) + " absent from training split");
  const double total = static_cast<double>(labels.size());
  return total / (static_cast<double>(num_classes) * counts.array());
}

/// Trains ABMIL with batch size one bag, AdamW and the cosine schedule over
/// total_steps = epochs * n_bags. Bag order is reshuffled each epoch from a
/// stream derived from cfg.seed. Pure function of (bags, S, cfg).
inline AbmilParams train_abmil(const std::vector<FeatureBag>& bags, int num_classes,
                               const TrainConfig& cfg) {
  if (bags.empty()) throw std::invalid_argument("train_abmil: no training bags");
  if (num_classes < 2) throw std::invalid_argument("train_abmil: need at least 2 classes");
  if (cfg.epochs < 1 || !(cfg.peak_lr > 0.0)) throw std::invalid_argument("train_abmil: bad config");
  const Eigen::Index d = bags.front().dim();
  std::vector<int> labels;
  labels.reserve(bags.size());
  for (const auto& bag : bags) {
    if (bag.dim() != d) throw std::invalid_argument("train_abmil: dim mismatch across bags");
    labels.push_back(bag.class_label);
  }
  Eigen::VectorXd weights = cfg.class_weights;
  if (weights.size() == 0) {
    weights = inverse_frequency_weights(labels, num_classes);
  } else {
    if (weights.size() != num_classes) throw std::invalid_argument("train_abmil: weight size mismatch");
    inverse_frequency_weights(labels, num_classes);  // still reject absent classes
  }

  Rng init_rng(cfg.seed);
  AbmilParams params = abmil_init(d, num_classes, init_rng);
  Rng shuffle_rng(mix_seed(cfg.seed, 1));

  Eigen::VectorXd flat = detail::pack_abmil(params);
  AdamWState state;
  const long total_steps = static_cast<long>(cfg.epochs) * static_cast<long>(bags.size());
  long step = 0;
  std::vector<std::size_t> order(bags.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    for (std::size_t idx : order) {
      const FeatureBag& bag = bags[idx];
      const AbmilGrads grads = abmil_backward(params, bag.features, bag.class_label, weights);
      const double lr = cosine_lr(step, total_steps, cfg.peak_lr);
      Eigen::VectorXd flat_grads = detail::pack_grads(grads);
      adamw_step(flat, flat_grads, state, lr, cfg);
      detail::unpack_abmil(flat, params);
      ++step;
    }
  }
  return params;
}

/// argmax of softmax(logits); ties go to the lower class index.
inline std::pair<int, Eigen::VectorXd> predict_abmil(const AbmilParams& params,
                                                     const RowMatrixXf& features) {
  const AbmilForward fwd = abmil_forward(params, features);
  const Eigen::VectorXd probs = stable_softmax(fwd.logits);
  int best = 0;
  for (Eigen::Index s = 1; s < probs.size(); ++s)
    if (probs[s] > probs[best]) best = static_cast<int>(s);
  return {best, probs};
}

// ---------------------------------------------------------------------------
// MI-SimpleShot: class centroids of mean-pooled training embeddings, cosine
// similarity at prediction time.
// ---------------------------------------------------------------------------

struct Prototypes {
  Eigen::MatrixXd P;        // S x d
  std::vector<long> counts; // per class
};

inline Prototypes build_prototypes(const std::vector<SlideEmbedding>& embeddings, int num_classes) {
  if (num_classes < 1) throw std::invalid_argument("build_prototypes: need num_classes >= 1");
  if (embeddings.empty()) throw std::invalid_argument("build_prototypes: no embeddings");
  const Eigen::Index d = embeddings.front().z.size();
  Prototypes protos;
  protos.P = Eigen::MatrixXd::Zero(num_classes, d);
  protos.counts.assign(static_cast<std::size_t>(num_classes), 0);
  for (const auto& emb : embeddings) {
    if (emb.z.size() != d) throw std::invalid_argument("build_prototypes: dim mismatch");
    if (emb.class_label < 0 || emb.class_label >= num_classes)
      throw std::invalid_argument("build_prototypes: label out of range");
    protos.P.row(emb.class_label) += emb.z.transpose();
    protos.counts[static_cast<std::size_t>(emb.class_label)]++;
  }
  for (int s = 0; s < num_classes; ++s) {
    const long c = protos.counts[static_cast<std::size_t>(s)];
    if (c == 0) throw std::runtime_error("build_prototypes: empty class " + std::to_string(s));
    protos.P.row(s) /= static_cast<double>(c);
  }
  return protos;
}

/// Cosine similarity against every prototype; argmax with ties to the lower
/// class index.
inline std::pair<int, Eigen::VectorXd> simpleshot_predict(const Prototypes& protos,
                                                          const Eigen::VectorXd& z) {
  if (z.size() != protos.P.cols()) throw std::invalid_argument("simpleshot_predict: dim mismatch");
  const double qn = z.norm();
  if (qn == 0.0) throw std::runtime_error("simpleshot_predict: degenerate cosine (zero-norm query)");
  Eigen::VectorXd sims(protos.P.rows());
  for (Eigen::Index s = 0; s < protos.P.rows(); ++s) {
    const double pn = protos.P.row(s).norm();
    if (pn == 0.0)
      throw std::runtime_error("simpleshot_predict: degenerate cosine (zero-norm prototype)");
    sims[s] = protos.P.row(s).dot(z) / (pn * qn);
  }
  int best = 0;
  for (Eigen::Index s = 1; s < sims.size(); ++s)
    if (sims[s] > sims[best]) best = static_cast<int>(s);
  return {best, sims};
}

/// Optional SimpleShot preprocessing ablation: subtract the training mean and
/// L2-normalize. Applied identically to training embeddings and queries.
inline Eigen::VectorXd embedding_mean(const std::vector<SlideEmbedding>& embeddings) {
  if (embeddings.empty()) throw std::invalid_argument("embedding_mean: empty input");
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(embeddings.front().z.size());
  for (const auto& e : embeddings) mean += e.z;
  return mean / static_cast<double>(embeddings.size());
}

inline Eigen::VectorXd center_l2(const Eigen::VectorXd& z, const Eigen::VectorXd& mean) {
  Eigen::VectorXd v = z - mean;
  const double n = v.norm();
  if (n == 0.0) throw std::runtime_error("center_l2: zero-norm embedding after centering");
  return v / n;
}

// ---------------------------------------------------------------------------
// checkpoint format
//
// offset 0..7  magic "SHBABM01"
// u32 LE d, u32 LE h, u32 LE S
// V, w, Wc, bc as float64 LE, row-major
// ---------------------------------------------------------------------------

inline constexpr std::string_view kAbmilMagic = "SHBABM01";

inline void save_abmil(const AbmilParams& params, const std::filesystem::path& path) {
  std::string bytes;
  bytes.append(kAbmilMagic);
  put_u32_le(bytes, static_cast<std::uint32_t>(params.dim()));
  put_u32_le(bytes, static_cast<std::uint32_t>(params.hidden()));
  put_u32_le(bytes, static_cast<std::uint32_t>(params.num_classes()));
  const Eigen::VectorXd flat = detail::pack_abmil(params);
  for (Eigen::Index i = 0; i < flat.size(); ++i) put_f64_le(bytes, flat[i]);
  write_file(path, bytes);
}

inline AbmilParams load_abmil(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  if (bytes.size() < 20 || std::string_view(bytes.data(), 8) != kAbmilMagic)
    throw std::runtime_error("bad magic in checkpoint " + path.string());
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::uint32_t d = get_u32_le(p + 8);
  const std::uint32_t h = get_u32_le(p + 12);
  const std::uint32_t S = get_u32_le(p + 16);
  if (d < 1 || h < 1 || S < 1) throw std::runtime_error("bad shape in checkpoint " + path.string());
  AbmilParams params;
  params.V.resize(h, d);
  params.w.resize(h);
  params.Wc.resize(S, d);
  params.bc.resize(S);
  const std::uint64_t count = detail::abmil_param_count(params);
  if (bytes.size() != 20 + count * 8)
    throw std::runtime_error("truncated checkpoint " + path.string());
  Eigen::VectorXd flat(static_cast<Eigen::Index>(count));
  const unsigned char* cursor = p + 20;
  for (Eigen::Index i = 0; i < flat.size(); ++i, cursor += 8) flat[i] = get_f64_le(cursor);
  detail::unpack_abmil(flat, params);
  if (!params.V.allFinite() || !params.w.allFinite() || !params.Wc.allFinite() ||
      !params.bc.allFinite())
    throw std::runtime_error("non-finite parameters in checkpoint " + path.string());
  return params;
}

}  // namespace shbmil
