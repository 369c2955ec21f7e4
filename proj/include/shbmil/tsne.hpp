#pragma once

#include <Eigen/Dense>
#include <string>
#include <utility>
#include <vector>

#include "shbmil/common.hpp"

namespace shbmil {

// ---------------------------------------------------------------------------
// exact O(n^2) t-SNE
//
// Gaussian conditionals in the input space calibrated per point to a target
// perplexity, symmetrized joint P, Student-t similarities in the plane, and
// plain momentum gradient descent on KL(P || Q) with early exaggeration.
// ---------------------------------------------------------------------------

struct TsneConfig {
  double perplexity = 30.0;
  int n_iter = 1000;
  double early_exaggeration_factor = 12.0;
  int early_exaggeration_iters = 250;
  double learning_rate = 200.0;
  double initial_momentum = 0.5;
  double final_momentum = 0.8;
  int momentum_switch_iter = 250;
  double init_std = 1e-4;
  std::uint64_t seed = 42;
};

struct Embedding2D {
  Eigen::MatrixXd points;  // n x 2, row i <-> input row i
  double final_kl = 0.0;
  std::vector<std::pair<int, double>> kl_trace;  // (iteration, KL vs un-exaggerated P)
};

/// Probability floor applied inside logarithms only.
inline constexpr double kProbFloor = 1e-12;

/// Requested perplexity, clamped to max(2, (n-1)/3) for small n. The floor at
/// 2 keeps explicitly small settings usable on tiny inputs.
inline double effective_perplexity(double requested, Eigen::Index n) {
  return std::min(requested, std::max(2.0, (static_cast<double>(n) - 1.0) / 3.0));
}

/// Symmetric matrix of squared Euclidean distances, zero diagonal, entries
/// clamped at 0. Uses the Gram expansion |x|^2 + |y|^2 - 2 x.y.
inline Eigen::MatrixXd pairwise_sq_dists(const Eigen::MatrixXd& X) {
  const Eigen::Index n = X.rows();
  if (n < 2) throw std::invalid_argument("pairwise_sq_dists: need n >= 2");
  if (!X.allFinite()) throw std::invalid_argument("pairwise_sq_dists: non-finite input");
  const Eigen::VectorXd sq = X.rowwise().squaredNorm();
  const Eigen::MatrixXd gram = X * X.transpose();
  Eigen::MatrixXd D(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    D(i, i) = 0.0;
    for (Eigen::Index j = i + 1; j < n; ++j) {
      const double v = std::max(0.0, sq[i] + sq[j] - 2.0 * gram(i, j));
      D(i, j) = v;
      D(j, i) = v;
    }
  }
  return D;
}

/// Row-stochastic conditional Gaussians p_{j|i}. Per row, the bandwidth is
/// found by bisection (<= 64 halvings) until 2^H matches the perplexity to
/// 1e-3.
inline Eigen::MatrixXd calibrate_conditionals(const Eigen::MatrixXd& D, double perplexity) {
  const Eigen::Index n = D.rows();
  if (D.cols() != n) throw std::invalid_argument("calibrate_conditionals: D must be square");
  if (!(perplexity > 1.0) || !(perplexity < static_cast<double>(n)))
    throw std::invalid_argument("calibrate_conditionals: need 1 < perplexity < n");

  constexpr double kTol = 1e-3;
  constexpr int kMaxIter = 64;
  Eigen::MatrixXd P = Eigen::MatrixXd::Zero(n, n);
  std::vector<double> row(static_cast<std::size_t>(n));

  for (Eigen::Index i = 0; i < n; ++i) {
    double dmin = std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < n; ++j)
      if (j != i) dmin = std::min(dmin, D(i, j));

    // Perplexity 2^H of the row at precision beta; fills `row` with p_{j|i}.
    const auto eval = [&](double beta) {
      double sum = 0.0;
      for (Eigen::Index j = 0; j < n; ++j) {
        const double p = (j == i) ? 0.0 : std::exp(-(D(i, j) - dmin) * beta);
        row[static_cast<std::size_t>(j)] = p;
        sum += p;
      }
      double entropy_bits = 0.0;
      for (Eigen::Index j = 0; j < n; ++j) {
        double& p = row[static_cast<std::size_t>(j)];
        p /= sum;
        if (p > 0.0) entropy_bits -= p * std::log2(p);
      }
      return std::exp2(entropy_bits);
    };

    double beta = 1.0;
    double pe = eval(beta);
    bool done = std::abs(pe - perplexity) <= kTol;

    double lo = 0.0, hi = std::numeric_limits<double>::infinity();
    if (!done) {
      // Bracket: 2^H decreases as beta grows.
      if (pe > perplexity) {
        lo = beta;
        for (int it = 0; it < kMaxIter && !done; ++it) {
          beta *= 2.0;
          pe = eval(beta);
          done = std::abs(pe - perplexity) <= kTol;
          if (pe > perplexity) lo = beta;
          else { hi = beta; break; }
        }
      } else {
        hi = beta;
        for (int it = 0; it < kMaxIter && !done; ++it) {
          beta /= 2.0;
          pe = eval(beta);
          done = std::abs(pe - perplexity) <= kTol;
          if (pe < perplexity) hi = beta;
          else { lo = beta; break; }
        }
      }
    }
    for (int it = 0; it < kMaxIter && !done; ++it) {
      if (!std::isfinite(hi) || !(lo < hi)) break;
      beta = 0.5 * (lo + hi);
      pe = eval(beta);
      done = std::abs(pe - perplexity) <= kTol;
      if (pe > perplexity) lo = beta;
      else hi = beta;
    }
    if (!done)
      throw std::runtime_error("calibrate_conditionals: bisection failed for row " + std::to_string(i));
    for (Eigen::Index j = 0; j < n; ++j) P(i, j) = row[static_cast<std::size_t>(j)];
  }
  return P;
}

/// Joint affinities p_ij = (p_{j|i} + p_{i|j}) / (2n): symmetric, zero
/// diagonal, total mass 1.
inline Eigen::MatrixXd symmetrize_conditionals(const Eigen::MatrixXd& Pcond) {
  const Eigen::Index n = Pcond.rows();
  if (Pcond.cols() != n) throw std::invalid_argument("symmetrize_conditionals: square input required");
  Eigen::MatrixXd P(n, n);
  const double scale = 1.0 / (2.0 * static_cast<double>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    P(i, i) = 0.0;
    for (Eigen::Index j = i + 1; j < n; ++j) {
      const double v = (Pcond(i, j) + Pcond(j, i)) * scale;
      P(i, j) = v;
      P(j, i) = v;
    }
  }
  return P;
}

namespace detail {

/// Student-t kernel values num_ij = 1/(1 + |y_i - y_j|^2) with zero diagonal,
/// plus their total sum (fixed reduction order).
inline std::pair<Eigen::MatrixXd, double> student_t_kernel(const Eigen::MatrixXd& Y) {
  const Eigen::Index n = Y.rows();
  Eigen::MatrixXd num = Eigen::MatrixXd::Zero(n, n);
  double total = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = i + 1; j < n; ++j) {
      const double dx = Y(i, 0) - Y(j, 0);
      const double dy = Y(i, 1) - Y(j, 1);
      const double v = 1.0 / (1.0 + dx * dx + dy * dy);
      num(i, j) = v;
      num(j, i) = v;
      total += 2.0 * v;
    }
  }
  return {num, total};
}

}  // namespace detail

/// KL(P || Q) where Q is the normalized Student-t kernel of the 2-D points.
/// Probabilities are floored at kProbFloor inside the logarithm.
inline double kl_divergence(const Eigen::MatrixXd& P, const Eigen::MatrixXd& Y) {
  const Eigen::Index n = Y.rows();
  if (P.rows() != n || P.cols() != n)
    throw std::invalid_argument("kl_divergence: P must be n x n for n points");
  if (n < 2) throw std::invalid_argument("kl_divergence: need n >= 2");
  const auto [num, total] = detail::student_t_kernel(Y);
  double kl = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) {
      if (i == j) continue;
      const double p = P(i, j);
      if (p > 0.0) {
        const double q = num(i, j) / total;
        kl += p * std::log(std::max(p, kProbFloor) / std::max(q, kProbFloor));
      }
    }
  }
  return kl;
}

/// Analytic gradient of KL(P || Q) with respect to the 2-D points:
/// grad_i = 4 sum_j (p_ij - q_ij) (y_i - y_j) / (1 + |y_i - y_j|^2).
inline Eigen::MatrixXd kl_gradient(const Eigen::MatrixXd& P, const Eigen::MatrixXd& Y) {
  const Eigen::Index n = Y.rows();
  const auto [num, total] = detail::student_t_kernel(Y);
  Eigen::MatrixXd grad = Eigen::MatrixXd::Zero(n, 2);
  for (Eigen::Index i = 0; i < n; ++i) {
    double gx = 0.0, gy = 0.0;
    for (Eigen::Index j = 0; j < n; ++j) {
      if (j == i) continue;
      const double mult = (P(i, j) - num(i, j) / total) * num(i, j);
      gx += mult * (Y(i, 0) - Y(j, 0));
      gy += mult * (Y(i, 1) - Y(j, 1));
    }
    grad(i, 0) = 4.0 * gx;
    grad(i, 1) = 4.0 * gy;
  }
  return grad;
}

/// Full embedding run. Deterministic given (Z, cfg); the KL trace is recorded
/// every 50 iterations, at the early-exaggeration switch and at the final
/// iteration, always against the un-exaggerated P.
inline Embedding2D tsne_embed(const Eigen::MatrixXd& Z, const TsneConfig& cfg) {
  const Eigen::Index n = Z.rows();
  if (n < 4) throw std::invalid_argument("tsne_embed: need n >= 4 points");
  if (cfg.n_iter < 1) throw std::invalid_argument("tsne_embed: n_iter must be >= 1");
  if (cfg.early_exaggeration_iters < 0 || cfg.momentum_switch_iter < 0 ||
      cfg.early_exaggeration_iters > cfg.n_iter || cfg.momentum_switch_iter > cfg.n_iter)
    throw std::invalid_argument("tsne_embed: schedule outside [0, n_iter]");
  if (!(cfg.init_std > 0.0) || !(cfg.learning_rate > 0.0))
    throw std::invalid_argument("tsne_embed: init_std and learning_rate must be > 0");
  const double perp = effective_perplexity(cfg.perplexity, n);
  if (!(perp < static_cast<double>(n)))
    throw std::invalid_argument("tsne_embed: perplexity must be < n");

  const Eigen::MatrixXd P =
      symmetrize_conditionals(calibrate_conditionals(pairwise_sq_dists(Z), perp));

  Rng rng(cfg.seed);
  Eigen::MatrixXd Y(n, 2);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index k = 0; k < 2; ++k) Y(i, k) = cfg.init_std * rng.normal();
  Eigen::MatrixXd velocity = Eigen::MatrixXd::Zero(n, 2);

  Embedding2D out;
  const Eigen::MatrixXd P_exaggerated = cfg.early_exaggeration_factor * P;
  for (int iter = 1; iter <= cfg.n_iter; ++iter) {
    const bool exaggerated = iter <= cfg.early_exaggeration_iters;
    const Eigen::MatrixXd grad = kl_gradient(exaggerated ? P_exaggerated : P, Y);
    const double momentum = iter <= cfg.momentum_switch_iter ? cfg.initial_momentum : cfg.final_momentum;
    velocity = momentum * velocity - cfg.learning_rate * grad;
    Y += velocity;
    Y.rowwise() -= Y.colwise().mean();
    if (!Y.allFinite())
      throw std::runtime_error("tsne_embed: non-finite update at iteration " + std::to_string(iter));
    if (iter % 50 == 0 || iter == cfg.early_exaggeration_iters || iter == cfg.n_iter) {
      if (out.kl_trace.empty() || out.kl_trace.back().first != iter)
        out.kl_trace.emplace_back(iter, kl_divergence(P, Y));
    }
  }
  out.points = std::move(Y);
  out.final_kl = out.kl_trace.back().second;
  return out;
}

/// Optional trace dump: CSV `iter,kl`.
inline void write_kl_trace_csv(const Embedding2D& emb, const std::filesystem::path& path) {
  std::string csv = "iter,kl\n";
  for (const auto& [iter, kl] : emb.kl_trace) {
    csv += std::to_string(iter);
    csv += ',';
    csv += format_double(kl);
    csv += '\n';
  }
  write_file(path, csv);
}

}  // namespace shbmil
