#include "bapgan/tsne.hpp"

#include <cmath>
#include <limits>
#include <random>

#include "bapgan/errors.hpp"

namespace bapgan {

Eigen::MatrixXd squared_distances(const Eigen::MatrixXd& x) {
  const Eigen::VectorXd norms = x.rowwise().squaredNorm();
  Eigen::MatrixXd d = (-2.0 * x * x.transpose()).colwise() + norms;
  d.rowwise() += norms.transpose();
  d = d.cwiseMax(0.0);
  d.diagonal().setZero();
  return d;
}

ConditionalAffinities calibrate_affinities(const Eigen::MatrixXd& x, double perplexity,
                                           double tol) {
  const auto n = x.rows();
  if (!(perplexity > 0) || n < 2) throw ConfigError("t-SNE needs perplexity > 0 and n >= 2");
  const Eigen::MatrixXd dist = squared_distances(x);
  const double target = std::log(perplexity);
  ConditionalAffinities out;
  out.p = Eigen::MatrixXd::Zero(n, n);
  out.beta.assign(n, 1.0);
  out.entropy.assign(n, 0.0);
  Eigen::VectorXd row(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    // Shifting by the nearest distance leaves the normalized row unchanged
    // but keeps exp() away from underflow for high-dimensional inputs.
    double dmin = std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < n; ++j) {
      if (j != i) dmin = std::min(dmin, dist(i, j));
    }
    double mean_gap = 0;
    for (Eigen::Index j = 0; j < n; ++j) {
      if (j != i) mean_gap += dist(i, j) - dmin;
    }
    mean_gap /= static_cast<double>(n - 1);
    double beta = mean_gap > 0 ? 1.0 / mean_gap : 1.0;
    double lo = 0.0, hi = std::numeric_limits<double>::infinity();
    double h = 0.0;
    for (int iter = 0; iter < 200; ++iter) {
      double sum = 0.0, weighted = 0.0;
      for (Eigen::Index j = 0; j < n; ++j) {
        const double gap = dist(i, j) - dmin;
        row[j] = j == i ? 0.0 : std::exp(-beta * gap);
        sum += row[j];
        weighted += row[j] * gap;
      }
      h = std::log(sum) + beta * weighted / sum;
      row /= sum;
      const double diff = h - target;
      if (std::abs(diff) < tol) break;
      if (diff > 0) {
        lo = beta;
        beta = std::isinf(hi) ? beta * 2.0 : 0.5 * (beta + hi);
      } else {
        hi = beta;
        beta = 0.5 * (beta + lo);
      }
    }
    out.p.row(i) = row.transpose();
    out.beta[i] = beta;
    out.entropy[i] = h;
  }
  return out;
}

Eigen::MatrixXd tsne_embed(const Eigen::MatrixXd& x, const TsneOptions& opt) {
  const auto n = x.rows();
  if (!(static_cast<double>(n) > 3.0 * opt.perplexity)) {
    throw ConfigError("t-SNE perplexity " + std::to_string(opt.perplexity) + " too large for " +
                      std::to_string(n) + " points (need n > 3 * perplexity)");
  }
  if (!x.allFinite()) throw NumericError("t-SNE input has non-finite values");
  if (opt.steps < 0) throw ConfigError("t-SNE steps must be non-negative");

  const auto cond = calibrate_affinities(x, opt.perplexity, opt.entropy_tol);
  Eigen::MatrixXd p = cond.p + cond.p.transpose();
  p /= p.sum();
  p = p.cwiseMax(1e-12);
  p.diagonal().setZero();

  std::mt19937_64 rng(opt.seed);
  std::normal_distribution<double> normal(0.0, 1e-4);
  Eigen::MatrixXd y(n, 2);
  for (Eigen::Index i = 0; i < n; ++i) {
    y(i, 0) = normal(rng);
    y(i, 1) = normal(rng);
  }
  Eigen::MatrixXd update = Eigen::MatrixXd::Zero(n, 2);
  Eigen::MatrixXd gains = Eigen::MatrixXd::Ones(n, 2);
  Eigen::MatrixXd num(n, n);
  Eigen::MatrixXd grad(n, 2);

  for (int step = 0; step < opt.steps; ++step) {
    const double exaggeration = step < opt.exaggeration_steps ? opt.early_exaggeration : 1.0;
    const double momentum = step < opt.momentum_switch ? opt.initial_momentum : opt.final_momentum;
    num = (squared_distances(y).array() + 1.0).inverse().matrix();
    num.diagonal().setZero();
    const double z = num.sum();
    // dC/dy_i = 4 sum_j (p_ij - q_ij) (1 + |y_i - y_j|^2)^-1 (y_i - y_j)
    const Eigen::MatrixXd w = ((exaggeration * p).array() - num.array() / z).matrix().cwiseProduct(num);
    grad = 4.0 * (w.rowwise().sum().asDiagonal() * y - w * y);
    for (Eigen::Index i = 0; i < n; ++i) {
      for (int k = 0; k < 2; ++k) {
        const bool same = (grad(i, k) > 0) == (update(i, k) > 0);
        gains(i, k) = same ? std::max(gains(i, k) * 0.8, 0.01) : gains(i, k) + 0.2;
      }
    }
    update = momentum * update - opt.learning_rate * gains.cwiseProduct(grad);
    y += update;
    y.rowwise() -= y.colwise().mean();
  }
  if (!y.allFinite()) throw NumericError("t-SNE diverged");
  return y;
}

}  // namespace bapgan
