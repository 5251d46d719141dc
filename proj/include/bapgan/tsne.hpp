#pragma once

#include <cstdint>
#include <vector>

#include <Eigen/Dense>

namespace bapgan {

struct TsneOptions {
  double perplexity = 50.0;
  int steps = 500;
  uint64_t seed = 0;
  double learning_rate = 200.0;
  double early_exaggeration = 12.0;
  int exaggeration_steps = 100;
  double initial_momentum = 0.5;
  double final_momentum = 0.8;
  int momentum_switch = 250;
  double entropy_tol = 1e-6;  // nats
};

// Row-conditional affinities p_{j|i} with per-point Gaussian precisions found by
// bisection so that each row's entropy (natural log) equals ln(perplexity).
struct ConditionalAffinities {
  Eigen::MatrixXd p;              // n x n, zero diagonal, rows sum to 1
  std::vector<double> beta;       // 1 / (2 sigma_i^2)
  std::vector<double> entropy;    // achieved, in nats
};

Eigen::MatrixXd squared_distances(const Eigen::MatrixXd& x);
ConditionalAffinities calibrate_affinities(const Eigen::MatrixXd& x, double perplexity,
                                           double tol = 1e-6);

// Exact t-SNE to 2-D. Throws ConfigError unless n > 3 * perplexity. Output is centred.
Eigen::MatrixXd tsne_embed(const Eigen::MatrixXd& x, const TsneOptions& options = {});

}  // namespace bapgan
