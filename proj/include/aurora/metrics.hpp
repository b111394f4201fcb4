#pragma once

// Point and probabilistic forecast metrics, always in original units.

#include <Eigen/Dense>

#include <vector>

namespace aurora::metrics {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct EvalPair {
  Matrix truth;                  // K x T
  Matrix point;                  // K x T
  std::vector<Matrix> samples;   // n_s draws, each K x T; may be empty

  void validate(bool need_samples) const;
};

double mse(const EvalPair& pair);
double mae(const EvalPair& pair);

// Sum |truth - point| / sum |truth|. Throws if the truth is all zero.
double nmae(const EvalPair& pair);

// Exact CRPS of the empirical CDF of `samples` at `truth`.
double crps_empirical(std::vector<double> samples, double truth);

// crps_empirical averaged over every (k, t) element.
double crps(const EvalPair& pair);

// Sums used for pooling metrics across many windows.
struct Accumulator {
  double sq = 0.0;
  double abs = 0.0;
  double truth_abs = 0.0;
  double crps_sum = 0.0;
  long long count = 0;
  long long crps_count = 0;

  void add(const EvalPair& pair);
  double mse() const;
  double mae() const;
  double nmae() const;
  double crps() const;
};

}  // namespace aurora::metrics
