#include "aurora/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace aurora::metrics {

void EvalPair::validate(bool need_samples) const {
  if (truth.size() == 0) throw std::invalid_argument("metrics: empty truth");
  if (point.rows() != truth.rows() || point.cols() != truth.cols())
    throw std::invalid_argument("metrics: point/truth shape mismatch");
  if (need_samples && samples.empty()) throw std::invalid_argument("metrics: samples required");
  for (const Matrix& s : samples)
    if (s.rows() != truth.rows() || s.cols() != truth.cols())
      throw std::invalid_argument("metrics: sample/truth shape mismatch");
}

double mse(const EvalPair& pair) {
  pair.validate(false);
  return (pair.truth - pair.point).array().square().mean();
}

double mae(const EvalPair& pair) {
  pair.validate(false);
  return (pair.truth - pair.point).array().abs().mean();
}

double nmae(const EvalPair& pair) {
  pair.validate(false);
  const double denom = pair.truth.array().abs().sum();
  if (denom == 0.0) throw std::domain_error("nmae: truth is all zero, denominator undefined");
  return (pair.truth - pair.point).array().abs().sum() / denom;
}

double crps_empirical(std::vector<double> samples, double truth) {
  if (samples.empty()) throw std::invalid_argument("crps_empirical: empty samples");
  const double n = static_cast<double>(samples.size());
  std::sort(samples.begin(), samples.end());
  // E|X - y| - E|X - X'| / 2, with the pair term from order statistics.
  double abs_term = 0.0, spread = 0.0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    abs_term += std::abs(samples[i] - truth);
    spread += (2.0 * static_cast<double>(i + 1) - n - 1.0) * samples[i];
  }
  return abs_term / n - spread / (n * n);
}

double crps(const EvalPair& pair) {
  pair.validate(true);
  double total = 0.0;
  std::vector<double> buf(pair.samples.size());
  for (Eigen::Index k = 0; k < pair.truth.rows(); ++k)
    for (Eigen::Index t = 0; t < pair.truth.cols(); ++t) {
      for (std::size_t s = 0; s < pair.samples.size(); ++s) buf[s] = pair.samples[s](k, t);
      total += crps_empirical(buf, pair.truth(k, t));
    }
  return total / static_cast<double>(pair.truth.size());
}

void Accumulator::add(const EvalPair& pair) {
  pair.validate(false);
  const Matrix err = pair.truth - pair.point;
  sq += err.array().square().sum();
  abs += err.array().abs().sum();
  truth_abs += pair.truth.array().abs().sum();
  count += pair.truth.size();
  if (!pair.samples.empty()) {
    crps_sum += metrics::crps(pair) * static_cast<double>(pair.truth.size());
    crps_count += pair.truth.size();
  }
}

double Accumulator::mse() const {
  if (count == 0) throw std::logic_error("metrics: nothing accumulated");
  return sq / static_cast<double>(count);
}

double Accumulator::mae() const {
  if (count == 0) throw std::logic_error("metrics: nothing accumulated");
  return abs / static_cast<double>(count);
}

double Accumulator::nmae() const {
  if (truth_abs == 0.0) throw std::domain_error("nmae: truth is all zero, denominator undefined");
  return abs / truth_abs;
}

double Accumulator::crps() const {
  if (crps_count == 0) throw std::logic_error("metrics: no samples accumulated");
  return crps_sum / static_cast<double>(crps_count);
}

}  // namespace aurora::metrics
