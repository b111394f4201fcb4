#pragma once

// Shared helpers for the unit and acceptance suites: random tensors and a
// central-difference gradient checker.

#include "aurora/autodiff.hpp"
#include "aurora/nn.hpp"

#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

namespace testsupport {

using aurora::ad::Graph;
using aurora::ad::Matrix;
using aurora::ad::Parameter;
using aurora::ad::Var;

inline Matrix random_matrix(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, scale);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = gauss(rng);
  return m;
}

// Overwrites every parameter with full double-precision draws.
inline void randomize(aurora::nn::ParameterStore& store, std::uint64_t seed, double scale = 0.5) {
  std::uint64_t k = 0;
  for (Parameter* p : store.all()) {
    p->value = random_matrix(p->value.rows(), p->value.cols(), seed * 7919 + ++k, scale);
    p->zero_grad();
  }
}

struct GradCheck {
  double max_rel = 0.0;
  std::string worst;
  int tensors = 0;
};

// Per tensor: ||analytic - numeric|| / max(||analytic||, ||numeric||, 1e-12),
// numeric from central differences with step h. Reports the worst tensor.
inline GradCheck check_gradients(const std::vector<Parameter*>& params, const std::function<Var(Graph&)>& loss_fn,
                                 double h = 1e-5) {
  for (Parameter* p : params) p->zero_grad();
  {
    Graph g;
    Var loss = loss_fn(g);
    g.backward(loss);
  }
  auto eval = [&]() {
    Graph g(false);
    return loss_fn(g).value()(0, 0);
  };
  GradCheck out;
  for (Parameter* p : params) {
    Matrix numeric(p->value.rows(), p->value.cols());
    for (Eigen::Index i = 0; i < p->value.size(); ++i) {
      const double orig = p->value.data()[i];
      p->value.data()[i] = orig + h;
      const double up = eval();
      p->value.data()[i] = orig - h;
      const double down = eval();
      p->value.data()[i] = orig;
      numeric.data()[i] = (up - down) / (2.0 * h);
    }
    const double denom = std::max({p->grad.norm(), numeric.norm(), 1e-12});
    const double rel = (p->grad - numeric).norm() / denom;
    ++out.tensors;
    if (rel > out.max_rel || out.worst.empty()) {
      out.max_rel = std::max(out.max_rel, rel);
      if (rel >= out.max_rel) out.worst = p->name;
    }
  }
  return out;
}

// Scalar loss with generic weights so no gradient is accidentally symmetric.
inline Var weighted_sum(Graph& g, const Var& x, std::uint64_t seed) {
  return aurora::ad::sum(aurora::ad::mul(x, g.constant(random_matrix(x.rows(), x.cols(), seed))));
}

}  // namespace testsupport
