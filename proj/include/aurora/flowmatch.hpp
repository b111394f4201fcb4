#pragma once

// Prototype-guided conditional flow matching: the AdaLN-conditioned velocity
// network, its training objective and the Euler sampler.

#include "aurora/autodiff.hpp"
#include "aurora/corpus.hpp"
#include "aurora/nn.hpp"

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace aurora::flow {

using ad::Graph;
using ad::Matrix;
using ad::Var;

struct VelocityNetParams {
  std::vector<nn::Linear> hidden;     // first: (p_time + temb) -> width, then width -> width
  std::vector<nn::Linear> mod_scale;  // d_cond -> width, one per hidden layer
  std::vector<nn::Linear> mod_shift;  // d_cond -> width, one per hidden layer
  nn::Linear out;                     // width -> p_time
  int temb_dim = 16;

  // `n_layers` counts linear layers including the output layer (>= 2).
  // Modulation starts at zero, so every hidden layer begins as plain LN.
  static VelocityNetParams create(nn::ParameterStore& store, const std::string& name, int p_time, int d_cond,
                                  int width, int n_layers, int temb_dim, nn::Rng& rng);
  int p_time() const { return out.out(); }
};

// Sinusoidal embedding of flow times, scaled by 1000 as for diffusion steps.
Matrix timestep_embedding(const Eigen::VectorXd& t, int dim);

// Row r: v(y_t[r] | t[r], h[r]). Each hidden layer is Linear -> LN ->
// (1 + scale(h)) * . + shift(h) -> SiLU.
Var velocity_forward(Graph& g, const VelocityNetParams& params, const Var& y_t, const Eigen::VectorXd& t, const Var& h);

// Mean over rows of || v(t y1 + (1 - t) y0 | h) - (y1 - y0) ||^2.
Var flow_matching_loss(Graph& g, const VelocityNetParams& params, const Var& y0, const Var& y1, const Var& h,
                       const Eigen::VectorXd& t);

struct ForecastDistribution {
  int S = 0;
  int F = 0;
  int p_time = 0;
  Matrix samples;  // (S*F) x p_time, row s*F + i, normalized units
  corpus::NormStats norm_stats;

  Matrix sample(int s) const { return samples.middleRows(static_cast<Eigen::Index>(s) * F, F); }
};

// Velocity for a stack of states at a common flow time.
using VelocityField = std::function<Matrix(const Matrix& y, double t)>;

// J forward Euler steps of size 1/J from t = 0, evaluating at t = j/J.
Matrix euler_integrate(Matrix start, int J, const VelocityField& field);

// N(0, I) draw of width p for one (token, sample) pair; independent of how
// tokens or samples are batched.
Eigen::RowVectorXd token_noise(std::uint64_t seed, int token, int sample, int p);

// Starts every (sample, token) at prototype + noise and integrates `field`.
// `token_ids` (default 0..F-1) key the noise streams.
ForecastDistribution sample_with_field(const Matrix& prototypes, int J, int S, std::uint64_t seed,
                                       const VelocityField& field, std::vector<int> token_ids = {});

// Algorithm as above with the trained velocity network conditioned on
// `conditions` (F x d). Conditions repeat per sample, matching row s*F + i.
ForecastDistribution sample_forecast(const Matrix& conditions, const Matrix& prototypes, int J, int S,
                                     const VelocityNetParams& params, std::uint64_t seed,
                                     std::vector<int> token_ids = {});

enum class PointMode { Mean, Median };

// F x p_time per-element statistic over samples, in original units.
Matrix point_forecast(const ForecastDistribution& dist, PointMode mode = PointMode::Mean);

}  // namespace aurora::flow
