#include "aurora/flowmatch.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>

namespace aurora::flow {

VelocityNetParams VelocityNetParams::create(nn::ParameterStore& store, const std::string& name, int p_time, int d_cond,
                                            int width, int n_layers, int temb_dim, nn::Rng& rng) {
  if (n_layers < 2) throw std::invalid_argument("velocity net needs at least 2 layers");
  VelocityNetParams p;
  p.temb_dim = temb_dim;
  int in = p_time + temb_dim;
  for (int l = 0; l < n_layers - 1; ++l) {
    const std::string ln = name + ".layer" + std::to_string(l);
    p.hidden.push_back(nn::Linear::create(store, ln + ".linear", in, width, true, rng));
    p.mod_scale.push_back(nn::Linear::zeros(store, ln + ".mod_scale", d_cond, width, true));
    p.mod_shift.push_back(nn::Linear::zeros(store, ln + ".mod_shift", d_cond, width, true));
    in = width;
  }
  p.out = nn::Linear::create(store, name + ".out", width, p_time, true, rng, 0.5);
  return p;
}

Matrix timestep_embedding(const Eigen::VectorXd& t, int dim) {
  std::vector<double> pos(static_cast<std::size_t>(t.size()));
  for (Eigen::Index i = 0; i < t.size(); ++i) pos[static_cast<std::size_t>(i)] = 1000.0 * t(i);
  return nn::sinusoidal_embedding(pos, dim);
}

Var velocity_forward(Graph& g, const VelocityNetParams& params, const Var& y_t, const Eigen::VectorXd& t, const Var& h) {
  if (t.size() != y_t.rows() || h.rows() != y_t.rows()) throw std::invalid_argument("velocity_forward: row mismatch");
  if (y_t.cols() != params.p_time()) throw std::invalid_argument("velocity_forward: state width mismatch");
  for (Eigen::Index i = 0; i < t.size(); ++i)
    if (!(t(i) >= 0.0 && t(i) <= 1.0)) throw std::invalid_argument("velocity_forward: t outside [0, 1]");
  if (!y_t.value().allFinite() || !h.value().allFinite())
    throw std::invalid_argument("velocity_forward: non-finite input");
  Var x = ad::concat_cols(y_t, g.constant(timestep_embedding(t, params.temb_dim)));
  for (std::size_t l = 0; l < params.hidden.size(); ++l) {
    Var z = ad::layer_norm(params.hidden[l](g, x), nullptr, nullptr, 1e-6);
    x = ad::silu(ad::modulate(z, params.mod_scale[l](g, h), params.mod_shift[l](g, h)));
  }
  return params.out(g, x);
}

Var flow_matching_loss(Graph& g, const VelocityNetParams& params, const Var& y0, const Var& y1, const Var& h,
                       const Eigen::VectorXd& t) {
  Var delta = ad::sub(y1, y0);
  Var y_t = ad::add(y0, ad::scale_rows(delta, t));
  return ad::mean_row_sq_norm(ad::sub(velocity_forward(g, params, y_t, t, h), delta));
}

Matrix euler_integrate(Matrix start, int J, const VelocityField& field) {
  if (J < 1) throw std::invalid_argument("euler_integrate: J must be >= 1");
  const double dt = 1.0 / J;
  for (int j = 0; j < J; ++j) start += field(start, j * dt) * dt;
  return start;
}

Eigen::RowVectorXd token_noise(std::uint64_t seed, int token, int sample, int p) {
  nn::Rng rng(nn::derive_seed(seed, {static_cast<std::uint64_t>(token), static_cast<std::uint64_t>(sample)}));
  std::normal_distribution<double> gauss(0.0, 1.0);
  Eigen::RowVectorXd eps(p);
  for (int i = 0; i < p; ++i) eps(i) = gauss(rng);
  return eps;
}

ForecastDistribution sample_with_field(const Matrix& prototypes, int J, int S, std::uint64_t seed,
                                       const VelocityField& field, std::vector<int> token_ids) {
  if (J < 1) throw std::invalid_argument("sample_forecast: J must be >= 1");
  if (S < 1) throw std::invalid_argument("sample_forecast: S must be >= 1");
  const int F = static_cast<int>(prototypes.rows()), p = static_cast<int>(prototypes.cols());
  if (token_ids.empty())
    for (int i = 0; i < F; ++i) token_ids.push_back(i);
  if (static_cast<int>(token_ids.size()) != F) throw std::invalid_argument("sample_forecast: token id count");
  Matrix start(static_cast<Eigen::Index>(S) * F, p);
  for (int s = 0; s < S; ++s)
    for (int i = 0; i < F; ++i) start.row(s * F + i) = prototypes.row(i) + token_noise(seed, token_ids[i], s, p);
  ForecastDistribution dist;
  dist.S = S;
  dist.F = F;
  dist.p_time = p;
  dist.samples = euler_integrate(std::move(start), J, field);
  if (!dist.samples.allFinite()) throw std::runtime_error("sample_forecast: non-finite samples");
  return dist;
}

ForecastDistribution sample_forecast(const Matrix& conditions, const Matrix& prototypes, int J, int S,
                                     const VelocityNetParams& params, std::uint64_t seed, std::vector<int> token_ids) {
  if (conditions.rows() != prototypes.rows()) throw std::invalid_argument("sample_forecast: F mismatch");
  const Matrix h = conditions.replicate(S, 1);
  VelocityField field = [&](const Matrix& y, double t) {
    Graph g(false);
    Eigen::VectorXd tv = Eigen::VectorXd::Constant(y.rows(), t);
    return Matrix(velocity_forward(g, params, g.constant(y), tv, g.constant(h)).value());
  };
  return sample_with_field(prototypes, J, S, seed, field, std::move(token_ids));
}

Matrix point_forecast(const ForecastDistribution& dist, PointMode mode) {
  if (dist.S < 1) throw std::invalid_argument("point_forecast: no samples");
  Matrix out(dist.F, dist.p_time);
  std::vector<double> buf(static_cast<std::size_t>(dist.S));
  for (int i = 0; i < dist.F; ++i) {
    for (int c = 0; c < dist.p_time; ++c) {
      for (int s = 0; s < dist.S; ++s) buf[s] = dist.samples(s * dist.F + i, c);
      double v;
      if (mode == PointMode::Mean) {
        v = 0.0;
        for (double x : buf) v += x;
        v /= dist.S;
      } else {
        std::sort(buf.begin(), buf.end());
        v = dist.S % 2 == 1 ? buf[dist.S / 2] : 0.5 * (buf[dist.S / 2 - 1] + buf[dist.S / 2]);
      }
      out(i, c) = v * dist.norm_stats.sigma + dist.norm_stats.mu;
    }
  }
  return out;
}

}  // namespace aurora::flow
