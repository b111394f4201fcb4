#include "aurora/flowmatch.hpp"

#include "oracles.hpp"
#include "support.hpp"

#include <doctest.h>

#include <cmath>
#include <numeric>

using namespace aurora;
using namespace aurora::flow;
using ad::Parameter;
using testsupport::check_gradients;
using testsupport::random_matrix;
using testsupport::randomize;

namespace {

struct Net {
  nn::ParameterStore store;
  VelocityNetParams params;

  Net(int p, int d, int width, int layers, std::uint64_t seed, bool randomized = true) {
    nn::Rng rng(seed);
    params = VelocityNetParams::create(store, "v", p, d, width, layers, 8, rng);
    if (randomized) randomize(store, seed);
  }
};

Matrix velocity(const VelocityNetParams& params, const Matrix& y, const Eigen::VectorXd& t, const Matrix& h) {
  Graph g(false);
  return velocity_forward(g, params, g.constant(y), t, g.constant(h)).value();
}

}  // namespace

TEST_CASE("velocity network gradients match finite differences") {
  Net net(4, 4, 6, 3, 1);
  Parameter& y = net.store.create("y", random_matrix(5, 4, 2));
  Parameter& h = net.store.create("h", random_matrix(5, 4, 3));
  Eigen::VectorXd t(5);
  t << 0.0, 0.1, 0.5, 0.77, 1.0;
  auto r = check_gradients(net.store.all(), [&](Graph& g) {
    return ad::mean_row_sq_norm(velocity_forward(g, net.params, g.param(y), t, g.param(h)));
  });
  CHECK(r.max_rel < 1e-4);
  auto rl = check_gradients(net.store.all(), [&](Graph& g) {
    return flow_matching_loss(g, net.params, g.param(y), g.constant(random_matrix(5, 4, 4)), g.param(h), t);
  });
  CHECK(rl.max_rel < 1e-4);
}

TEST_CASE("zero modulation and zero output layer give zero velocity") {
  Net net(4, 3, 8, 3, 5, false);
  net.params.out.weight->value.setZero();
  net.params.out.bias->value.setZero();
  Eigen::VectorXd t = Eigen::VectorXd::LinSpaced(6, 0.0, 1.0);
  CHECK(velocity(net.params, random_matrix(6, 4, 6), t, random_matrix(6, 3, 7)).norm() == 0.0);
}

TEST_CASE("conditions act only through the modulation weights") {
  Net net(4, 3, 8, 2, 8);
  for (auto* lin : {&net.params.mod_scale[0], &net.params.mod_shift[0]}) lin->weight->value.row(1).setZero();
  const Matrix y = random_matrix(4, 4, 9);
  Matrix h = random_matrix(4, 3, 10);
  const Eigen::VectorXd t = Eigen::VectorXd::Constant(4, 0.3);
  const Matrix a = velocity(net.params, y, t, h);
  h.col(1).array() += 5.0;
  CHECK((velocity(net.params, y, t, h) - a).norm() == 0.0);
  h.col(0).array() += 1.0;
  CHECK((velocity(net.params, y, t, h) - a).norm() > 1e-6);
}

TEST_CASE("velocity input validation") {
  Net net(4, 3, 8, 2, 11);
  Graph g(false);
  CHECK_THROWS(velocity_forward(g, net.params, g.constant(random_matrix(2, 4, 1)), Eigen::Vector2d(0.5, 1.5),
                                g.constant(random_matrix(2, 3, 2))));
  Matrix bad = random_matrix(2, 4, 3);
  bad(1, 2) = std::nan("");
  CHECK_THROWS(
      velocity_forward(g, net.params, g.constant(bad), Eigen::Vector2d(0.5, 0.5), g.constant(random_matrix(2, 3, 2))));
  CHECK_THROWS(velocity_forward(g, net.params, g.constant(random_matrix(2, 5, 1)), Eigen::Vector2d(0.5, 0.5),
                                g.constant(random_matrix(2, 3, 2))));
  nn::Rng rng(1);
  CHECK_THROWS(VelocityNetParams::create(net.store, "w", 4, 3, 8, 1, 8, rng));
}

TEST_CASE("flow matching loss examples") {
  Net net(2, 2, 4, 2, 12, false);
  net.params.out.weight->value.setZero();
  net.params.out.bias->value.setZero();
  Matrix y0 = Matrix::Zero(1, 2), y1(1, 2);
  y1 << 3.0, 4.0;
  Graph g(false);
  const Eigen::VectorXd t = Eigen::VectorXd::Constant(1, 0.4);
  CHECK(flow_matching_loss(g, net.params, g.constant(y0), g.constant(y1), g.constant(Matrix::Zero(1, 2)), t)
            .value()(0, 0) == 25.0);

  // An output bias of exactly y1 - y0 and zero weights makes the loss vanish.
  net.params.out.bias->value = y1 - y0;
  CHECK(flow_matching_loss(g, net.params, g.constant(y0), g.constant(y1), g.constant(Matrix::Zero(1, 2)), t)
            .value()(0, 0) == 0.0);
}

TEST_CASE("zero-network loss is symmetric under component permutations") {
  Net net(5, 2, 4, 2, 13, false);
  net.params.out.weight->value.setZero();
  net.params.out.bias->value.setZero();
  const Matrix y0 = random_matrix(3, 5, 14), y1 = random_matrix(3, 5, 15);
  std::vector<int> perm{3, 0, 4, 1, 2};
  Matrix py0(3, 5), py1(3, 5);
  for (int c = 0; c < 5; ++c) {
    py0.col(c) = y0.col(perm[c]);
    py1.col(c) = y1.col(perm[c]);
  }
  const Eigen::VectorXd t = Eigen::VectorXd::LinSpaced(3, 0.1, 0.9);
  Graph g(false);
  const Matrix h = random_matrix(3, 2, 16);
  const double a = flow_matching_loss(g, net.params, g.constant(y0), g.constant(y1), g.constant(h), t).value()(0, 0);
  const double b = flow_matching_loss(g, net.params, g.constant(py0), g.constant(py1), g.constant(h), t).value()(0, 0);
  CHECK(std::abs(a - b) < 1e-12);
}

TEST_CASE("Monte-Carlo loss over t matches quadrature") {
  Net net(4, 3, 8, 2, 17);
  const Eigen::RowVectorXd y0 = random_matrix(1, 4, 18), y1 = random_matrix(1, 4, 19), h = random_matrix(1, 3, 20);
  auto mean_loss = [&](const Eigen::VectorXd& t) {
    const Eigen::Index n = t.size();
    Graph g(false);
    return flow_matching_loss(g, net.params, g.constant(y0.replicate(n, 1)), g.constant(y1.replicate(n, 1)),
                              g.constant(h.replicate(n, 1)), t)
        .value()(0, 0);
  };
  const int n = 100000;
  Eigen::VectorXd mid(n);
  for (int i = 0; i < n; ++i) mid(i) = (i + 0.5) / n;
  const double quadrature = mean_loss(mid);
  std::mt19937_64 rng(21);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  Eigen::VectorXd draws(n);
  for (int i = 0; i < n; ++i) draws(i) = unif(rng);
  CHECK(std::abs(mean_loss(draws) - quadrature) < 0.01 * quadrature);
}

TEST_CASE("one Euler step of the straight-line field lands on the target") {
  const Matrix proto = random_matrix(3, 4, 22), target = random_matrix(3, 4, 23);
  const int S = 5;
  Matrix start(S * 3, 4);
  for (int s = 0; s < S; ++s)
    for (int i = 0; i < 3; ++i) start.row(s * 3 + i) = proto.row(i) + token_noise(24, i, s, 4);
  const Matrix tiled = target.replicate(S, 1);
  const Matrix velocity_const = tiled - start;
  const ForecastDistribution d =
      sample_with_field(proto, 1, S, 24, [&](const Matrix&, double) { return velocity_const; });
  CHECK((d.samples - tiled).cwiseAbs().maxCoeff() < 1e-14);
  CHECK_THROWS(sample_with_field(proto, 0, S, 24, [&](const Matrix& y, double) { return y; }));
  CHECK_THROWS(sample_with_field(proto, 1, 0, 24, [&](const Matrix& y, double) { return y; }));
}

TEST_CASE("Euler error on a linear field is first order") {
  const oracles::LinearField field;
  const Matrix y0 = random_matrix(6, 2, 25);
  std::vector<int> Js{16, 32, 64};
  std::vector<double> err;
  for (int J : Js) err.push_back(field.euler_error(y0, J));
  CHECK(std::abs(oracles::loglog_slope(Js, err) + 1.0) < 0.2);
  CHECK(err[0] / err[1] == doctest::Approx(2.0).epsilon(0.2));
  CHECK(err[1] / err[2] == doctest::Approx(2.0).epsilon(0.2));
}

TEST_CASE("sampling is deterministic and independent of token order") {
  Net net(4, 3, 8, 3, 26);
  const Matrix cond = random_matrix(3, 3, 27), proto = random_matrix(3, 4, 28);
  const ForecastDistribution a = sample_forecast(cond, proto, 4, 6, net.params, 99);
  const ForecastDistribution b = sample_forecast(cond, proto, 4, 6, net.params, 99);
  CHECK((a.samples - b.samples).norm() == 0.0);
  const ForecastDistribution other = sample_forecast(cond, proto, 4, 6, net.params, 100);
  CHECK((a.samples - other.samples).norm() > 1e-3);

  // Reverse the token order while keeping each token's id.
  Matrix rc(3, 3), rp(3, 4);
  for (int i = 0; i < 3; ++i) {
    rc.row(i) = cond.row(2 - i);
    rp.row(i) = proto.row(2 - i);
  }
  const ForecastDistribution r = sample_forecast(rc, rp, 4, 6, net.params, 99, {2, 1, 0});
  for (int s = 0; s < 6; ++s)
    for (int i = 0; i < 3; ++i) CHECK((r.samples.row(s * 3 + 2 - i) - a.samples.row(s * 3 + i)).norm() < 1e-12);

  // A single token sampled alone sees the same noise stream.
  const ForecastDistribution one =
      sample_forecast(Matrix(cond.row(1)), Matrix(proto.row(1)), 4, 6, net.params, 99, {1});
  for (int s = 0; s < 6; ++s) CHECK((one.samples.row(s) - a.samples.row(s * 3 + 1)).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("token noise is standard normal per (token, sample)") {
  const Eigen::RowVectorXd a = token_noise(1, 2, 3, 8);
  CHECK((a - token_noise(1, 2, 3, 8)).norm() == 0.0);
  CHECK((a - token_noise(1, 3, 2, 8)).norm() > 0.0);
  double m = 0.0, q = 0.0;
  const int n = 4000;
  for (int s = 0; s < n; ++s) {
    const double v = token_noise(5, 0, s, 1)(0);
    m += v;
    q += v * v;
  }
  m /= n;
  q = q / n - m * m;
  CHECK(std::abs(m) < 0.06);
  CHECK(std::abs(q - 1.0) < 0.08);
}

TEST_CASE("point forecast statistics") {
  ForecastDistribution d;
  d.S = 1;
  d.F = 2;
  d.p_time = 3;
  d.samples = random_matrix(2, 3, 30);
  d.norm_stats = {2.0, 3.0};
  CHECK((point_forecast(d) - (d.samples.array() * 3.0 + 2.0).matrix()).cwiseAbs().maxCoeff() < 1e-12);

  ForecastDistribution sym;
  sym.S = 4;
  sym.F = 1;
  sym.p_time = 2;
  sym.samples.resize(4, 2);
  sym.samples << 1, 5, 3, 6, -1, 4, 5, 1;  // column means 2 and 4
  sym.norm_stats = {0.0, 1.0};
  Matrix mean = point_forecast(sym);
  CHECK(mean(0, 0) == doctest::Approx(2.0));
  CHECK(mean(0, 1) == doctest::Approx(4.0));

  ForecastDistribution med;
  med.S = 3;
  med.F = 1;
  med.p_time = 1;
  med.samples.resize(3, 1);
  med.samples << 100, 1, 2;
  med.norm_stats = {0.0, 1.0};
  CHECK(point_forecast(med, PointMode::Median)(0, 0) == 2.0);
  med.S = 0;
  CHECK_THROWS(point_forecast(med));
}

TEST_CASE("a single-pair velocity net learns to transport noise onto the target") {
  const oracles::SinglePairResult r = oracles::train_single_pair(0, 600);
  CHECK(std::isfinite(r.loss));
  CHECK(r.loss_early_t < r.loss);
  CHECK(r.sample_error < 0.15);
}
