#include "support.hpp"

#include <doctest.h>

using namespace aurora;
using ad::Graph;
using ad::Matrix;
using ad::Parameter;
using ad::Var;
using testsupport::check_gradients;
using testsupport::random_matrix;
using testsupport::weighted_sum;

namespace {

Parameter make_param(const std::string& name, Eigen::Index r, Eigen::Index c, std::uint64_t seed, double scale = 1.0) {
  Parameter p{name, random_matrix(r, c, seed, scale), Matrix()};
  p.zero_grad();
  return p;
}

constexpr double kTol = 1e-6;

}  // namespace

TEST_CASE("elementwise and matrix ops pass finite-difference checks") {
  Parameter a = make_param("a", 3, 4, 1), b = make_param("b", 4, 2, 2), c = make_param("c", 3, 4, 3);
  Parameter row = make_param("row", 1, 4, 4);
  auto r = check_gradients({&a, &b, &c, &row}, [&](Graph& g) {
    Var A = g.param(a), B = g.param(b), C = g.param(c);
    Var x = ad::add_row(ad::add(ad::mul(A, C), ad::sub(A, ad::scale(C, 0.3))), g.param(row));
    Var y = ad::matmul(ad::gelu(x), B);
    return ad::add(weighted_sum(g, ad::silu(y), 10), ad::mean_row_sq_norm(ad::softmax_rows(x)));
  });
  CHECK(r.max_rel < kTol);
}

TEST_CASE("layer norm and modulation gradients") {
  Parameter x = make_param("x", 4, 6, 5), gain = make_param("gain", 1, 6, 6), bias = make_param("bias", 1, 6, 7);
  Parameter sc = make_param("scale", 4, 6, 8), sh = make_param("shift", 4, 6, 9);
  auto r = check_gradients({&x, &gain, &bias, &sc, &sh}, [&](Graph& g) {
    Var G = g.param(gain), Bi = g.param(bias);
    Var ln = ad::layer_norm(g.param(x), &G, &Bi);
    Var plain = ad::layer_norm(g.param(x), nullptr, nullptr, 1e-6);
    return ad::add(weighted_sum(g, ad::modulate(ln, g.param(sc), g.param(sh)), 11), weighted_sum(g, plain, 12));
  });
  CHECK(r.max_rel < kTol);
}

TEST_CASE("layer norm output has zero mean and unit variance per row") {
  Graph g(false);
  Var y = ad::layer_norm(g.constant(random_matrix(5, 8, 3, 4.0)), nullptr, nullptr, 0.0);
  for (Eigen::Index r = 0; r < 5; ++r) {
    CHECK(std::abs(y.value().row(r).mean()) < 1e-12);
    CHECK(std::abs(y.value().row(r).array().square().mean() - 1.0) < 1e-10);
  }
}

TEST_CASE("structural ops route gradients correctly") {
  Parameter a = make_param("a", 6, 3, 21), b = make_param("b", 4, 3, 22), t = make_param("table", 5, 3, 23);
  Parameter q = make_param("q", 2, 3, 24);
  Eigen::VectorXd f(6);
  f << 0.1, 0.5, 0.9, 0.3, 0.0, 1.0;
  auto r = check_gradients({&a, &b, &t, &q}, [&](Graph& g) {
    Var A = g.param(a), B = g.param(b);
    Var blocks = ad::concat_blocks({A, B}, {3, 2});                    // 2 blocks of 5 rows
    Var sliced = ad::slice_blocks(blocks, 5, 1, 3);                    // 6 x 3
    Var gathered = ad::gather_rows(g.param(t), {0, 3, 3, 1, 4, 0});    // duplicates accumulate
    Var tiled = ad::tile(g.param(q), 3);                               // 6 x 3
    Var rep = ad::repeat_rows(ad::slice_blocks(A, 3, 2, 1), 3);        // 6 x 3
    Var mix = ad::where_blocks({1, 0}, sliced, ad::add(gathered, tiled), 3);
    Var all = ad::concat_cols(ad::scale_rows(mix, f), rep);
    return weighted_sum(g, all, 30);
  });
  CHECK(r.max_rel < kTol);
}

TEST_CASE("batched products and rotary encoding gradients") {
  Parameter a = make_param("a", 6, 4, 31), b = make_param("b", 4, 4, 32);
  auto r = check_gradients({&a, &b}, [&](Graph& g) {
    Var prod = ad::bmm_nt(g.param(a), g.param(b), 3, 2);  // 2 blocks: (3 x 2)
    Var rot = ad::rope(g.param(a), {0, 5, 9}, 2);
    return ad::add(weighted_sum(g, prod, 33), weighted_sum(g, rot, 34));
  });
  CHECK(r.max_rel < kTol);
}

TEST_CASE("rotary encoding preserves per-head norms and is identity at position 0") {
  Graph g(false);
  Matrix x = random_matrix(4, 8, 41);
  Var y = ad::rope(g.constant(x), {0, 1, 17, 1000}, 2);
  for (int r = 0; r < 4; ++r)
    for (int h = 0; h < 2; ++h)
      CHECK(std::abs(y.value().row(r).segment(4 * h, 4).norm() - x.row(r).segment(4 * h, 4).norm()) < 1e-12);
  CHECK((y.value().row(0) - x.row(0)).norm() == doctest::Approx(0.0));
}

TEST_CASE("attention gradients with masks, causality and bias") {
  Parameter q = make_param("q", 6, 4, 51), k = make_param("k", 8, 4, 52), v = make_param("v", 8, 4, 53);
  Parameter bias = make_param("bias", 6, 4, 54);
  ad::AttentionSpec spec;
  spec.batch = 2;
  spec.nq = 3;
  spec.nk = 4;
  spec.heads = 2;
  spec.scale = 0.7;
  spec.key_mask = {1, 1, 0, 1, 1, 0, 1, 1};
  auto r = check_gradients({&q, &k, &v, &bias}, [&](Graph& g) {
    ad::AttentionSpec s = spec;
    s.bias = g.param(bias);
    return weighted_sum(g, ad::attention(g.param(q), g.param(k), g.param(v), s), 55);
  });
  CHECK(r.max_rel < kTol);

  Parameter qs = make_param("qs", 8, 4, 56);
  auto rc = check_gradients({&qs, &k, &v}, [&](Graph& g) {
    ad::AttentionSpec s;
    s.batch = 2;
    s.nq = 4;
    s.nk = 4;
    s.heads = 1;
    s.scale = 0.5;
    s.causal = true;
    return weighted_sum(g, ad::attention(g.param(qs), g.param(k), g.param(v), s), 57);
  });
  CHECK(rc.max_rel < kTol);
}

TEST_CASE("attention matches a hand-rolled single-head oracle") {
  const Matrix q = random_matrix(2, 3, 61), k = random_matrix(4, 3, 62), v = random_matrix(4, 5, 63);
  Graph g(false);
  ad::AttentionSpec s;
  s.nq = 2;
  s.nk = 4;
  s.scale = 0.37;
  const Matrix out = ad::attention(g.constant(q), g.constant(k), g.constant(v), s).value();
  for (int i = 0; i < 2; ++i) {
    std::vector<double> w(4);
    double z = 0.0;
    for (int j = 0; j < 4; ++j) {
      double dot = 0.0;
      for (int c = 0; c < 3; ++c) dot += q(i, c) * k(j, c);
      w[j] = std::exp(0.37 * dot);
      z += w[j];
    }
    for (int c = 0; c < 5; ++c) {
      double acc = 0.0;
      for (int j = 0; j < 4; ++j) acc += w[j] / z * v(j, c);
      CHECK(out(i, c) == doctest::Approx(acc).epsilon(1e-12));
    }
  }
}

TEST_CASE("fully masked attention rows are zero and masked keys are ignored") {
  Graph g(false);
  const Matrix q = random_matrix(2, 4, 71), k = random_matrix(6, 4, 72);
  Matrix v = random_matrix(6, 4, 73);
  ad::AttentionSpec s;
  s.batch = 2;
  s.nq = 1;
  s.nk = 3;
  s.heads = 2;
  s.scale = 0.5;
  s.key_mask = {0, 0, 0, 1, 0, 1};
  const Matrix out = ad::attention(g.constant(q), g.constant(k), g.constant(v), s).value();
  CHECK(out.row(0).norm() == 0.0);
  v.row(4).setConstant(1e9);
  const Matrix out2 = ad::attention(g.constant(q), g.constant(k), g.constant(v), s).value();
  CHECK((out2 - out).norm() == 0.0);
}

TEST_CASE("constants need no gradient and parameters accumulate") {
  Parameter p = make_param("p", 2, 2, 81);
  Graph g;
  Var c = g.constant(random_matrix(2, 2, 82));
  CHECK_FALSE(g.needs_grad(c));
  Var y = ad::sum(ad::add(g.param(p), g.param(p)));
  CHECK(g.needs_grad(y));
  g.backward(y);
  CHECK((p.grad.array() == 2.0).all());
}

TEST_CASE("shape mismatches throw") {
  Graph g;
  Var a = g.constant(Matrix::Zero(2, 3)), b = g.constant(Matrix::Zero(3, 2));
  CHECK_THROWS(ad::add(a, b));
  CHECK_THROWS(ad::matmul(a, a));
}
