#include "aurora/encoder.hpp"

#include "support.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

using namespace aurora;
using namespace aurora::encoder;
using testsupport::check_gradients;
using testsupport::random_matrix;
using testsupport::randomize;
using testsupport::weighted_sum;

namespace {

constexpr int kDim = 4;
constexpr int kNTime = 3;
constexpr int kK = 2;

struct Fixture {
  nn::ParameterStore store;
  nn::Rng rng{17};
  GuidanceParams guidance;
  GuidedBlockParams block;
  DistillerParams distiller;
  FusionParams fusion;
  Parameter* x_time = nullptr;
  Parameter* image = nullptr;
  Parameter* text = nullptr;

  explicit Fixture(int batch, int heads = 2) {
    guidance = GuidanceParams::create(store, "guidance", kDim, kDim, kDim, kK, kK, rng);
    block = GuidedBlockParams::create(store, "guided", kDim, heads, 8, rng);
    distiller = DistillerParams::create(store, "distill", kK, kDim, heads, rng);
    fusion = FusionParams::create(store, "fusion", kDim, kDim, kDim, heads, rng);
    x_time = &store.create("x_time", Matrix::Zero(batch * kNTime, kDim));
    image = &store.create("image", Matrix::Zero(batch * 5, kDim));
    text = &store.create("text", Matrix::Zero(batch * kK, kDim));
    randomize(store, 3);
  }
};

Matrix run_block(const GuidedBlockParams& p, const Matrix& x, const std::optional<Matrix>& corr, int batch,
                 std::vector<Matrix>* weights = nullptr) {
  Graph g(false);
  std::optional<Var> c;
  if (corr) c = g.constant(*corr);
  return guided_self_attention_block(g, g.constant(x), c, p, batch, kNTime, weights).value();
}

}  // namespace

TEST_CASE("guided attention, distillation and fusion pass finite-difference checks") {
  Fixture f(2);
  const std::vector<std::uint8_t> mask{1, 1, 0, 1, 1, 1, 1, 1, 1, 0};
  auto r = check_gradients(f.store.all(), [&](Graph& g) {
    Var image_d = distill_tokens(g, f.distiller, g.param(*f.image), 2, 5, mask);
    Var corr = compute_guidance_corr(g, g.param(*f.x_time), image_d, g.param(*f.text), f.guidance, 2, kNTime);
    Var h = guided_self_attention_block(g, g.param(*f.x_time), corr, f.block, 2, kNTime);
    FusedRepresentation fused = fuse_modalities(g, h, image_d, g.param(*f.text), f.fusion, 2, kNTime);
    return weighted_sum(g, fused.fused, 5);
  });
  CHECK(r.max_rel < 1e-5);
  CHECK(r.tensors == static_cast<int>(f.store.all().size()));
}

TEST_CASE("zero correlation reduces the guided block to vanilla self-attention") {
  Fixture f(2);
  const Matrix x = f.x_time->value;
  const Matrix vanilla = run_block(f.block, x, std::nullopt, 2);
  CHECK((run_block(f.block, x, Matrix::Zero(2 * kNTime, kNTime), 2) - vanilla).norm() == 0.0);

  // W = 0 gives Corr = 0 exactly.
  f.guidance.metric->value.setZero();
  Graph g(false);
  Var corr = compute_guidance_corr(g, g.constant(x), g.constant(random_matrix(2 * kK, kDim, 9)),
                                   g.constant(f.text->value), f.guidance, 2, kNTime);
  CHECK(corr.value().norm() == 0.0);
  CHECK((run_block(f.block, x, corr.value(), 2) - vanilla).norm() == 0.0);
}

TEST_CASE("a huge correlation column saturates the attention weights") {
  Fixture f(1);
  for (int j = 0; j < kNTime; ++j) {
    Matrix corr = random_matrix(kNTime, kNTime, 40 + j);
    corr.col(j).array() += 1e6;
    std::vector<Matrix> w;
    run_block(f.block, f.x_time->value, corr, 1, &w);
    REQUIRE(w.size() == 2);
    for (const Matrix& head : w)
      for (int i = 0; i < kNTime; ++i) CHECK(head(i, j) > 0.999);
  }
}

TEST_CASE("adding a constant to each correlation row leaves the block unchanged") {
  Fixture f(2);
  const Matrix corr = random_matrix(2 * kNTime, kNTime, 50);
  Matrix shifted = corr;
  for (int r = 0; r < shifted.rows(); ++r) shifted.row(r).array() += 3.0 * (r + 1);
  const Matrix a = run_block(f.block, f.x_time->value, corr, 2);
  const Matrix b = run_block(f.block, f.x_time->value, shifted, 2);
  CHECK((a - b).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("guidance correlation matches the triple product oracle") {
  Fixture f(2);
  const Matrix image_d = random_matrix(2 * kK, kDim, 61);
  Graph g(false);
  GuidanceParts parts;
  const Matrix corr = compute_guidance_corr(g, g.constant(f.x_time->value), g.constant(image_d),
                                            g.constant(f.text->value), f.guidance, 2, kNTime, &parts)
                          .value();
  REQUIRE(corr.rows() == 2 * kNTime);
  REQUIRE(corr.cols() == kNTime);
  const Matrix qv = f.x_time->value * f.guidance.vision.query.weight->value;
  const Matrix kv = image_d * f.guidance.vision.key.weight->value;
  const Matrix qt = f.x_time->value * f.guidance.text.query.weight->value;
  const Matrix kt = f.text->value * f.guidance.text.key.weight->value;
  const Matrix& W = f.guidance.metric->value;
  for (int b = 0; b < 2; ++b)
    for (int i = 0; i < kNTime; ++i)
      for (int j = 0; j < kNTime; ++j) {
        double acc = 0.0;
        for (int a = 0; a < kK; ++a)
          for (int c = 0; c < kK; ++c) {
            const double va = qv.row(b * kNTime + i).dot(kv.row(b * kK + a));
            const double tc = qt.row(b * kNTime + j).dot(kt.row(b * kK + c));
            acc += va * W(a, c) * tc;
          }
        CHECK(std::abs(corr(b * kNTime + i, j) - acc) < 1e-10);
      }
  CHECK(parts.vision_scores.rows() == 2 * kNTime);
  CHECK(parts.text_scores.cols() == kK);
}

TEST_CASE("distiller output shape and convexity") {
  nn::ParameterStore store;
  nn::Rng rng(2);
  auto d = DistillerParams::create(store, "d", 3, kDim, 2, rng);
  Graph g(false);
  const Matrix hidden = random_matrix(2 * 7, kDim, 70);
  const Matrix out = distill_tokens(g, d, g.constant(hidden), 2, 7).value();
  CHECK(out.rows() == 6);
  CHECK(out.cols() == kDim);

  // Identical hidden rows give identical distilled rows equal to v(h).
  Matrix same(5, kDim);
  for (int r = 0; r < 5; ++r) same.row(r) = hidden.row(0);
  const Matrix o = distill_tokens(g, d, g.constant(same), 1, 5).value();
  const Matrix v = hidden.row(0) * d.v.weight->value;
  for (int r = 0; r < 3; ++r) CHECK((o.row(r) - v).cwiseAbs().maxCoeff() < 1e-12);
  CHECK_THROWS(distill_tokens(g, d, g.constant(random_matrix(5, kDim + 1, 1)), 1, 5));
}

TEST_CASE("distiller matches a loop oracle for K=2, n=3, d=4") {
  nn::ParameterStore store;
  nn::Rng rng(4);
  auto d = DistillerParams::create(store, "d", 2, 4, 1, rng);
  const Matrix hidden = random_matrix(3, 4, 80);
  Graph g(false);
  const Matrix out = distill_tokens(g, d, g.constant(hidden), 1, 3).value();
  const Matrix Q = d.queries->value * d.q.weight->value;
  const Matrix K = hidden * d.k.weight->value;
  const Matrix V = hidden * d.v.weight->value;
  for (int i = 0; i < 2; ++i) {
    double w[3], z = 0.0;
    for (int j = 0; j < 3; ++j) {
      double dot = 0.0;
      for (int c = 0; c < 4; ++c) dot += Q(i, c) * K(j, c);
      w[j] = std::exp(dot / 2.0);
      z += w[j];
    }
    for (int c = 0; c < 4; ++c) {
      double acc = 0.0;
      for (int j = 0; j < 3; ++j) acc += w[j] / z * V(j, c);
      CHECK(std::abs(out(i, c) - acc) < 1e-12);
    }
  }
}

TEST_CASE("distillation is invariant to permuting and padding hidden tokens") {
  nn::ParameterStore store;
  nn::Rng rng(6);
  auto d = DistillerParams::create(store, "d", 3, kDim, 2, rng);
  const Matrix hidden = random_matrix(6, kDim, 90);
  std::vector<int> perm(6);
  std::iota(perm.begin(), perm.end(), 0);
  std::mt19937_64 shuffle_rng(1);
  std::shuffle(perm.begin(), perm.end(), shuffle_rng);
  Matrix permuted(6, kDim);
  for (int r = 0; r < 6; ++r) permuted.row(r) = hidden.row(perm[r]);
  Graph g(false);
  const Matrix a = distill_tokens(g, d, g.constant(hidden), 1, 6).value();
  const Matrix b = distill_tokens(g, d, g.constant(permuted), 1, 6).value();
  CHECK((a - b).cwiseAbs().maxCoeff() < 1e-12);

  const std::vector<std::uint8_t> mask{1, 1, 1, 1, 0, 0};
  Matrix junk = hidden;
  junk.bottomRows(2) = random_matrix(2, kDim, 91, 100.0);
  const Matrix m1 = distill_tokens(g, d, g.constant(hidden), 1, 6, mask).value();
  const Matrix m2 = distill_tokens(g, d, g.constant(junk), 1, 6, mask).value();
  CHECK((m1 - m2).norm() == 0.0);
  const Matrix trimmed = distill_tokens(g, d, g.constant(Matrix(hidden.topRows(4))), 1, 4).value();
  CHECK((m1 - trimmed).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("modality encoders") {
  nn::ParameterStore store;
  nn::Rng rng(8);
  const auto empty = ModalityEncoderParams::create(store, "none", 0, kDim, 2, 8, rng);
  const auto two = ModalityEncoderParams::create(store, "two", 2, kDim, 2, 8, rng);
  Graph g(false);
  const Matrix tokens = random_matrix(2 * 5, kDim, 100);
  const std::vector<std::uint8_t> mask(10, 1);
  CHECK((encode_modality(g, g.constant(tokens), Modality::Image, empty, 2, 5).value() - tokens).norm() == 0.0);
  CHECK((encode_modality(g, g.constant(tokens), Modality::TimeSkip, two, 2, 5).value() - tokens).norm() == 0.0);
  const Matrix enc = encode_modality(g, g.constant(tokens), Modality::Image, two, 2, 5).value();
  CHECK(enc.rows() == 10);
  CHECK(enc.cols() == kDim);
  CHECK_THROWS(encode_modality(g, g.constant(tokens), Modality::Text, two, 2, 5));
  CHECK_THROWS(encode_modality(g, g.constant(tokens), Modality::Image, two, 3, 5));

  // Padded text positions never influence the valid outputs.
  std::vector<std::uint8_t> tmask{1, 1, 1, 0, 0, 1, 1, 0, 0, 0};
  Matrix perturbed = tokens;
  perturbed.row(3) += random_matrix(1, kDim, 101, 50.0);
  perturbed.row(9) += random_matrix(1, kDim, 102, 50.0);
  const Matrix a = encode_modality(g, g.constant(tokens), Modality::Text, two, 2, 5, tmask).value();
  const Matrix b = encode_modality(g, g.constant(perturbed), Modality::Text, two, 2, 5, tmask).value();
  for (int r = 0; r < 10; ++r)
    if (tmask[r]) CHECK((a.row(r) - b.row(r)).norm() == 0.0);
}

TEST_CASE("absent texts fall back to the null token set") {
  nn::ParameterStore store;
  Parameter& null_tokens = store.create("null", random_matrix(kK, kDim, 110));
  Graph g(false);
  const Matrix distilled = random_matrix(3 * kK, kDim, 111);
  const Matrix out = resolve_text_tokens(g, g.constant(distilled), null_tokens, {1, 0, 1}).value();
  CHECK((out.middleRows(0, kK) - distilled.middleRows(0, kK)).norm() == 0.0);
  CHECK((out.middleRows(kK, kK) - null_tokens.value).norm() == 0.0);
  CHECK((out.middleRows(2 * kK, kK) - distilled.middleRows(2 * kK, kK)).norm() == 0.0);
  CHECK_THROWS(resolve_text_tokens(g, g.constant(distilled), null_tokens, {1, 0}));
}

TEST_CASE("fusion adds the two cross-attention paths to the time tokens") {
  Fixture f(2);
  const Matrix image_d = random_matrix(2 * kK, kDim, 120);
  {
    Graph g(false);
    auto fused = fuse_modalities(g, g.constant(f.x_time->value), g.constant(image_d), g.constant(f.text->value),
                                 f.fusion, 2, kNTime);
    CHECK((fused.fused.value() - (f.x_time->value + fused.image_tilde.value() + fused.text_tilde.value()))
              .cwiseAbs()
              .maxCoeff() < 1e-12);
  }
  f.fusion.image_attn.v.weight->value.setZero();
  f.fusion.text_attn.v.weight->value.setZero();
  Graph g(false);
  auto fused = fuse_modalities(g, g.constant(f.x_time->value), g.constant(image_d), g.constant(f.text->value),
                               f.fusion, 2, kNTime);
  CHECK((fused.fused.value() - f.x_time->value).norm() == 0.0);
  CHECK_THROWS(fuse_modalities(g, g.constant(f.x_time->value), g.constant(image_d), g.constant(f.text->value),
                               f.fusion, 3, kNTime));
}
