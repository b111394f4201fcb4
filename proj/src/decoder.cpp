#include "aurora/decoder.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <stdexcept>

namespace aurora::decoder {

ConditionDecoderParams ConditionDecoderParams::create(nn::ParameterStore& store, const std::string& name, int d_time,
                                                      int heads, int ffn_dim, int causal_layers, int cross_layers,
                                                      nn::Rng& rng) {
  ConditionDecoderParams p;
  for (int l = 0; l < causal_layers; ++l)
    p.causal.push_back(
        nn::TransformerBlock::create(store, name + ".causal" + std::to_string(l), d_time, heads, ffn_dim, rng));
  for (int l = 0; l < cross_layers; ++l)
    p.cross.push_back(nn::CrossBlock::create(store, name + ".cross" + std::to_string(l), d_time, heads, ffn_dim, rng));
  return p;
}

Var causal_stack(Graph& g, const ConditionDecoderParams& params, const Var& tokens, int batch, int F) {
  Var x = tokens;
  for (const nn::TransformerBlock& layer : params.causal) x = layer.self_attend(g, x, batch, F, true);
  return x;
}

Var decode_conditions(Graph& g, const ConditionDecoderParams& params, const Var& fused, int batch, int n_time, int F) {
  if (F < 1) throw std::invalid_argument("decode_conditions: F must be >= 1");
  if (n_time < 1 || fused.rows() == 0) throw std::invalid_argument("decode_conditions: empty fused sequence");
  const int d = static_cast<int>(fused.cols());
  std::vector<double> future_pos(F);
  std::vector<int> q_pos(F), k_pos(n_time);
  for (int i = 0; i < F; ++i) {
    future_pos[i] = n_time + i;
    q_pos[i] = n_time + i;
  }
  for (int i = 0; i < n_time; ++i) k_pos[i] = i;

  Var last = ad::repeat_rows(ad::slice_blocks(fused, n_time, n_time - 1, 1), F);
  Var pos = g.constant(nn::sinusoidal_embedding(future_pos, d).replicate(batch, 1));
  Var x = causal_stack(g, params, ad::add(last, pos), batch, F);
  for (const nn::CrossBlock& layer : params.cross) x = layer.attend(g, x, fused, batch, F, n_time, q_pos, k_pos);
  return x;
}

std::string to_string(PrototypeFamily f) {
  switch (f) {
    case PrototypeFamily::Trig: return "trig";
    case PrototypeFamily::Exp: return "exp";
    case PrototypeFamily::Log: return "log";
    case PrototypeFamily::Poly: return "poly";
  }
  return "?";
}

PrototypeBank init_prototype_bank(int M, int p_time, std::uint64_t seed) {
  if (M < 4) throw std::invalid_argument("init_prototype_bank: M must be >= 4");
  if (p_time < 2) throw std::invalid_argument("init_prototype_bank: p_time must be >= 2");
  nn::Rng rng(nn::derive_seed(seed, {0x70726f746fULL}));
  std::uniform_real_distribution<double> phase_dist(0.0, 2.0 * std::numbers::pi);

  int counts[4];
  for (int f = 0; f < 4; ++f) counts[f] = M / 4 + (f < M % 4 ? 1 : 0);

  PrototypeBank bank;
  bank.rows.resize(M, p_time);
  bank.families.reserve(static_cast<std::size_t>(M));
  int row = 0;
  auto grid_closed = [&](int i) { return static_cast<double>(i) / (p_time - 1); };
  auto spread = [](int j, int n, double lo, double hi) { return n <= 1 ? lo : lo + (hi - lo) * j / (n - 1); };

  // Trig rows sample u = i / p_time so whole cycles wrap exactly.
  for (int j = 0; j < counts[0]; ++j, ++row) {
    const int cycles = j / 2 + 1;
    const double phase = phase_dist(rng);
    for (int i = 0; i < p_time; ++i) {
      const double arg = 2.0 * std::numbers::pi * cycles * i / p_time + phase;
      bank.rows(row, i) = (j % 2 == 0) ? std::sin(arg) : std::cos(arg);
    }
    bank.families.push_back(PrototypeFamily::Trig);
  }
  for (int j = 0; j < counts[1]; ++j, ++row) {
    const double lambda = spread(j, counts[1], 0.5, 8.0);
    for (int i = 0; i < p_time; ++i) bank.rows(row, i) = std::exp(-lambda * grid_closed(i));
    bank.families.push_back(PrototypeFamily::Exp);
  }
  for (int j = 0; j < counts[2]; ++j, ++row) {
    const double lambda = spread(j, counts[2], 1.0, 50.0);
    for (int i = 0; i < p_time; ++i) bank.rows(row, i) = std::log1p(lambda * grid_closed(i));
    bank.families.push_back(PrototypeFamily::Log);
  }
  for (int j = 0; j < counts[3]; ++j, ++row) {
    const int k = 1 + j % 3;
    for (int i = 0; i < p_time; ++i) bank.rows(row, i) = std::pow(grid_closed(i), k);
    bank.families.push_back(PrototypeFamily::Poly);
  }
  for (int r = 0; r < M; ++r) {
    const double mx = bank.rows.row(r).cwiseAbs().maxCoeff();
    if (mx > 0.0) bank.rows.row(r) /= mx;
  }
  return bank;
}

RetrieverParams RetrieverParams::create(nn::ParameterStore& store, const std::string& name, int d_time, int heads,
                                        int ffn_dim, int n_layers, int M, nn::Rng& rng) {
  RetrieverParams p;
  for (int l = 0; l < n_layers; ++l)
    p.layers.push_back(
        nn::TransformerBlock::create(store, name + ".layer" + std::to_string(l), d_time, heads, ffn_dim, rng));
  p.ln_out = nn::LayerNorm::create(store, name + ".ln_out", d_time);
  p.head = nn::Linear::create(store, name + ".head", d_time, M, true, rng);
  return p;
}

Retrieval retrieve_prototypes(Graph& g, const RetrieverParams& params, const Var& text_tilde, const Var& image_tilde,
                              const Var& bank, int batch, int n_time, int F) {
  if (F < 1) throw std::invalid_argument("retrieve_prototypes: F must be >= 1");
  if (params.head.out() != bank.rows()) throw std::invalid_argument("retrieve_prototypes: bank size mismatch");
  const int d = static_cast<int>(text_tilde.cols());
  std::vector<double> future_pos(F);
  for (int i = 0; i < F; ++i) future_pos[i] = n_time + i;
  Var queries = g.constant(nn::sinusoidal_embedding(future_pos, d).replicate(batch, 1));
  const int n = 2 * n_time + F;
  Var x = ad::concat_blocks({text_tilde, image_tilde, queries}, {n_time, n_time, F});
  for (const nn::TransformerBlock& layer : params.layers) x = layer.self_attend(g, x, batch, n, false);
  Var logits = params.head(g, params.ln_out(g, ad::slice_blocks(x, n, 2 * n_time, F)));
  Retrieval r;
  r.weights = ad::softmax_rows(logits);
  r.prototypes = ad::matmul(r.weights, bank);
  return r;
}

}  // namespace aurora::decoder
