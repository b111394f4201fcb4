#pragma once

// Condition decoding and prototype retrieval.

#include "aurora/autodiff.hpp"
#include "aurora/encoder.hpp"
#include "aurora/nn.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace aurora::decoder {

using ad::Graph;
using ad::Matrix;
using ad::Parameter;
using ad::Var;

struct ConditionDecoderParams {
  std::vector<nn::TransformerBlock> causal;
  std::vector<nn::CrossBlock> cross;

  static ConditionDecoderParams create(nn::ParameterStore& store, const std::string& name, int d_time, int heads,
                                       int ffn_dim, int causal_layers, int cross_layers, nn::Rng& rng);
};

// Causal self-attention stack alone over (batch*F) x d tokens.
Var causal_stack(Graph& g, const ConditionDecoderParams& params, const Var& tokens, int batch, int F);

// Replicates the last fused token F times, adds sinusoidal future-position
// embeddings, runs the causal stack, then the cross stack against the fused
// sequence with rotary positions (fused tokens at 0..n-1, future tokens at
// n..n+F-1). Returns (batch*F) x d_time conditions.
Var decode_conditions(Graph& g, const ConditionDecoderParams& params, const Var& fused, int batch, int n_time, int F);

enum class PrototypeFamily : std::uint8_t { Trig = 0, Exp = 1, Log = 2, Poly = 3 };

std::string to_string(PrototypeFamily f);

struct PrototypeBank {
  Matrix rows;  // M x p_time
  std::vector<PrototypeFamily> families;

  int size() const { return static_cast<int>(rows.rows()); }
  int width() const { return static_cast<int>(rows.cols()); }
};

// Splits M rows evenly over the four basis families (trig gets any
// remainder first), each row max-abs normalized to 1.
PrototypeBank init_prototype_bank(int M, int p_time, std::uint64_t seed);

struct RetrieverParams {
  std::vector<nn::TransformerBlock> layers;
  nn::LayerNorm ln_out;
  nn::Linear head;  // d -> M

  static RetrieverParams create(nn::ParameterStore& store, const std::string& name, int d_time, int heads, int ffn_dim,
                                int n_layers, int M, nn::Rng& rng);
};

struct Retrieval {
  Var weights;     // (batch*F) x M, rows sum to 1
  Var prototypes;  // (batch*F) x p_time
};

// Reads [text_tilde ; image_tilde ; F sinusoidal future queries] per sample
// and returns the softmax prototype weights at the query positions together
// with the mixed prototypes D * bank.
Retrieval retrieve_prototypes(Graph& g, const RetrieverParams& params, const Var& text_tilde, const Var& image_tilde,
                              const Var& bank, int batch, int n_time, int F);

}  // namespace aurora::decoder
