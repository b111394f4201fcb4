#pragma once

// Parameter storage, initialization, optimizer and the transformer building
// blocks shared by the encoder, decoder and flow network.

#include "aurora/autodiff.hpp"

#include <cstdint>
#include <deque>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace aurora::nn {

using ad::Graph;
using ad::Matrix;
using ad::Parameter;
using ad::Var;

using Rng = std::mt19937_64;

// Derives an independent stream seed from a base seed and a list of keys
// (splitmix64 chaining).
std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> keys);

Matrix randn(Eigen::Index rows, Eigen::Index cols, double stddev, Rng& rng);

// Rounds every entry to the nearest IEEE binary32 value. Parameters live at
// single precision so checkpoints round trip bit-exactly.
void round_to_float(Matrix& m);

// Owns every learnable tensor of a model. Addresses are stable for the
// lifetime of the store; layers keep raw pointers into it.
class ParameterStore {
 public:
  ParameterStore() = default;
  ParameterStore(const ParameterStore&) = delete;
  ParameterStore& operator=(const ParameterStore&) = delete;

  Parameter& create(const std::string& name, Matrix init);
  Parameter* find(const std::string& name);
  const Parameter* find(const std::string& name) const;
  Parameter& at(const std::string& name);

  std::vector<Parameter*> all();
  std::vector<const Parameter*> all() const;
  std::size_t scalar_count() const;
  void zero_grad();

 private:
  std::deque<Parameter> params_;
  std::map<std::string, Parameter*> index_;
};

struct Linear {
  Parameter* weight = nullptr;  // in x out
  Parameter* bias = nullptr;    // 1 x out, optional

  static Linear create(ParameterStore& store, const std::string& name, int in, int out, bool with_bias, Rng& rng,
                       double gain = 1.0);
  static Linear zeros(ParameterStore& store, const std::string& name, int in, int out, bool with_bias);
  Var operator()(Graph& g, const Var& x) const;
  int in() const { return static_cast<int>(weight->value.rows()); }
  int out() const { return static_cast<int>(weight->value.cols()); }
};

struct LayerNorm {
  Parameter* gain = nullptr;
  Parameter* bias = nullptr;

  static LayerNorm create(ParameterStore& store, const std::string& name, int dim);
  Var operator()(Graph& g, const Var& x) const;
};

struct FeedForward {
  Linear up;
  Linear down;

  static FeedForward create(ParameterStore& store, const std::string& name, int dim, int hidden, Rng& rng);
  Var operator()(Graph& g, const Var& x) const;
};

struct AttentionCall {
  int batch = 1;
  int nq = 1;
  int nk = 1;
  bool causal = false;
  std::vector<std::uint8_t> key_mask;
  std::optional<Var> bias;
  // Default is 1/sqrt(head width).
  std::optional<double> scale;
  // Rotary positions of query/key rows within their block.
  std::vector<int> q_positions;
  std::vector<int> k_positions;
  std::vector<Matrix>* weights_out = nullptr;
};

// Multi-head attention with separate query and key/value inputs; keys and
// values may come from a stream of a different width.
struct MultiHeadAttention {
  Linear q;
  Linear k;
  Linear v;
  Linear o;
  int heads = 1;

  static MultiHeadAttention create(ParameterStore& store, const std::string& name, int d_model, int d_kv, int heads,
                                   Rng& rng);
  Var operator()(Graph& g, const Var& xq, const Var& xkv, const AttentionCall& call) const;
};

// Pre-norm transformer layer: x + Attn(LN(x)), then x + FFN(LN(x)).
struct TransformerBlock {
  LayerNorm ln_attn;
  MultiHeadAttention attn;
  LayerNorm ln_ffn;
  FeedForward ffn;

  static TransformerBlock create(ParameterStore& store, const std::string& name, int dim, int heads, int ffn_dim,
                                 Rng& rng);
  Var self_attend(Graph& g, const Var& x, int batch, int n, bool causal,
                  const std::vector<std::uint8_t>& key_mask = {}) const;
};

// Pre-norm cross-attention layer with rotary encoding on queries and keys.
struct CrossBlock {
  LayerNorm ln_q;
  LayerNorm ln_kv;
  MultiHeadAttention attn;
  LayerNorm ln_ffn;
  FeedForward ffn;

  static CrossBlock create(ParameterStore& store, const std::string& name, int dim, int heads, int ffn_dim, Rng& rng);
  Var attend(Graph& g, const Var& x, const Var& memory, int batch, int nq, int nk, const std::vector<int>& q_positions,
             const std::vector<int>& k_positions) const;
};

// Standard sinusoidal embedding: row r is PE(positions[r]) of width `dim`.
Matrix sinusoidal_embedding(const std::vector<double>& positions, int dim, double max_period = 10000.0);

class AdamW {
 public:
  struct Options {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
  };

  AdamW() = default;
  explicit AdamW(Options opt) : opt_(opt) {}

  // One update of every parameter from its accumulated gradient. Weight decay
  // is skipped for 1-row tensors (biases, norms).
  void step(ParameterStore& store, double lr);
  long steps() const { return t_; }

 private:
  struct Moments {
    Matrix m;
    Matrix v;
  };
  Options opt_{};
  long t_ = 0;
  std::map<std::string, Moments> state_;
};

// lr(epoch) = base * decay^floor(epoch / step_epochs).
double step_lr(double base, double decay, int step_epochs, long epoch);

}  // namespace aurora::nn
