#pragma once

// Modality encoders, token distillation, modality-guided self-attention and
// the cross-attention fuser. All functions work on row-stacked batches.

#include "aurora/autodiff.hpp"
#include "aurora/nn.hpp"

#include <optional>
#include <vector>

namespace aurora::encoder {

using ad::Graph;
using ad::Matrix;
using ad::Parameter;
using ad::Var;

enum class Modality { TimeSkip, Image, Text };

// Stand-in for the pretrained vision/text encoders: a pre-norm transformer
// stack that preserves token count and width.
struct ModalityEncoderParams {
  std::vector<nn::TransformerBlock> layers;

  static ModalityEncoderParams create(nn::ParameterStore& store, const std::string& name, int n_layers, int dim,
                                      int heads, int ffn_dim, nn::Rng& rng);
};

// Time tokens skip the stand-in encoders (their backbone is the guided
// stack). `mask` is batch x n, nonzero for valid positions; padded keys are
// never attended to.
Var encode_modality(Graph& g, const Var& tokens, Modality which, const ModalityEncoderParams& params, int batch, int n,
                    const std::vector<std::uint8_t>& mask = {});

struct DistillerParams {
  Parameter* queries = nullptr;  // K x d
  nn::Linear q;
  nn::Linear k;
  nn::Linear v;
  int heads = 1;

  static DistillerParams create(nn::ParameterStore& store, const std::string& name, int K, int dim, int heads,
                                nn::Rng& rng);
  int K() const { return static_cast<int>(queries->value.rows()); }
};

// Cross-attention with the learnable queries attending over `hidden`; each
// output row is, per head, a convex combination of value-projected rows.
// Returns (batch*K) x d.
Var distill_tokens(Graph& g, const DistillerParams& params, const Var& hidden, int batch, int n,
                   const std::vector<std::uint8_t>& mask = {});

// Replaces the distilled text set of every sample whose text is absent with
// the learnable null token set.
Var resolve_text_tokens(Graph& g, const Var& distilled, Parameter& null_tokens, const std::vector<std::uint8_t>& present);

struct GuiderParams {
  nn::Linear query;  // d_time -> d_time
  nn::Linear key;    // d_other -> d_time

  static GuiderParams create(nn::ParameterStore& store, const std::string& name, int d_time, int d_other,
                             nn::Rng& rng);
};

struct GuidanceParams {
  GuiderParams vision;
  GuiderParams text;
  Parameter* metric = nullptr;  // K_image x K_text

  static GuidanceParams create(nn::ParameterStore& store, const std::string& name, int d_time, int d_image,
                               int d_text, int K_image, int K_text, nn::Rng& rng);
};

struct GuidanceParts {
  Var vision_scores;  // (batch*n_time) x K_image
  Var text_scores;    // (batch*n_time) x K_text
};

// Corr = VAttn * W * TAttn^T per sample, with unnormalized (no softmax)
// guider scores. Returns (batch*n_time) x n_time.
Var compute_guidance_corr(Graph& g, const Var& x_time, const Var& image_distilled, const Var& text_distilled,
                          const GuidanceParams& params, int batch, int n_time, GuidanceParts* parts = nullptr);

struct GuidedBlockParams {
  nn::Linear wq;
  nn::Linear wk;
  nn::Linear wv;
  nn::Linear wo;
  nn::LayerNorm ln_attn;
  nn::LayerNorm ln_ffn;
  nn::FeedForward ffn;
  int heads = 1;

  static GuidedBlockParams create(nn::ParameterStore& store, const std::string& name, int d_time, int heads,
                                  int ffn_dim, nn::Rng& rng);
};

// S = (Q K^T + Corr) / sqrt(d_time) per head with Corr shared by all heads,
// O = softmax(S) V, O_norm = LN(X + O W_o), out = LN(FFN(O_norm) + O_norm).
// Without `corr` this is a vanilla post-norm multi-head self-attention block.
Var guided_self_attention_block(Graph& g, const Var& x_time, const std::optional<Var>& corr,
                                const GuidedBlockParams& params, int batch, int n_time,
                                std::vector<Matrix>* weights_out = nullptr);

struct FusionParams {
  nn::MultiHeadAttention image_attn;
  nn::MultiHeadAttention text_attn;

  static FusionParams create(nn::ParameterStore& store, const std::string& name, int d_time, int d_image, int d_text,
                             int heads, nn::Rng& rng);
};

struct FusedRepresentation {
  Var fused;            // (batch*n_time) x d_time
  Var image_tilde;      // (batch*n_time) x d_time
  Var text_tilde;       // (batch*n_time) x d_time
  Var image_distilled;  // (batch*K_image) x d_image
  Var text_distilled;   // (batch*K_text) x d_text
  int batch = 1;
  int n_time = 1;
};

// X_fuse = X_time + CrossAttn(X_time, image) + CrossAttn(X_time, text).
FusedRepresentation fuse_modalities(Graph& g, const Var& x_time_enc, const Var& image_distilled,
                                    const Var& text_distilled, const FusionParams& params, int batch, int n_time);

}  // namespace aurora::encoder
