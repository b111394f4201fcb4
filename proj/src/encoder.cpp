#include "aurora/encoder.hpp"

#include <cmath>
#include <stdexcept>

namespace aurora::encoder {

ModalityEncoderParams ModalityEncoderParams::create(nn::ParameterStore& store, const std::string& name, int n_layers,
                                                    int dim, int heads, int ffn_dim, nn::Rng& rng) {
  ModalityEncoderParams p;
  for (int l = 0; l < n_layers; ++l)
    p.layers.push_back(nn::TransformerBlock::create(store, name + ".layer" + std::to_string(l), dim, heads, ffn_dim, rng));
  return p;
}

Var encode_modality(Graph& g, const Var& tokens, Modality which, const ModalityEncoderParams& params, int batch, int n,
                    const std::vector<std::uint8_t>& mask) {
  if (tokens.rows() == 0) throw std::invalid_argument("encode_modality: empty token matrix");
  if (tokens.rows() != static_cast<Eigen::Index>(batch) * n)
    throw std::invalid_argument("encode_modality: token rows do not match batch layout");
  if (which == Modality::TimeSkip) return tokens;
  if (which == Modality::Text && mask.empty()) throw std::invalid_argument("encode_modality: text needs a validity mask");
  Var x = tokens;
  for (const nn::TransformerBlock& layer : params.layers) x = layer.self_attend(g, x, batch, n, false, mask);
  return x;
}

DistillerParams DistillerParams::create(nn::ParameterStore& store, const std::string& name, int K, int dim, int heads,
                                        nn::Rng& rng) {
  if (K < 1) throw std::invalid_argument(name + ": K must be >= 1");
  if (dim % heads != 0) throw std::invalid_argument(name + ": width not divisible by heads");
  DistillerParams p;
  p.queries = &store.create(name + ".queries", nn::randn(K, dim, 1.0, rng));
  p.q = nn::Linear::create(store, name + ".q", dim, dim, false, rng);
  p.k = nn::Linear::create(store, name + ".k", dim, dim, false, rng);
  p.v = nn::Linear::create(store, name + ".v", dim, dim, false, rng);
  p.heads = heads;
  return p;
}

Var distill_tokens(Graph& g, const DistillerParams& params, const Var& hidden, int batch, int n,
                   const std::vector<std::uint8_t>& mask) {
  if (n <= 0 || hidden.rows() == 0) throw std::invalid_argument("distill_tokens: no hidden tokens");
  if (hidden.cols() != params.queries->value.cols()) throw std::invalid_argument("distill_tokens: width mismatch");
  const int K = params.K();
  Var queries = ad::tile(g.param(*params.queries), batch);
  ad::AttentionSpec spec;
  spec.batch = batch;
  spec.nq = K;
  spec.nk = n;
  spec.heads = params.heads;
  spec.scale = 1.0 / std::sqrt(static_cast<double>(hidden.cols() / params.heads));
  spec.key_mask = mask;
  return ad::attention(params.q(g, queries), params.k(g, hidden), params.v(g, hidden), spec);
}

Var resolve_text_tokens(Graph& g, const Var& distilled, Parameter& null_tokens, const std::vector<std::uint8_t>& present) {
  const int K = static_cast<int>(null_tokens.value.rows());
  const int batch = static_cast<int>(present.size());
  if (distilled.rows() != static_cast<Eigen::Index>(batch) * K || distilled.cols() != null_tokens.value.cols())
    throw std::invalid_argument("resolve_text_tokens: shape mismatch");
  return ad::where_blocks(present, distilled, ad::tile(g.param(null_tokens), batch), K);
}

GuiderParams GuiderParams::create(nn::ParameterStore& store, const std::string& name, int d_time, int d_other,
                                  nn::Rng& rng) {
  return GuiderParams{nn::Linear::create(store, name + ".query", d_time, d_time, false, rng),
                      nn::Linear::create(store, name + ".key", d_other, d_time, false, rng)};
}

GuidanceParams GuidanceParams::create(nn::ParameterStore& store, const std::string& name, int d_time, int d_image,
                                      int d_text, int K_image, int K_text, nn::Rng& rng) {
  GuidanceParams p;
  p.vision = GuiderParams::create(store, name + ".vision", d_time, d_image, rng);
  p.text = GuiderParams::create(store, name + ".text", d_time, d_text, rng);
  // Small metric so the initial bias does not swamp Q K^T.
  p.metric = &store.create(name + ".metric", nn::randn(K_image, K_text, 0.02 / d_time, rng));
  return p;
}

Var compute_guidance_corr(Graph& g, const Var& x_time, const Var& image_distilled, const Var& text_distilled,
                          const GuidanceParams& params, int batch, int n_time, GuidanceParts* parts) {
  const int K_image = static_cast<int>(params.metric->value.rows());
  const int K_text = static_cast<int>(params.metric->value.cols());
  if (x_time.rows() != static_cast<Eigen::Index>(batch) * n_time ||
      image_distilled.rows() != static_cast<Eigen::Index>(batch) * K_image ||
      text_distilled.rows() != static_cast<Eigen::Index>(batch) * K_text)
    throw std::invalid_argument("compute_guidance_corr: shape mismatch");
  Var vattn = ad::bmm_nt(params.vision.query(g, x_time), params.vision.key(g, image_distilled), n_time, K_image);
  Var tattn = ad::bmm_nt(params.text.query(g, x_time), params.text.key(g, text_distilled), n_time, K_text);
  if (parts != nullptr) *parts = GuidanceParts{vattn, tattn};
  return ad::bmm_nt(ad::matmul(vattn, g.param(*params.metric)), tattn, n_time, n_time);
}

GuidedBlockParams GuidedBlockParams::create(nn::ParameterStore& store, const std::string& name, int d_time, int heads,
                                            int ffn_dim, nn::Rng& rng) {
  if (heads <= 0 || d_time % heads != 0) throw std::invalid_argument(name + ": width not divisible by heads");
  GuidedBlockParams p;
  p.wq = nn::Linear::create(store, name + ".wq", d_time, d_time, false, rng);
  p.wk = nn::Linear::create(store, name + ".wk", d_time, d_time, false, rng);
  p.wv = nn::Linear::create(store, name + ".wv", d_time, d_time, false, rng);
  p.wo = nn::Linear::create(store, name + ".wo", d_time, d_time, false, rng);
  p.ln_attn = nn::LayerNorm::create(store, name + ".ln_attn", d_time);
  p.ln_ffn = nn::LayerNorm::create(store, name + ".ln_ffn", d_time);
  p.ffn = nn::FeedForward::create(store, name + ".ffn", d_time, ffn_dim, rng);
  p.heads = heads;
  return p;
}

Var guided_self_attention_block(Graph& g, const Var& x_time, const std::optional<Var>& corr,
                                const GuidedBlockParams& params, int batch, int n_time,
                                std::vector<Matrix>* weights_out) {
  const Eigen::Index d = x_time.cols();
  ad::AttentionSpec spec;
  spec.batch = batch;
  spec.nq = n_time;
  spec.nk = n_time;
  spec.heads = params.heads;
  spec.scale = 1.0 / std::sqrt(static_cast<double>(d));
  spec.bias = corr;
  spec.weights_out = weights_out;
  Var o = ad::attention(params.wq(g, x_time), params.wk(g, x_time), params.wv(g, x_time), spec);
  Var o_norm = params.ln_attn(g, ad::add(x_time, params.wo(g, o)));
  return params.ln_ffn(g, ad::add(params.ffn(g, o_norm), o_norm));
}

FusionParams FusionParams::create(nn::ParameterStore& store, const std::string& name, int d_time, int d_image,
                                  int d_text, int heads, nn::Rng& rng) {
  return FusionParams{nn::MultiHeadAttention::create(store, name + ".image", d_time, d_image, heads, rng),
                      nn::MultiHeadAttention::create(store, name + ".text", d_time, d_text, heads, rng)};
}

FusedRepresentation fuse_modalities(Graph& g, const Var& x_time_enc, const Var& image_distilled,
                                    const Var& text_distilled, const FusionParams& params, int batch, int n_time) {
  if (x_time_enc.rows() != static_cast<Eigen::Index>(batch) * n_time)
    throw std::invalid_argument("fuse_modalities: time rows do not match batch layout");
  if (image_distilled.rows() % batch != 0 || text_distilled.rows() % batch != 0)
    throw std::invalid_argument("fuse_modalities: distilled rows do not match batch layout");
  const int K_image = static_cast<int>(image_distilled.rows() / batch);
  const int K_text = static_cast<int>(text_distilled.rows() / batch);
  nn::AttentionCall image_call;
  image_call.batch = batch;
  image_call.nq = n_time;
  image_call.nk = K_image;
  nn::AttentionCall text_call = image_call;
  text_call.nk = K_text;
  FusedRepresentation out;
  out.image_tilde = params.image_attn(g, x_time_enc, image_distilled, image_call);
  out.text_tilde = params.text_attn(g, x_time_enc, text_distilled, text_call);
  out.fused = ad::add(ad::add(x_time_enc, out.image_tilde), out.text_tilde);
  out.image_distilled = image_distilled;
  out.text_distilled = text_distilled;
  out.batch = batch;
  out.n_time = n_time;
  return out;
}

}  // namespace aurora::encoder
