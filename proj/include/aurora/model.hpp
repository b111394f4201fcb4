#pragma once

// The assembled forecaster: tokenization, encoding, guided attention,
// fusion, condition decoding, prototype retrieval and the flow head, plus
// its binary checkpoint format.

#include "aurora/autodiff.hpp"
#include "aurora/corpus.hpp"
#include "aurora/decoder.hpp"
#include "aurora/encoder.hpp"
#include "aurora/flowmatch.hpp"
#include "aurora/nn.hpp"
#include "aurora/tokenization.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace aurora::model {

using ad::Graph;
using ad::Matrix;
using ad::Var;

struct ModelConfig {
  int context_length = 176;
  int horizon_length = 64;
  int p_time = 16;
  int d_time = 32;
  int d_image = 32;
  int d_text = 32;
  int heads = 2;
  int ffn_dim = 64;
  int encoder_layers = 2;
  int guided_layers = 2;
  int K_image = 4;
  int K_text = 4;
  int M = 64;
  int causal_layers = 2;
  int cross_layers = 1;
  int retriever_layers = 1;
  int flow_layers = 3;
  int flow_width = 64;
  int temb_dim = 16;
  int image_size = 32;
  int p_image = 8;
  int n_text_max = 16;
  // Ablation switches: guidance off replaces Corr by nothing (vanilla
  // attention); prototype off starts the flow from pure noise.
  bool use_guidance = true;
  bool use_prototype = true;

  int n_time() const { return (context_length + p_time - 1) / p_time; }
  int F() const { return horizon_length / p_time; }
  tokenization::ImageRenderConfig image_config() const { return {image_size, image_size, p_image, d_image}; }
  void validate() const;
  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

// Everything a window contributes to a forward pass, computed once.
struct PreparedSample {
  Matrix patches;        // n_time x p_time
  Matrix image_patches;  // n_image x 3 p_image^2
  std::vector<int> text_ids;
  std::vector<std::uint8_t> text_mask;
  bool has_text = false;
  Matrix target;  // F x p_time, normalized; empty without a horizon
  corpus::NormStats norm_stats;
  std::vector<double> horizon_raw;
};

struct ForwardResult {
  Var conditions;  // (batch*F) x d_time
  Var prototypes;  // (batch*F) x p_time; zeros without the prototype path
  Var weights;     // (batch*F) x M; invalid without the prototype path
  std::optional<Var> corr;
  encoder::FusedRepresentation fused;
};

class AuroraModel {
 public:
  AuroraModel(const ModelConfig& config, tokenization::TextVocab vocab, std::uint64_t seed);
  AuroraModel(const AuroraModel&) = delete;
  AuroraModel& operator=(const AuroraModel&) = delete;

  const ModelConfig& config() const { return config_; }
  ModelConfig& mutable_config() { return config_; }
  const tokenization::TextVocab& vocab() const { return vocab_; }
  nn::ParameterStore& store() { return store_; }
  const nn::ParameterStore& store() const { return store_; }
  const std::vector<decoder::PrototypeFamily>& bank_families() const { return bank_families_; }
  const flow::VelocityNetParams& flow_net() const { return flow_; }

  PreparedSample prepare(const corpus::MultimodalSample& sample) const;

  // `text_present[b]` false substitutes the null text tokens for sample b.
  ForwardResult forward(Graph& g, const std::vector<const PreparedSample*>& batch,
                        const std::vector<std::uint8_t>& text_present) const;

  // Flow-matching loss averaged over the batch's future tokens. `t` has one
  // entry per sample; `noise` is (batch*F) x p_time.
  Var loss(Graph& g, const std::vector<const PreparedSample*>& batch, const std::vector<std::uint8_t>& text_present,
           const Eigen::VectorXd& t, const Matrix& noise) const;

  // Forecast distributions (normalized samples plus each window's stats).
  // Window k of the list draws its noise from token ids (first_index + k)*F + i,
  // so results do not depend on how a list is chunked.
  std::vector<flow::ForecastDistribution> forecast(const std::vector<const PreparedSample*>& batch, int S, int J,
                                                   std::uint64_t seed, bool mask_text = false,
                                                   long first_index = 0) const;

 private:
  ModelConfig config_;
  tokenization::TextVocab vocab_;
  nn::ParameterStore store_;

  nn::Linear time_embed_;
  ad::Parameter* time_pos_ = nullptr;
  nn::Linear image_embed_;
  ad::Parameter* image_pos_ = nullptr;
  ad::Parameter* text_table_ = nullptr;
  ad::Parameter* text_pos_ = nullptr;
  encoder::ModalityEncoderParams image_encoder_;
  encoder::ModalityEncoderParams text_encoder_;
  encoder::DistillerParams image_distiller_;
  encoder::DistillerParams text_distiller_;
  ad::Parameter* null_text_ = nullptr;
  encoder::GuidanceParams guidance_;
  std::vector<encoder::GuidedBlockParams> guided_;
  encoder::FusionParams fusion_;
  decoder::ConditionDecoderParams decoder_;
  decoder::RetrieverParams retriever_;
  ad::Parameter* bank_ = nullptr;
  std::vector<decoder::PrototypeFamily> bank_families_;
  flow::VelocityNetParams flow_;
};

// Archive layout: u64 little-endian header length, JSON header
// {config, vocab, tensors: [{name, shape, dtype, offset}], meta}, then the
// tensors as little-endian binary32. Written to a temporary file and renamed.
void save_checkpoint(const AuroraModel& model, const std::filesystem::path& path, const nlohmann::json& meta = {});

struct LoadedCheckpoint {
  std::unique_ptr<AuroraModel> model;
  nlohmann::json meta;
};

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

// Loads parameter values into an existing model, checking every shape.
void load_parameters(AuroraModel& model, const std::filesystem::path& path);

}  // namespace aurora::model
