#include "aurora/model.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <utility>

namespace aurora::model {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

const std::vector<std::pair<const char*, int ModelConfig::*>>& int_fields() {
  static const std::vector<std::pair<const char*, int ModelConfig::*>> fields{
      {"context_length", &ModelConfig::context_length},
      {"horizon_length", &ModelConfig::horizon_length},
      {"p_time", &ModelConfig::p_time},
      {"d_time", &ModelConfig::d_time},
      {"d_image", &ModelConfig::d_image},
      {"d_text", &ModelConfig::d_text},
      {"heads", &ModelConfig::heads},
      {"ffn_dim", &ModelConfig::ffn_dim},
      {"encoder_layers", &ModelConfig::encoder_layers},
      {"guided_layers", &ModelConfig::guided_layers},
      {"K_image", &ModelConfig::K_image},
      {"K_text", &ModelConfig::K_text},
      {"M", &ModelConfig::M},
      {"causal_layers", &ModelConfig::causal_layers},
      {"cross_layers", &ModelConfig::cross_layers},
      {"retriever_layers", &ModelConfig::retriever_layers},
      {"flow_layers", &ModelConfig::flow_layers},
      {"flow_width", &ModelConfig::flow_width},
      {"temb_dim", &ModelConfig::temb_dim},
      {"image_size", &ModelConfig::image_size},
      {"p_image", &ModelConfig::p_image},
      {"n_text_max", &ModelConfig::n_text_max},
  };
  return fields;
}

}  // namespace

void ModelConfig::validate() const {
  for (const auto& [name, member] : int_fields())
    if (this->*member < 0) throw std::invalid_argument(std::string("model config: negative ") + name);
  if (p_time < 1 || context_length < 4) throw std::invalid_argument("model config: bad context/patch length");
  if (horizon_length < p_time || horizon_length % p_time != 0)
    throw std::invalid_argument("model config: horizon_length must be a positive multiple of p_time");
  if (heads < 1 || d_time % heads || d_image % heads || d_text % heads)
    throw std::invalid_argument("model config: widths must be divisible by heads");
  if (K_image < 1 || K_text < 1) throw std::invalid_argument("model config: K_image and K_text must be >= 1");
  if (M < 4) throw std::invalid_argument("model config: M must be >= 4");
  if (flow_layers < 2 || flow_width < 1 || temb_dim < 2 || temb_dim % 2)
    throw std::invalid_argument("model config: bad flow network shape");
  if (n_text_max < 1) throw std::invalid_argument("model config: n_text_max must be >= 1");
  image_config().validate();
}

json ModelConfig::to_json() const {
  json j;
  for (const auto& [name, member] : int_fields()) j[name] = this->*member;
  j["use_guidance"] = use_guidance;
  j["use_prototype"] = use_prototype;
  return j;
}

ModelConfig ModelConfig::from_json(const json& j) {
  ModelConfig c;
  for (const auto& [key, value] : j.items()) {
    if (key == "use_guidance") {
      c.use_guidance = value.get<bool>();
      continue;
    }
    if (key == "use_prototype") {
      c.use_prototype = value.get<bool>();
      continue;
    }
    auto it = std::find_if(int_fields().begin(), int_fields().end(), [&](const auto& f) { return key == f.first; });
    if (it == int_fields().end()) throw std::invalid_argument("model config: unknown key " + key);
    c.*(it->second) = value.get<int>();
  }
  c.validate();
  return c;
}

AuroraModel::AuroraModel(const ModelConfig& config, tokenization::TextVocab vocab, std::uint64_t seed)
    : config_(config), vocab_(std::move(vocab)) {
  config_.validate();
  const ModelConfig& c = config_;
  nn::Rng rng(nn::derive_seed(seed, {0x696e6974ULL}));
  const auto icfg = c.image_config();

  time_embed_ = nn::Linear::create(store_, "time.embed", c.p_time, c.d_time, true, rng);
  time_pos_ = &store_.create("time.pos", nn::randn(c.n_time(), c.d_time, 0.02, rng));
  image_embed_ = nn::Linear::create(store_, "image.embed", icfg.patch_dim(), c.d_image, true, rng);
  image_pos_ = &store_.create("image.pos", nn::randn(icfg.n_image(), c.d_image, 0.02, rng));
  text_table_ = &store_.create("text.embed", nn::randn(vocab_.size(), c.d_text, 1.0, rng));
  text_pos_ = &store_.create("text.pos", nn::randn(c.n_text_max, c.d_text, 0.02, rng));
  image_encoder_ =
      encoder::ModalityEncoderParams::create(store_, "image.encoder", c.encoder_layers, c.d_image, c.heads, c.ffn_dim, rng);
  text_encoder_ =
      encoder::ModalityEncoderParams::create(store_, "text.encoder", c.encoder_layers, c.d_text, c.heads, c.ffn_dim, rng);
  image_distiller_ = encoder::DistillerParams::create(store_, "image.distiller", c.K_image, c.d_image, c.heads, rng);
  text_distiller_ = encoder::DistillerParams::create(store_, "text.distiller", c.K_text, c.d_text, c.heads, rng);
  null_text_ = &store_.create("text.null_tokens", nn::randn(c.K_text, c.d_text, 1.0, rng));
  guidance_ = encoder::GuidanceParams::create(store_, "guidance", c.d_time, c.d_image, c.d_text, c.K_image, c.K_text, rng);
  for (int l = 0; l < c.guided_layers; ++l)
    guided_.push_back(
        encoder::GuidedBlockParams::create(store_, "guided" + std::to_string(l), c.d_time, c.heads, c.ffn_dim, rng));
  fusion_ = encoder::FusionParams::create(store_, "fusion", c.d_time, c.d_image, c.d_text, c.heads, rng);
  decoder_ = decoder::ConditionDecoderParams::create(store_, "decoder", c.d_time, c.heads, c.ffn_dim, c.causal_layers,
                                                     c.cross_layers, rng);
  retriever_ =
      decoder::RetrieverParams::create(store_, "retriever", c.d_time, c.heads, c.ffn_dim, c.retriever_layers, c.M, rng);
  decoder::PrototypeBank bank = decoder::init_prototype_bank(c.M, c.p_time, nn::derive_seed(seed, {0x62616e6bULL}));
  bank_ = &store_.create("prototype.bank", bank.rows);
  bank_families_ = bank.families;
  flow_ = flow::VelocityNetParams::create(store_, "flow", c.p_time, c.d_time, c.flow_width, c.flow_layers, c.temb_dim,
                                          rng);
}

PreparedSample AuroraModel::prepare(const corpus::MultimodalSample& sample) const {
  const ModelConfig& c = config_;
  if (static_cast<int>(sample.context.size()) != c.context_length)
    throw std::invalid_argument("prepare: context length " + std::to_string(sample.context.size()) + " != " +
                                std::to_string(c.context_length));
  PreparedSample p;
  p.patches = tokenization::patch_time_series(sample.context, c.p_time);
  const int period = tokenization::detect_dominant_period(sample.context);
  p.image_patches =
      tokenization::image_patches(tokenization::render_endogenous_image(sample.context, period, c.image_config()),
                                  c.p_image);
  tokenization::TokenizedText tok = tokenization::tokenize_text(sample.text, vocab_, c.n_text_max);
  p.text_ids = std::move(tok.ids);
  p.text_mask = std::move(tok.mask);
  p.has_text = std::any_of(p.text_mask.begin(), p.text_mask.end(), [](std::uint8_t m) { return m != 0; });
  if (!sample.horizon.empty()) {
    if (static_cast<int>(sample.horizon.size()) != c.horizon_length)
      throw std::invalid_argument("prepare: horizon length mismatch");
    p.target = Eigen::Map<const Matrix>(sample.horizon.data(), c.F(), c.p_time);
  }
  p.norm_stats = sample.norm_stats;
  p.horizon_raw = sample.horizon_raw;
  return p;
}

ForwardResult AuroraModel::forward(Graph& g, const std::vector<const PreparedSample*>& batch,
                                   const std::vector<std::uint8_t>& text_present) const {
  const ModelConfig& c = config_;
  const int B = static_cast<int>(batch.size());
  if (B == 0) throw std::invalid_argument("forward: empty batch");
  if (static_cast<int>(text_present.size()) != B) throw std::invalid_argument("forward: text flag count");
  const int n = c.n_time(), F = c.F(), n_img = c.image_config().n_image(), n_txt = c.n_text_max;

  Matrix patches(static_cast<Eigen::Index>(B) * n, c.p_time);
  Matrix pixels(static_cast<Eigen::Index>(B) * n_img, c.image_config().patch_dim());
  for (int b = 0; b < B; ++b) {
    patches.middleRows(static_cast<Eigen::Index>(b) * n, n) = batch[b]->patches;
    pixels.middleRows(static_cast<Eigen::Index>(b) * n_img, n_img) = batch[b]->image_patches;
  }
  Var x_time = ad::add(time_embed_(g, g.constant(std::move(patches))), ad::tile(g.param(*time_pos_), B));
  x_time = encoder::encode_modality(g, x_time, encoder::Modality::TimeSkip, {}, B, n);

  Var x_img = ad::add(image_embed_(g, g.constant(std::move(pixels))), ad::tile(g.param(*image_pos_), B));
  x_img = encoder::encode_modality(g, x_img, encoder::Modality::Image, image_encoder_, B, n_img);
  Var img_dist = encoder::distill_tokens(g, image_distiller_, x_img, B, n_img);

  std::vector<std::uint8_t> present(B);
  bool any_text = false;
  for (int b = 0; b < B; ++b) {
    present[b] = (text_present[b] && batch[b]->has_text) ? 1 : 0;
    any_text = any_text || present[b];
  }
  Var txt_dist;
  if (any_text) {
    std::vector<int> ids;
    std::vector<std::uint8_t> mask;
    ids.reserve(static_cast<std::size_t>(B) * n_txt);
    mask.reserve(ids.capacity());
    for (int b = 0; b < B; ++b) {
      ids.insert(ids.end(), batch[b]->text_ids.begin(), batch[b]->text_ids.end());
      // Absent text keeps one visible key so the discarded branch stays finite.
      if (present[b]) {
        mask.insert(mask.end(), batch[b]->text_mask.begin(), batch[b]->text_mask.end());
      } else {
        mask.push_back(1);
        mask.insert(mask.end(), static_cast<std::size_t>(n_txt - 1), 0);
      }
    }
    Var x_txt = ad::add(ad::gather_rows(g.param(*text_table_), ids), ad::tile(g.param(*text_pos_), B));
    x_txt = encoder::encode_modality(g, x_txt, encoder::Modality::Text, text_encoder_, B, n_txt, mask);
    txt_dist = encoder::resolve_text_tokens(g, encoder::distill_tokens(g, text_distiller_, x_txt, B, n_txt, mask),
                                            *null_text_, present);
  } else {
    txt_dist = ad::tile(g.param(*null_text_), B);
  }

  ForwardResult out;
  if (c.use_guidance) out.corr = encoder::compute_guidance_corr(g, x_time, img_dist, txt_dist, guidance_, B, n);
  Var h = x_time;
  for (const encoder::GuidedBlockParams& block : guided_)
    h = encoder::guided_self_attention_block(g, h, out.corr, block, B, n);
  out.fused = encoder::fuse_modalities(g, h, img_dist, txt_dist, fusion_, B, n);
  out.conditions = decoder::decode_conditions(g, decoder_, out.fused.fused, B, n, F);
  if (c.use_prototype) {
    decoder::Retrieval r = decoder::retrieve_prototypes(g, retriever_, out.fused.text_tilde, out.fused.image_tilde,
                                                        g.param(*bank_), B, n, F);
    out.weights = r.weights;
    out.prototypes = r.prototypes;
  } else {
    out.prototypes = g.constant(Matrix::Zero(static_cast<Eigen::Index>(B) * F, c.p_time));
  }
  return out;
}

Var AuroraModel::loss(Graph& g, const std::vector<const PreparedSample*>& batch,
                      const std::vector<std::uint8_t>& text_present, const Eigen::VectorXd& t,
                      const Matrix& noise) const {
  const int B = static_cast<int>(batch.size()), F = config_.F();
  if (t.size() != B) throw std::invalid_argument("loss: one flow time per sample expected");
  if (noise.rows() != static_cast<Eigen::Index>(B) * F || noise.cols() != config_.p_time)
    throw std::invalid_argument("loss: noise shape mismatch");
  Matrix target(static_cast<Eigen::Index>(B) * F, config_.p_time);
  Eigen::VectorXd t_rows(static_cast<Eigen::Index>(B) * F);
  for (int b = 0; b < B; ++b) {
    if (batch[b]->target.rows() != F) throw std::invalid_argument("loss: sample without horizon");
    target.middleRows(static_cast<Eigen::Index>(b) * F, F) = batch[b]->target;
    t_rows.segment(static_cast<Eigen::Index>(b) * F, F).setConstant(t(b));
  }
  ForwardResult fwd = forward(g, batch, text_present);
  Var y0 = config_.use_prototype ? ad::add(fwd.prototypes, g.constant(noise)) : g.constant(noise);
  return flow::flow_matching_loss(g, flow_, y0, g.constant(std::move(target)), fwd.conditions, t_rows);
}

std::vector<flow::ForecastDistribution> AuroraModel::forecast(const std::vector<const PreparedSample*>& batch, int S,
                                                              int J, std::uint64_t seed, bool mask_text,
                                                              long first_index) const {
  const int F = config_.F();
  constexpr int kChunk = 32;
  std::vector<flow::ForecastDistribution> out;
  out.reserve(batch.size());
  for (std::size_t start = 0; start < batch.size(); start += kChunk) {
    const std::size_t stop = std::min(batch.size(), start + kChunk);
    std::vector<const PreparedSample*> chunk(batch.begin() + static_cast<long>(start), batch.begin() + static_cast<long>(stop));
    const int B = static_cast<int>(chunk.size());
    Graph g(false);
    ForwardResult fwd = forward(g, chunk, std::vector<std::uint8_t>(chunk.size(), mask_text ? 0 : 1));
    std::vector<int> token_ids(static_cast<std::size_t>(B) * F);
    for (int b = 0; b < B; ++b)
      for (int i = 0; i < F; ++i)
        token_ids[static_cast<std::size_t>(b) * F + i] = static_cast<int>((first_index + static_cast<long>(start) + b) * F + i);
    flow::ForecastDistribution all =
        flow::sample_forecast(fwd.conditions.value(), fwd.prototypes.value(), J, S, flow_, seed, token_ids);
    for (int b = 0; b < B; ++b) {
      flow::ForecastDistribution d;
      d.S = S;
      d.F = F;
      d.p_time = config_.p_time;
      d.samples.resize(static_cast<Eigen::Index>(S) * F, config_.p_time);
      for (int s = 0; s < S; ++s)
        d.samples.middleRows(static_cast<Eigen::Index>(s) * F, F) =
            all.samples.middleRows(static_cast<Eigen::Index>(s) * B * F + static_cast<Eigen::Index>(b) * F, F);
      d.norm_stats = chunk[b]->norm_stats;
      out.push_back(std::move(d));
    }
  }
  return out;
}

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint format assumes a little-endian host");

struct Archive {
  json header;
  std::vector<char> data;
};

Archive read_archive(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  std::uint64_t header_len = 0;
  in.read(reinterpret_cast<char*>(&header_len), sizeof header_len);
  if (!in || header_len > (1ULL << 30)) throw std::runtime_error("corrupt checkpoint header in " + path.string());
  std::string header(header_len, '\0');
  in.read(header.data(), static_cast<std::streamsize>(header_len));
  if (!in) throw std::runtime_error("truncated checkpoint header in " + path.string());
  Archive a;
  a.header = json::parse(header);
  a.data.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  return a;
}

Matrix tensor_at(const Archive& a, const json& entry) {
  if (entry.at("dtype") != "f32") throw std::runtime_error("checkpoint: unsupported dtype");
  const auto shape = entry.at("shape").get<std::vector<long>>();
  if (shape.size() != 2) throw std::runtime_error("checkpoint: tensors must be 2-d");
  const auto offset = entry.at("offset").get<std::size_t>();
  const std::size_t count = static_cast<std::size_t>(shape[0] * shape[1]);
  if (offset + count * sizeof(float) > a.data.size()) throw std::runtime_error("checkpoint: tensor out of range");
  std::vector<float> buf(count);
  std::memcpy(buf.data(), a.data.data() + offset, count * sizeof(float));
  Matrix m(shape[0], shape[1]);
  for (std::size_t i = 0; i < count; ++i) m.data()[i] = buf[i];
  return m;
}

void assign_parameters(AuroraModel& model, const Archive& a) {
  std::map<std::string, const json*> entries;
  for (const json& e : a.header.at("tensors")) entries[e.at("name").get<std::string>()] = &e;
  for (ad::Parameter* p : model.store().all()) {
    auto it = entries.find(p->name);
    if (it == entries.end()) throw std::runtime_error("checkpoint: missing tensor " + p->name);
    Matrix m = tensor_at(a, *it->second);
    if (m.rows() != p->value.rows() || m.cols() != p->value.cols())
      throw std::runtime_error("checkpoint: shape mismatch for " + p->name + ": stored " + std::to_string(m.rows()) +
                               "x" + std::to_string(m.cols()) + ", model " + std::to_string(p->value.rows()) + "x" +
                               std::to_string(p->value.cols()));
    p->value = std::move(m);
    p->zero_grad();
  }
}

}  // namespace

void save_checkpoint(const AuroraModel& model, const fs::path& path, const json& meta) {
  json tensors = json::array();
  std::vector<float> data;
  auto append = [&](const std::string& name, const Matrix& m) {
    tensors.push_back({{"name", name}, {"shape", {m.rows(), m.cols()}}, {"dtype", "f32"},
                       {"offset", data.size() * sizeof(float)}});
    for (Eigen::Index i = 0; i < m.size(); ++i) data.push_back(static_cast<float>(m.data()[i]));
  };
  for (const ad::Parameter* p : model.store().all()) append(p->name, p->value);
  Matrix labels(1, static_cast<Eigen::Index>(model.bank_families().size()));
  for (std::size_t i = 0; i < model.bank_families().size(); ++i)
    labels(0, static_cast<Eigen::Index>(i)) = static_cast<double>(model.bank_families()[i]);
  append("prototype.family_labels", labels);

  json vocab = json::array();
  for (int i = 0; i < model.vocab().size(); ++i) vocab.push_back(model.vocab().token(i));
  json header{{"format", "aurora-checkpoint-1"},
              {"config", model.config().to_json()},
              {"vocab", vocab},
              {"tensors", tensors},
              {"meta", meta.is_null() ? json::object() : meta}};
  const std::string text = header.dump();
  const std::uint64_t len = text.size();

  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write checkpoint " + tmp.string());
    out.write(reinterpret_cast<const char*>(&len), sizeof len);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(float)));
    if (!out) throw std::runtime_error("failed writing checkpoint " + tmp.string());
  }
  fs::rename(tmp, path);
}

LoadedCheckpoint load_checkpoint(const fs::path& path) {
  Archive a = read_archive(path);
  if (a.header.value("format", "") != "aurora-checkpoint-1") throw std::runtime_error("not an aurora checkpoint");
  ModelConfig config = ModelConfig::from_json(a.header.at("config"));
  std::vector<std::string> words;
  const auto tokens = a.header.at("vocab").get<std::vector<std::string>>();
  if (tokens.size() < 3) throw std::runtime_error("checkpoint: vocabulary lacks special tokens");
  words.assign(tokens.begin() + 3, tokens.end());
  LoadedCheckpoint out;
  out.model = std::make_unique<AuroraModel>(config, tokenization::TextVocab::from_words(words), 0);
  assign_parameters(*out.model, a);
  out.meta = a.header.value("meta", json::object());
  return out;
}

void load_parameters(AuroraModel& model, const fs::path& path) { assign_parameters(model, read_archive(path)); }

}  // namespace aurora::model
