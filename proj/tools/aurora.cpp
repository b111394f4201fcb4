// Command-line front end: corpus generation, training, evaluation,
// ablation, inference-scaling study and raw sampling.

#include "aurora/corpus.hpp"
#include "aurora/harness.hpp"
#include "aurora/model.hpp"
#include "aurora/tokenization.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <openssl/evp.h>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <stdexcept>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace aurora;

namespace {

std::string sha256_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
  std::vector<char> buf(1 << 16);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    EVP_DigestUpdate(ctx, buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx, digest, &len);
  EVP_MD_CTX_free(ctx);
  std::string hex;
  char tmp[3];
  for (unsigned int i = 0; i < len; ++i) {
    std::snprintf(tmp, sizeof tmp, "%02x", digest[i]);
    hex += tmp;
  }
  return hex;
}

std::vector<double> read_f32(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::vector<float> buf;
  float v;
  while (in.read(reinterpret_cast<char*>(&v), sizeof v)) buf.push_back(v);
  return {buf.begin(), buf.end()};
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  out << text;
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

std::vector<int> parse_int_list(const std::string& s) {
  std::vector<int> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ',')) out.push_back(std::stoi(item));
  if (out.empty()) throw std::invalid_argument("empty list: " + s);
  return out;
}

harness::TrainConfig load_train_config(const std::string& preset, const std::string& path) {
  harness::TrainConfig base = harness::TrainConfig::named(preset);
  return path.empty() ? base : harness::TrainConfig::load(path, base);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multimodal probabilistic time-series forecaster"};
  app.require_subcommand(1);

  // generate-corpus
  std::string spec_path, corpus_out;
  std::uint64_t gen_seed = 0;
  bool gen_seed_set = false;
  auto* gen = app.add_subcommand("generate-corpus", "Write a synthetic multimodal corpus");
  gen->add_option("--spec", spec_path, "Corpus spec JSON (defaults when omitted)");
  gen->add_option("--out", corpus_out, "Output directory")->required();
  gen->add_option("--seed", gen_seed, "Override the spec seed")->each([&](const std::string&) { gen_seed_set = true; });

  // render-image
  std::string render_in, render_out;
  int render_size = 32;
  auto* render = app.add_subcommand("render-image", "Render the endogenous image of a float32 series as PGM");
  render->add_option("--in", render_in, "Raw little-endian float32 series")->required();
  render->add_option("--out", render_out, "Output .pgm")->required();
  render->add_option("--size", render_size, "Image side in pixels");

  // train
  std::string config_path, preset = "desk", corpus_dir, train_out, variant;
  std::uint64_t seed = 0;
  bool seed_set = false;
  long max_steps = -1;
  double limit_fraction = 1.0;
  auto* train = app.add_subcommand("train", "Train a model on a corpus");
  train->add_option("--config", config_path, "key=value config file");
  train->add_option("--preset", preset, "Named base config: desk or paper");
  train->add_option("--corpus", corpus_dir, "Corpus directory")->required();
  train->add_option("--out", train_out, "Output directory")->required();
  train->add_option("--seed", seed)->each([&](const std::string&) { seed_set = true; });
  train->add_option("--max-steps", max_steps);
  train->add_option("--variant", variant, "Ablation variant");
  train->add_option("--limit-fraction", limit_fraction, "Fraction of each series' training windows to use");

  // evaluate
  std::string ckpt_path, split = "test", eval_out;
  int samples = 100, steps = 16;
  bool mask_text = false;
  auto* eval = app.add_subcommand("evaluate", "Compute MSE/MAE/CRPS/NMAE on a split");
  eval->add_option("--checkpoint", ckpt_path)->required();
  eval->add_option("--corpus", corpus_dir)->required();
  eval->add_option("--split", split)->check(CLI::IsMember({"train", "val", "test"}));
  eval->add_option("--samples", samples);
  eval->add_option("--steps", steps);
  eval->add_option("--seed", seed);
  eval->add_option("--out", eval_out, "Report path stem (writes .json and .csv)")->required();
  eval->add_flag("--mask-text", mask_text);
  eval->add_option("--limit-fraction", limit_fraction);

  // ablate
  std::string seeds_list = "0,1,2,3,4", variants_list = "all", ablate_out;
  auto* ablate = app.add_subcommand("ablate", "Train and evaluate the ablation variants");
  ablate->add_option("--config", config_path);
  ablate->add_option("--preset", preset);
  ablate->add_option("--corpus", corpus_dir)->required();
  ablate->add_option("--out", ablate_out)->required();
  ablate->add_option("--seeds", seeds_list, "Comma-separated seeds");
  ablate->add_option("--variants", variants_list, "Comma-separated variants or 'all'");
  ablate->add_option("--max-steps", max_steps);
  ablate->add_option("--samples", samples);
  ablate->add_option("--steps", steps);
  ablate->add_option("--seed", seed, "Unused; seeds come from --seeds");
  ablate->add_option("--limit-fraction", limit_fraction);

  // scale-study
  std::string grid_s = "1,5,10,25,50,100", grid_j = "4,8,16,32", scale_out;
  auto* scale = app.add_subcommand("scale-study", "CRPS/NMAE against sample count and Euler steps");
  scale->add_option("--checkpoint", ckpt_path)->required();
  scale->add_option("--corpus", corpus_dir)->required();
  scale->add_option("--split", split)->check(CLI::IsMember({"train", "val", "test"}));
  scale->add_option("--sample-counts", grid_s);
  scale->add_option("--step-counts", grid_j);
  scale->add_option("--seed", seed);
  scale->add_option("--out", scale_out)->required();
  scale->add_option("--limit-fraction", limit_fraction);

  // sample
  std::string sample_out;
  int window = 0;
  auto* sample = app.add_subcommand("sample", "Draw forecast samples for one window");
  sample->add_option("--checkpoint", ckpt_path)->required();
  sample->add_option("--corpus", corpus_dir)->required();
  sample->add_option("--split", split)->check(CLI::IsMember({"train", "val", "test"}));
  sample->add_option("--window", window, "Window index within the split");
  sample->add_option("--samples", samples);
  sample->add_option("--steps", steps);
  sample->add_option("--seed", seed);
  sample->add_option("--out", sample_out, "Output directory")->required();
  sample->add_flag("--mask-text", mask_text);
  sample->add_option("--limit-fraction", limit_fraction);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      corpus::CorpusSpec spec;
      if (!spec_path.empty()) {
        std::ifstream in(spec_path);
        if (!in) throw std::runtime_error("cannot read spec " + spec_path);
        spec = corpus::CorpusSpec::from_json(json::parse(in));
      }
      if (gen_seed_set) spec.seed = gen_seed;
      corpus::generate_synthetic_corpus(spec, corpus_out);
      std::cout << "wrote corpus to " << corpus_out << "\n";
    } else if (*render) {
      const std::vector<double> x = read_f32(render_in);
      auto [norm, stats] = corpus::instance_normalize(x);
      const int period = tokenization::detect_dominant_period(norm);
      tokenization::ImageRenderConfig cfg{render_size, render_size, 1, 1};
      tokenization::write_pgm(tokenization::render_endogenous_image(norm, period, cfg), render_out);
      std::cout << "period " << period << ", wrote " << render_out << "\n";
    } else if (*train) {
      harness::TrainConfig cfg = load_train_config(preset, config_path);
      if (seed_set) cfg.seed = seed;
      if (max_steps >= 0) cfg.max_steps = max_steps;
      if (!variant.empty()) cfg.variant = harness::parse_variant(variant);
      if (train->count("--limit-fraction")) cfg.limit_fraction = limit_fraction;
      const corpus::Corpus corpus = corpus::Corpus::load(corpus_dir);
      const auto log = harness::train_to_dir(cfg, corpus, train_out);
      std::cout << "trained " << log.size() << " steps";
      if (!log.empty()) std::cout << ", final loss " << log.back().loss;
      std::cout << "\n";
    } else if (*eval) {
      const corpus::Corpus corpus = corpus::Corpus::load(corpus_dir);
      auto ckpt = model::load_checkpoint(ckpt_path);
      const auto data =
          harness::prepare_all(*ckpt.model, corpus.samples(corpus::parse_split(split), limit_fraction));
      harness::EvalOptions opt;
      opt.samples = samples;
      opt.steps = steps;
      opt.seed = seed;
      opt.mask_text = mask_text;
      const auto report = harness::evaluate(*ckpt.model, data, opt, corpus.dir().filename().string() + ":" + split);
      harness::write_report(report, eval_out);
      std::cout << report.to_json().dump() << "\n";
    } else if (*ablate) {
      harness::TrainConfig cfg = load_train_config(preset, config_path);
      if (max_steps >= 0) cfg.max_steps = max_steps;
      if (ablate->count("--limit-fraction")) cfg.limit_fraction = limit_fraction;
      std::vector<std::uint64_t> seeds;
      for (int s : parse_int_list(seeds_list)) seeds.push_back(static_cast<std::uint64_t>(s));
      std::vector<harness::AblationVariant> variants;
      if (variants_list == "all") {
        variants = harness::all_variants();
      } else {
        std::stringstream in(variants_list);
        std::string item;
        while (std::getline(in, item, ',')) variants.push_back(harness::parse_variant(item));
      }
      harness::EvalOptions opt;
      opt.samples = samples;
      opt.steps = steps;
      const corpus::Corpus corpus = corpus::Corpus::load(corpus_dir);
      const auto table = harness::run_ablation(cfg, corpus, seeds, variants, opt);
      write_text(fs::path(ablate_out) / "ablation.csv", table.to_csv());
      json medians;
      for (auto v : variants)
        medians[harness::to_string(v)] = {{"mse", table.median_mse(v)}, {"mae", table.median_mae(v)}};
      write_text(fs::path(ablate_out) / "ablation.json", medians.dump(2) + "\n");
      std::cout << table.to_csv();
    } else if (*scale) {
      const corpus::Corpus corpus = corpus::Corpus::load(corpus_dir);
      auto ckpt = model::load_checkpoint(ckpt_path);
      const auto data =
          harness::prepare_all(*ckpt.model, corpus.samples(corpus::parse_split(split), limit_fraction));
      const auto points = harness::scale_study(*ckpt.model, data, parse_int_list(grid_s), parse_int_list(grid_j), seed);
      write_text(fs::path(scale_out) / "scale_study.csv", harness::scale_csv(points));
      harness::write_scale_plot(points, fs::path(scale_out) / "scale_study.png");
      std::cout << harness::scale_csv(points);
    } else if (*sample) {
      const corpus::Corpus corpus = corpus::Corpus::load(corpus_dir);
      auto ckpt = model::load_checkpoint(ckpt_path);
      const auto raw = corpus.samples(corpus::parse_split(split), limit_fraction);
      if (window < 0 || window >= static_cast<int>(raw.size()))
        throw std::out_of_range("window index outside the split (" + std::to_string(raw.size()) + " windows)");
      const model::PreparedSample prepared = ckpt.model->prepare(raw[static_cast<std::size_t>(window)]);
      const auto dist = ckpt.model->forecast({&prepared}, samples, steps, seed, mask_text).front();
      fs::create_directories(sample_out);
      std::vector<float> buf;
      for (int s = 0; s < dist.S; ++s) {
        const ad::Matrix draw = dist.sample(s);
        for (Eigen::Index i = 0; i < draw.size(); ++i)
          buf.push_back(static_cast<float>(draw.data()[i] * dist.norm_stats.sigma + dist.norm_stats.mu));
      }
      std::ofstream out(fs::path(sample_out) / "samples.f32", std::ios::binary | std::ios::trunc);
      out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
      if (!out) throw std::runtime_error("failed writing samples");
      json meta{{"seed", seed},
                {"J", steps},
                {"S", samples},
                {"F", dist.F},
                {"p_time", dist.p_time},
                {"split", split},
                {"window", window},
                {"series_id", raw[static_cast<std::size_t>(window)].series_id},
                {"window_start", raw[static_cast<std::size_t>(window)].window_start},
                {"checkpoint_sha256", sha256_file(ckpt_path)}};
      write_text(fs::path(sample_out) / "samples.json", meta.dump(2) + "\n");
      std::cout << "wrote " << dist.S << " samples to " << sample_out << "\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
