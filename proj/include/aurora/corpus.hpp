#pragma once

// Synthetic cross-domain multimodal corpus: generation, on-disk layout,
// windowing and reversible instance normalization.
//
// On-disk layout of a corpus directory:
//   manifest.json            spec echo, window stride, per-series file index
//   series_<domain>_<id>.f32 raw little-endian binary32 values
//   texts.jsonl              {"series_id", "window_start", "text"} per line
//   vocab.txt                tokenizer vocabulary, one token per line

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace aurora::corpus {

enum class TrendFamily { Linear, ExponentialDecay, Logistic, None };

std::string to_string(TrendFamily f);
TrendFamily parse_trend_family(const std::string& s);
// The single word that identifies a family inside an informative text.
std::string trend_keyword(TrendFamily f);
const std::vector<std::string>& all_trend_keywords();
// Shape of a family on u in [0, 1), before amplitude scaling.
double trend_shape(TrendFamily f, double u);

const std::vector<std::string>& domain_names();

struct CorpusSpec {
  int n_domains = 4;
  int series_per_domain = 16;
  int series_length = 1520;
  int context_length = 176;
  int horizon_length = 64;
  std::vector<int> base_periods{8, 12, 16, 24};
  std::vector<TrendFamily> trend_families{TrendFamily::Linear, TrendFamily::ExponentialDecay, TrendFamily::Logistic,
                                          TrendFamily::None};
  double noise_std = 0.1;
  double text_informativeness = 1.0;
  std::uint64_t seed = 0;
  // Peak height of a trend episode relative to a unit-amplitude cycle.
  double trend_amplitude = 2.0;

  void validate() const;
  nlohmann::json to_json() const;
  static CorpusSpec from_json(const nlohmann::json& j);
};

struct NormStats {
  double mu = 0.0;
  double sigma = 1.0;
};

inline constexpr double kEpsSigma = 1e-5;

// (x - mean) / max(std, kEpsSigma) with population moments of `context`.
std::pair<std::vector<double>, NormStats> instance_normalize(std::span<const double> context);
std::vector<double> denormalize(std::span<const double> values, const NormStats& stats);

struct WindowIndex {
  int context_start = 0;
  int horizon_start = 0;
};

// Windows of context T and horizon H starting at 0, stride, 2*stride, ...
// while they fit.
std::vector<WindowIndex> window_samples(int series_length, int T, int H, int stride);

struct WindowMeta {
  std::string domain;
  TrendFamily trend = TrendFamily::None;
  int period = 0;
};

// `variant` picks one of the phrasings deterministically.
std::string render_text_description(const WindowMeta& meta, bool informative, int variant = 0);
// Every word any template can produce, sorted and unique.
std::vector<std::string> template_vocabulary();

struct MultimodalSample {
  std::vector<double> context;  // normalized
  std::vector<double> horizon;  // normalized with the context statistics
  std::vector<double> horizon_raw;
  std::string text;
  int domain_id = 0;
  NormStats norm_stats;
  std::string series_id;
  int window_start = 0;
};

MultimodalSample make_sample(std::span<const double> raw_context, std::span<const double> raw_horizon,
                             std::string text, int domain_id = 0);

struct CorpusHandle {
  std::filesystem::path dir;
  nlohmann::json manifest;
};

CorpusHandle generate_synthetic_corpus(const CorpusSpec& spec, const std::filesystem::path& out_dir);

enum class Split { Train, Val, Test };
Split parse_split(const std::string& s);
std::string to_string(Split s);

struct SeriesRecord {
  std::string id;
  int domain_id = 0;
  int period = 0;
  std::vector<double> values;
  std::vector<TrendFamily> episodes;
};

class Corpus {
 public:
  static Corpus load(const std::filesystem::path& dir);

  const CorpusSpec& spec() const { return spec_; }
  const std::vector<SeriesRecord>& series() const { return series_; }
  const std::filesystem::path& dir() const { return dir_; }
  int window_stride() const { return stride_; }
  const std::string& text(const std::string& series_id, int window_start) const;

  // Windows of each series split 7:1:2 by start index; `limit_fraction`
  // keeps the leading fraction of each series' split windows.
  std::vector<MultimodalSample> samples(Split split, double limit_fraction = 1.0) const;

 private:
  CorpusSpec spec_;
  std::filesystem::path dir_;
  int stride_ = 1;
  std::vector<SeriesRecord> series_;
  std::map<std::pair<std::string, int>, std::string> texts_;
};

// Index range [begin, end) of the windows belonging to `split` out of n.
std::pair<int, int> split_range(int n_windows, Split split);

}  // namespace aurora::corpus
