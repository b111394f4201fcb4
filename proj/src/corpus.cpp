#include "aurora/corpus.hpp"

#include "aurora/nn.hpp"
#include "aurora/tokenization.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>

namespace aurora::corpus {

namespace fs = std::filesystem;
using nlohmann::json;

static_assert(std::endian::native == std::endian::little, "corpus files are written in host order");

std::string to_string(TrendFamily f) {
  switch (f) {
    case TrendFamily::Linear: return "linear";
    case TrendFamily::ExponentialDecay: return "exponential-decay";
    case TrendFamily::Logistic: return "logistic";
    case TrendFamily::None: return "none";
  }
  throw std::invalid_argument("unknown trend family");
}

TrendFamily parse_trend_family(const std::string& s) {
  if (s == "linear") return TrendFamily::Linear;
  if (s == "exponential-decay") return TrendFamily::ExponentialDecay;
  if (s == "logistic") return TrendFamily::Logistic;
  if (s == "none") return TrendFamily::None;
  throw std::invalid_argument("unknown trend family: " + s);
}

std::string trend_keyword(TrendFamily f) {
  switch (f) {
    case TrendFamily::Linear: return "linear";
    case TrendFamily::ExponentialDecay: return "decay";
    case TrendFamily::Logistic: return "logistic";
    case TrendFamily::None: return "flat";
  }
  throw std::invalid_argument("unknown trend family");
}

const std::vector<std::string>& all_trend_keywords() {
  static const std::vector<std::string> kw{"linear", "decay", "logistic", "flat"};
  return kw;
}

double trend_shape(TrendFamily f, double u) {
  switch (f) {
    case TrendFamily::Linear: return u;
    case TrendFamily::ExponentialDecay: return std::exp(-4.0 * u);
    case TrendFamily::Logistic: return 1.0 / (1.0 + std::exp(-12.0 * (u - 0.5)));
    case TrendFamily::None: return 0.0;
  }
  throw std::invalid_argument("unknown trend family");
}

const std::vector<std::string>& domain_names() {
  static const std::vector<std::string> names{"health",  "energy",  "traffic",     "economy",
                                              "climate", "retail", "agriculture", "security"};
  return names;
}

void CorpusSpec::validate() const {
  if (n_domains < 1 || n_domains > static_cast<int>(domain_names().size()))
    throw std::invalid_argument("corpus spec: n_domains must be in [1, 8]");
  if (series_per_domain < 1) throw std::invalid_argument("corpus spec: series_per_domain must be >= 1");
  if (context_length < 1 || horizon_length < 2) throw std::invalid_argument("corpus spec: bad window lengths");
  if (context_length + horizon_length > series_length)
    throw std::invalid_argument("corpus spec: context_length + horizon_length exceeds series_length");
  if (!(text_informativeness >= 0.0 && text_informativeness <= 1.0))
    throw std::invalid_argument("corpus spec: text_informativeness outside [0, 1]");
  if (base_periods.empty()) throw std::invalid_argument("corpus spec: base_periods is empty");
  for (int p : base_periods)
    if (p < 2) throw std::invalid_argument("corpus spec: every period must be >= 2");
  if (trend_families.empty()) throw std::invalid_argument("corpus spec: trend_families is empty");
  if (!(noise_std >= 0.0)) throw std::invalid_argument("corpus spec: noise_std must be >= 0");
}

json CorpusSpec::to_json() const {
  json fam = json::array();
  for (TrendFamily f : trend_families) fam.push_back(to_string(f));
  return json{{"n_domains", n_domains},
              {"series_per_domain", series_per_domain},
              {"series_length", series_length},
              {"context_length", context_length},
              {"horizon_length", horizon_length},
              {"base_periods", base_periods},
              {"trend_families", fam},
              {"noise_std", noise_std},
              {"text_informativeness", text_informativeness},
              {"seed", seed},
              {"trend_amplitude", trend_amplitude}};
}

CorpusSpec CorpusSpec::from_json(const json& j) {
  static const std::set<std::string> known{"n_domains",      "series_per_domain", "series_length", "context_length",
                                           "horizon_length", "base_periods",      "trend_families", "noise_std",
                                           "text_informativeness", "seed",        "trend_amplitude"};
  for (auto it = j.begin(); it != j.end(); ++it)
    if (known.count(it.key()) == 0) throw std::invalid_argument("corpus spec: unknown key " + it.key());
  CorpusSpec s;
  if (j.contains("n_domains")) s.n_domains = j.at("n_domains").get<int>();
  if (j.contains("series_per_domain")) s.series_per_domain = j.at("series_per_domain").get<int>();
  if (j.contains("series_length")) s.series_length = j.at("series_length").get<int>();
  if (j.contains("context_length")) s.context_length = j.at("context_length").get<int>();
  if (j.contains("horizon_length")) s.horizon_length = j.at("horizon_length").get<int>();
  if (j.contains("base_periods")) s.base_periods = j.at("base_periods").get<std::vector<int>>();
  if (j.contains("trend_families")) {
    s.trend_families.clear();
    for (const auto& f : j.at("trend_families")) s.trend_families.push_back(parse_trend_family(f.get<std::string>()));
  }
  if (j.contains("noise_std")) s.noise_std = j.at("noise_std").get<double>();
  if (j.contains("text_informativeness")) s.text_informativeness = j.at("text_informativeness").get<double>();
  if (j.contains("seed")) s.seed = j.at("seed").get<std::uint64_t>();
  if (j.contains("trend_amplitude")) s.trend_amplitude = j.at("trend_amplitude").get<double>();
  s.validate();
  return s;
}

std::pair<std::vector<double>, NormStats> instance_normalize(std::span<const double> context) {
  if (context.empty()) throw std::invalid_argument("instance_normalize: empty input");
  const double n = static_cast<double>(context.size());
  double mu = 0.0;
  for (double v : context) mu += v;
  mu /= n;
  double var = 0.0;
  for (double v : context) var += (v - mu) * (v - mu);
  var /= n;
  NormStats stats{mu, std::max(std::sqrt(var), kEpsSigma)};
  std::vector<double> out(context.size());
  for (std::size_t i = 0; i < context.size(); ++i) out[i] = (context[i] - mu) / stats.sigma;
  return {std::move(out), stats};
}

std::vector<double> denormalize(std::span<const double> values, const NormStats& stats) {
  std::vector<double> out(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) out[i] = values[i] * stats.sigma + stats.mu;
  return out;
}

std::vector<WindowIndex> window_samples(int series_length, int T, int H, int stride) {
  if (T < 1 || H < 1) throw std::invalid_argument("window_samples: T and H must be positive");
  if (stride < 1) throw std::invalid_argument("window_samples: stride must be >= 1");
  if (T + H > series_length) throw std::invalid_argument("window_samples: T + H exceeds the series length");
  std::vector<WindowIndex> out;
  for (int s = 0; s + T + H <= series_length; s += stride) out.push_back({s, s + T});
  return out;
}

namespace {

std::string trend_phrase(TrendFamily f) {
  switch (f) {
    case TrendFamily::Linear: return "a steady linear rise";
    case TrendFamily::ExponentialDecay: return "a sharp jump followed by exponential decay";
    case TrendFamily::Logistic: return "a logistic climb toward a new level";
    case TrendFamily::None: return "a flat course without any excursion";
  }
  throw std::invalid_argument("unknown trend family");
}

constexpr int kTemplateVariants = 2;

}  // namespace

std::string render_text_description(const WindowMeta& meta, bool informative, int variant) {
  const std::string phrase = trend_phrase(meta.trend);  // validates the family
  const int v = ((variant % kTemplateVariants) + kTemplateVariants) % kTemplateVariants;
  if (informative) {
    if (v == 0) return "the " + meta.domain + " indicator keeps its usual cycle and will show " + phrase + " later in the horizon.";
    return meta.domain + " outlook: after half of the horizon expect " + phrase + ".";
  }
  if (v == 0) return "the " + meta.domain + " indicator was recorded as usual.";
  return meta.domain + " readings from the regular monitoring station.";
}

std::vector<std::string> template_vocabulary() {
  std::set<std::string> words;
  const std::vector<TrendFamily> fams{TrendFamily::Linear, TrendFamily::ExponentialDecay, TrendFamily::Logistic,
                                      TrendFamily::None};
  for (const std::string& d : domain_names())
    for (TrendFamily f : fams)
      for (int v = 0; v < kTemplateVariants; ++v)
        for (bool inf : {true, false})
          for (const std::string& w : tokenization::split_words(render_text_description({d, f, 8}, inf, v)))
            words.insert(w);
  return {words.begin(), words.end()};
}

MultimodalSample make_sample(std::span<const double> raw_context, std::span<const double> raw_horizon, std::string text,
                             int domain_id) {
  MultimodalSample s;
  auto [ctx, stats] = instance_normalize(raw_context);
  s.context = std::move(ctx);
  s.norm_stats = stats;
  s.horizon.resize(raw_horizon.size());
  for (std::size_t i = 0; i < raw_horizon.size(); ++i) s.horizon[i] = (raw_horizon[i] - stats.mu) / stats.sigma;
  s.horizon_raw.assign(raw_horizon.begin(), raw_horizon.end());
  s.text = std::move(text);
  s.domain_id = domain_id;
  return s;
}

namespace {

void write_f32(const fs::path& path, const std::vector<double>& values) {
  std::vector<float> buf(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) buf[i] = static_cast<float>(values[i]);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

std::vector<double> read_f32(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  in.seekg(0, std::ios::end);
  const auto bytes = static_cast<std::size_t>(in.tellg());
  in.seekg(0);
  if (bytes % sizeof(float) != 0) throw std::runtime_error("truncated float file " + path.string());
  std::vector<float> buf(bytes / sizeof(float));
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(bytes));
  return {buf.begin(), buf.end()};
}

void write_text_file(const fs::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << content;
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

}  // namespace

CorpusHandle generate_synthetic_corpus(const CorpusSpec& spec, const fs::path& out_dir) {
  spec.validate();
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec || !fs::is_directory(out_dir)) throw std::runtime_error("cannot create corpus directory " + out_dir.string());

  const int T = spec.context_length, H = spec.horizon_length, L = spec.series_length;
  const int half = H / 2;
  const auto windows = window_samples(L, T, H, H);

  json files = json::array();
  std::ostringstream texts;
  for (int d = 0; d < spec.n_domains; ++d) {
    const std::string& domain = domain_names()[d];
    for (int i = 0; i < spec.series_per_domain; ++i) {
      nn::Rng rng(nn::derive_seed(spec.seed, {static_cast<std::uint64_t>(d), static_cast<std::uint64_t>(i)}));
      std::uniform_real_distribution<double> unit(0.0, 1.0);
      std::normal_distribution<double> gauss(0.0, 1.0);

      const int period = spec.base_periods[static_cast<std::size_t>(rng() % spec.base_periods.size())];
      const double amp = 0.5 + unit(rng);
      const double phase = 2.0 * std::numbers::pi * unit(rng);
      const double harmonic = 0.3 * amp * unit(rng);
      const double level = 20.0 * (unit(rng) - 0.5) + 5.0 * d;
      const double scale = 0.5 + 2.5 * unit(rng);

      // One cycle tabulated so that noiseless trend-free series repeat exactly.
      std::vector<double> cycle(period);
      for (int t = 0; t < period; ++t) {
        const double w = 2.0 * std::numbers::pi * t / period;
        cycle[t] = amp * std::sin(w + phase) + harmonic * std::sin(2.0 * w + 0.5 * phase);
      }

      std::vector<double> trend(L, 0.0);
      std::vector<TrendFamily> episodes;
      for (const WindowIndex& w : windows) {
        const TrendFamily fam = spec.trend_families[static_cast<std::size_t>(rng() % spec.trend_families.size())];
        episodes.push_back(fam);
        const int onset = w.horizon_start + half;
        for (int t = onset; t < w.horizon_start + H; ++t)
          trend[t] = spec.trend_amplitude * trend_shape(fam, static_cast<double>(t - onset) / (H - half));
      }

      std::vector<double> values(L);
      for (int t = 0; t < L; ++t) {
        const double noise = spec.noise_std > 0.0 ? spec.noise_std * gauss(rng) : 0.0;
        values[t] = level + scale * (cycle[t % period] + trend[t] + noise);
      }

      const std::string id = domain + "_" + std::to_string(i);
      const std::string file = "series_" + id + ".f32";
      write_f32(out_dir / file, values);

      json eps = json::array();
      for (std::size_t k = 0; k < windows.size(); ++k) {
        const bool informative = unit(rng) < spec.text_informativeness;
        const int variant = static_cast<int>(rng() % kTemplateVariants);
        eps.push_back(to_string(episodes[k]));
        const std::string text = render_text_description({domain, episodes[k], period}, informative, variant);
        texts << json{{"series_id", id}, {"window_start", windows[k].context_start}, {"text", text}}.dump() << "\n";
      }
      files.push_back(json{{"series_id", id},
                           {"domain", domain},
                           {"domain_id", d},
                           {"period", period},
                           {"file", file},
                           {"length", L},
                           {"episodes", eps}});
    }
  }

  json manifest{{"format", "aurora-corpus-v1"}, {"spec", spec.to_json()}, {"window_stride", H}, {"series", files}};
  write_text_file(out_dir / "manifest.json", manifest.dump(2) + "\n");
  write_text_file(out_dir / "texts.jsonl", texts.str());
  tokenization::TextVocab::from_words(template_vocabulary()).save(out_dir / "vocab.txt");
  return CorpusHandle{out_dir, manifest};
}

Split parse_split(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "val") return Split::Val;
  if (s == "test") return Split::Test;
  throw std::invalid_argument("unknown split: " + s);
}

std::string to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "?";
}

std::pair<int, int> split_range(int n_windows, Split split) {
  const int train_end = n_windows * 7 / 10;
  const int val_end = n_windows * 8 / 10;
  switch (split) {
    case Split::Train: return {0, train_end};
    case Split::Val: return {train_end, val_end};
    case Split::Test: return {val_end, n_windows};
  }
  return {0, 0};
}

Corpus Corpus::load(const fs::path& dir) {
  std::ifstream mf(dir / "manifest.json");
  if (!mf) throw std::runtime_error("corpus manifest missing in " + dir.string());
  const json manifest = json::parse(mf);
  Corpus c;
  c.dir_ = dir;
  c.spec_ = CorpusSpec::from_json(manifest.at("spec"));
  c.stride_ = manifest.at("window_stride").get<int>();
  for (const json& s : manifest.at("series")) {
    SeriesRecord r;
    r.id = s.at("series_id").get<std::string>();
    r.domain_id = s.at("domain_id").get<int>();
    r.period = s.at("period").get<int>();
    r.values = read_f32(dir / s.at("file").get<std::string>());
    if (static_cast<int>(r.values.size()) != s.at("length").get<int>())
      throw std::runtime_error("series length mismatch for " + r.id);
    for (const json& e : s.at("episodes")) r.episodes.push_back(parse_trend_family(e.get<std::string>()));
    c.series_.push_back(std::move(r));
  }
  std::ifstream tf(dir / "texts.jsonl");
  if (!tf) throw std::runtime_error("corpus texts missing in " + dir.string());
  std::string line;
  while (std::getline(tf, line)) {
    if (line.empty()) continue;
    const json t = json::parse(line);
    c.texts_[{t.at("series_id").get<std::string>(), t.at("window_start").get<int>()}] = t.at("text").get<std::string>();
  }
  return c;
}

const std::string& Corpus::text(const std::string& series_id, int window_start) const {
  auto it = texts_.find({series_id, window_start});
  if (it == texts_.end())
    throw std::out_of_range("no text for " + series_id + " @ " + std::to_string(window_start));
  return it->second;
}

std::vector<MultimodalSample> Corpus::samples(Split split, double limit_fraction) const {
  if (!(limit_fraction > 0.0 && limit_fraction <= 1.0))
    throw std::invalid_argument("limit_fraction must be in (0, 1]");
  const int T = spec_.context_length, H = spec_.horizon_length;
  std::vector<MultimodalSample> out;
  for (const SeriesRecord& r : series_) {
    const auto windows = window_samples(static_cast<int>(r.values.size()), T, H, stride_);
    auto [begin, end] = split_range(static_cast<int>(windows.size()), split);
    const int keep = std::max(end > begin ? 1 : 0, static_cast<int>(std::ceil((end - begin) * limit_fraction)));
    for (int k = begin; k < begin + keep; ++k) {
      const WindowIndex& w = windows[k];
      std::span<const double> all(r.values);
      MultimodalSample s = make_sample(all.subspan(w.context_start, T), all.subspan(w.horizon_start, H),
                                       text(r.id, w.context_start), r.domain_id);
      s.series_id = r.id;
      s.window_start = w.context_start;
      out.push_back(std::move(s));
    }
  }
  return out;
}

}  // namespace aurora::corpus
