#include "aurora/corpus.hpp"
#include "aurora/tokenization.hpp"

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

using namespace aurora;
using namespace aurora::corpus;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("aurora_test_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

CorpusSpec small_spec() {
  CorpusSpec s;
  s.n_domains = 2;
  s.series_per_domain = 3;
  s.series_length = 400;
  s.context_length = 96;
  s.horizon_length = 32;
  return s;
}

}  // namespace

TEST_CASE("window counts") {
  CHECK(window_samples(20, 10, 5, 1).size() == 6);
  CHECK(window_samples(20, 10, 5, 1).back().context_start == 5);
  CHECK(window_samples(15, 10, 5, 1).size() == 1);
  CHECK_THROWS(window_samples(14, 10, 5, 1));
  for (int T = 1; T <= 8; ++T)
    for (int H = 1; H <= 8; ++H)
      for (int L = T + H; L <= 64; ++L) {
        const auto w = window_samples(L, T, H, 1);
        REQUIRE(static_cast<int>(w.size()) == L - T - H + 1);
        for (std::size_t k = 0; k < w.size(); ++k) {
          CHECK(w[k].context_start == static_cast<int>(k));
          CHECK(w[k].horizon_start == static_cast<int>(k) + T);
        }
      }
}

TEST_CASE("strided windows start at multiples of the stride") {
  const auto w = window_samples(30, 10, 5, 4);
  REQUIRE(w.size() == 4);
  for (std::size_t k = 0; k < w.size(); ++k) CHECK(w[k].context_start == 4 * static_cast<int>(k));
  CHECK(window_samples(32, 10, 6, 16).size() == 2);
}

TEST_CASE("instance normalization examples") {
  auto [c, s] = instance_normalize(std::vector<double>{1, 1, 1, 1});
  for (double v : c) CHECK(v == 0.0);
  CHECK(s.mu == 1.0);
  CHECK(s.sigma == kEpsSigma);

  auto [t, s2] = instance_normalize(std::vector<double>{0, 2});
  CHECK(t[0] == -1.0);
  CHECK(t[1] == 1.0);
  CHECK(s2.mu == 1.0);
  CHECK(s2.sigma == 1.0);

  CHECK(denormalize(std::vector<double>{0, 0}, {5, 2}) == std::vector<double>{5, 5});
  CHECK(denormalize(std::vector<double>{-1, 1}, {1, 1}) == std::vector<double>{0, 2});
}

TEST_CASE("normalization moments and round trip on random vectors") {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> g(3.0, 7.0);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> x(5 + trial);
    for (double& v : x) v = g(rng);
    auto [y, s] = instance_normalize(x);
    double m = 0, q = 0;
    for (double v : y) m += v;
    m /= y.size();
    for (double v : y) q += (v - m) * (v - m);
    q = std::sqrt(q / y.size());
    CHECK(std::abs(m) < 1e-9);
    CHECK(std::abs(q - 1.0) < 1e-9);
    const auto back = denormalize(y, s);
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(std::abs(back[i] - x[i]) <= 1e-9 * std::abs(x[i]) + 1e-12);
  }
}

TEST_CASE("text templates") {
  const std::string inf = render_text_description({"health", TrendFamily::ExponentialDecay, 8}, true);
  CHECK(inf.find("decay") != std::string::npos);
  CHECK(inf.find("health") != std::string::npos);
  for (int v = 0; v < 4; ++v) {
    const std::string plain = render_text_description({"health", TrendFamily::ExponentialDecay, 8}, false, v);
    for (const std::string& kw : all_trend_keywords()) {
      for (const std::string& w : tokenization::split_words(plain)) CHECK(w != kw);
    }
  }
  const auto vocab = tokenization::TextVocab::from_words(template_vocabulary());
  for (const std::string& d : domain_names())
    for (TrendFamily f : {TrendFamily::Linear, TrendFamily::ExponentialDecay, TrendFamily::Logistic, TrendFamily::None})
      for (int v = 0; v < 4; ++v)
        for (bool informative : {true, false}) {
          const auto tok = tokenization::tokenize_text(render_text_description({d, f, 12}, informative, v), vocab, 64);
          for (std::size_t i = 0; i < tok.ids.size(); ++i)
            if (tok.mask[i]) CHECK(tok.ids[i] != vocab.unk());
        }
}

TEST_CASE("informative texts identify the trend family of every window") {
  const fs::path dir = scratch("informative");
  generate_synthetic_corpus(small_spec(), dir);
  const Corpus c = Corpus::load(dir);
  for (const SeriesRecord& r : c.series()) {
    const auto windows = window_samples(static_cast<int>(r.values.size()), c.spec().context_length,
                                        c.spec().horizon_length, c.window_stride());
    REQUIRE(windows.size() == r.episodes.size());
    for (std::size_t k = 0; k < windows.size(); ++k) {
      const auto words = tokenization::split_words(c.text(r.id, windows[k].context_start));
      // String-match oracle: exactly the episode's keyword appears.
      for (const std::string& kw : all_trend_keywords()) {
        const bool present = std::find(words.begin(), words.end(), kw) != words.end();
        CHECK(present == (kw == trend_keyword(r.episodes[k])));
      }
    }
  }
  fs::remove_all(dir);
}

TEST_CASE("noiseless trend-free series repeat with their period") {
  CorpusSpec s = small_spec();
  s.noise_std = 0.0;
  s.trend_families = {TrendFamily::None};
  s.base_periods = {8};
  const fs::path dir = scratch("periodic");
  generate_synthetic_corpus(s, dir);
  const Corpus c = Corpus::load(dir);
  for (const SeriesRecord& r : c.series())
    for (std::size_t t = 0; t + 8 < r.values.size(); ++t) REQUIRE(r.values[t] == r.values[t + 8]);
  fs::remove_all(dir);
}

TEST_CASE("corpus generation is byte-identical across runs") {
  const fs::path a = scratch("det_a"), b = scratch("det_b");
  generate_synthetic_corpus(small_spec(), a);
  generate_synthetic_corpus(small_spec(), b);
  std::size_t files = 0;
  for (const auto& e : fs::directory_iterator(a)) {
    ++files;
    CHECK(slurp(e.path()) == slurp(b / e.path().filename()));
  }
  CHECK(files > 3);
  CorpusSpec other = small_spec();
  other.seed = 1;
  const fs::path d = scratch("det_c");
  generate_synthetic_corpus(other, d);
  CHECK(slurp(a / "texts.jsonl") != slurp(d / "texts.jsonl"));
  fs::remove_all(a);
  fs::remove_all(b);
  fs::remove_all(d);
}

TEST_CASE("splits are 7:1:2 by window index and disjoint") {
  CHECK(split_range(20, Split::Train) == std::pair<int, int>{0, 14});
  CHECK(split_range(20, Split::Val) == std::pair<int, int>{14, 16});
  CHECK(split_range(20, Split::Test) == std::pair<int, int>{16, 20});
  const fs::path dir = scratch("splits");
  generate_synthetic_corpus(small_spec(), dir);
  const Corpus c = Corpus::load(dir);
  const auto train = c.samples(Split::Train), val = c.samples(Split::Val), test = c.samples(Split::Test);
  CHECK(!train.empty());
  CHECK(!test.empty());
  int max_train = 0, min_test = 1 << 30;
  for (const auto& s : train) max_train = std::max(max_train, s.window_start);
  for (const auto& s : test) min_test = std::min(min_test, s.window_start);
  CHECK(max_train < min_test);
  const auto half = c.samples(Split::Train, 0.5);
  CHECK(half.size() < train.size());
  CHECK_THROWS(c.samples(Split::Train, 0.0));
  for (const auto& s : train) {
    CHECK(static_cast<int>(s.context.size()) == c.spec().context_length);
    CHECK(static_cast<int>(s.horizon.size()) == c.spec().horizon_length);
    CHECK(s.norm_stats.sigma > 0.0);
  }
  fs::remove_all(dir);
}

TEST_CASE("spec validation and JSON round trip") {
  CorpusSpec s = small_spec();
  CHECK(CorpusSpec::from_json(s.to_json()).to_json() == s.to_json());
  auto j = s.to_json();
  j["bogus"] = 1;
  CHECK_THROWS(CorpusSpec::from_json(j));
  s.context_length = 390;
  CHECK_THROWS(s.validate());
  s = small_spec();
  s.text_informativeness = 1.5;
  CHECK_THROWS(s.validate());
  s = small_spec();
  s.base_periods = {1};
  CHECK_THROWS(s.validate());
}
