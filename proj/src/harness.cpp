#include "aurora/harness.hpp"

#include "aurora/metrics.hpp"

#include <png.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>

namespace aurora::harness {

using nlohmann::json;
namespace fs = std::filesystem;

std::string to_string(AblationVariant v) {
  switch (v) {
    case AblationVariant::Full: return "full";
    case AblationVariant::NoGuidedAttention: return "variant1_no_guided_attention";
    case AblationVariant::GaussianStart: return "variant2_gaussian_start";
    case AblationVariant::Both: return "variant3_both";
  }
  return "?";
}

AblationVariant parse_variant(const std::string& s) {
  for (AblationVariant v : all_variants())
    if (to_string(v) == s) return v;
  throw std::invalid_argument("unknown ablation variant: " + s);
}

const std::vector<AblationVariant>& all_variants() {
  static const std::vector<AblationVariant> v{AblationVariant::Full, AblationVariant::NoGuidedAttention,
                                              AblationVariant::GaussianStart, AblationVariant::Both};
  return v;
}

void apply_variant(AblationVariant v, model::ModelConfig& config) {
  config.use_guidance = v == AblationVariant::Full || v == AblationVariant::GaussianStart;
  config.use_prototype = v == AblationVariant::Full || v == AblationVariant::NoGuidedAttention;
}

TrainConfig TrainConfig::named(const std::string& name) {
  TrainConfig c;
  if (name == "desk") return c;
  if (name != "paper") throw std::invalid_argument("unknown named config: " + name);
  c.learning_rate = 5e-5;
  c.batch_size = 8192;
  c.model.p_time = 48;
  c.model.context_length = 11 * 48;
  c.model.horizon_length = 4 * 48;
  c.model.d_time = c.model.d_image = c.model.d_text = 256;
  c.model.ffn_dim = 512;
  c.model.heads = 8;
  c.model.encoder_layers = 3;
  c.model.guided_layers = 3;
  c.model.causal_layers = 6;
  c.model.cross_layers = 3;
  c.model.retriever_layers = 3;
  c.model.flow_layers = 3;
  c.model.flow_width = 512;
  c.model.temb_dim = 64;
  c.model.M = 1000;
  c.model.image_size = 224;
  c.model.p_image = 16;
  c.model.n_text_max = 64;
  return c;
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
  std::istringstream in(value);
  T out{};
  in >> out;
  if (!in || !in.eof()) throw std::invalid_argument("config: bad value for " + key + ": '" + value + "'");
  return out;
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw std::invalid_argument("config: bad boolean for " + key + ": '" + value + "'");
}

}  // namespace

TrainConfig TrainConfig::parse(const std::string& text, TrainConfig base) {
  TrainConfig c = base;
  json model = c.model.to_json();
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("config line " + std::to_string(lineno) + ": expected key=value");
    const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    if (key == "learning_rate") c.learning_rate = parse_number<double>(key, value);
    else if (key == "lr_step_epochs") c.lr_step_epochs = parse_number<int>(key, value);
    else if (key == "lr_decay") c.lr_decay = parse_number<double>(key, value);
    else if (key == "batch_size") c.batch_size = parse_number<int>(key, value);
    else if (key == "max_steps") c.max_steps = parse_number<long>(key, value);
    else if (key == "text_mask_prob") c.text_mask_prob = parse_number<double>(key, value);
    else if (key == "seed") c.seed = parse_number<std::uint64_t>(key, value);
    else if (key == "eval_interval") c.eval_interval = parse_number<long>(key, value);
    else if (key == "limit_fraction") c.limit_fraction = parse_number<double>(key, value);
    else if (key == "variant") c.variant = parse_variant(value);
    else if (key == "use_guidance" || key == "use_prototype") model[key] = parse_bool(key, value);
    else if (model.contains(key)) model[key] = parse_number<int>(key, value);
    else throw std::invalid_argument("config: unknown key '" + key + "'");
  }
  c.model = model::ModelConfig::from_json(model);
  c.validate();
  return c;
}

TrainConfig TrainConfig::load(const fs::path& path, TrainConfig base) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read config " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse(buf.str(), std::move(base));
}

TrainConfig TrainConfig::parse(const std::string& text) { return parse(text, TrainConfig()); }

TrainConfig TrainConfig::load(const fs::path& path) { return load(path, TrainConfig()); }

std::string TrainConfig::to_text() const {
  std::ostringstream out;
  out.precision(17);
  out << "learning_rate=" << learning_rate << "\nlr_step_epochs=" << lr_step_epochs << "\nlr_decay=" << lr_decay
      << "\nbatch_size=" << batch_size << "\nmax_steps=" << max_steps << "\ntext_mask_prob=" << text_mask_prob
      << "\nseed=" << seed << "\neval_interval=" << eval_interval << "\nlimit_fraction=" << limit_fraction
      << "\nvariant=" << to_string(variant) << "\n";
  const json mj = model.to_json();
  for (const auto& [key, value] : mj.items()) {
    if (value.is_boolean()) out << key << "=" << (value.get<bool>() ? "true" : "false") << "\n";
    else out << key << "=" << value.get<int>() << "\n";
  }
  return out.str();
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw std::invalid_argument("config: learning_rate must be > 0");
  if (!(text_mask_prob >= 0.0 && text_mask_prob <= 1.0)) throw std::invalid_argument("config: text_mask_prob outside [0, 1]");
  if (batch_size < 1) throw std::invalid_argument("config: batch_size must be >= 1");
  if (max_steps < 0) throw std::invalid_argument("config: max_steps must be >= 0");
  if (!(lr_decay > 0.0)) throw std::invalid_argument("config: lr_decay must be > 0");
  if (!(limit_fraction > 0.0 && limit_fraction <= 1.0)) throw std::invalid_argument("config: limit_fraction outside (0, 1]");
  model.validate();
}

std::vector<model::PreparedSample> prepare_all(const model::AuroraModel& model,
                                               const std::vector<corpus::MultimodalSample>& samples) {
  std::vector<model::PreparedSample> out;
  out.reserve(samples.size());
  for (const corpus::MultimodalSample& s : samples) out.push_back(model.prepare(s));
  return out;
}

namespace {

// Named random sub-streams of the config seed.
enum StreamKey : std::uint64_t { kData = 1, kMask = 2, kFlowNoise = 3 };

}  // namespace

std::vector<LossRecord> train(model::AuroraModel& model, const TrainConfig& config,
                              const std::vector<model::PreparedSample>& data, const StepCallback& on_step) {
  config.validate();
  std::vector<LossRecord> log;
  if (config.max_steps == 0) return log;
  if (data.empty()) throw std::invalid_argument("train: no training samples");
  const int F = model.config().F(), p = model.config().p_time;
  nn::Rng data_rng(nn::derive_seed(config.seed, {kData}));
  nn::Rng mask_rng(nn::derive_seed(config.seed, {kMask}));
  nn::Rng noise_rng(nn::derive_seed(config.seed, {kFlowNoise}));
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);
  nn::AdamW opt;

  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  long epoch = 0;
  std::size_t cursor = order.size();
  log.reserve(static_cast<std::size_t>(config.max_steps));
  for (long step = 0; step < config.max_steps; ++step) {
    if (cursor >= order.size()) {
      if (step > 0) ++epoch;
      std::shuffle(order.begin(), order.end(), data_rng);
      cursor = 0;
    }
    const std::size_t stop = std::min(order.size(), cursor + static_cast<std::size_t>(config.batch_size));
    std::vector<const model::PreparedSample*> batch;
    for (std::size_t i = cursor; i < stop; ++i) batch.push_back(&data[order[i]]);
    cursor = stop;
    const int B = static_cast<int>(batch.size());

    std::vector<std::uint8_t> present(batch.size());
    for (auto& flag : present) flag = uniform(mask_rng) < config.text_mask_prob ? 0 : 1;
    Eigen::VectorXd t(B);
    for (int b = 0; b < B; ++b) t(b) = uniform(noise_rng);
    ad::Matrix noise(static_cast<Eigen::Index>(B) * F, p);
    for (Eigen::Index i = 0; i < noise.size(); ++i) noise.data()[i] = gauss(noise_rng);

    const double lr = nn::step_lr(config.learning_rate, config.lr_decay, config.lr_step_epochs, epoch);
    model.store().zero_grad();
    ad::Graph g;
    ad::Var loss = model.loss(g, batch, present, t, noise);
    const double value = loss.value()(0, 0);
    if (!std::isfinite(value))
      throw std::runtime_error("train: non-finite loss at step " + std::to_string(step) + " (epoch " +
                               std::to_string(epoch) + ", lr " + std::to_string(lr) + ")");
    g.backward(loss);
    opt.step(model.store(), lr);
    LossRecord rec{step, epoch, lr, value};
    log.push_back(rec);
    if (on_step) on_step(rec);
  }
  return log;
}

std::vector<LossRecord> train_to_dir(const TrainConfig& config, const corpus::Corpus& corpus, const fs::path& out_dir) {
  config.validate();
  fs::create_directories(out_dir);
  model::ModelConfig mc = config.model;
  apply_variant(config.variant, mc);
  mc.context_length = corpus.spec().context_length;
  mc.horizon_length = corpus.spec().horizon_length;
  model::AuroraModel model(mc, tokenization::TextVocab::load(corpus.dir() / "vocab.txt"),
                           nn::derive_seed(config.seed, {0x696e6974ULL}));
  const auto data = prepare_all(model, corpus.samples(corpus::Split::Train, config.limit_fraction));

  {
    std::ofstream cfg(out_dir / "config.txt", std::ios::trunc);
    cfg << config.to_text();
  }
  std::ofstream log_out(out_dir / "loss_log.csv", std::ios::trunc);
  if (!log_out) throw std::runtime_error("cannot write loss log in " + out_dir.string());
  log_out << "step,epoch,lr,loss\n";
  log_out.precision(10);
  const fs::path ckpt = out_dir / "checkpoint.bin";
  auto meta = [&](long steps) {
    return json{{"train_config", config.to_text()}, {"steps", steps}, {"variant", to_string(config.variant)}};
  };
  auto records = train(model, config, data, [&](const LossRecord& r) {
    log_out << r.step << "," << r.epoch << "," << r.lr << "," << r.loss << "\n";
    if (config.eval_interval > 0 && (r.step + 1) % config.eval_interval == 0) {
      log_out.flush();
      save_checkpoint(model, ckpt, meta(r.step + 1));
    }
  });
  save_checkpoint(model, ckpt, meta(static_cast<long>(records.size())));
  return records;
}

json EvalReport::to_json() const {
  return json{{"dataset", dataset}, {"horizon", horizon}, {"mse", mse},         {"mae", mae},
              {"crps", crps},       {"nmae", nmae},       {"n_samples", n_samples}, {"steps", steps},
              {"seed", seed},       {"n_windows", n_windows}};
}

namespace {

metrics::EvalPair make_pair(const model::PreparedSample& s, const flow::ForecastDistribution& dist,
                            flow::PointMode mode, int n_draws) {
  const int H = static_cast<int>(s.horizon_raw.size());
  if (H != dist.F * dist.p_time) throw std::invalid_argument("evaluate: window has no raw horizon");
  metrics::EvalPair pair;
  pair.truth = Eigen::Map<const metrics::Matrix>(s.horizon_raw.data(), 1, H);
  flow::ForecastDistribution sub = dist;
  if (n_draws < dist.S) {
    sub.S = n_draws;
    sub.samples = dist.samples.topRows(static_cast<Eigen::Index>(n_draws) * dist.F);
  }
  const ad::Matrix point = flow::point_forecast(sub, mode);
  pair.point = Eigen::Map<const metrics::Matrix>(point.data(), 1, H);
  for (int k = 0; k < sub.S; ++k) {
    metrics::Matrix draw = sub.sample(k);
    draw = draw.array() * dist.norm_stats.sigma + dist.norm_stats.mu;
    pair.samples.emplace_back(Eigen::Map<const metrics::Matrix>(draw.data(), 1, H));
  }
  return pair;
}

std::vector<const model::PreparedSample*> pointers(const std::vector<model::PreparedSample>& data) {
  std::vector<const model::PreparedSample*> out;
  out.reserve(data.size());
  for (const auto& s : data) out.push_back(&s);
  return out;
}

}  // namespace

EvalReport evaluate(const model::AuroraModel& model, const std::vector<model::PreparedSample>& data,
                    const EvalOptions& options, const std::string& dataset) {
  if (data.empty()) throw std::invalid_argument("evaluate: empty split");
  const auto dists = model.forecast(pointers(data), options.samples, options.steps, options.seed, options.mask_text);
  metrics::Accumulator acc;
  for (std::size_t i = 0; i < data.size(); ++i) acc.add(make_pair(data[i], dists[i], options.mode, options.samples));
  EvalReport r;
  r.dataset = dataset;
  r.horizon = model.config().horizon_length;
  r.mse = acc.mse();
  r.mae = acc.mae();
  r.crps = acc.crps();
  r.nmae = acc.nmae();
  r.n_samples = options.samples;
  r.steps = options.steps;
  r.seed = options.seed;
  r.n_windows = static_cast<long>(data.size());
  return r;
}

void write_report(const EvalReport& report, const fs::path& stem) {
  if (stem.has_parent_path()) fs::create_directories(stem.parent_path());
  fs::path json_path = stem, csv_path = stem;
  json_path += ".json";
  csv_path += ".csv";
  std::ofstream j(json_path, std::ios::trunc);
  j << report.to_json().dump(2) << "\n";
  std::ofstream c(csv_path, std::ios::trunc);
  c.precision(10);
  c << "dataset,horizon,mse,mae,crps,nmae,n_samples,steps,seed\n"
    << report.dataset << "," << report.horizon << "," << report.mse << "," << report.mae << "," << report.crps << ","
    << report.nmae << "," << report.n_samples << "," << report.steps << "," << report.seed << "\n";
  if (!j || !c) throw std::runtime_error("failed writing report " + stem.string());
}

double median(std::vector<double> values) {
  if (values.empty()) throw std::invalid_argument("median of an empty list");
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  return n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

double AblationTable::median_mse(AblationVariant v) const {
  std::vector<double> xs;
  for (const auto& r : rows)
    if (r.variant == v) xs.push_back(r.mse);
  return median(xs);
}

double AblationTable::median_mae(AblationVariant v) const {
  std::vector<double> xs;
  for (const auto& r : rows)
    if (r.variant == v) xs.push_back(r.mae);
  return median(xs);
}

std::string AblationTable::to_csv() const {
  std::ostringstream out;
  out.precision(10);
  out << "variant,seed,mse,mae\n";
  std::vector<AblationVariant> seen;
  for (const auto& r : rows) {
    out << to_string(r.variant) << "," << r.seed << "," << r.mse << "," << r.mae << "\n";
    if (std::find(seen.begin(), seen.end(), r.variant) == seen.end()) seen.push_back(r.variant);
  }
  for (AblationVariant v : seen) out << to_string(v) << ",median," << median_mse(v) << "," << median_mae(v) << "\n";
  return out.str();
}

AblationTable run_ablation(const TrainConfig& base, const corpus::Corpus& corpus, const std::vector<std::uint64_t>& seeds,
                           const std::vector<AblationVariant>& variants, const EvalOptions& eval) {
  if (corpus.spec().text_informativeness < 0.9)
    throw std::invalid_argument("run_ablation: corpus text_informativeness must be >= 0.9");
  const auto train_raw = corpus.samples(corpus::Split::Train, base.limit_fraction);
  const auto test_raw = corpus.samples(corpus::Split::Test);
  const auto vocab = tokenization::TextVocab::load(corpus.dir() / "vocab.txt");
  AblationTable table;
  for (std::uint64_t seed : seeds) {
    for (AblationVariant v : variants) {
      TrainConfig cfg = base;
      cfg.seed = seed;
      cfg.variant = v;
      model::ModelConfig mc = cfg.model;
      apply_variant(v, mc);
      mc.context_length = corpus.spec().context_length;
      mc.horizon_length = corpus.spec().horizon_length;
      model::AuroraModel model(mc, vocab, nn::derive_seed(seed, {0x696e6974ULL}));
      train(model, cfg, prepare_all(model, train_raw));
      EvalOptions e = eval;
      e.seed = seed;
      const EvalReport r = evaluate(model, prepare_all(model, test_raw), e, "ablation");
      table.rows.push_back({v, seed, r.mse, r.mae});
    }
  }
  return table;
}

std::vector<ScalePoint> scale_study(const model::AuroraModel& model, const std::vector<model::PreparedSample>& data,
                                    const std::vector<int>& sample_counts, const std::vector<int>& step_counts,
                                    std::uint64_t seed, bool mask_text) {
  if (data.empty() || sample_counts.empty() || step_counts.empty())
    throw std::invalid_argument("scale_study: empty grid or split");
  const int S_max = *std::max_element(sample_counts.begin(), sample_counts.end());
  std::vector<ScalePoint> out;
  for (int J : step_counts) {
    const auto dists = model.forecast(pointers(data), S_max, J, seed, mask_text);
    for (int S : sample_counts) {
      std::vector<double> per_window;
      double abs_err = 0.0, truth_abs = 0.0;
      for (std::size_t i = 0; i < data.size(); ++i) {
        const metrics::EvalPair pair = make_pair(data[i], dists[i], flow::PointMode::Mean, S);
        per_window.push_back(metrics::crps(pair));
        abs_err += (pair.truth - pair.point).array().abs().sum();
        truth_abs += pair.truth.array().abs().sum();
      }
      const double n = static_cast<double>(per_window.size());
      const double mean = std::accumulate(per_window.begin(), per_window.end(), 0.0) / n;
      double var = 0.0;
      for (double x : per_window) var += (x - mean) * (x - mean);
      var = n > 1 ? var / (n - 1) : 0.0;
      if (truth_abs == 0.0) throw std::domain_error("scale_study: truth is all zero");
      out.push_back({J, S, mean, std::sqrt(var / n), abs_err / truth_abs});
    }
  }
  return out;
}

std::string scale_csv(const std::vector<ScalePoint>& points) {
  std::ostringstream out;
  out.precision(10);
  out << "steps,samples,crps,crps_se,nmae\n";
  for (const auto& p : points) out << p.steps << "," << p.samples << "," << p.crps << "," << p.crps_se << "," << p.nmae << "\n";
  return out.str();
}

namespace {

struct Canvas {
  int w, h;
  std::vector<png_byte> px;
  Canvas(int w_, int h_) : w(w_), h(h_), px(static_cast<std::size_t>(w_) * h_ * 3, 255) {}
  void dot(int x, int y, const std::array<png_byte, 3>& c) {
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx) {
        const int xx = x + dx, yy = y + dy;
        if (xx < 0 || yy < 0 || xx >= w || yy >= h) continue;
        std::copy(c.begin(), c.end(), px.begin() + (static_cast<std::size_t>(yy) * w + xx) * 3);
      }
  }
  void line(double x0, double y0, double x1, double y1, const std::array<png_byte, 3>& c) {
    const int n = static_cast<int>(std::max(std::abs(x1 - x0), std::abs(y1 - y0))) + 1;
    for (int i = 0; i <= n; ++i) {
      const double u = static_cast<double>(i) / n;
      dot(static_cast<int>(std::lround(x0 + u * (x1 - x0))), static_cast<int>(std::lround(y0 + u * (y1 - y0))), c);
    }
  }
};

}  // namespace

void write_scale_plot(const std::vector<ScalePoint>& points, const fs::path& path) {
  if (points.empty()) throw std::invalid_argument("write_scale_plot: no points");
  std::vector<int> S_grid, J_grid;
  double lo = points[0].crps, hi = points[0].crps;
  for (const auto& p : points) {
    if (std::find(S_grid.begin(), S_grid.end(), p.samples) == S_grid.end()) S_grid.push_back(p.samples);
    if (std::find(J_grid.begin(), J_grid.end(), p.steps) == J_grid.end()) J_grid.push_back(p.steps);
    lo = std::min(lo, p.crps);
    hi = std::max(hi, p.crps);
  }
  std::sort(S_grid.begin(), S_grid.end());
  if (hi - lo < 1e-12) hi = lo + 1.0;
  const int W = 640, H = 400, margin = 40;
  Canvas canvas(W, H);
  const std::array<png_byte, 3> black{0, 0, 0};
  canvas.line(margin, H - margin, W - margin, H - margin, black);
  canvas.line(margin, margin, margin, H - margin, black);
  const std::array<std::array<png_byte, 3>, 6> palette{{{31, 119, 180}, {255, 127, 14}, {44, 160, 44},
                                                        {214, 39, 40}, {148, 103, 189}, {140, 86, 75}}};
  // x: log S, y: CRPS.
  const double lx0 = std::log(static_cast<double>(S_grid.front())), lx1 = std::log(static_cast<double>(S_grid.back()));
  auto px = [&](int S) {
    const double u = lx1 > lx0 ? (std::log(static_cast<double>(S)) - lx0) / (lx1 - lx0) : 0.5;
    return margin + u * (W - 2 * margin);
  };
  auto py = [&](double c) { return H - margin - (c - lo) / (hi - lo) * (H - 2 * margin); };
  for (std::size_t j = 0; j < J_grid.size(); ++j) {
    std::vector<const ScalePoint*> series;
    for (const auto& p : points)
      if (p.steps == J_grid[j]) series.push_back(&p);
    std::sort(series.begin(), series.end(), [](const ScalePoint* a, const ScalePoint* b) { return a->samples < b->samples; });
    const auto& color = palette[j % palette.size()];
    for (std::size_t k = 0; k + 1 < series.size(); ++k)
      canvas.line(px(series[k]->samples), py(series[k]->crps), px(series[k + 1]->samples), py(series[k + 1]->crps), color);
  }

  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::FILE* fp = std::fopen(path.string().c_str(), "wb");
  if (fp == nullptr) throw std::runtime_error("cannot write " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (png == nullptr || info == nullptr || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw std::runtime_error("libpng failed writing " + path.string());
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, W, H, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < H; ++y) png_write_row(png, canvas.px.data() + static_cast<std::size_t>(y) * W * 3);
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
}

}  // namespace aurora::harness
