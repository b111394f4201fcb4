#include "aurora/tokenization.hpp"

#include <fftw3.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <stdexcept>

namespace aurora::tokenization {

void ImageRenderConfig::validate() const {
  if (w <= 0 || h <= 0 || p_image <= 0) throw std::invalid_argument("image config: sizes must be positive");
  if (w % p_image != 0 || h % p_image != 0)
    throw std::invalid_argument("image config: p_image must divide both w and h");
}

Matrix patch_time_series(std::span<const double> x, int p_time) {
  if (x.empty()) throw std::invalid_argument("patch_time_series: empty input");
  if (p_time < 1) throw std::invalid_argument("patch_time_series: p_time must be >= 1");
  const int T = static_cast<int>(x.size());
  const int n = (T + p_time - 1) / p_time;
  const int pad = n * p_time - T;
  Matrix out(n, p_time);
  for (int i = 0; i < n * p_time; ++i) out(i / p_time, i % p_time) = i < pad ? x[0] : x[i - pad];
  return out;
}

ad::Var embed_time_patches(ad::Graph& g, const ad::Var& patches, const nn::Linear& params) {
  if (patches.cols() != params.in()) throw std::invalid_argument("embed_time_patches: patch width mismatch");
  return params(g, patches);
}

std::vector<double> amplitude_spectrum(std::span<const double> x) {
  const int T = static_cast<int>(x.size());
  std::vector<double> in(x.begin(), x.end());
  const int nbins = T / 2 + 1;
  fftw_complex* out = fftw_alloc_complex(static_cast<std::size_t>(nbins));
  fftw_plan plan = fftw_plan_dft_r2c_1d(T, in.data(), out, FFTW_ESTIMATE);
  fftw_execute(plan);
  std::vector<double> amp(nbins);
  for (int k = 0; k < nbins; ++k) amp[k] = std::hypot(out[k][0], out[k][1]);
  fftw_destroy_plan(plan);
  fftw_free(out);
  return amp;
}

int dominant_frequency(std::span<const double> x) {
  if (x.size() < 4) throw std::invalid_argument("detect_dominant_period: need at least 4 points");
  const auto amp = amplitude_spectrum(x);
  double mass = 0.0;
  for (double v : x) mass += std::abs(v);
  const double tol = 1e-9 * mass;
  const int kmax = static_cast<int>(x.size()) / 2;
  double best = amp[1];
  for (int k = 2; k <= kmax; ++k) best = std::max(best, amp[k]);
  for (int k = 1; k <= kmax; ++k)
    if (amp[k] >= best - tol) return k;
  return 1;
}

int detect_dominant_period(std::span<const double> x) {
  const int T = static_cast<int>(x.size());
  const int f = dominant_frequency(x);
  const int p = (T + f - 1) / f;
  return std::clamp(p, 2, T);
}

Matrix period_grid(std::span<const double> x, int period) {
  const int T = static_cast<int>(x.size());
  if (period < 2 || period > T) throw std::invalid_argument("render_endogenous_image: period out of range");
  const int m = (T + period - 1) / period;
  const int pad = m * period - T;
  Matrix grid(m, period);
  for (int i = 0; i < m * period; ++i) grid(i / period, i % period) = i < pad ? x[0] : x[i - pad];
  const double lo = grid.minCoeff(), hi = grid.maxCoeff();
  const double range = hi - lo;
  if (!(range > 0.0)) {
    grid.setConstant(0.5);
  } else {
    grid = (grid.array() - lo) / range;
  }
  return grid;
}

namespace {

// Source coordinate for a destination index under half-pixel centers.
void bilinear_source(int dst, int in_size, int out_size, int& i0, int& i1, double& frac) {
  const double scale = static_cast<double>(in_size) / out_size;
  double src = (dst + 0.5) * scale - 0.5;
  src = std::max(src, 0.0);
  i0 = std::min(static_cast<int>(std::floor(src)), in_size - 1);
  i1 = std::min(i0 + 1, in_size - 1);
  frac = src - i0;
  if (i0 == in_size - 1) frac = 0.0;
}

}  // namespace

Image render_endogenous_image(std::span<const double> x, int period, const ImageRenderConfig& cfg) {
  cfg.validate();
  const Matrix grid = period_grid(x, period);
  const int m = static_cast<int>(grid.rows()), P = static_cast<int>(grid.cols());
  Image img;
  img.height = cfg.h;
  img.width = cfg.w;
  img.data.assign(static_cast<std::size_t>(3) * cfg.h * cfg.w, 0.0);
  for (int r = 0; r < cfg.h; ++r) {
    int r0, r1;
    double fr;
    bilinear_source(r, m, cfg.h, r0, r1, fr);
    for (int c = 0; c < cfg.w; ++c) {
      int c0, c1;
      double fc;
      bilinear_source(c, P, cfg.w, c0, c1, fc);
      const double top = grid(r0, c0) * (1.0 - fc) + grid(r0, c1) * fc;
      const double bottom = grid(r1, c0) * (1.0 - fc) + grid(r1, c1) * fc;
      const double v = top * (1.0 - fr) + bottom * fr;
      for (int ch = 0; ch < 3; ++ch) img.at(ch, r, c) = v;
    }
  }
  return img;
}

Matrix image_patches(const Image& image, int p_image) {
  if (p_image <= 0 || image.width % p_image != 0 || image.height % p_image != 0)
    throw std::invalid_argument("image_patches: p_image must divide the image size");
  const int gh = image.height / p_image, gw = image.width / p_image;
  Matrix out(gh * gw, image.channels * p_image * p_image);
  for (int br = 0; br < gh; ++br)
    for (int bc = 0; bc < gw; ++bc) {
      const int row = br * gw + bc;
      int k = 0;
      for (int ch = 0; ch < image.channels; ++ch)
        for (int r = 0; r < p_image; ++r)
          for (int c = 0; c < p_image; ++c) out(row, k++) = image.at(ch, br * p_image + r, bc * p_image + c);
    }
  return out;
}

ad::Var image_patchify_embed(ad::Graph& g, const Image& image, const ImageRenderConfig& cfg,
                             const nn::Linear& params) {
  cfg.validate();
  if (image.width != cfg.w || image.height != cfg.h) throw std::invalid_argument("image_patchify_embed: size mismatch");
  if (params.in() != cfg.patch_dim()) throw std::invalid_argument("image_patchify_embed: parameter shape mismatch");
  return params(g, g.constant(image_patches(image, cfg.p_image)));
}

TextVocab TextVocab::from_words(const std::vector<std::string>& words) {
  TextVocab v;
  for (const char* s : {kPad, kUnk, kMask}) {
    v.ids_[s] = static_cast<int>(v.tokens_.size());
    v.tokens_.emplace_back(s);
  }
  for (const std::string& w : words) {
    if (v.ids_.count(w) != 0) continue;
    v.ids_[w] = static_cast<int>(v.tokens_.size());
    v.tokens_.push_back(w);
  }
  return v;
}

TextVocab TextVocab::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read vocabulary " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) lines.push_back(line);
  if (lines.size() < 3 || lines[0] != kPad || lines[1] != kUnk || lines[2] != kMask)
    throw std::runtime_error("vocabulary must start with the special tokens");
  return from_words({lines.begin() + 3, lines.end()});
}

void TextVocab::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write vocabulary " + path.string());
  for (const std::string& t : tokens_) out << t << "\n";
}

int TextVocab::id(const std::string& token) const {
  auto it = ids_.find(token);
  return it == ids_.end() ? unk() : it->second;
}

std::vector<std::string> split_words(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    const auto u = static_cast<unsigned char>(ch);
    if (std::isspace(u) || (std::ispunct(u) && ch != '-')) {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(static_cast<char>(std::tolower(u)));
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

TokenizedText tokenize_text(const std::string& text, const TextVocab& vocab, int n_text_max) {
  if (n_text_max < 1) throw std::invalid_argument("tokenize_text: n_text_max must be >= 1");
  TokenizedText out;
  out.ids.assign(static_cast<std::size_t>(n_text_max), vocab.pad());
  out.mask.assign(static_cast<std::size_t>(n_text_max), 0);
  const auto words = split_words(text);
  const std::size_t n = std::min(words.size(), static_cast<std::size_t>(n_text_max));
  for (std::size_t i = 0; i < n; ++i) {
    out.ids[i] = vocab.id(words[i]);
    out.mask[i] = 1;
  }
  return out;
}

void write_pgm(const Image& image, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "P5\n" << image.width << " " << image.height << "\n255\n";
  for (int r = 0; r < image.height; ++r)
    for (int c = 0; c < image.width; ++c) {
      const double v = std::clamp(image.at(0, r, c), 0.0, 1.0);
      out.put(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0))));
    }
}

}  // namespace aurora::tokenization
