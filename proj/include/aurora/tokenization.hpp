#pragma once

// Turns a normalized context window into the three token streams: time
// patches, an endogenous period-aligned image, and text ids.

#include "aurora/autodiff.hpp"
#include "aurora/nn.hpp"

#include <filesystem>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace aurora::tokenization {

using ad::Matrix;

struct TimeTokenConfig {
  int p_time = 16;
  int d_time = 32;
};

struct ImageRenderConfig {
  int w = 32;
  int h = 32;
  int p_image = 8;
  int d_image = 32;

  void validate() const;
  int n_image() const { return (w / p_image) * (h / p_image); }
  int patch_dim() const { return 3 * p_image * p_image; }
};

// Left-pads by replicating x[0] up to a multiple of p_time and cuts the
// result into ceil(T / p_time) contiguous rows.
Matrix patch_time_series(std::span<const double> x, int p_time);

// Row-wise affine map patches * W + b.
ad::Var embed_time_patches(ad::Graph& g, const ad::Var& patches, const nn::Linear& params);

// |DFT| for bins 0..floor(T/2).
std::vector<double> amplitude_spectrum(std::span<const double> x);
// Frequency bin of the strongest non-DC component; ties (within a relative
// 1e-9 of the signal's L1 mass) resolve to the lowest bin.
int dominant_frequency(std::span<const double> x);
// ceil(T / F) clamped to [2, T].
int detect_dominant_period(std::span<const double> x);

// 3 channels stored channel-major, then row (height), then column (width).
struct Image {
  int channels = 3;
  int height = 0;
  int width = 0;
  std::vector<double> data;

  double at(int c, int r, int col) const { return data[(static_cast<std::size_t>(c) * height + r) * width + col]; }
  double& at(int c, int r, int col) { return data[(static_cast<std::size_t>(c) * height + r) * width + col]; }
};

// The m x P grid (m = ceil(T/P)) before resizing, min-max scaled to [0, 1]
// (a constant grid maps to 0.5).
Matrix period_grid(std::span<const double> x, int period);

// Period grid repeated on three channels and bilinearly resized
// (half-pixel centers, no corner alignment) to h rows by w columns.
Image render_endogenous_image(std::span<const double> x, int period, const ImageRenderConfig& cfg);

// (w/p * h/p) x (3 p^2) matrix of flattened blocks, each in (channel, row,
// col) order; blocks enumerate the grid row-major.
Matrix image_patches(const Image& image, int p_image);
ad::Var image_patchify_embed(ad::Graph& g, const Image& image, const ImageRenderConfig& cfg, const nn::Linear& params);

class TextVocab {
 public:
  static constexpr const char* kPad = "[pad]";
  static constexpr const char* kUnk = "[unk]";
  static constexpr const char* kMask = "[mask]";

  // Specials first (pad=0, unk=1, mask=2), then the given words in order.
  static TextVocab from_words(const std::vector<std::string>& words);
  static TextVocab load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  int id(const std::string& token) const;  // unk for unknown tokens
  bool contains(const std::string& token) const { return ids_.count(token) != 0; }
  const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  int size() const { return static_cast<int>(tokens_.size()); }
  int pad() const { return 0; }
  int unk() const { return 1; }
  int mask() const { return 2; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> ids_;
};

// Lowercased words split on whitespace and punctuation.
std::vector<std::string> split_words(const std::string& text);

struct TokenizedText {
  std::vector<int> ids;
  std::vector<std::uint8_t> mask;
};

TokenizedText tokenize_text(const std::string& text, const TextVocab& vocab, int n_text_max);

// PGM (P5) of channel 0 scaled to 0..255.
void write_pgm(const Image& image, const std::filesystem::path& path);

}  // namespace aurora::tokenization
