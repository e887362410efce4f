#pragma once

#include "semid/common.hpp"

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace semid::renderkit {

/// Layout for the embedded 8x16 bitmap font. Glyph cells are glyph_px tall
/// and glyph_px / 2 wide (integer nearest-neighbour scaling of the base font).
struct RenderConfig {
  int canvas = 1024;
  int glyph_px = 16;  // multiple of 16
  int margin = 16;
  int wrap = 80;      // characters per line

  /// Throws config error unless the text block fits inside the margins.
  void validate() const;
  int glyph_width() const { return glyph_px / 2; }
  int max_lines() const { return (canvas - 2 * margin) / glyph_px; }
  std::string digest_key() const;
};

inline constexpr std::uint8_t kPaper = 255;
inline constexpr std::uint8_t kInk = 0;

struct TextImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;  // row-major grayscale
  std::string source_hash;

  std::uint8_t at(int x, int y) const { return pixels[static_cast<std::size_t>(y) * static_cast<std::size_t>(width) + static_cast<std::size_t>(x)]; }
  std::size_t ink_count() const;
};

/// Collapses whitespace runs to one space and trims both ends.
std::string normalize_whitespace(std::string_view text);

/// Word-wrapped lines of glyph indices after whitespace normalization.
/// Overflowing text is cut and ends with the ellipsis glyph.
std::vector<std::vector<int>> layout_text(std::string_view text, const RenderConfig& c);

TextImage render_text(std::string_view text, const RenderConfig& c);

/// Box-filter average pooling to target x target (rounded to nearest).
TextImage downsample(const TextImage& img, int target);

/// Uniform image, for fixtures.
TextImage solid_image(int size, std::uint8_t value);

inline constexpr int kPatchGrid = 16;

/// 16x16 patch-mean features (centred at 0.5, plus a bias feature) through a
/// seeded Gaussian projection to out_dim, then L2-normalized.
std::vector<double> reference_visual_encode(const TextImage& img, int out_dim, std::uint64_t seed);

/// Patch-mean intensities in [0, 1], row-major 16x16.
std::vector<double> patch_means(const TextImage& img);

/// 8-bit grayscale PNG.
std::string encode_png(const TextImage& img);
void write_png(const TextImage& img, const fs::path& path);

/// Glyph indices into the embedded font table.
inline constexpr int kReplacementGlyph = 95;
inline constexpr int kEllipsisGlyph = 96;
int glyph_for(char32_t cp);

}  // namespace semid::renderkit
