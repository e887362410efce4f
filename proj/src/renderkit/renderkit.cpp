#include "semid/renderkit.hpp"

#include "semid/error.hpp"

#include <zlib.h>

#include <array>
#include <cmath>

namespace semid::renderkit {

namespace {

constexpr std::uint8_t kFont[][16] = {
#include "font8x16.inc"
};
static_assert(std::size(kFont) == 97, "font table must hold 95 ASCII glyphs + replacement + ellipsis");

constexpr int kFontW = 8;
constexpr int kFontH = 16;

std::vector<char32_t> decode_utf8(std::string_view s) {
  std::vector<char32_t> out;
  std::size_t i = 0;
  while (i < s.size()) {
    const auto b = static_cast<unsigned char>(s[i]);
    int len = 1;
    char32_t cp = b;
    if (b >= 0xF0 && b < 0xF8) {
      len = 4;
      cp = b & 0x07;
    } else if (b >= 0xE0) {
      len = 3;
      cp = b & 0x0F;
    } else if (b >= 0xC0) {
      len = 2;
      cp = b & 0x1F;
    } else if (b >= 0x80) {
      out.push_back(0xFFFD);
      ++i;
      continue;
    }
    if (len > 1) {
      bool ok = i + static_cast<std::size_t>(len) <= s.size();
      for (int k = 1; ok && k < len; ++k) {
        const auto c = static_cast<unsigned char>(s[i + static_cast<std::size_t>(k)]);
        ok = (c & 0xC0) == 0x80;
        cp = (cp << 6) | (c & 0x3F);
      }
      if (!ok) {
        out.push_back(0xFFFD);
        ++i;
        continue;
      }
    }
    out.push_back(cp);
    i += static_cast<std::size_t>(len);
  }
  return out;
}

bool is_space(char32_t c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; }

}  // namespace

int glyph_for(char32_t cp) {
  if (cp >= 0x20 && cp <= 0x7E) return static_cast<int>(cp - 0x20);
  if (cp == 0x2026) return kEllipsisGlyph;
  return kReplacementGlyph;
}

void RenderConfig::validate() const {
  require(glyph_px >= 16 && glyph_px % 16 == 0, ErrorKind::config, "glyph_px must be a positive multiple of 16");
  require(margin >= 0, ErrorKind::config, "margin must be non-negative");
  require(wrap >= 1, ErrorKind::config, "wrap must be >= 1");
  require(canvas >= 16, ErrorKind::config, "canvas too small");
  require(wrap * glyph_width() + 2 * margin <= canvas && glyph_px + 2 * margin <= canvas, ErrorKind::config,
          "glyph size x wrap does not fit the canvas with margins (canvas " + std::to_string(canvas) + ")");
}

std::string RenderConfig::digest_key() const {
  return "canvas=" + std::to_string(canvas) + ";glyph=" + std::to_string(glyph_px) + ";margin=" +
         std::to_string(margin) + ";wrap=" + std::to_string(wrap) + ";font=dejavu-mono-8x16";
}

std::size_t TextImage::ink_count() const {
  std::size_t n = 0;
  for (auto p : pixels) n += p != kPaper;
  return n;
}

std::string normalize_whitespace(std::string_view text) {
  std::string out;
  bool pending = false;
  for (char c : text) {
    if (is_space(static_cast<unsigned char>(c))) {
      pending = !out.empty();
      continue;
    }
    if (pending) out.push_back(' ');
    pending = false;
    out.push_back(c);
  }
  return out;
}

std::vector<std::vector<int>> layout_text(std::string_view text, const RenderConfig& c) {
  const auto cps = decode_utf8(normalize_whitespace(text));
  const auto wrap = static_cast<std::size_t>(c.wrap);

  // Greedy word wrap; words longer than a line are hard-broken.
  std::vector<std::vector<int>> lines(1);
  std::size_t i = 0;
  while (i < cps.size()) {
    std::size_t j = i;
    while (j < cps.size() && cps[j] != ' ') ++j;
    const std::size_t word = j - i;
    auto& line = lines.back();
    const std::size_t need = line.empty() ? word : line.size() + 1 + word;
    if (need <= wrap) {
      if (!line.empty()) line.push_back(glyph_for(' '));
      for (std::size_t k = i; k < j; ++k) line.push_back(glyph_for(cps[k]));
    } else if (word <= wrap) {
      lines.push_back({});
      for (std::size_t k = i; k < j; ++k) lines.back().push_back(glyph_for(cps[k]));
    } else {
      if (!line.empty() && line.size() + 1 < wrap) line.push_back(glyph_for(' '));
      else if (!line.empty()) lines.push_back({});
      for (std::size_t k = i; k < j; ++k) {
        if (lines.back().size() == wrap) lines.push_back({});
        lines.back().push_back(glyph_for(cps[k]));
      }
    }
    i = j + 1;  // skip the single separating space
  }

  const auto max_lines = static_cast<std::size_t>(c.max_lines());
  if (lines.size() > max_lines) {
    lines.resize(max_lines);
    auto& last = lines.back();
    if (last.size() == wrap)
      last.back() = kEllipsisGlyph;
    else
      last.push_back(kEllipsisGlyph);
  }
  return lines;
}

TextImage render_text(std::string_view text, const RenderConfig& c) {
  c.validate();
  const auto norm = normalize_whitespace(text);
  require(!norm.empty(), ErrorKind::data, "empty input: nothing to render");

  TextImage img;
  img.width = img.height = c.canvas;
  img.pixels.assign(static_cast<std::size_t>(c.canvas) * static_cast<std::size_t>(c.canvas), kPaper);
  img.source_hash = sha256_hex(c.digest_key() + "\n" + norm);

  const int scale = c.glyph_px / kFontH;
  const auto lines = layout_text(norm, c);
  for (std::size_t row = 0; row < lines.size(); ++row) {
    const int y0 = c.margin + static_cast<int>(row) * c.glyph_px;
    for (std::size_t col = 0; col < lines[row].size(); ++col) {
      const int x0 = c.margin + static_cast<int>(col) * c.glyph_width();
      const auto& glyph = kFont[lines[row][col]];
      for (int gy = 0; gy < kFontH; ++gy)
        for (int gx = 0; gx < kFontW; ++gx) {
          if (!((glyph[gy] >> (7 - gx)) & 1)) continue;
          for (int sy = 0; sy < scale; ++sy)
            for (int sx = 0; sx < scale; ++sx) {
              const int x = x0 + gx * scale + sx, y = y0 + gy * scale + sy;
              img.pixels[static_cast<std::size_t>(y) * static_cast<std::size_t>(c.canvas) + static_cast<std::size_t>(x)] = kInk;
            }
        }
    }
  }
  return img;
}

TextImage downsample(const TextImage& img, int target) {
  require(target >= 1 && img.width == img.height && img.width % target == 0, ErrorKind::config,
          "downsample target " + std::to_string(target) + " must divide image size " + std::to_string(img.width));
  const int f = img.width / target;
  if (f == 1) return img;
  TextImage out;
  out.width = out.height = target;
  out.pixels.resize(static_cast<std::size_t>(target) * static_cast<std::size_t>(target));
  out.source_hash = sha256_hex(img.source_hash + "|box" + std::to_string(target));
  const std::uint64_t area = static_cast<std::uint64_t>(f) * static_cast<std::uint64_t>(f);
  for (int ty = 0; ty < target; ++ty)
    for (int tx = 0; tx < target; ++tx) {
      std::uint64_t sum = 0;
      for (int y = ty * f; y < (ty + 1) * f; ++y)
        for (int x = tx * f; x < (tx + 1) * f; ++x) sum += img.at(x, y);
      out.pixels[static_cast<std::size_t>(ty) * static_cast<std::size_t>(target) + static_cast<std::size_t>(tx)] =
          static_cast<std::uint8_t>((sum + area / 2) / area);
    }
  return out;
}

TextImage solid_image(int size, std::uint8_t value) {
  TextImage img;
  img.width = img.height = size;
  img.pixels.assign(static_cast<std::size_t>(size) * static_cast<std::size_t>(size), value);
  img.source_hash = sha256_hex("solid:" + std::to_string(size) + ":" + std::to_string(value));
  return img;
}

std::vector<double> patch_means(const TextImage& img) {
  expects(img.width >= kPatchGrid && img.height >= kPatchGrid, "image smaller than the patch grid");
  std::vector<double> feats(kPatchGrid * kPatchGrid, 0.0);
  for (int py = 0; py < kPatchGrid; ++py) {
    const int y0 = py * img.height / kPatchGrid, y1 = (py + 1) * img.height / kPatchGrid;
    for (int px = 0; px < kPatchGrid; ++px) {
      const int x0 = px * img.width / kPatchGrid, x1 = (px + 1) * img.width / kPatchGrid;
      std::uint64_t sum = 0;
      for (int y = y0; y < y1; ++y)
        for (int x = x0; x < x1; ++x) sum += img.at(x, y);
      feats[static_cast<std::size_t>(py * kPatchGrid + px)] =
          static_cast<double>(sum) / (255.0 * static_cast<double>((y1 - y0) * (x1 - x0)));
    }
  }
  return feats;
}

std::vector<double> reference_visual_encode(const TextImage& img, int out_dim, std::uint64_t seed) {
  require(out_dim >= 8, ErrorKind::config, "reference encoder out_dim must be >= 8");
  const auto means = patch_means(img);
  std::vector<double> feats(means.size() + 1);
  for (std::size_t i = 0; i < means.size(); ++i) feats[i] = means[i] - 0.5;
  feats.back() = 1.0;

  // Projection rows are drawn on the fly; the stream depends only on seed.
  Rng rng(derive_seed(seed, "reference_visual_encode"));
  const double scale = 1.0 / std::sqrt(static_cast<double>(out_dim));
  std::vector<double> out(static_cast<std::size_t>(out_dim), 0.0);
  for (auto& o : out) {
    double acc = 0.0;
    for (double f : feats) acc += rng.normal() * scale * f;
    o = acc;
  }
  double n = 0.0;
  for (double v : out) n += v * v;
  n = std::sqrt(n);
  require(n > 0.0, ErrorKind::data, "reference encoder produced a zero vector");
  for (auto& v : out) v /= n;
  return out;
}

namespace {

void put_u32(std::string& s, std::uint32_t v) {
  for (int shift = 24; shift >= 0; shift -= 8) s.push_back(static_cast<char>((v >> shift) & 0xFF));
}

void put_chunk(std::string& out, const char* type, const std::string& data) {
  put_u32(out, static_cast<std::uint32_t>(data.size()));
  std::string body(type, 4);
  body += data;
  out += body;
  put_u32(out, static_cast<std::uint32_t>(crc32(0L, reinterpret_cast<const Bytef*>(body.data()),
                                                static_cast<uInt>(body.size()))));
}

}  // namespace

std::string encode_png(const TextImage& img) {
  std::string raw;
  raw.reserve(static_cast<std::size_t>(img.height) * (static_cast<std::size_t>(img.width) + 1));
  for (int y = 0; y < img.height; ++y) {
    raw.push_back('\0');  // filter: none
    raw.append(reinterpret_cast<const char*>(&img.pixels[static_cast<std::size_t>(y) * static_cast<std::size_t>(img.width)]),
               static_cast<std::size_t>(img.width));
  }
  uLongf zlen = compressBound(static_cast<uLong>(raw.size()));
  std::string z(zlen, '\0');
  if (compress2(reinterpret_cast<Bytef*>(z.data()), &zlen, reinterpret_cast<const Bytef*>(raw.data()),
                static_cast<uLong>(raw.size()), 9) != Z_OK)
    fail(ErrorKind::internal, "zlib compression failed");
  z.resize(zlen);

  std::string out("\x89PNG\r\n\x1a\n", 8);
  std::string ihdr;
  put_u32(ihdr, static_cast<std::uint32_t>(img.width));
  put_u32(ihdr, static_cast<std::uint32_t>(img.height));
  ihdr += std::string("\x08\x00\x00\x00\x00", 5);  // 8-bit grayscale, no interlace
  put_chunk(out, "IHDR", ihdr);
  put_chunk(out, "IDAT", z);
  put_chunk(out, "IEND", {});
  return out;
}

void write_png(const TextImage& img, const fs::path& path) { write_file(path, encode_png(img)); }

}  // namespace semid::renderkit
