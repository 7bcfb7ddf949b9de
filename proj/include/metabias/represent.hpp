#pragma once

// Input encodings: 4-bit concept objects and 8-bit numbers, 32x32 raster
// images of both, patch tokenization for sequence models, and the adapter
// that matches a representation to an architecture family's input kind.

#include <array>
#include <string>
#include <vector>

#include "metabias/tensor.hpp"

namespace metabias {

enum class Representation { Bits, Image };

inline const char* to_string(Representation r) {
  return r == Representation::Bits ? "bits" : "image";
}

// ---------------------------------------------------------------------------
// Concept objects: 4 binary features, 16 objects in total. The canonical
// code packs the features most-significant-first: color, shape, size,
// pattern.
// ---------------------------------------------------------------------------

struct ConceptObject {
  bool red = false;      // feature 0: red vs blue
  bool square = false;   // feature 1: square vs triangle
  bool big = false;      // feature 2: big vs small
  bool striped = false;  // feature 3: striped vs solid

  static constexpr int kNumFeatures = 4;
  static constexpr int kNumObjects = 16;

  static ConceptObject from_code(int code) {
    if (code < 0 || code >= kNumObjects)
      throw ConfigError("concept object code out of range: " +
                        std::to_string(code));
    ConceptObject o;
    o.red = (code >> 3) & 1;
    o.square = (code >> 2) & 1;
    o.big = (code >> 1) & 1;
    o.striped = code & 1;
    return o;
  }

  int code() const {
    return (red << 3) | (square << 2) | (big << 1) | (striped ? 1 : 0);
  }

  int feature(int i) const {
    switch (i) {
      case 0: return red ? 1 : 0;
      case 1: return square ? 1 : 0;
      case 2: return big ? 1 : 0;
      case 3: return striped ? 1 : 0;
      default:
        throw ConfigError("feature index out of range: " + std::to_string(i));
    }
  }
};

inline Tensor bits_concept(const ConceptObject& obj) {
  std::vector<double> v(4);
  for (int i = 0; i < 4; ++i) v[static_cast<size_t>(i)] = obj.feature(i);
  return Tensor(Shape{4}, std::move(v));
}

// Big-endian fixed-width 8-bit encoding.
inline Tensor bits_number(int64_t x) {
  if (x < 0 || x >= 256)
    throw ConfigError("bits_number: value " + std::to_string(x) +
                      " outside [0,256)");
  std::vector<double> v(8);
  for (int i = 0; i < 8; ++i)
    v[static_cast<size_t>(i)] = (x >> (7 - i)) & 1;
  return Tensor(Shape{8}, std::move(v));
}

// ---------------------------------------------------------------------------
// Rasterization. All images are 32x32 with values in [0,1]; concepts render
// as RGB (color is semantic), numbers as grayscale digit glyphs.
// ---------------------------------------------------------------------------

inline constexpr int kImageSize = 32;

// Shape outline filled with the object's color on a black background.
inline Tensor render_concept(const ConceptObject& obj) {
  std::vector<double> img(3 * kImageSize * kImageSize, 0.0);
  const int half = obj.big ? 12 : 6;
  const int cx = kImageSize / 2, cy = kImageSize / 2;
  auto paint = [&](int y, int x) {
    if (obj.striped && ((y / 2) % 2 == 1)) return;  // 2-px stripe gaps
    int channel = obj.red ? 0 : 2;
    img[static_cast<size_t>(channel * kImageSize * kImageSize +
                            y * kImageSize + x)] = 1.0;
  };
  for (int y = cy - half; y < cy + half; ++y) {
    for (int x = cx - half; x < cx + half; ++x) {
      if (obj.square) {
        paint(y, x);
      } else {
        // upright triangle: row width grows toward the base
        int row = y - (cy - half);               // 0 .. 2*half-1
        int span = (row * half) / (2 * half) + 1;  // half-width at this row
        if (x >= cx - span && x < cx + span) paint(y, x);
      }
    }
  }
  return Tensor(Shape{3, kImageSize, kImageSize}, std::move(img));
}

namespace detail {

// 5x7 digit glyphs, one bit per pixel, row-major top to bottom.
inline const std::array<std::array<uint8_t, 7>, 10>& digit_font() {
  static const std::array<std::array<uint8_t, 7>, 10> font = {{
      {0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E},  // 0
      {0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E},  // 1
      {0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F},  // 2
      {0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E},  // 3
      {0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02},  // 4
      {0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E},  // 5
      {0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E},  // 6
      {0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08},  // 7
      {0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E},  // 8
      {0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C},  // 9
  }};
  return font;
}

}  // namespace detail

// Decimal digits drawn with the built-in font, scaled x2 and centered.
inline Tensor render_number(int64_t x) {
  if (x < 0 || x >= 100)
    throw ConfigError("render_number: value " + std::to_string(x) +
                      " outside [0,100)");
  std::vector<double> img(kImageSize * kImageSize, 0.0);
  std::string digits = std::to_string(x);
  const int glyph_w = 10, glyph_h = 14, gap = 2;  // 5x7 font at 2x
  int total_w = static_cast<int>(digits.size()) * glyph_w +
                (static_cast<int>(digits.size()) - 1) * gap;
  int x0 = (kImageSize - total_w) / 2;
  int y0 = (kImageSize - glyph_h) / 2;
  for (size_t d = 0; d < digits.size(); ++d) {
    const auto& glyph = detail::digit_font()[static_cast<size_t>(digits[d] - '0')];
    int gx = x0 + static_cast<int>(d) * (glyph_w + gap);
    for (int row = 0; row < 7; ++row)
      for (int col = 0; col < 5; ++col) {
        if (!((glyph[static_cast<size_t>(row)] >> (4 - col)) & 1)) continue;
        for (int dy = 0; dy < 2; ++dy)
          for (int dx = 0; dx < 2; ++dx) {
            int py = y0 + row * 2 + dy, px = gx + col * 2 + dx;
            img[static_cast<size_t>(py * kImageSize + px)] = 1.0;
          }
      }
  }
  return Tensor(Shape{1, kImageSize, kImageSize}, std::move(img));
}

// ---------------------------------------------------------------------------
// Patch tokenization: [B, C, 32, 32] -> [B, 64, 16*C]. Patches are taken in
// row-major order; each token flattens its 4x4xC patch height-first, then
// width, then channel.
// ---------------------------------------------------------------------------

inline constexpr int kPatch = 4;
inline constexpr int kTokensPerImage = 64;

inline Tensor patchify(const Tensor& images) {
  if (images.rank() != 4 || images.dim(2) != kImageSize ||
      images.dim(3) != kImageSize)
    throw ShapeError("patchify: expected [B,C,32,32], got " +
                     shape_str(images.shape()));
  int64_t b = images.dim(0), c = images.dim(1);
  const int64_t g = kImageSize / kPatch;  // 8 patches per side
  Tensor grid = reshape(images, Shape{b, c, g, kPatch, g, kPatch});
  Tensor tokens = permute(grid, {0, 2, 4, 3, 5, 1});  // [B,gy,gx,py,px,C]
  return reshape(tokens, Shape{b, g * g, kPatch * kPatch * c});
}

inline Tensor unpatchify(const Tensor& tokens, int64_t channels) {
  const int64_t g = kImageSize / kPatch;
  if (tokens.rank() != 3 || tokens.dim(1) != g * g ||
      tokens.dim(2) != kPatch * kPatch * channels)
    throw ShapeError("unpatchify: expected [B,64," +
                     std::to_string(kPatch * kPatch * channels) + "], got " +
                     shape_str(tokens.shape()));
  int64_t b = tokens.dim(0);
  Tensor grid = reshape(tokens, Shape{b, g, g, kPatch, kPatch, channels});
  Tensor img = permute(grid, {0, 5, 1, 3, 2, 4});  // [B,C,gy,py,gx,px]
  return reshape(img, Shape{b, channels, kImageSize, kImageSize});
}

// ---------------------------------------------------------------------------
// Family adaptation.
// ---------------------------------------------------------------------------

enum class Family { MLP, CNN, LSTM, Transformer };

inline const char* to_string(Family f) {
  switch (f) {
    case Family::MLP: return "mlp";
    case Family::CNN: return "cnn";
    case Family::LSTM: return "lstm";
    case Family::Transformer: return "transformer";
  }
  return "?";
}

// Batched raw inputs (bits [B,k] or images [B,C,32,32]) to the layout the
// family consumes. Bitstrings feed sequence models one token per bit.
inline Tensor adapt(const Tensor& batch, Representation repr, Family family) {
  if (repr == Representation::Bits) {
    if (batch.rank() != 2)
      throw ShapeError("adapt: bits input must be [B,k], got " +
                       shape_str(batch.shape()));
    switch (family) {
      case Family::MLP:
        return batch;
      case Family::CNN:
        throw SpecError("CNNs operate on image inputs only; bits are not "
                        "supported");
      case Family::LSTM:
      case Family::Transformer:
        return reshape(batch, Shape{batch.dim(0), batch.dim(1), 1});
    }
  }
  if (batch.rank() != 4)
    throw ShapeError("adapt: image input must be [B,C,32,32], got " +
                     shape_str(batch.shape()));
  switch (family) {
    case Family::MLP:
      return flatten(batch);
    case Family::CNN:
      return batch;
    case Family::LSTM:
    case Family::Transformer:
      return patchify(batch);
  }
  throw SpecError("adapt: unhandled family");
}

}  // namespace metabias
