#pragma once

// 8-bit RGB images and binary PPM (P6) files.

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <string>
#include <vector>

#include "nlic/bytes.hpp"
#include "nlic/errors.hpp"
#include "nlic/tensor.hpp"

namespace nlic {

// Samples are stored row-major with the three channels of a pixel adjacent
// (R, G, B).
struct Image {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> samples;

  Image() = default;
  Image(std::size_t w, std::size_t h, std::uint8_t fill = 0)
      : width(w), height(h), samples(w * h * 3, fill) {}

  std::uint8_t& at(std::size_t y, std::size_t x, std::size_t c) {
    return samples[(y * width + x) * 3 + c];
  }
  std::uint8_t at(std::size_t y, std::size_t x, std::size_t c) const {
    return samples[(y * width + x) * 3 + c];
  }
  std::size_t subpixels() const { return width * height * 3; }

  void validate() const {
    NLIC_REQUIRE(width >= 1 && height >= 1, DataError, "image has zero size ", width, "x",
                 height);
    NLIC_REQUIRE(samples.size() == subpixels(), DataError, "image ", width, "x", height,
                 " has ", samples.size(), " samples, expected ", subpixels());
  }

  bool operator==(const Image&) const = default;
};

// Extends the image to (w, h) by repeating its last row and column.
inline Image pad_replicate(const Image& img, std::size_t w, std::size_t h) {
  NLIC_REQUIRE(w >= img.width && h >= img.height, ContractViolation, "cannot pad ", img.width,
               "x", img.height, " down to ", w, "x", h);
  Image out(w, h);
  for (std::size_t y = 0; y < h; ++y) {
    const std::size_t sy = std::min(y, img.height - 1);
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t sx = std::min(x, img.width - 1);
      for (std::size_t c = 0; c < 3; ++c) out.at(y, x, c) = img.at(sy, sx, c);
    }
  }
  return out;
}

inline Image crop(const Image& img, std::size_t w, std::size_t h) {
  NLIC_REQUIRE(w <= img.width && h <= img.height, ContractViolation, "crop ", w, "x", h,
               " exceeds image ", img.width, "x", img.height);
  Image out(w, h);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      for (std::size_t c = 0; c < 3; ++c) out.at(y, x, c) = img.at(y, x, c);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// PPM

namespace detail {

inline std::size_t ppm_number(const std::vector<std::uint8_t>& b, std::size_t& pos) {
  for (;;) {
    while (pos < b.size() && std::isspace(b[pos])) ++pos;
    if (pos < b.size() && b[pos] == '#') {
      while (pos < b.size() && b[pos] != '\n') ++pos;
      continue;
    }
    break;
  }
  NLIC_REQUIRE(pos < b.size() && std::isdigit(b[pos]), DataError, "malformed PPM header");
  std::size_t v = 0;
  while (pos < b.size() && std::isdigit(b[pos])) {
    v = v * 10 + static_cast<std::size_t>(b[pos++] - '0');
    NLIC_REQUIRE(v < (1u << 24), DataError, "PPM header value too large");
  }
  return v;
}

}  // namespace detail

inline Image decode_ppm(const std::vector<std::uint8_t>& bytes) {
  NLIC_REQUIRE(bytes.size() >= 2 && bytes[0] == 'P' && bytes[1] == '6', DataError,
               "not a binary PPM (P6) file");
  std::size_t pos = 2;
  Image img;
  img.width = detail::ppm_number(bytes, pos);
  img.height = detail::ppm_number(bytes, pos);
  const std::size_t maxval = detail::ppm_number(bytes, pos);
  NLIC_REQUIRE(maxval == 255, DataError, "only maxval 255 PPM files are supported, got ", maxval);
  NLIC_REQUIRE(pos < bytes.size() && std::isspace(bytes[pos]), DataError, "malformed PPM header");
  ++pos;
  NLIC_REQUIRE(img.width >= 1 && img.height >= 1, DataError, "PPM has zero size");
  NLIC_REQUIRE(bytes.size() - pos >= img.subpixels(), DataError, "PPM pixel data truncated");
  img.samples.assign(bytes.begin() + static_cast<long>(pos),
                     bytes.begin() + static_cast<long>(pos + img.subpixels()));
  return img;
}

inline std::vector<std::uint8_t> encode_ppm(const Image& img) {
  img.validate();
  const std::string header =
      "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.insert(out.end(), img.samples.begin(), img.samples.end());
  return out;
}

inline Image read_ppm(const std::string& path) { return decode_ppm(read_bytes(path)); }
inline void write_ppm(const std::string& path, const Image& img) {
  write_bytes(path, encode_ppm(img));
}

}  // namespace nlic
