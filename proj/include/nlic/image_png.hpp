#pragma once

// PNG reading and writing through libpng's simplified API. Link nlic_png.
// Any PNG colour type is converted to 8-bit RGB on read; alpha is dropped.

#include <png.h>

#include <string>
#include <vector>

#include "nlic/image.hpp"

namespace nlic {

inline bool is_png(std::span<const std::uint8_t> bytes) {
  static constexpr std::uint8_t kSig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  return bytes.size() >= 8 && std::equal(kSig, kSig + 8, bytes.begin());
}

inline Image decode_png(const std::vector<std::uint8_t>& bytes) {
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&png, bytes.data(), bytes.size())) {
    throw DataError(detail::concat("PNG decode failed: ", png.message));
  }
  png.format = PNG_FORMAT_RGB;
  Image img(png.width, png.height);
  if (!png_image_finish_read(&png, nullptr, img.samples.data(), 0, nullptr)) {
    const std::string msg = png.message;
    png_image_free(&png);
    throw DataError("PNG decode failed: " + msg);
  }
  img.validate();
  return img;
}

inline std::vector<std::uint8_t> encode_png(const Image& img) {
  img.validate();
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(img.width);
  png.height = static_cast<png_uint_32>(img.height);
  png.format = PNG_FORMAT_RGB;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&png, nullptr, &size, 0, img.samples.data(), 0, nullptr)) {
    throw DataError(detail::concat("PNG encode failed: ", png.message));
  }
  std::vector<std::uint8_t> out(size);
  if (!png_image_write_to_memory(&png, out.data(), &size, 0, img.samples.data(), 0, nullptr)) {
    throw DataError(detail::concat("PNG encode failed: ", png.message));
  }
  out.resize(size);
  return out;
}

// Chooses the decoder from the file signature.
inline Image read_image(const std::string& path) {
  const auto bytes = read_bytes(path);
  if (is_png(bytes)) return decode_png(bytes);
  return decode_ppm(bytes);
}

// Chooses the encoder from the extension: ".png" writes PNG, anything else PPM.
inline void write_image(const std::string& path, const Image& img) {
  const bool png = path.size() >= 4 && path.compare(path.size() - 4, 4, ".png") == 0;
  write_bytes(path, png ? encode_png(img) : encode_ppm(img));
}

}  // namespace nlic
