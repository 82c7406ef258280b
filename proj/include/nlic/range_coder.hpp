#pragma once

// Byte-oriented range coder over fixed-point CDFs (total 2^16), with a 64-bit
// low register and carry propagation through a cached byte plus a run of
// pending 0xFF bytes. Integer arithmetic only.
//
// The classic formulation emits a leading byte that is always zero; it is
// dropped here, so finish() adds exactly 4 bytes and an empty stream is 4
// bytes long.

#include <cstdint>
#include <span>
#include <vector>

#include "nlic/entropy.hpp"
#include "nlic/errors.hpp"

namespace nlic {

class RangeEncoder {
 public:
  void encode(std::uint32_t start, std::uint32_t freq) {
    NLIC_REQUIRE(freq > 0 && start + freq <= kCdfTotal, ContractViolation,
                 "invalid interval [", start, ", ", start + freq, ")");
    const std::uint32_t r = range_ >> kCdfPrecision;
    low_ += static_cast<std::uint64_t>(r) * start;
    range_ = r * freq;
    while (range_ < kTop) {
      range_ <<= 8;
      shift_low();
    }
  }

  void encode(int symbol, const QuantizedCdf& cdf) {
    NLIC_REQUIRE(symbol >= cdf.lo && symbol <= cdf.hi(), ContractViolation, "symbol ", symbol,
                 " outside CDF support [", cdf.lo, ", ", cdf.hi(), "]");
    encode(cdf.start(symbol), cdf.freq(symbol));
  }

  std::vector<std::uint8_t> finish() {
    for (int i = 0; i < 5; ++i) shift_low();
    return std::move(out_);
  }

 private:
  static constexpr std::uint32_t kTop = 1u << 24;

  void shift_low() {
    if (static_cast<std::uint32_t>(low_) < 0xFF000000u || (low_ >> 32) != 0) {
      const auto carry = static_cast<std::uint8_t>(low_ >> 32);
      std::uint8_t byte = cache_;
      do {
        emit(static_cast<std::uint8_t>(byte + carry));
        byte = 0xFF;
      } while (--pending_ != 0);
      cache_ = static_cast<std::uint8_t>(low_ >> 24);
    }
    ++pending_;
    low_ = (low_ & 0x00FFFFFFu) << 8;
  }

  void emit(std::uint8_t b) {
    if (skip_first_) {
      skip_first_ = false;
      return;
    }
    out_.push_back(b);
  }

  std::uint64_t low_ = 0;
  std::uint32_t range_ = 0xFFFFFFFFu;
  std::uint8_t cache_ = 0;
  std::uint64_t pending_ = 1;
  bool skip_first_ = true;
  std::vector<std::uint8_t> out_;
};

class RangeDecoder {
 public:
  explicit RangeDecoder(std::span<const std::uint8_t> data) : data_(data) {
    for (int i = 0; i < 4; ++i) code_ = (code_ << 8) | next_byte();
  }

  int decode(const QuantizedCdf& cdf) {
    const std::uint32_t r = range_ >> kCdfPrecision;
    const std::uint32_t v = std::min<std::uint32_t>(code_ / r, kCdfTotal - 1);
    const int s = cdf.find(v);
    const std::uint32_t start = cdf.start(s);
    code_ -= r * start;
    range_ = r * cdf.freq(s);
    while (range_ < kTop) {
      code_ = (code_ << 8) | next_byte();
      range_ <<= 8;
    }
    return s;
  }

  std::size_t consumed() const { return pos_; }

 private:
  static constexpr std::uint32_t kTop = 1u << 24;

  std::uint32_t next_byte() {
    if (pos_ >= data_.size()) {
      throw TruncationError(detail::concat("range decoder read past the end of a ",
                                           data_.size(), "-byte segment"));
    }
    return data_[pos_++];
  }

  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
  std::uint32_t code_ = 0;
  std::uint32_t range_ = 0xFFFFFFFFu;
};

}  // namespace nlic
