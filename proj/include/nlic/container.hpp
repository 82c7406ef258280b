#pragma once

// Bitstream container, all integers little-endian:
//
//   offset  size  field
//        0     4  magic "NLIC"
//        4     2  format version
//        6     4  image width
//       10     4  image height
//       14     4  padded width
//       18     4  padded height
//       22     8  model config hash
//       30     8  model weights hash
//       38     4  length of segment z
//       42     4  length of segment y
//       46     4  length of segment x
//       50     -  segments z, y, x
//      end-4   4  CRC-32 of every preceding byte

#include <algorithm>
#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include <boost/crc.hpp>

#include "nlic/bytes.hpp"
#include "nlic/errors.hpp"

namespace nlic {

inline constexpr std::array<std::uint8_t, 4> kContainerMagic = {'N', 'L', 'I', 'C'};
inline constexpr std::uint16_t kFormatVersion = 1;
inline constexpr std::size_t kHeaderBytes = 50;
inline constexpr std::size_t kCrcBytes = 4;

struct ContainerHeader {
  std::uint16_t version = kFormatVersion;
  std::uint32_t width = 0;
  std::uint32_t height = 0;
  std::uint32_t padded_width = 0;
  std::uint32_t padded_height = 0;
  std::uint64_t config_hash = 0;
  std::uint64_t weights_hash = 0;

  bool operator==(const ContainerHeader&) const = default;
};

struct Bitstream {
  ContainerHeader header;
  std::vector<std::uint8_t> z;
  std::vector<std::uint8_t> y;
  std::vector<std::uint8_t> x;

  std::size_t byte_size() const { return kHeaderBytes + z.size() + y.size() + x.size() + kCrcBytes; }
};

inline std::uint32_t crc32(std::span<const std::uint8_t> bytes) {
  boost::crc_32_type crc;
  crc.process_bytes(bytes.data(), bytes.size());
  return crc.checksum();
}

inline std::vector<std::uint8_t> write_container(const Bitstream& bs) {
  ByteWriter w;
  w.put_bytes(kContainerMagic);
  w.put(bs.header.version);
  w.put(bs.header.width);
  w.put(bs.header.height);
  w.put(bs.header.padded_width);
  w.put(bs.header.padded_height);
  w.put(bs.header.config_hash);
  w.put(bs.header.weights_hash);
  for (const auto* seg : {&bs.z, &bs.y, &bs.x}) {
    NLIC_REQUIRE(seg->size() <= UINT32_MAX, CapacityError, "segment of ", seg->size(),
                 " bytes does not fit the container");
    w.put(static_cast<std::uint32_t>(seg->size()));
  }
  w.put_bytes(bs.z);
  w.put_bytes(bs.y);
  w.put_bytes(bs.x);
  w.put(crc32(w.bytes()));
  return std::move(w.bytes());
}

// Checks run in order: magic, minimum size, declared length, CRC, version.
inline Bitstream read_container(std::span<const std::uint8_t> bytes) {
  if (bytes.size() >= kContainerMagic.size() &&
      !std::equal(kContainerMagic.begin(), kContainerMagic.end(), bytes.begin())) {
    throw BadMagicError("not an NLIC bitstream (bad magic)");
  }
  if (bytes.size() < kHeaderBytes + kCrcBytes) {
    throw TruncationError(detail::concat("bitstream of ", bytes.size(),
                                         " bytes is shorter than the fixed header"));
  }
  ByteReader r(bytes);
  r.get_bytes(kContainerMagic.size());
  Bitstream bs;
  bs.header.version = r.get<std::uint16_t>();
  bs.header.width = r.get<std::uint32_t>();
  bs.header.height = r.get<std::uint32_t>();
  bs.header.padded_width = r.get<std::uint32_t>();
  bs.header.padded_height = r.get<std::uint32_t>();
  bs.header.config_hash = r.get<std::uint64_t>();
  bs.header.weights_hash = r.get<std::uint64_t>();
  const std::uint64_t len_z = r.get<std::uint32_t>();
  const std::uint64_t len_y = r.get<std::uint32_t>();
  const std::uint64_t len_x = r.get<std::uint32_t>();
  const std::uint64_t declared = kHeaderBytes + len_z + len_y + len_x + kCrcBytes;
  if (declared > bytes.size()) {
    throw TruncationError(detail::concat("bitstream declares ", declared, " bytes but only ",
                                         bytes.size(), " are present"));
  }
  if (declared < bytes.size()) {
    throw CrcMismatchError(detail::concat(bytes.size() - declared,
                                          " trailing bytes not covered by the checksum"));
  }
  const auto body = bytes.first(bytes.size() - kCrcBytes);
  ByteReader tail(bytes.last(kCrcBytes));
  const std::uint32_t stored = tail.get<std::uint32_t>();
  const std::uint32_t actual = crc32(body);
  if (stored != actual) {
    throw CrcMismatchError(detail::concat("CRC-32 mismatch: stored 0x", std::hex, stored,
                                          ", computed 0x", actual));
  }
  if (bs.header.version != kFormatVersion) {
    throw VersionMismatchError(detail::concat("bitstream format version ", bs.header.version,
                                              ", this build reads version ", kFormatVersion));
  }
  auto copy = [&](std::uint64_t n) {
    auto s = r.get_bytes(static_cast<std::size_t>(n));
    return std::vector<std::uint8_t>(s.begin(), s.end());
  };
  bs.z = copy(len_z);
  bs.y = copy(len_y);
  bs.x = copy(len_x);
  return bs;
}

}  // namespace nlic
