// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "lrcompose/adapter.hpp"
#include "lrcompose/binary_io.hpp"

namespace lrcompose {

inline constexpr std::string_view kAdapterMagic = "LRCMPSE1";
inline constexpr std::uint16_t kAdapterVersion = 1;

/// Adapter container, all integers and reals little-endian:
///
///   magic "LRCMPSE1" | u16 version | u32 name_len | name (UTF-8)
///   | u32 site_layer | u8 site_kind | u32 d_out | u32 d_in | u32 rank
///   | f64 alpha | f64 dropout_p | f32[d_out*rank] A | f32[d_in*rank] B
///
/// A and B are row-major. The file must end exactly after B.
inline std::vector<char> encode_adapter(const LowRankAdapter& ad) {
  ad.validate();
  ByteWriter w;
  w.bytes(kAdapterMagic);
  w.u16(kAdapterVersion);
  w.str(ad.name);
  w.u32(ad.site.layer);
  w.u8(static_cast<std::uint8_t>(ad.site.kind));
  w.u32(static_cast<std::uint32_t>(ad.d_out));
  w.u32(static_cast<std::uint32_t>(ad.d_in));
  w.u32(static_cast<std::uint32_t>(ad.rank));
  w.f64(ad.alpha);
  w.f64(ad.dropout_p);
  for (double v : ad.a.data()) w.f32(static_cast<float>(v));
  for (double v : ad.b.data()) w.f32(static_cast<float>(v));
  return w.buffer();
}

inline LowRankAdapter decode_adapter(const std::vector<char>& bytes) {
  ByteReader r(bytes, FormatErrorKind::BadMagic);
  if (r.bytes(kAdapterMagic.size()) != kAdapterMagic) {
    throw FormatError(FormatErrorKind::BadMagic, "expected LRCMPSE1");
  }
  r.set_short_kind(FormatErrorKind::BadHeader);
  const std::uint16_t version = r.u16();
  if (version != kAdapterVersion) {
    throw FormatError(FormatErrorKind::VersionMismatch,
                      "file version " + std::to_string(version) + ", reader supports " +
                          std::to_string(kAdapterVersion));
  }
  LowRankAdapter ad;
  ad.name = r.str();
  ad.site.layer = r.u32();
  const std::uint8_t kind = r.u8();
  if (kind > static_cast<std::uint8_t>(SiteKind::lm_head)) {
    throw FormatError(FormatErrorKind::BadHeader, "site kind " + std::to_string(kind));
  }
  ad.site.kind = static_cast<SiteKind>(kind);
  ad.d_out = r.u32();
  ad.d_in = r.u32();
  ad.rank = r.u32();
  ad.alpha = r.f64();
  ad.dropout_p = r.f64();
  if (ad.rank == 0 || ad.d_out == 0 || ad.d_in == 0) {
    throw FormatError(FormatErrorKind::BadHeader, "zero rank or dimension");
  }
  const std::uint64_t payload = 4ULL * (static_cast<std::uint64_t>(ad.d_out) * ad.rank +
                                        static_cast<std::uint64_t>(ad.d_in) * ad.rank);
  if (r.remaining() != payload) {
    throw FormatError(FormatErrorKind::TruncatedPayload,
                      "header implies " + std::to_string(payload) + " payload bytes, file has " +
                          std::to_string(r.remaining()));
  }
  ad.a = Matrix(ad.d_out, ad.rank);
  ad.b = Matrix(ad.d_in, ad.rank);
  for (double& v : ad.a.data()) v = static_cast<double>(r.f32());
  for (double& v : ad.b.data()) v = static_cast<double>(r.f32());
  try {
    ad.validate();
  } catch (const std::exception& e) {
    throw FormatError(FormatErrorKind::BadHeader, e.what());
  }
  return ad;
}

inline void save_adapter(const LowRankAdapter& ad, const std::filesystem::path& path) {
  write_file_bytes(path, encode_adapter(ad));
}

inline LowRankAdapter load_adapter(const std::filesystem::path& path) {
  return decode_adapter(read_file_bytes(path));
}

}  // namespace lrcompose
