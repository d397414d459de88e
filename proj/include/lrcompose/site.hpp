// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <compare>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace lrcompose {

/// Linear projections that accept adapters.
enum class SiteKind : std::uint8_t { q = 0, k, v, o, gate, up, down, lm_head };

inline constexpr std::array<SiteKind, 8> kAllSiteKinds = {
    SiteKind::q, SiteKind::k, SiteKind::v, SiteKind::o,
    SiteKind::gate, SiteKind::up, SiteKind::down, SiteKind::lm_head};

inline std::string_view to_string(SiteKind k) {
  switch (k) {
    case SiteKind::q: return "q";
    case SiteKind::k: return "k";
    case SiteKind::v: return "v";
    case SiteKind::o: return "o";
    case SiteKind::gate: return "gate";
    case SiteKind::up: return "up";
    case SiteKind::down: return "down";
    case SiteKind::lm_head: return "lm_head";
  }
  return "?";
}

inline SiteKind parse_site_kind(std::string_view s) {
  for (SiteKind k : kAllSiteKinds)
    if (to_string(k) == s) return k;
  throw std::invalid_argument("unknown site kind '" + std::string(s) + "'");
}

/// (layer, kind). lm_head uses layer == n_layers as its sentinel.
struct AttachmentSite {
  std::uint32_t layer = 0;
  SiteKind kind = SiteKind::q;

  friend auto operator<=>(const AttachmentSite&, const AttachmentSite&) = default;

  /// "L0.q", "L1.down", ..., "lm_head".
  std::string to_string() const {
    if (kind == SiteKind::lm_head) return "lm_head";
    return "L" + std::to_string(layer) + "." + std::string(lrcompose::to_string(kind));
  }
};

/// Inverse of AttachmentSite::to_string. lm_head needs the layer count for its sentinel.
inline AttachmentSite parse_site(std::string_view s, std::uint32_t n_layers) {
  if (s == "lm_head") return {n_layers, SiteKind::lm_head};
  const auto dot = s.find('.');
  if (s.size() < 4 || s[0] != 'L' || dot == std::string_view::npos) {
    throw std::invalid_argument("malformed site '" + std::string(s) + "'");
  }
  const std::string layer(s.substr(1, dot - 1));
  if (layer.empty() || layer.find_first_not_of("0123456789") != std::string::npos) {
    throw std::invalid_argument("malformed site '" + std::string(s) + "'");
  }
  return {static_cast<std::uint32_t>(std::stoul(layer)), parse_site_kind(s.substr(dot + 1))};
}

}  // namespace lrcompose
