// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "lrcompose/prng.hpp"

namespace lrcompose {

// ---- vocabulary -----------------------------------------------------------------

/// One attribute family (sentiment, topic, ...) and its label set.
struct FamilySpec {
  std::string name;
  std::vector<std::string> labels;
  std::size_t markers_per_label = 8;
};

/// Reserved label that never receives markers and is dropped by filter_items.
inline constexpr std::string_view kNeutralLabel = "neutral";

/// Integer vocabulary shared by every dataset and the host.
///
/// Layout: 0 <pad>, 1 [ANS], 2 [/ANS]; then per family its open tag, close
/// tag and one token per label; then each non-neutral label's marker words;
/// every remaining id up to vocab_size is a filler word.
class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kAnsOpen = 1;
  static constexpr int kAnsClose = 2;

  Vocabulary(std::vector<FamilySpec> families, std::size_t vocab_size)
      : families_(std::move(families)), size_(vocab_size) {
    names_ = {"<pad>", "[ANS]", "[/ANS]"};
    std::set<std::string> seen;
    for (const auto& f : families_) {
      if (f.name.empty() || !seen.insert(f.name).second) {
        throw std::invalid_argument("Vocabulary: empty or duplicate family '" + f.name + "'");
      }
      if (f.labels.empty()) throw std::invalid_argument("Vocabulary: family '" + f.name + "' has no labels");
      FamilyIds ids;
      ids.open = push("[" + upper(f.name) + "]");
      ids.close = push("[/" + upper(f.name) + "]");
      for (const auto& l : f.labels) ids.labels.push_back(push(l));
      family_ids_.push_back(std::move(ids));
    }
    for (std::size_t fi = 0; fi < families_.size(); ++fi) {
      const auto& f = families_[fi];
      for (std::size_t li = 0; li < f.labels.size(); ++li) {
        std::vector<int> lex;
        if (f.labels[li] != kNeutralLabel) {
          for (std::size_t m = 0; m < f.markers_per_label; ++m)
            lex.push_back(push(f.labels[li] + "_" + std::to_string(m)));
        }
        family_ids_[fi].markers.push_back(std::move(lex));
      }
    }
    if (names_.size() >= size_) {
      throw std::invalid_argument("Vocabulary: vocab_size " + std::to_string(size_) +
                                  " leaves no room for filler words (need > " +
                                  std::to_string(names_.size()) + ")");
    }
    for (std::size_t id = names_.size(); id < size_; ++id) {
      fillers_.push_back(static_cast<int>(id));
    }
    const std::size_t first_filler = names_.size();
    for (std::size_t id = first_filler; id < size_; ++id) names_.push_back("w" + std::to_string(id - first_filler));
  }

  std::size_t size() const noexcept { return size_; }
  const std::vector<FamilySpec>& families() const noexcept { return families_; }

  std::size_t family_index(std::string_view name) const {
    for (std::size_t i = 0; i < families_.size(); ++i)
      if (families_[i].name == name) return i;
    throw std::invalid_argument("unknown attribute family '" + std::string(name) + "'");
  }
  const FamilySpec& family(std::string_view name) const { return families_[family_index(name)]; }

  int open_tag(std::string_view family) const { return family_ids_[family_index(family)].open; }
  int close_tag(std::string_view family) const { return family_ids_[family_index(family)].close; }
  int label_token(std::string_view family, std::size_t label) const {
    return family_ids_[family_index(family)].labels.at(label);
  }
  /// Full marker lexicon of one label (empty for neutral).
  const std::vector<int>& markers(std::string_view family, std::size_t label) const {
    return family_ids_[family_index(family)].markers.at(label);
  }
  const std::vector<int>& fillers() const noexcept { return fillers_; }

  /// Tags, label tokens and the reserved ids; everything that is not a word.
  bool is_control(int id) const noexcept {
    if (id <= kAnsClose) return id >= 0;
    for (const auto& f : family_ids_) {
      if (id == f.open || id == f.close) return true;
      if (std::find(f.labels.begin(), f.labels.end(), id) != f.labels.end()) return true;
    }
    return false;
  }

  const std::string& token_name(int id) const { return names_.at(static_cast<std::size_t>(id)); }

  std::string render(std::span<const int> tokens) const {
    std::string out;
    for (int t : tokens) {
      if (!out.empty()) out += ' ';
      out += token_name(t);
    }
    return out;
  }

 private:
  struct FamilyIds {
    int open = 0;
    int close = 0;
    std::vector<int> labels;
    std::vector<std::vector<int>> markers;
  };

  static std::string upper(std::string s) {
    for (char& c : s) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
    return s;
  }

  int push(std::string name) {
    names_.push_back(std::move(name));
    return static_cast<int>(names_.size() - 1);
  }

  std::vector<FamilySpec> families_;
  std::size_t size_;
  std::vector<std::string> names_;
  std::vector<FamilyIds> family_ids_;
  std::vector<int> fillers_;
};

// ---- datasets ---------------------------------------------------------------------

struct AttributeSchema {
  std::string name;
  std::vector<std::string> labels;

  std::size_t label_index(std::string_view label) const {
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (labels[i] == label) return i;
    throw std::invalid_argument("label '" + std::string(label) + "' not in attribute '" + name + "'");
  }
  friend bool operator==(const AttributeSchema&, const AttributeSchema&) = default;
};

using Schema = std::vector<AttributeSchema>;

/// One text. `labels[i]` indexes schema[i].labels, so every label belongs to
/// its attribute's declared set by construction.
struct LabeledText {
  std::vector<int> tokens;
  std::vector<std::uint16_t> labels;
  std::string source;

  std::size_t words() const noexcept { return tokens.size(); }
  friend bool operator==(const LabeledText&, const LabeledText&) = default;
};

enum class Split { Train, Validation, Test };

inline std::string_view to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Validation: return "validation";
    case Split::Test: return "test";
  }
  return "?";
}

struct LabeledDataset {
  std::string name;
  Schema schema;
  std::vector<LabeledText> train;
  std::vector<LabeledText> validation;
  std::vector<LabeledText> test;

  std::vector<LabeledText>& split(Split s) {
    return s == Split::Train ? train : s == Split::Validation ? validation : test;
  }
  const std::vector<LabeledText>& split(Split s) const {
    return s == Split::Train ? train : s == Split::Validation ? validation : test;
  }
  friend bool operator==(const LabeledDataset&, const LabeledDataset&) = default;
};

/// Joint label of an item as a single integer (mixed radix over the schema).
inline std::size_t joint_label(const Schema& schema, const LabeledText& item) {
  std::size_t key = 0;
  for (std::size_t a = 0; a < schema.size(); ++a) key = key * schema[a].labels.size() + item.labels.at(a);
  return key;
}

inline std::size_t joint_label_count(const Schema& schema) {
  std::size_t n = 1;
  for (const auto& a : schema) n *= a.labels.size();
  return n;
}

inline std::string joint_label_name(const Schema& schema, std::size_t key) {
  std::vector<std::string> parts(schema.size());
  for (std::size_t a = schema.size(); a-- > 0;) {
    const std::size_t n = schema[a].labels.size();
    parts[a] = schema[a].name + "=" + schema[a].labels[key % n];
    key /= n;
  }
  std::string out;
  for (const auto& p : parts) out += (out.empty() ? "" : ",") + p;
  return out;
}

/// Item counts per joint label.
inline std::vector<std::size_t> label_histogram(const Schema& schema,
                                                std::span<const LabeledText> items) {
  std::vector<std::size_t> hist(joint_label_count(schema), 0);
  for (const auto& it : items) ++hist[joint_label(schema, it)];
  return hist;
}

// ---- synthetic generation ------------------------------------------------------------

/// Recipe for one synthetic corpus.
///
/// Every position of a text is a marker with probability `density` (drawn
/// from a uniformly chosen attribute's lexicon for that item's label) and a
/// filler word otherwise. Each attribute with a non-empty lexicon is
/// guaranteed at least one marker, so lexicon counting always has evidence.
struct SynthSpec {
  std::string name;
  Schema schema;
  std::vector<std::vector<std::vector<int>>> markers;  ///< [attribute][label] -> marker ids
  std::vector<int> fillers;
  std::size_t min_words = 12;
  std::size_t max_words = 24;
  double density = 0.5;
  std::size_t train_size = 200;
  std::size_t validation_size = 40;
  std::size_t test_per_label = 20;
  /// Optional sampling weights per attribute label; empty means uniform.
  std::vector<std::vector<double>> label_weights;

  void validate() const {
    if (schema.empty()) throw std::invalid_argument("SynthSpec '" + name + "': empty schema");
    if (markers.size() != schema.size()) {
      throw std::invalid_argument("SynthSpec '" + name + "': lexicons do not match schema");
    }
    if (min_words < schema.size() || max_words < min_words) {
      throw std::invalid_argument("SynthSpec '" + name + "': bad length range [" +
                                  std::to_string(min_words) + ", " + std::to_string(max_words) + "]");
    }
    if (!(density > 0.0 && density <= 1.0)) {
      throw std::invalid_argument("SynthSpec '" + name + "': density must be in (0, 1]");
    }
    if (fillers.empty() && density < 1.0) {
      throw std::invalid_argument("SynthSpec '" + name + "': empty filler lexicon");
    }
    std::set<int> used(fillers.begin(), fillers.end());
    if (used.size() != fillers.size()) throw std::invalid_argument("SynthSpec '" + name + "': duplicate filler");
    for (std::size_t a = 0; a < schema.size(); ++a) {
      if (markers[a].size() != schema[a].labels.size()) {
        throw std::invalid_argument("SynthSpec '" + name + "': lexicon count for '" +
                                    schema[a].name + "' does not match its labels");
      }
      for (std::size_t l = 0; l < markers[a].size(); ++l) {
        if (markers[a][l].empty() && schema[a].labels[l] != kNeutralLabel) {
          throw std::invalid_argument("SynthSpec '" + name + "': empty lexicon for " +
                                      schema[a].name + "=" + schema[a].labels[l]);
        }
        for (int m : markers[a][l]) {
          if (!used.insert(m).second) {
            throw std::invalid_argument("SynthSpec '" + name + "': token " + std::to_string(m) +
                                        " appears in more than one lexicon");
          }
        }
      }
      if (!label_weights.empty() && label_weights.at(a).size() != schema[a].labels.size()) {
        throw std::invalid_argument("SynthSpec '" + name + "': label weights do not match labels");
      }
    }
  }
};

/// Half-open index range into a lexicon.
struct Slice {
  std::size_t begin = 0;
  std::size_t end = 0;
};

/// SynthSpec over vocabulary families, using a slice of each label's marker
/// lexicon and a slice of the filler words.
inline SynthSpec make_synth_spec(const Vocabulary& vocab, std::string name,
                                 const std::vector<std::string>& families,
                                 std::optional<Slice> marker_slice = std::nullopt,
                                 std::optional<Slice> filler_slice = std::nullopt) {
  SynthSpec spec;
  spec.name = std::move(name);
  auto cut = [](const std::vector<int>& v, std::optional<Slice> s, const std::string& what) {
    if (!s) return v;
    if (s->begin >= s->end || s->end > v.size()) {
      throw std::invalid_argument(what + " slice [" + std::to_string(s->begin) + ", " +
                                  std::to_string(s->end) + ") outside lexicon of " +
                                  std::to_string(v.size()));
    }
    return std::vector<int>(v.begin() + static_cast<std::ptrdiff_t>(s->begin),
                            v.begin() + static_cast<std::ptrdiff_t>(s->end));
  };
  for (const auto& fam : families) {
    const FamilySpec& f = vocab.family(fam);
    spec.schema.push_back({f.name, f.labels});
    std::vector<std::vector<int>> lex;
    for (std::size_t l = 0; l < f.labels.size(); ++l) {
      const auto& full = vocab.markers(fam, l);
      lex.push_back(full.empty() ? full : cut(full, marker_slice, "marker"));
    }
    spec.markers.push_back(std::move(lex));
  }
  spec.fillers = cut(vocab.fillers(), filler_slice, "filler");
  return spec;
}

namespace detail {

inline std::size_t weighted_pick(const std::vector<double>& w, Prng& prng) {
  const double total = std::accumulate(w.begin(), w.end(), 0.0);
  double u = prng.uniform01() * total;
  for (std::size_t i = 0; i < w.size(); ++i) {
    u -= w[i];
    if (u < 0.0) return i;
  }
  return w.size() - 1;
}

inline LabeledText synth_item(const SynthSpec& spec, const std::vector<std::uint16_t>& labels,
                              Prng& prng) {
  LabeledText item;
  item.labels = labels;
  item.source = spec.name;
  const auto len = static_cast<std::size_t>(
      prng.range(static_cast<std::int64_t>(spec.min_words), static_cast<std::int64_t>(spec.max_words)));
  std::vector<std::size_t> active;  // attributes with a lexicon for this item's label
  for (std::size_t a = 0; a < spec.schema.size(); ++a)
    if (!spec.markers[a][labels[a]].empty()) active.push_back(a);
  std::vector<bool> has_marker(spec.schema.size(), false);
  item.tokens.resize(len);
  for (std::size_t i = 0; i < len; ++i) {
    if (!active.empty() && prng.uniform01() < spec.density) {
      const std::size_t a = active[prng.below(active.size())];
      const auto& lex = spec.markers[a][labels[a]];
      item.tokens[i] = lex[prng.below(lex.size())];
      has_marker[a] = true;
    } else {
      item.tokens[i] = spec.fillers[prng.below(spec.fillers.size())];
    }
  }
  // Guarantee evidence for every active attribute on distinct positions.
  std::vector<std::size_t> positions(len);
  std::iota(positions.begin(), positions.end(), std::size_t{0});
  prng.shuffle(std::span<std::size_t>(positions));
  std::size_t next = 0;
  for (std::size_t a : active) {
    if (has_marker[a]) continue;
    // Take a position not already carrying another attribute's marker.
    while (true) {
      const std::size_t p = positions[next++];
      bool owned = false;
      for (std::size_t b : active)
        if (b != a) {
          const auto& other = spec.markers[b][labels[b]];
          owned |= std::find(other.begin(), other.end(), item.tokens[p]) != other.end();
        }
      if (!owned) {
        const auto& lex = spec.markers[a][labels[a]];
        item.tokens[p] = lex[prng.below(lex.size())];
        break;
      }
    }
  }
  return item;
}

inline std::vector<std::uint16_t> draw_labels(const SynthSpec& spec, Prng& prng) {
  std::vector<std::uint16_t> labels;
  for (std::size_t a = 0; a < spec.schema.size(); ++a) {
    const std::size_t n = spec.schema[a].labels.size();
    const std::size_t l = spec.label_weights.empty() ? prng.below(n)
                                                     : weighted_pick(spec.label_weights[a], prng);
    labels.push_back(static_cast<std::uint16_t>(l));
  }
  return labels;
}

}  // namespace detail

/// Deterministic synthetic dataset. Train and validation labels are drawn
/// from the label weights; the test split holds `test_per_label` items for
/// every joint label.
inline LabeledDataset gen_synthetic(const SynthSpec& spec, std::uint64_t seed) {
  spec.validate();
  if (spec.train_size == 0) throw std::invalid_argument("gen_synthetic: size must be >= 1");
  Prng prng = Prng::derive(seed, "synth:" + spec.name);
  LabeledDataset ds;
  ds.name = spec.name;
  ds.schema = spec.schema;
  ds.train.reserve(spec.train_size);
  for (std::size_t i = 0; i < spec.train_size; ++i)
    ds.train.push_back(detail::synth_item(spec, detail::draw_labels(spec, prng), prng));
  for (std::size_t i = 0; i < spec.validation_size; ++i)
    ds.validation.push_back(detail::synth_item(spec, detail::draw_labels(spec, prng), prng));
  const std::size_t joint = joint_label_count(spec.schema);
  for (std::size_t key = 0; key < joint; ++key) {
    std::vector<std::uint16_t> labels(spec.schema.size());
    std::size_t k = key;
    for (std::size_t a = spec.schema.size(); a-- > 0;) {
      labels[a] = static_cast<std::uint16_t>(k % spec.schema[a].labels.size());
      k /= spec.schema[a].labels.size();
    }
    for (std::size_t i = 0; i < spec.test_per_label; ++i)
      ds.test.push_back(detail::synth_item(spec, labels, prng));
  }
  return ds;
}

inline LabeledDataset gen_synthetic(SynthSpec spec, std::size_t size, std::uint64_t seed) {
  spec.train_size = size;
  return gen_synthetic(spec, seed);
}

// ---- filtering, balancing, stratification ----------------------------------------------

inline constexpr std::size_t kMinWords = 10;

/// Drops items shorter than 10 words and items labelled neutral, and removes
/// the neutral label from the schema (remaining label indices are remapped).
inline LabeledDataset filter_items(const LabeledDataset& ds) {
  LabeledDataset out;
  out.name = ds.name;
  std::vector<std::vector<int>> remap(ds.schema.size());
  for (std::size_t a = 0; a < ds.schema.size(); ++a) {
    AttributeSchema attr{ds.schema[a].name, {}};
    for (const auto& l : ds.schema[a].labels) {
      if (l == kNeutralLabel) {
        remap[a].push_back(-1);
      } else {
        remap[a].push_back(static_cast<int>(attr.labels.size()));
        attr.labels.push_back(l);
      }
    }
    out.schema.push_back(std::move(attr));
  }
  for (Split s : {Split::Train, Split::Validation, Split::Test}) {
    for (const auto& item : ds.split(s)) {
      if (item.words() < kMinWords) continue;
      LabeledText kept = item;
      bool neutral = false;
      for (std::size_t a = 0; a < kept.labels.size(); ++a) {
        const int m = remap[a][kept.labels[a]];
        if (m < 0) neutral = true;
        kept.labels[a] = static_cast<std::uint16_t>(std::max(m, 0));
      }
      if (!neutral) out.split(s).push_back(std::move(kept));
    }
  }
  return out;
}

/// Seeded random subset of `count` indices from `pool`, returned sorted.
namespace detail {
inline std::vector<std::size_t> pick(std::vector<std::size_t> pool, std::size_t count, Prng& prng) {
  prng.shuffle(std::span<std::size_t>(pool));
  pool.resize(count);
  std::sort(pool.begin(), pool.end());
  return pool;
}

inline std::vector<LabeledText> gather(std::span<const LabeledText> items,
                                       std::vector<std::size_t> idx) {
  std::sort(idx.begin(), idx.end());
  std::vector<LabeledText> out;
  out.reserve(idx.size());
  for (std::size_t i : idx) out.push_back(items[i]);
  return out;
}
}  // namespace detail

/// Downsamples `items` so every joint label has the minimum per-label count.
inline std::vector<LabeledText> balance_labels(const Schema& schema, std::span<const LabeledText> items,
                                               std::uint64_t seed) {
  const std::size_t joint = joint_label_count(schema);
  std::vector<std::vector<std::size_t>> by_label(joint);
  for (std::size_t i = 0; i < items.size(); ++i) by_label[joint_label(schema, items[i])].push_back(i);
  for (std::size_t k = 0; k < joint; ++k) {
    if (by_label[k].empty()) {
      throw std::invalid_argument("balance: label " + joint_label_name(schema, k) + " has no items");
    }
  }
  std::size_t floor = items.size();
  for (const auto& v : by_label) floor = std::min(floor, v.size());
  Prng prng = Prng::derive(seed, "balance");
  std::vector<std::size_t> chosen;
  for (const auto& v : by_label) {
    const auto part = detail::pick(v, floor, prng);
    chosen.insert(chosen.end(), part.begin(), part.end());
  }
  return detail::gather(items, std::move(chosen));
}

/// Result of balance_smallest: which source was smallest and its balanced items.
struct BalancedSmallest {
  std::size_t source = 0;
  std::vector<LabeledText> items;
};

/// Finds the smallest source (first on ties) and balances it over labels.
inline BalancedSmallest balance_smallest(const Schema& schema,
                                         const std::vector<std::span<const LabeledText>>& sources,
                                         std::uint64_t seed) {
  if (sources.empty()) throw std::invalid_argument("balance_smallest: no sources");
  std::size_t smallest = 0;
  for (std::size_t i = 1; i < sources.size(); ++i)
    if (sources[i].size() < sources[smallest].size()) smallest = i;
  return {smallest, balance_labels(schema, sources[smallest], seed)};
}

/// Word-count strata. `upper` holds inclusive upper bounds of all buckets but
/// the last; `weights` the relative quota of each bucket.
struct LengthBuckets {
  std::vector<std::size_t> upper;
  std::vector<double> weights;

  std::size_t count() const noexcept { return upper.size() + 1; }
  std::size_t bucket_of(std::size_t words) const noexcept {
    std::size_t b = 0;
    while (b < upper.size() && words > upper[b]) ++b;
    return b;
  }

  /// Equal-weight terciles of the word-count distribution of `items`.
  static LengthBuckets terciles(std::span<const LabeledText> items) {
    std::vector<std::size_t> lens;
    lens.reserve(items.size());
    for (const auto& it : items) lens.push_back(it.words());
    std::sort(lens.begin(), lens.end());
    LengthBuckets b;
    b.weights = {1.0, 1.0, 1.0};
    if (lens.empty()) {
      b.upper = {0, 0};
      return b;
    }
    b.upper = {lens[(lens.size() - 1) / 3], lens[(2 * (lens.size() - 1)) / 3]};
    return b;
  }
};

/// Splits `total` over `weights` by largest remainder (earlier index wins ties).
inline std::vector<std::size_t> apportion(std::size_t total, const std::vector<double>& weights) {
  const double sum = std::accumulate(weights.begin(), weights.end(), 0.0);
  if (weights.empty() || !(sum > 0.0)) throw std::invalid_argument("apportion: weights must be positive");
  std::vector<std::size_t> out(weights.size());
  std::vector<std::pair<double, std::size_t>> rem;
  std::size_t used = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    const double exact = static_cast<double>(total) * weights[i] / sum;
    out[i] = static_cast<std::size_t>(exact);
    used += out[i];
    rem.emplace_back(exact - static_cast<double>(out[i]), i);
  }
  std::stable_sort(rem.begin(), rem.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t i = 0; used < total; ++i, ++used) ++out[rem[i % rem.size()].second];
  return out;
}

/// Seeded sample of `target` items balanced over joint labels (within ±1)
/// and, inside each label, over length buckets by their quotas. A stratum
/// that runs short is backfilled from the nearest bucket of the same label
/// and a warning is appended. Output keeps the original item order.
inline std::vector<LabeledText> stratified_sample(const Schema& schema,
                                                  std::span<const LabeledText> items,
                                                  std::size_t target,
                                                  std::optional<LengthBuckets> buckets,
                                                  std::uint64_t seed,
                                                  std::vector<std::string>* warnings = nullptr) {
  if (target > items.size()) {
    throw std::invalid_argument("stratified_sample: target " + std::to_string(target) +
                                " exceeds " + std::to_string(items.size()) + " items");
  }
  const LengthBuckets lb = buckets ? *buckets : LengthBuckets::terciles(items);
  if (lb.weights.size() != lb.count()) {
    throw std::invalid_argument("stratified_sample: bucket weights do not match bucket count");
  }
  const std::size_t joint = joint_label_count(schema);
  // pools[label][bucket] -> item indices
  std::vector<std::vector<std::vector<std::size_t>>> pools(
      joint, std::vector<std::vector<std::size_t>>(lb.count()));
  for (std::size_t i = 0; i < items.size(); ++i)
    pools[joint_label(schema, items[i])][lb.bucket_of(items[i].words())].push_back(i);

  Prng prng = Prng::derive(seed, "stratify");
  for (auto& label_pools : pools)
    for (auto& pool : label_pools) prng.shuffle(std::span<std::size_t>(pool));

  const auto label_quota = apportion(target, std::vector<double>(joint, 1.0));
  std::vector<std::size_t> chosen;
  chosen.reserve(target);
  for (std::size_t k = 0; k < joint; ++k) {
    std::size_t available = 0;
    for (const auto& pool : pools[k]) available += pool.size();
    if (available < label_quota[k]) {
      throw std::invalid_argument("stratified_sample: label " + joint_label_name(schema, k) +
                                  " has " + std::to_string(available) + " items, quota " +
                                  std::to_string(label_quota[k]));
    }
    const auto quota = apportion(label_quota[k], lb.weights);
    std::vector<std::size_t> taken(lb.count(), 0);
    std::size_t deficit = 0;
    for (std::size_t b = 0; b < lb.count(); ++b) {
      taken[b] = std::min(quota[b], pools[k][b].size());
      deficit += quota[b] - taken[b];
    }
    // Backfill: each short bucket borrows from the nearest buckets with spare items.
    if (deficit > 0) {
      for (std::size_t b = 0; b < lb.count(); ++b) {
        std::size_t short_by = quota[b] - taken[b];
        for (std::size_t dist = 1; dist < lb.count() && short_by > 0; ++dist) {
          for (std::size_t nb : {b >= dist ? b - dist : lb.count(), b + dist}) {
            if (nb >= lb.count() || short_by == 0) continue;
            const std::size_t spare = pools[k][nb].size() - taken[nb];
            const std::size_t borrow = std::min(spare, short_by);
            if (borrow > 0 && warnings) {
              warnings->push_back("label " + joint_label_name(schema, k) + ": length bucket " +
                                  std::to_string(b) + " short by " + std::to_string(borrow) +
                                  ", backfilled from bucket " + std::to_string(nb));
            }
            taken[nb] += borrow;
            short_by -= borrow;
          }
        }
      }
    }
    for (std::size_t b = 0; b < lb.count(); ++b)
      chosen.insert(chosen.end(), pools[k][b].begin(),
                    pools[k][b].begin() + static_cast<std::ptrdiff_t>(taken[b]));
  }
  return detail::gather(items, std::move(chosen));
}

/// Combined dataset over sources sharing one schema.
///
/// For train and validation separately: filter every source, balance the
/// smallest over labels, stratify-sample every other source down to that
/// size, then concatenate in source order. Sources lacking a split are
/// skipped for it. The combined test split stays empty; evaluation uses the
/// individual test sets.
inline LabeledDataset build_combined(const std::vector<LabeledDataset>& sources, std::uint64_t seed,
                                     std::string name = "combined",
                                     std::vector<std::string>* warnings = nullptr) {
  if (sources.empty()) throw std::invalid_argument("build_combined: no sources");
  std::vector<LabeledDataset> filtered;
  for (const auto& s : sources) filtered.push_back(filter_items(s));
  for (const auto& f : filtered) {
    if (f.schema != filtered[0].schema) {
      throw std::invalid_argument("build_combined: schema of '" + f.name +
                                  "' differs from '" + filtered[0].name + "'");
    }
  }
  LabeledDataset out;
  out.name = std::move(name);
  out.schema = filtered[0].schema;
  for (Split s : {Split::Train, Split::Validation}) {
    std::vector<std::size_t> present;
    std::vector<std::span<const LabeledText>> spans;
    for (std::size_t i = 0; i < filtered.size(); ++i) {
      if (filtered[i].split(s).empty()) continue;
      present.push_back(i);
      spans.emplace_back(filtered[i].split(s));
    }
    if (spans.empty()) continue;
    const std::uint64_t split_seed = seed ^ fnv1a(to_string(s));
    auto smallest = balance_smallest(out.schema, spans, split_seed);
    const std::size_t target = smallest.items.size();
    for (std::size_t j = 0; j < spans.size(); ++j) {
      if (j == smallest.source) {
        auto& dst = out.split(s);
        dst.insert(dst.end(), smallest.items.begin(), smallest.items.end());
        continue;
      }
      auto part = stratified_sample(out.schema, spans[j], target, std::nullopt,
                                    split_seed + present[j] + 1, warnings);
      auto& dst = out.split(s);
      dst.insert(dst.end(), std::make_move_iterator(part.begin()), std::make_move_iterator(part.end()));
    }
  }
  return out;
}

// ---- prompt construal -------------------------------------------------------------------

struct PromptExample {
  std::vector<std::uint16_t> control;  ///< target label per schema attribute
  std::vector<int> prompt;             ///< tag blocks, [ANS], first n words
  std::vector<int> completion;         ///< remaining words, [/ANS]
  std::size_t n = 0;
};

/// Tag blocks "[ATTR] label [/ATTR]" in schema order followed by [ANS].
inline std::vector<int> control_prefix(const Vocabulary& vocab, const Schema& schema,
                                       std::span<const std::uint16_t> labels) {
  std::vector<int> out;
  for (std::size_t a = 0; a < schema.size(); ++a) {
    const FamilySpec& fam = vocab.family(schema[a].name);
    const std::string& label = schema[a].labels.at(labels[a]);
    const auto it = std::find(fam.labels.begin(), fam.labels.end(), label);
    if (it == fam.labels.end()) {
      throw std::invalid_argument("label '" + label + "' not in vocabulary family '" + fam.name + "'");
    }
    out.push_back(vocab.open_tag(fam.name));
    out.push_back(vocab.label_token(fam.name, static_cast<std::size_t>(it - fam.labels.begin())));
    out.push_back(vocab.close_tag(fam.name));
  }
  out.push_back(Vocabulary::kAnsOpen);
  return out;
}

inline PromptExample make_prompt_pair(const Vocabulary& vocab, const Schema& schema,
                                      const LabeledText& item, std::size_t n) {
  if (n > 5) throw std::invalid_argument("make_prompt_pair: n must be in [0, 5]");
  if (n > item.words()) {
    throw std::invalid_argument("make_prompt_pair: n=" + std::to_string(n) + " exceeds " +
                                std::to_string(item.words()) + " words");
  }
  PromptExample ex;
  ex.control = item.labels;
  ex.n = n;
  ex.prompt = control_prefix(vocab, schema, item.labels);
  ex.prompt.insert(ex.prompt.end(), item.tokens.begin(), item.tokens.begin() + static_cast<std::ptrdiff_t>(n));
  ex.completion.assign(item.tokens.begin() + static_cast<std::ptrdiff_t>(n), item.tokens.end());
  ex.completion.push_back(Vocabulary::kAnsClose);
  return ex;
}

/// Inverse of make_prompt_pair: the words of prompt and completion without tags.
inline std::vector<int> detag(const Vocabulary& vocab, const PromptExample& ex) {
  std::vector<int> out;
  for (int t : ex.prompt)
    if (!vocab.is_control(t)) out.push_back(t);
  for (int t : ex.completion)
    if (!vocab.is_control(t)) out.push_back(t);
  return out;
}

/// Short filler-only prompts for out-of-domain evaluation.
inline std::vector<std::vector<int>> make_ood_prompts(const Vocabulary& vocab, std::size_t count,
                                                      std::size_t min_words, std::size_t max_words,
                                                      std::uint64_t seed) {
  if (max_words < min_words) throw std::invalid_argument("make_ood_prompts: bad length range");
  Prng prng = Prng::derive(seed, "ood-prompts");
  const auto& fill = vocab.fillers();
  std::vector<std::vector<int>> out(count);
  for (auto& p : out) {
    const auto len = static_cast<std::size_t>(
        prng.range(static_cast<std::int64_t>(min_words), static_cast<std::int64_t>(max_words)));
    for (std::size_t i = 0; i < len; ++i) p.push_back(fill[prng.below(fill.size())]);
  }
  return out;
}

// ---- dataset files ------------------------------------------------------------------------

/// Text layout, one file per split named "<name>.<split>.tsv":
///
///   source <TAB> attr=label,attr=label <TAB> space-separated token ids
///
/// plus "<name>.manifest" with key=value lines (name, schema, split sizes).
inline void save_dataset(const LabeledDataset& ds, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  for (Split s : {Split::Train, Split::Validation, Split::Test}) {
    const auto path = dir / (ds.name + "." + std::string(to_string(s)) + ".tsv");
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    for (const auto& item : ds.split(s)) {
      out << item.source << '\t';
      for (std::size_t a = 0; a < ds.schema.size(); ++a)
        out << (a ? "," : "") << ds.schema[a].name << '=' << ds.schema[a].labels[item.labels[a]];
      out << '\t';
      for (std::size_t i = 0; i < item.tokens.size(); ++i) out << (i ? " " : "") << item.tokens[i];
      out << '\n';
    }
  }
  const auto mpath = dir / (ds.name + ".manifest");
  std::ofstream m(mpath, std::ios::binary | std::ios::trunc);
  if (!m) throw std::runtime_error("cannot write " + mpath.string());
  m << "name=" << ds.name << '\n';
  for (const auto& a : ds.schema) {
    m << "attribute=" << a.name << ':';
    for (std::size_t i = 0; i < a.labels.size(); ++i) m << (i ? "," : "") << a.labels[i];
    m << '\n';
  }
  m << "train=" << ds.train.size() << '\n'
    << "validation=" << ds.validation.size() << '\n'
    << "test=" << ds.test.size() << '\n';
}

inline LabeledDataset load_dataset(const std::filesystem::path& dir, const std::string& name) {
  LabeledDataset ds;
  ds.name = name;
  const auto mpath = dir / (name + ".manifest");
  std::ifstream m(mpath);
  if (!m) throw std::runtime_error("missing dataset manifest " + mpath.string());
  std::map<std::string, std::size_t> sizes;
  for (std::string line; std::getline(m, line);) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    const std::string key = line.substr(0, eq), value = line.substr(eq + 1);
    if (key == "attribute") {
      const auto colon = value.find(':');
      if (colon == std::string::npos) throw std::runtime_error(mpath.string() + ": bad attribute line");
      AttributeSchema a{value.substr(0, colon), {}};
      std::stringstream labels(value.substr(colon + 1));
      for (std::string l; std::getline(labels, l, ',');) a.labels.push_back(l);
      ds.schema.push_back(std::move(a));
    } else if (key == "train" || key == "validation" || key == "test") {
      sizes[key] = std::stoul(value);
    }
  }
  for (Split s : {Split::Train, Split::Validation, Split::Test}) {
    const auto path = dir / (name + "." + std::string(to_string(s)) + ".tsv");
    std::ifstream in(path);
    if (!in) throw std::runtime_error("missing dataset file " + path.string());
    std::size_t lineno = 0;
    for (std::string line; std::getline(in, line);) {
      ++lineno;
      const auto t1 = line.find('\t');
      const auto t2 = line.find('\t', t1 + 1);
      if (t1 == std::string::npos || t2 == std::string::npos) {
        throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": expected 3 fields");
      }
      LabeledText item;
      item.source = line.substr(0, t1);
      std::stringstream attrs(line.substr(t1 + 1, t2 - t1 - 1));
      std::size_t a = 0;
      for (std::string kv; std::getline(attrs, kv, ','); ++a) {
        const auto eq = kv.find('=');
        if (a >= ds.schema.size() || eq == std::string::npos || kv.substr(0, eq) != ds.schema[a].name) {
          throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": bad attributes");
        }
        item.labels.push_back(static_cast<std::uint16_t>(ds.schema[a].label_index(kv.substr(eq + 1))));
      }
      if (a != ds.schema.size()) {
        throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": missing attributes");
      }
      std::stringstream toks(line.substr(t2 + 1));
      for (int t; toks >> t;) item.tokens.push_back(t);
      ds.split(s).push_back(std::move(item));
    }
    const std::string key(to_string(s));
    if (sizes.count(key) && sizes[key] != ds.split(s).size()) {
      throw std::runtime_error(path.string() + ": manifest says " + std::to_string(sizes[key]) +
                               " items, file has " + std::to_string(ds.split(s).size()));
    }
  }
  return ds;
}

}  // namespace lrcompose
