// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "lrcompose/data.hpp"
#include "lrcompose/host.hpp"

namespace lrcompose {

// ---- diversity -------------------------------------------------------------------

/// Mean over items of (#unique n-grams / #n-grams). Items shorter than n are
/// skipped; if every item is skipped the result is 0 and a warning is added.
inline double distinct_n(std::span<const std::vector<int>> texts, std::size_t n,
                         std::vector<std::string>* warnings = nullptr) {
  if (n == 0) throw std::invalid_argument("distinct_n: n must be >= 1");
  if (texts.empty()) throw std::invalid_argument("distinct_n: empty corpus");
  double total = 0.0;
  std::size_t scored = 0;
  for (const auto& t : texts) {
    if (t.size() < n) continue;
    std::set<std::vector<int>> grams;
    const std::size_t count = t.size() - n + 1;
    for (std::size_t i = 0; i < count; ++i) grams.emplace(t.begin() + static_cast<std::ptrdiff_t>(i),
                                                          t.begin() + static_cast<std::ptrdiff_t>(i + n));
    total += static_cast<double>(grams.size()) / static_cast<double>(count);
    ++scored;
  }
  if (scored == 0) {
    if (warnings) {
      warnings->push_back("distinct-" + std::to_string(n) + ": every item shorter than " +
                          std::to_string(n) + " tokens");
    }
    return 0.0;
  }
  return total / static_cast<double>(scored);
}

// ---- fluency ---------------------------------------------------------------------

/// Sentence-level log probability under some language model.
class LanguageScorer {
 public:
  virtual ~LanguageScorer() = default;
  virtual double log_prob(std::span<const int> text) const = 0;
};

/// Add-one smoothed unigram model over a fixed vocabulary.
class UnigramModel final : public LanguageScorer {
 public:
  UnigramModel(std::size_t vocab_size, std::span<const std::vector<int>> corpus)
      : counts_(vocab_size, 0) {
    if (vocab_size == 0) throw std::invalid_argument("UnigramModel: empty vocabulary");
    for (const auto& t : corpus)
      for (int tok : t) {
        ++counts_.at(static_cast<std::size_t>(tok));
        ++total_;
      }
  }

  double log_prob(int token) const {
    return std::log((static_cast<double>(counts_.at(static_cast<std::size_t>(token))) + 1.0) /
                    (static_cast<double>(total_) + static_cast<double>(counts_.size())));
  }
  double log_prob(std::span<const int> text) const override {
    double s = 0.0;
    for (int t : text) s += log_prob(t);
    return s;
  }

 private:
  std::vector<std::uint64_t> counts_;
  std::uint64_t total_ = 0;
};

/// Add-k smoothed bigram model. The first token is conditioned on a start
/// context that never occurs elsewhere.
class BigramModel final : public LanguageScorer {
 public:
  BigramModel(std::size_t vocab_size, std::span<const std::vector<int>> corpus, double k = 1.0)
      : vocab_(vocab_size), k_(k) {
    if (vocab_size == 0 || !(k > 0.0)) throw std::invalid_argument("BigramModel: bad parameters");
    for (const auto& t : corpus) {
      std::size_t prev = vocab_;
      for (int tok : t) {
        const auto cur = static_cast<std::size_t>(tok);
        if (cur >= vocab_) throw std::out_of_range("BigramModel: token outside vocabulary");
        ++pairs_[{prev, cur}];
        ++context_[prev];
        prev = cur;
      }
    }
  }

  /// ln P(cur | prev); prev == vocab_size means start of text.
  double conditional(std::size_t prev, std::size_t cur) const {
    const auto p = pairs_.find({prev, cur});
    const auto c = context_.find(prev);
    const double num = (p == pairs_.end() ? 0.0 : static_cast<double>(p->second)) + k_;
    const double den = (c == context_.end() ? 0.0 : static_cast<double>(c->second)) +
                       k_ * static_cast<double>(vocab_);
    return std::log(num / den);
  }

  double log_prob(std::span<const int> text) const override {
    double s = 0.0;
    std::size_t prev = vocab_;
    for (int tok : text) {
      s += conditional(prev, static_cast<std::size_t>(tok));
      prev = static_cast<std::size_t>(tok);
    }
    return s;
  }

  std::size_t start_context() const noexcept { return vocab_; }

 private:
  std::size_t vocab_;
  double k_;
  std::map<std::pair<std::size_t, std::size_t>, std::uint64_t> pairs_;
  std::map<std::size_t, std::uint64_t> context_;
};

/// Chain-rule log probability under a host transformer, starting from a
/// fixed context token.
class HostScorer final : public LanguageScorer {
 public:
  HostScorer(HostModel host, int start_token) : host_(std::move(host)), start_(start_token) {}

  double log_prob(std::span<const int> text) const override {
    std::vector<int> seq{start_};
    seq.insert(seq.end(), text.begin(), text.end());
    const std::size_t window = host_.config().max_seq;
    if (seq.size() > window) seq.resize(window);
    const Matrix logits = host_.forward(std::span<const int>(seq.data(), seq.size() - 1));
    double s = 0.0;
    for (std::size_t c = 0; c < logits.cols(); ++c) {
      double mx = logits(0, c);
      for (std::size_t r = 1; r < logits.rows(); ++r) mx = std::max(mx, logits(r, c));
      double z = 0.0;
      for (std::size_t r = 0; r < logits.rows(); ++r) z += std::exp(logits(r, c) - mx);
      s += logits(static_cast<std::size_t>(seq[c + 1]), c) - mx - std::log(z);
    }
    return s;
  }

 private:
  HostModel host_;
  int start_;
};

/// Mean over scorers of (ln P_LM(s) - ln P_uni(s)) / |s|.
inline double slor(std::span<const int> text, std::span<const LanguageScorer* const> scorers,
                   const UnigramModel& unigram) {
  if (text.empty()) throw std::invalid_argument("slor: zero-length text");
  if (scorers.empty()) throw std::invalid_argument("slor: no scorer models");
  const double uni = unigram.log_prob(text);
  double total = 0.0;
  for (const LanguageScorer* s : scorers) total += (s->log_prob(text) - uni) / static_cast<double>(text.size());
  return total / static_cast<double>(scorers.size());
}

// ---- control effectiveness --------------------------------------------------------------

/// Lexicon counter for one attribute: the predicted label is the one with the
/// most marker hits. Ties for the top count, or no hits at all, give no label.
struct OracleClassifier {
  std::string attribute;
  std::vector<std::vector<int>> lexicons;  ///< per label

  std::optional<std::uint16_t> classify(std::span<const int> tokens) const {
    std::vector<std::size_t> hits(lexicons.size(), 0);
    for (int t : tokens)
      for (std::size_t l = 0; l < lexicons.size(); ++l)
        if (std::find(lexicons[l].begin(), lexicons[l].end(), t) != lexicons[l].end()) ++hits[l];
    const auto best = std::max_element(hits.begin(), hits.end());
    if (*best == 0 || std::count(hits.begin(), hits.end(), *best) > 1) return std::nullopt;
    return static_cast<std::uint16_t>(best - hits.begin());
  }
};

/// `count` classifiers for one attribute. Classifier k ignores every marker
/// whose lexicon position i has i % count == k, so the members disagree on
/// sparse evidence the way independently trained classifiers do.
inline std::vector<OracleClassifier> make_oracle_ensemble(const Vocabulary& vocab,
                                                          const AttributeSchema& attr,
                                                          std::size_t count = 3) {
  if (count == 0) throw std::invalid_argument("make_oracle_ensemble: count must be >= 1");
  const FamilySpec& fam = vocab.family(attr.name);
  std::vector<OracleClassifier> out;
  for (std::size_t k = 0; k < count; ++k) {
    OracleClassifier c{attr.name, {}};
    for (const auto& label : attr.labels) {
      const auto it = std::find(fam.labels.begin(), fam.labels.end(), label);
      if (it == fam.labels.end()) throw std::invalid_argument("label '" + label + "' not in family");
      const auto& full = vocab.markers(attr.name, static_cast<std::size_t>(it - fam.labels.begin()));
      std::vector<int> kept;
      for (std::size_t i = 0; i < full.size(); ++i)
        if (count == 1 || i % count != k) kept.push_back(full[i]);
      c.lexicons.push_back(std::move(kept));
    }
    out.push_back(std::move(c));
  }
  return out;
}

/// One generated text and the labels it was asked to express.
struct GenerationRecord {
  std::vector<std::uint16_t> target;  ///< per schema attribute
  std::vector<int> tokens;            ///< generated words (no tags)
  std::size_t prompt_id = 0;
};

struct ControlEffectiveness {
  double ce = 0.0;                    ///< percent
  std::vector<double> per_classifier; ///< percent, single-attribute mode only
};

/// Mean over classifiers of the percentage of records classified as their
/// target for attribute index `attribute`.
inline ControlEffectiveness control_effectiveness_single(std::span<const GenerationRecord> records,
                                                         std::span<const OracleClassifier> classifiers,
                                                         std::size_t attribute = 0) {
  if (records.empty()) throw std::invalid_argument("control effectiveness: no records");
  if (classifiers.empty()) throw std::invalid_argument("control effectiveness: no classifiers");
  ControlEffectiveness out;
  for (const auto& c : classifiers) {
    std::size_t hit = 0;
    for (const auto& r : records) {
      const auto pred = c.classify(r.tokens);
      if (pred && *pred == r.target.at(attribute)) ++hit;
    }
    out.per_classifier.push_back(100.0 * static_cast<double>(hit) / static_cast<double>(records.size()));
  }
  out.ce = std::accumulate(out.per_classifier.begin(), out.per_classifier.end(), 0.0) /
           static_cast<double>(classifiers.size());
  return out;
}

/// Label chosen by strictly more than half of the ensemble, if any.
inline std::optional<std::uint16_t> majority_vote(std::span<const OracleClassifier> ensemble,
                                                  std::span<const int> tokens) {
  std::map<std::uint16_t, std::size_t> votes;
  for (const auto& c : ensemble)
    if (auto p = c.classify(tokens)) ++votes[*p];
  for (const auto& [label, n] : votes)
    if (2 * n > ensemble.size()) return label;
  return std::nullopt;
}

/// Percentage of records whose majority-voted label matches the target for
/// every attribute. `ensembles[a]` classifies schema attribute a.
inline double control_effectiveness_multi(std::span<const GenerationRecord> records,
                                          const std::vector<std::vector<OracleClassifier>>& ensembles) {
  if (records.empty()) throw std::invalid_argument("control effectiveness: no records");
  if (ensembles.size() < 2) throw std::invalid_argument("control effectiveness multi: need >= 2 attributes");
  std::size_t ok = 0;
  for (const auto& r : records) {
    bool all = true;
    for (std::size_t a = 0; a < ensembles.size() && all; ++a) {
      const auto v = majority_vote(ensembles[a], r.tokens);
      all = v && *v == r.target.at(a);
    }
    ok += all ? 1 : 0;
  }
  return 100.0 * static_cast<double>(ok) / static_cast<double>(records.size());
}

// ---- correlation ------------------------------------------------------------------------

inline double pearson(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) {
    throw std::invalid_argument("pearson: need two equal-length series of length >= 2");
  }
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) throw std::invalid_argument("pearson: zero variance");
  return sxy / std::sqrt(sxx * syy);
}

/// 1-based ranks with ties given their average rank.
inline std::vector<double> average_ranks(std::span<const double> x) {
  std::vector<std::size_t> order(x.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> ranks(x.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && x[order[j + 1]] == x[order[i]]) ++j;
    const double avg = (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = avg;
    i = j + 1;
  }
  return ranks;
}

inline double spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) {
    throw std::invalid_argument("spearman: need two equal-length series of length >= 2");
  }
  const auto rx = average_ranks(x), ry = average_ranks(y);
  try {
    return pearson(rx, ry);
  } catch (const std::invalid_argument&) {
    throw std::invalid_argument("spearman: constant input");
  }
}

// ---- report ----------------------------------------------------------------------------

/// Metrics of one configuration on one evaluation set.
struct MetricReport {
  double distinct1 = 0.0;
  double distinct2 = 0.0;
  double distinct3 = 0.0;
  double slor = 0.0;
  double ce = 0.0;
  std::vector<double> per_classifier;

  /// Flat "key=value" lines; reals printed with 17 significant digits.
  std::string to_kv() const {
    std::ostringstream os;
    os.precision(17);
    os << "distinct1=" << distinct1 << '\n'
       << "distinct2=" << distinct2 << '\n'
       << "distinct3=" << distinct3 << '\n'
       << "slor=" << slor << '\n'
       << "ce=" << ce << '\n';
    for (std::size_t i = 0; i < per_classifier.size(); ++i) os << "ce." << i << '=' << per_classifier[i] << '\n';
    return os.str();
  }

  static MetricReport from_kv(const std::string& text) {
    MetricReport r;
    std::istringstream is(text);
    for (std::string line; std::getline(is, line);) {
      const auto eq = line.find('=');
      if (eq == std::string::npos) continue;
      const std::string key = line.substr(0, eq);
      const double v = std::stod(line.substr(eq + 1));
      if (key == "distinct1") r.distinct1 = v;
      else if (key == "distinct2") r.distinct2 = v;
      else if (key == "distinct3") r.distinct3 = v;
      else if (key == "slor") r.slor = v;
      else if (key == "ce") r.ce = v;
      else if (key.rfind("ce.", 0) == 0) {
        const auto idx = std::stoul(key.substr(3));
        if (r.per_classifier.size() <= idx) r.per_classifier.resize(idx + 1);
        r.per_classifier[idx] = v;
      } else {
        throw std::invalid_argument("MetricReport: unknown key '" + key + "'");
      }
    }
    return r;
  }
};

}  // namespace lrcompose
