// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "lrcompose/data.hpp"
#include "lrcompose/host.hpp"
#include "lrcompose/metrics.hpp"

namespace lrcompose {

/// How continuations are decoded for evaluation. Sampling is seeded per
/// record, so results do not depend on evaluation order.
struct DecodeSettings {
  DecodeMode mode = DecodeMode::Sample;
  double temperature = 0.3;
  std::size_t max_new = 24;
  std::uint64_t seed = 8989;
};

namespace detail {

inline std::vector<int> words_only(const Vocabulary& vocab, std::span<const int> tokens) {
  std::vector<int> out;
  for (int t : tokens) {
    if (t == Vocabulary::kAnsClose) break;
    if (!vocab.is_control(t)) out.push_back(t);
  }
  return out;
}

inline std::vector<int> continue_prompt(const HostModel& host, const Vocabulary& vocab,
                                        std::span<const int> prompt, const DecodeSettings& ds,
                                        std::size_t record) {
  Prng prng = Prng::derive(ds.seed, "decode:" + std::to_string(record));
  GenerateOptions opts;
  opts.max_new = ds.max_new;
  opts.stop_token = Vocabulary::kAnsClose;
  opts.mode = ds.mode;
  opts.temperature = ds.temperature;
  opts.prng = &prng;
  return words_only(vocab, host.generate(prompt, opts));
}

}  // namespace detail

/// Continuations for in-domain items. Item i is prompted with its tags and
/// its first (i mod 6) words; the record holds only the generated words.
inline std::vector<GenerationRecord> generate_in_domain(const HostModel& host, const Vocabulary& vocab,
                                                        const Schema& schema,
                                                        std::span<const LabeledText> items,
                                                        const DecodeSettings& ds) {
  std::vector<GenerationRecord> out;
  out.reserve(items.size());
  for (std::size_t i = 0; i < items.size(); ++i) {
    const std::size_t n = std::min<std::size_t>(i % 6, items[i].words());
    const auto ex = make_prompt_pair(vocab, schema, items[i], n);
    out.push_back({items[i].labels, detail::continue_prompt(host, vocab, ex.prompt, ds, i), i});
  }
  return out;
}

/// Continuations for unlabeled prompts, one per joint label of `schema` for
/// every prompt.
inline std::vector<GenerationRecord> generate_prompted(const HostModel& host, const Vocabulary& vocab,
                                                       const Schema& schema,
                                                       const std::vector<std::vector<int>>& prompts,
                                                       const DecodeSettings& ds) {
  const std::size_t joint = joint_label_count(schema);
  std::vector<GenerationRecord> out;
  out.reserve(prompts.size() * joint);
  for (std::size_t p = 0; p < prompts.size(); ++p) {
    for (std::size_t key = 0; key < joint; ++key) {
      std::vector<std::uint16_t> labels(schema.size());
      std::size_t k = key;
      for (std::size_t a = schema.size(); a-- > 0;) {
        labels[a] = static_cast<std::uint16_t>(k % schema[a].labels.size());
        k /= schema[a].labels.size();
      }
      std::vector<int> prompt = control_prefix(vocab, schema, labels);
      prompt.insert(prompt.end(), prompts[p].begin(), prompts[p].end());
      const std::size_t id = p * joint + key;
      out.push_back({labels, detail::continue_prompt(host, vocab, prompt, ds, id), p});
    }
  }
  return out;
}

/// Fluency scorers shared by every row of a study: a bigram model and an
/// independently seeded host, both referenced against a unigram model of the
/// same corpus.
struct FluencyScorers {
  std::unique_ptr<UnigramModel> unigram;
  std::unique_ptr<BigramModel> bigram;
  std::unique_ptr<HostScorer> host;

  static FluencyScorers build(std::size_t vocab_size, std::span<const std::vector<int>> corpus,
                              std::optional<HostConfig> scorer_host) {
    FluencyScorers f;
    f.unigram = std::make_unique<UnigramModel>(vocab_size, corpus);
    f.bigram = std::make_unique<BigramModel>(vocab_size, corpus, 0.1);
    if (scorer_host) f.host = std::make_unique<HostScorer>(HostModel::build(*scorer_host), Vocabulary::kPad);
    return f;
  }

  std::vector<const LanguageScorer*> scorers() const {
    std::vector<const LanguageScorer*> out{bigram.get()};
    if (host) out.push_back(host.get());
    return out;
  }
};

/// Oracle ensembles for every attribute of a schema.
inline std::vector<std::vector<OracleClassifier>> make_ensembles(const Vocabulary& vocab, const Schema& schema,
                                                                 std::size_t count = 3) {
  std::vector<std::vector<OracleClassifier>> out;
  for (const auto& a : schema) out.push_back(make_oracle_ensemble(vocab, a, count));
  return out;
}

/// Control effectiveness of records: single-attribute mean of classifiers for
/// one-attribute schemas, majority-vote conjunction otherwise.
inline ControlEffectiveness score_control(std::span<const GenerationRecord> records,
                                          const std::vector<std::vector<OracleClassifier>>& ensembles) {
  if (ensembles.size() == 1) return control_effectiveness_single(records, ensembles[0]);
  return {control_effectiveness_multi(records, ensembles), {}};
}

/// Full metric report. Records with no generated words score as failures
/// for control and are left out of the fluency mean.
inline MetricReport evaluate_records(std::span<const GenerationRecord> records,
                                     const std::vector<std::vector<OracleClassifier>>& ensembles,
                                     const FluencyScorers* fluency,
                                     std::vector<std::string>* warnings = nullptr) {
  MetricReport r;
  std::vector<std::vector<int>> texts;
  texts.reserve(records.size());
  for (const auto& rec : records) texts.push_back(rec.tokens);
  r.distinct1 = distinct_n(texts, 1, warnings);
  r.distinct2 = distinct_n(texts, 2, warnings);
  r.distinct3 = distinct_n(texts, 3, warnings);
  const auto ce = score_control(records, ensembles);
  r.ce = ce.ce;
  r.per_classifier = ce.per_classifier;
  if (fluency) {
    const auto scorers = fluency->scorers();
    double total = 0.0;
    std::size_t n = 0;
    for (const auto& t : texts) {
      if (t.empty()) continue;
      total += slor(t, scorers, *fluency->unigram);
      ++n;
    }
    r.slor = n ? total / static_cast<double>(n) : 0.0;
    if (n == 0 && warnings) warnings->push_back("slor: every generation was empty");
  }
  return r;
}

}  // namespace lrcompose
