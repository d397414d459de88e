// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <filesystem>
#include <map>
#include <set>
#include <vector>

#include "lrcompose/host.hpp"
#include "test_support.hpp"

using namespace lrcompose;
using lrcompose::testing::finite_difference;
using lrcompose::testing::max_entry_rel_error;
using lrcompose::testing::random_adapter;
using lrcompose::testing::random_matrix;

namespace {

HostConfig small_config(std::uint64_t seed = 8989) {
  HostConfig c;
  c.n_layers = 2;
  c.d_model = 16;
  c.n_heads = 2;
  c.d_ff = 24;
  c.vocab_size = 20;
  c.max_seq = 12;
  c.seed = seed;
  return c;
}

const std::vector<int> kProbe = {3, 1, 4, 1, 5, 9, 2, 6};

LowRankAdapter adapter_for(const HostModel& host, AttachmentSite site, const std::string& name,
                           Prng& prng, std::size_t r = 2, double alpha = 4.0) {
  const auto [d_out, d_in] = host.site_dims(site);
  auto ad = random_adapter(name, d_out, d_in, r, alpha, prng, site);
  ad.a *= 0.3;
  ad.b *= 0.3;
  return ad;
}

}  // namespace

TEST(HostBuild, DeterministicAndShaped) {
  const HostModel a = HostModel::build(small_config()), b = HostModel::build(small_config());
  const Matrix la = a.forward(kProbe);
  EXPECT_EQ(la, b.forward(kProbe));
  EXPECT_EQ(la.rows(), 20u);
  EXPECT_EQ(la.cols(), kProbe.size());
  EXPECT_EQ(a.frozen_fingerprint(), b.frozen_fingerprint());
}

TEST(HostBuild, DifferentSeedsDiffer) {
  const HostModel a = HostModel::build(small_config(1)), b = HostModel::build(small_config(2));
  EXPECT_GT(max_abs_diff(a.forward(kProbe), b.forward(kProbe)), 1e-3);
}

TEST(HostBuild, InvalidConfigRejected) {
  HostConfig c = small_config();
  c.n_heads = 3;
  EXPECT_THROW(HostModel::build(c), std::invalid_argument);
  c = small_config();
  c.vocab_size = 0;
  EXPECT_THROW(HostModel::build(c), std::invalid_argument);
}

TEST(HostSites, GridHasFifteenSitesForTwoLayers) {
  const HostModel host = HostModel::build(small_config());
  const auto sites = host.sites();
  ASSERT_EQ(sites.size(), 15u);
  EXPECT_EQ(sites.back(), (AttachmentSite{2, SiteKind::lm_head}));
  std::set<AttachmentSite> unique(sites.begin(), sites.end());
  EXPECT_EQ(unique.size(), 15u);
  for (std::size_t i = 0; i < sites.size(); ++i) EXPECT_EQ(host.site_index(sites[i]), i);
  EXPECT_FALSE(host.has_site({2, SiteKind::q}));
  EXPECT_FALSE(host.has_site({0, SiteKind::lm_head}));
}

TEST(HostRegistry, AttachAtEverySiteThenDetachRestoresBaseline) {
  HostModel host = HostModel::build(small_config());
  const Matrix baseline = host.forward(kProbe);
  Prng prng(3);
  for (const auto& s : host.sites()) host.attach(adapter_for(host, s, "m", prng));
  EXPECT_EQ(host.registry().size(), 15u);
  EXPECT_GT(max_abs_diff(host.forward(kProbe), baseline), 1e-6);
  for (const auto& s : host.sites()) host.detach(s, "m");
  EXPECT_TRUE(host.registry().empty());
  EXPECT_EQ(host.forward(kProbe), baseline);
}

TEST(HostRegistry, RandomAttachDetachSequencesRestoreBaseline) {
  const HostModel fresh = HostModel::build(small_config());
  const Matrix baseline = fresh.forward(kProbe);
  Prng prng(4);
  const auto sites = fresh.sites();
  for (int trial = 0; trial < 5; ++trial) {
    HostModel host = fresh;
    std::vector<std::pair<AttachmentSite, std::string>> live;
    for (int step = 0; step < 12; ++step) {
      if (live.empty() || prng.bernoulli(0.6)) {
        const auto s = sites[prng.below(sites.size())];
        const std::string name = "a" + std::to_string(step);
        host.attach(adapter_for(host, s, name, prng));
        live.emplace_back(s, name);
        if (prng.bernoulli(0.3)) host.set_strategy(s, CompositionStrategy::OutputAverage);
      } else {
        const auto idx = prng.below(live.size());
        host.detach(live[idx].first, live[idx].second);
        live.erase(live.begin() + static_cast<std::ptrdiff_t>(idx));
      }
    }
    for (const auto& [s, name] : live) host.detach(s, name);
    EXPECT_EQ(host.forward(kProbe), baseline);
  }
}

TEST(HostRegistry, FreshAdapterLeavesLogitsUnchanged) {
  HostModel host = HostModel::build(small_config());
  const Matrix baseline = host.forward(kProbe);
  Prng prng(5);
  for (const auto& s : host.sites()) {
    const auto [d_out, d_in] = host.site_dims(s);
    host.attach(init_adapter("fresh", s, d_out, d_in, 4, 8.0, 0.1, prng));
  }
  EXPECT_LE(max_abs_diff(host.forward(kProbe), baseline), 1e-12);
}

TEST(HostRegistry, Errors) {
  HostModel host = HostModel::build(small_config());
  Prng prng(6);
  auto ad = adapter_for(host, {0, SiteKind::q}, "x", prng);
  ad.site = {5, SiteKind::q};
  EXPECT_THROW(host.attach(ad), std::out_of_range);
  auto wrong = adapter_for(host, {0, SiteKind::up}, "x", prng);
  wrong.site = {0, SiteKind::q};
  EXPECT_THROW(host.attach(wrong), ShapeError);
  host.attach(adapter_for(host, {0, SiteKind::q}, "x", prng));
  EXPECT_THROW(host.attach(adapter_for(host, {0, SiteKind::q}, "x", prng)), std::invalid_argument);
  EXPECT_THROW(host.detach({0, SiteKind::q}, "nope"), std::invalid_argument);
  EXPECT_THROW(host.set_strategy({0, SiteKind::k}, CompositionStrategy::OutputSum),
               std::invalid_argument);
}

TEST(HostRegistry, AttachOrderPreserved) {
  HostModel host = HostModel::build(small_config());
  Prng prng(7);
  for (const char* n : {"z", "a", "m"}) host.attach(adapter_for(host, {1, SiteKind::v}, n, prng));
  const auto& ads = host.registry().at({1, SiteKind::v}).adapters();
  ASSERT_EQ(ads.size(), 3u);
  EXPECT_EQ(ads[0].name, "z");
  EXPECT_EQ(ads[1].name, "a");
  EXPECT_EQ(ads[2].name, "m");
}

TEST(HostForward, SingleAdapterMatchesFoldedWeightOracle) {
  // Folding (alpha/r) A Bᵀ into W0 gives an independent host that must agree.
  const HostModel base = HostModel::build(small_config());
  Prng prng(8);
  for (AttachmentSite s : {AttachmentSite{0, SiteKind::k}, AttachmentSite{1, SiteKind::down},
                           AttachmentSite{2, SiteKind::lm_head}}) {
    HostModel adapted = base;
    const auto ad = adapter_for(base, s, "one", prng);
    adapted.attach(ad);
    HostWeights w = base.weights();
    w.projections[base.site_index(s)] += materialize_delta(ad) * ad.scale();
    const HostModel folded = HostModel::from_weights(base.config(), w);
    EXPECT_LE(max_abs_diff(adapted.forward(kProbe), folded.forward(kProbe)), 1e-10)
        << s.to_string();
  }
}

TEST(HostForward, AverageOfTwoCopiesEqualsOne) {
  const HostModel base = HostModel::build(small_config());
  Prng prng(9);
  const auto ad = adapter_for(base, {0, SiteKind::o}, "one", prng);
  HostModel single = base, doubled = base;
  single.attach(ad);
  auto copy = ad;
  copy.name = "two";
  doubled.attach(ad);
  doubled.attach(copy);
  doubled.set_strategy(ad.site, CompositionStrategy::OutputAverage);
  EXPECT_LE(max_abs_diff(single.forward(kProbe), doubled.forward(kProbe)), 1e-10);
}

TEST(HostForward, InputValidation) {
  const HostModel host = HostModel::build(small_config());
  EXPECT_THROW(host.forward(std::vector<int>{1, 20}), std::out_of_range);
  EXPECT_THROW(host.forward(std::vector<int>{-1}), std::out_of_range);
  EXPECT_THROW(host.forward(std::vector<int>(13, 1)), std::invalid_argument);
  EXPECT_THROW(host.forward(std::vector<int>{}), std::invalid_argument);
}

TEST(HostForward, Causality) {
  const HostModel host = HostModel::build(small_config());
  std::vector<int> other = kProbe;
  other[5] = 11;
  other[7] = 0;
  const Matrix a = host.forward(kProbe), b = host.forward(other);
  for (std::size_t c = 0; c < 5; ++c)
    for (std::size_t r = 0; r < a.rows(); ++r) EXPECT_EQ(a(r, c), b(r, c));
  EXPECT_GT(max_abs(a - b), 1e-6);
}

TEST(HostForward, SiteLocality) {
  const HostModel base = HostModel::build(small_config());
  Prng prng(10);
  HostModel adapted = base;
  const AttachmentSite target{1, SiteKind::v};
  adapted.attach(adapter_for(base, target, "loc", prng));
  const auto before = base.trace(kProbe), after = adapted.trace(kProbe);
  for (const auto& s : base.sites()) {
    const bool upstream = s.layer == 0 || s.kind == SiteKind::q || s.kind == SiteKind::k ||
                          s.kind == SiteKind::v;
    if (s.kind == SiteKind::lm_head) {
      EXPECT_NE(before.site_inputs.at(s), after.site_inputs.at(s));
      continue;
    }
    if (upstream) {
      EXPECT_EQ(before.site_inputs.at(s), after.site_inputs.at(s)) << s.to_string();
    } else {
      EXPECT_NE(before.site_inputs.at(s), after.site_inputs.at(s)) << s.to_string();
    }
  }
}

TEST(HostForward, ApplicationCounterIsSumOfModules) {
  HostModel host = HostModel::build(small_config());
  Prng prng(11);
  const std::map<AttachmentSite, int> plan = {
      {{0, SiteKind::q}, 3}, {{1, SiteKind::gate}, 1}, {{2, SiteKind::lm_head}, 2}};
  for (const auto& [s, n] : plan)
    for (int i = 0; i < n; ++i) host.attach(adapter_for(host, s, "m" + std::to_string(i), prng));
  host.reset_adapter_applications();
  host.forward(kProbe);
  EXPECT_EQ(host.adapter_applications(), 6u);
  host.reset_adapter_applications();
  host.forward(kProbe);
  host.forward(kProbe);
  EXPECT_EQ(host.adapter_applications(), 12u);
  host.reset_adapter_applications();
  host.set_strategy_all(CompositionStrategy::WeightAverageFactors);
  host.forward(kProbe);
  EXPECT_EQ(host.adapter_applications(), 3u);
}

TEST(HostGenerate, EdgeCases) {
  const HostModel host = HostModel::build(small_config());
  GenerateOptions opts;
  opts.max_new = 0;
  EXPECT_TRUE(host.generate(kProbe, opts).empty());

  opts.max_new = 5;
  const int first = host.generate(kProbe, opts).front();
  opts.stop_token = first;
  const auto stopped = host.generate(kProbe, opts);
  ASSERT_EQ(stopped.size(), 1u);
  EXPECT_EQ(stopped[0], first);

  EXPECT_THROW(host.generate(std::vector<int>(13, 1), GenerateOptions{}), std::invalid_argument);
  opts.stop_token.reset();
  opts.max_new = 100;
  EXPECT_EQ(host.generate(kProbe, opts).size(), 12u - kProbe.size());
}

TEST(HostGenerate, GreedyMatchesArgmaxChain) {
  HostModel host = HostModel::build(small_config());
  Prng prng(12);
  host.attach(adapter_for(host, {0, SiteKind::up}, "g", prng));
  GenerateOptions opts;
  opts.max_new = 4;
  const auto got = host.generate(std::vector<int>{2, 7}, opts);
  std::vector<int> seq = {2, 7};
  std::vector<int> oracle;
  for (int step = 0; step < 4; ++step) {
    const Matrix logits = host.forward(seq);
    int best = 0;
    for (std::size_t r = 0; r < logits.rows(); ++r)
      if (logits(r, logits.cols() - 1) > logits(static_cast<std::size_t>(best), logits.cols() - 1))
        best = static_cast<int>(r);
    oracle.push_back(best);
    seq.push_back(best);
  }
  EXPECT_EQ(got, oracle);
}

TEST(HostGenerate, SamplingIsSeeded) {
  const HostModel host = HostModel::build(small_config());
  auto run = [&](std::uint64_t seed) {
    Prng prng(seed);
    GenerateOptions opts;
    opts.max_new = 4;
    opts.mode = DecodeMode::Sample;
    opts.prng = &prng;
    return host.generate(std::vector<int>{1}, opts);
  };
  EXPECT_EQ(run(1), run(1));
  GenerateOptions no_prng;
  no_prng.mode = DecodeMode::Sample;
  EXPECT_THROW(host.generate(std::vector<int>{1}, no_prng), std::invalid_argument);
}

TEST(Quantize, ZeroMatrixExact) {
  const auto q = quantize_blockwise(Matrix(5, 13), 8);
  for (std::size_t i = 0; i < q.count(); ++i) EXPECT_EQ(q.code(i), 0);
  EXPECT_EQ(dequantize_blockwise(q), Matrix(5, 13));
}

TEST(Quantize, ErrorBoundAndCodeRange) {
  Prng prng(13);
  for (std::size_t block : {1, 7, 64}) {
    const Matrix m = random_matrix(9, 23, prng, -4, 4);
    const auto q = quantize_blockwise(m, block);
    const Matrix back = dequantize_blockwise(q);
    for (std::size_t i = 0; i < m.size(); ++i) {
      EXPECT_GE(q.code(i), -7);
      EXPECT_LE(q.code(i), 7);
      EXPECT_LE(std::abs(back.data()[i] - m.data()[i]), q.absmax[i / block] / 14.0 + 1e-15);
    }
  }
  EXPECT_THROW(quantize_blockwise(Matrix(1, 1), 0), std::invalid_argument);
}

TEST(Quantize, HostUsesCodesButKeepsW0) {
  HostModel host = HostModel::build(small_config());
  const auto fp = host.frozen_fingerprint();
  const Matrix baseline = host.forward(kProbe);
  host.quantize_frozen(16);
  EXPECT_TRUE(host.is_quantized());
  EXPECT_EQ(host.frozen_fingerprint(), fp);
  const Matrix quantized = host.forward(kProbe);
  EXPECT_GT(max_abs_diff(baseline, quantized), 1e-6);
  Prng prng(14);
  for (const auto& s : host.sites()) {
    const auto [d_out, d_in] = host.site_dims(s);
    host.attach(init_adapter("z", s, d_out, d_in, 2, 4.0, 0.0, prng));
  }
  EXPECT_LE(max_abs_diff(host.forward(kProbe), quantized), 1e-12);
}

TEST(HostCheckpoint, RoundTripBitExact) {
  HostModel host = HostModel::build(small_config());
  host.quantize_frozen(32);
  const auto path = std::filesystem::temp_directory_path() / "lrcompose_test_host" / "h.bin";
  save_host(host, path);
  const HostModel back = load_host(path);
  EXPECT_EQ(back.config(), host.config());
  EXPECT_EQ(back.quant_block_size(), 32u);
  EXPECT_EQ(back.forward(kProbe), host.forward(kProbe));
  EXPECT_EQ(encode_host(back), encode_host(host));

  auto bytes = encode_host(host);
  bytes[1] = 'Z';
  try {
    decode_host(bytes);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.kind(), FormatErrorKind::BadMagic);
  }
  bytes = encode_host(host);
  bytes.resize(bytes.size() - 8);
  try {
    decode_host(bytes);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.kind(), FormatErrorKind::TruncatedPayload);
  }
}

// ---- gradients through the full host -----------------------------------------

namespace {

/// Cross entropy of the host with a trainable adapter bound at every site.
double host_loss(const HostModel& host, const std::map<AttachmentSite, std::pair<Matrix, Matrix>>& f,
                 const std::vector<int>& tokens, const std::vector<int>& targets) {
  GradientTape t(false);
  TrainingBinding binding;
  for (const auto& [s, ab] : f)
    binding.adapters[s] = {t.parameter(ab.first), t.parameter(ab.second), 1.5, 0.0};
  const Var logits = host.forward(t, tokens, &binding);
  return t.value(t.cross_entropy(logits, targets)).data()[0];
}

}  // namespace

TEST(HostGradient, EveryAdapterFactorMatchesFiniteDifferences) {
  HostConfig c = small_config();
  c.d_model = 8;
  c.d_ff = 12;
  c.vocab_size = 16;
  const HostModel host = HostModel::build(c);
  const std::vector<int> tokens = {3, 7, 1, 12, 5};
  const std::vector<int> targets = {7, 1, -1, 5, 9};
  Prng prng(15);
  std::map<AttachmentSite, std::pair<Matrix, Matrix>> factors;
  for (const auto& s : host.sites()) {
    const auto [d_out, d_in] = host.site_dims(s);
    factors[s] = {random_matrix(d_out, 2, prng, -0.5, 0.5), random_matrix(d_in, 2, prng, -0.5, 0.5)};
  }

  GradientTape t;
  TrainingBinding binding;
  for (const auto& [s, ab] : factors)
    binding.adapters[s] = {t.parameter(ab.first), t.parameter(ab.second), 1.5, 0.0};
  const Gradients grads = t.backward(t.cross_entropy(host.forward(t, tokens, &binding), targets));

  for (const auto& [s, ab] : factors) {
    for (int which = 0; which < 2; ++which) {
      const Matrix& x0 = which == 0 ? ab.first : ab.second;
      auto f = [&](const Matrix& probe) {
        auto copy = factors;
        (which == 0 ? copy[s].first : copy[s].second) = probe;
        return host_loss(host, copy, tokens, targets);
      };
      const Matrix numeric = finite_difference(f, x0, 1e-4);
      const Var v = which == 0 ? binding.adapters[s].a : binding.adapters[s].b;
      EXPECT_LE(max_entry_rel_error(grads[v], numeric, 1e-6), 1e-3)
          << s.to_string() << (which == 0 ? " A" : " B");
    }
  }
}
