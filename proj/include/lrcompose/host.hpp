// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "lrcompose/adapter.hpp"
#include "lrcompose/binary_io.hpp"
#include "lrcompose/composition.hpp"
#include "lrcompose/init.hpp"
#include "lrcompose/matrix.hpp"
#include "lrcompose/prng.hpp"
#include "lrcompose/quantize.hpp"
#include "lrcompose/site.hpp"
#include "lrcompose/tape.hpp"

namespace lrcompose {

struct HostConfig {
  std::size_t n_layers = 2;
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t d_ff = 128;
  std::size_t vocab_size = 128;
  std::size_t max_seq = 64;
  std::uint64_t seed = 8989;

  void validate() const {
    if (n_layers == 0 || d_model == 0 || n_heads == 0 || d_ff == 0 || vocab_size == 0 ||
        max_seq == 0) {
      throw std::invalid_argument("HostConfig: all sizes must be >= 1");
    }
    if (d_model % n_heads != 0) {
      throw std::invalid_argument("HostConfig: d_model " + std::to_string(d_model) +
                                  " not divisible by n_heads " + std::to_string(n_heads));
    }
  }

  friend bool operator==(const HostConfig&, const HostConfig&) = default;
};

/// Frozen projection. W0 never changes after construction; `effective` is
/// what forward multiplies by (W0, or its dequantized codes).
struct FrozenLinear {
  Matrix w0;
  std::optional<QuantizedBlocks> quantized;
  Matrix effective;
};

/// All frozen parameters of a host.
struct HostWeights {
  Matrix token_embedding;     ///< d_model x vocab
  Matrix position_embedding;  ///< d_model x max_seq
  std::vector<Matrix> projections;  ///< indexed by HostModel::site_index
};

/// Trainable factors bound to one site for a recorded forward pass.
struct TrainableAdapter {
  Var a;
  Var b;
  double scale = 1.0;
  double dropout_p = 0.0;
};

/// Sites whose adapter factors are tape parameters rather than registry constants.
struct TrainingBinding {
  std::map<AttachmentSite, TrainableAdapter> adapters;
  bool training = false;  ///< enables dropout on adapter inputs
  Prng* prng = nullptr;
};

/// Inputs seen by every linear projection during one forward pass.
struct ForwardTrace {
  std::map<AttachmentSite, Matrix> site_inputs;
};

enum class DecodeMode { Greedy, Sample };

struct GenerateOptions {
  std::size_t max_new = 32;
  std::optional<int> stop_token;
  DecodeMode mode = DecodeMode::Greedy;
  double temperature = 1.0;
  Prng* prng = nullptr;  ///< required for Sample
};

/// Tiny frozen decoder-only transformer.
///
/// Per layer: pre-norm causal multi-head attention (q, k, v, o) and a gated
/// MLP down(silu(gate h) * up h), both residual. A final norm feeds lm_head.
/// Positions use learned absolute embeddings. Every linear projection is an
/// attachment site; the registry maps sites to stacked, composed adapters.
class HostModel {
 public:
  static HostModel build(const HostConfig& config) {
    config.validate();
    Prng prng = Prng::derive(config.seed, "host-weights");
    HostWeights w;
    w.token_embedding = kaiming_uniform_init(config.d_model, config.vocab_size, 1, prng);
    w.position_embedding = kaiming_uniform_init(config.d_model, config.max_seq, 4, prng);
    for (const AttachmentSite& s : sites_of(config)) {
      const auto [d_out, d_in] = dims_of(config, s);
      w.projections.push_back(kaiming_uniform_init(d_out, d_in, d_in, prng));
    }
    return from_weights(config, std::move(w));
  }

  static HostModel from_weights(const HostConfig& config, HostWeights weights) {
    config.validate();
    HostModel host(config);
    auto expect = [](const Matrix& m, std::size_t r, std::size_t c, const std::string& what) {
      if (m.rows() != r || m.cols() != c) {
        throw ShapeError("host weights: " + what + " is " + m.shape_string() + ", expected (" +
                         std::to_string(r) + "x" + std::to_string(c) + ")");
      }
    };
    expect(weights.token_embedding, config.d_model, config.vocab_size, "token embedding");
    expect(weights.position_embedding, config.d_model, config.max_seq, "position embedding");
    const auto sites = host.sites();
    if (weights.projections.size() != sites.size()) {
      throw ShapeError("host weights: " + std::to_string(weights.projections.size()) +
                       " projections, expected " + std::to_string(sites.size()));
    }
    host.token_embedding_ = std::move(weights.token_embedding);
    host.position_embedding_ = std::move(weights.position_embedding);
    for (std::size_t i = 0; i < sites.size(); ++i) {
      const auto [d_out, d_in] = host.site_dims(sites[i]);
      expect(weights.projections[i], d_out, d_in, sites[i].to_string());
      FrozenLinear fl;
      fl.w0 = std::move(weights.projections[i]);
      fl.effective = fl.w0;
      host.linears_.push_back(std::move(fl));
    }
    return host;
  }

  HostModel(const HostModel& o)
      : config_(o.config_),
        token_embedding_(o.token_embedding_),
        position_embedding_(o.position_embedding_),
        linears_(o.linears_),
        registry_(o.registry_),
        quant_block_(o.quant_block_),
        applications_(o.applications_.load()) {}
  HostModel& operator=(const HostModel& o) {
    if (this != &o) {
      HostModel tmp(o);
      swap(tmp);
    }
    return *this;
  }
  HostModel(HostModel&& o) noexcept { swap(o); }
  HostModel& operator=(HostModel&& o) noexcept {
    swap(o);
    return *this;
  }

  const HostConfig& config() const noexcept { return config_; }

  /// All sites in canonical order: layer-major q, k, v, o, gate, up, down, then lm_head.
  std::vector<AttachmentSite> sites() const { return sites_of(config_); }

  static std::vector<AttachmentSite> sites_of(const HostConfig& c) {
    std::vector<AttachmentSite> out;
    for (std::uint32_t l = 0; l < c.n_layers; ++l)
      for (SiteKind k : kAllSiteKinds)
        if (k != SiteKind::lm_head) out.push_back({l, k});
    out.push_back({static_cast<std::uint32_t>(c.n_layers), SiteKind::lm_head});
    return out;
  }

  static bool has_site(const HostConfig& c, AttachmentSite s) noexcept {
    if (s.kind == SiteKind::lm_head) return s.layer == c.n_layers;
    return s.layer < c.n_layers;
  }
  bool has_site(AttachmentSite s) const noexcept { return has_site(config_, s); }

  /// (d_out, d_in) of the projection at `s`.
  static std::pair<std::size_t, std::size_t> dims_of(const HostConfig& c, AttachmentSite s) {
    if (!has_site(c, s)) throw std::out_of_range("unknown site " + s.to_string());
    switch (s.kind) {
      case SiteKind::gate:
      case SiteKind::up: return {c.d_ff, c.d_model};
      case SiteKind::down: return {c.d_model, c.d_ff};
      case SiteKind::lm_head: return {c.vocab_size, c.d_model};
      default: return {c.d_model, c.d_model};
    }
  }
  std::pair<std::size_t, std::size_t> site_dims(AttachmentSite s) const {
    return dims_of(config_, s);
  }

  std::size_t site_index(AttachmentSite s) const {
    if (!has_site(s)) throw std::out_of_range("unknown site " + s.to_string());
    if (s.kind == SiteKind::lm_head) return config_.n_layers * 7;
    return s.layer * 7 + static_cast<std::size_t>(s.kind);
  }


  const FrozenLinear& frozen(AttachmentSite s) const { return linears_[site_index(s)]; }
  const Matrix& token_embedding() const noexcept { return token_embedding_; }
  const Matrix& position_embedding() const noexcept { return position_embedding_; }

  HostWeights weights() const {
    HostWeights w{token_embedding_, position_embedding_, {}};
    for (const auto& fl : linears_) w.projections.push_back(fl.w0);
    return w;
  }

  // ---- adapter registry -------------------------------------------------

  const std::map<AttachmentSite, ComposedSite>& registry() const noexcept { return registry_; }

  /// Stacks `ad` at its site (appended after existing adapters).
  void attach(const LowRankAdapter& ad) {
    if (!has_site(ad.site)) throw std::out_of_range("attach: unknown site " + ad.site.to_string());
    const auto [d_out, d_in] = site_dims(ad.site);
    if (ad.d_out != d_out || ad.d_in != d_in) {
      throw ShapeError("attach: adapter '" + ad.name + "' is (" + std::to_string(ad.d_out) + "x" +
                       std::to_string(ad.d_in) + "), site " + ad.site.to_string() + " is (" +
                       std::to_string(d_out) + "x" + std::to_string(d_in) + ")");
    }
    auto it = registry_.find(ad.site);
    if (it == registry_.end()) {
      registry_.emplace(ad.site, ComposedSite(ad.site, {ad}));
      return;
    }
    for (const auto& existing : it->second.adapters()) {
      if (existing.name == ad.name) {
        throw std::invalid_argument("attach: adapter '" + ad.name + "' already at " +
                                    ad.site.to_string());
      }
    }
    it->second.push_back(ad);
  }

  void set_strategy(AttachmentSite s, CompositionStrategy strategy) {
    if (!has_site(s)) throw std::out_of_range("set_strategy: unknown site " + s.to_string());
    auto it = registry_.find(s);
    if (it == registry_.end()) {
      throw std::invalid_argument("set_strategy: no adapters at " + s.to_string());
    }
    it->second.set_strategy(strategy);
  }

  /// Applies `strategy` at every site that has adapters.
  void set_strategy_all(CompositionStrategy strategy) {
    for (auto& [site, composed] : registry_) composed.set_strategy(strategy);
  }

  void detach(AttachmentSite s, std::string_view name) {
    if (!has_site(s)) throw std::out_of_range("detach: unknown site " + s.to_string());
    auto it = registry_.find(s);
    if (it == registry_.end() || !it->second.erase(name)) {
      throw std::invalid_argument("detach: no adapter '" + std::string(name) + "' at " +
                                  s.to_string());
    }
    if (it->second.empty()) registry_.erase(it);
  }

  void detach_all() noexcept { registry_.clear(); }

  // ---- quantization ------------------------------------------------------

  /// Stores every projection as blockwise int4 codes; forward then uses the
  /// dequantized values. W0 itself is kept untouched for reference.
  void quantize_frozen(std::size_t block_size = 64) {
    if (block_size == 0) throw std::invalid_argument("quantize_frozen: block_size must be >= 1");
    for (auto& fl : linears_) {
      fl.quantized = quantize_blockwise(fl.w0, block_size);
      fl.effective = dequantize_blockwise(*fl.quantized);
    }
    quant_block_ = block_size;
  }

  bool is_quantized() const noexcept { return quant_block_ != 0; }
  std::size_t quant_block_size() const noexcept { return quant_block_; }

  // ---- forward / generation ---------------------------------------------

  /// Logits (vocab x positions) for a token sequence.
  Matrix forward(std::span<const int> tokens) const {
    GradientTape tape(false);
    const Var out = forward(tape, tokens);
    return tape.value(out);
  }

  ForwardTrace trace(std::span<const int> tokens) const {
    GradientTape tape(false);
    ForwardTrace tr;
    forward(tape, tokens, nullptr, &tr);
    return tr;
  }

  /// Records the forward pass on `tape`. Sites in `binding` use its tape
  /// parameters as an extra adapter on top of whatever the registry holds.
  Var forward(GradientTape& t, std::span<const int> tokens, const TrainingBinding* binding = nullptr,
              ForwardTrace* trace = nullptr) const {
    if (tokens.empty()) throw std::invalid_argument("forward: empty token sequence");
    if (tokens.size() > config_.max_seq) {
      throw std::invalid_argument("forward: sequence length " + std::to_string(tokens.size()) +
                                  " exceeds max_seq " + std::to_string(config_.max_seq));
    }
    for (int tok : tokens) {
      if (tok < 0 || static_cast<std::size_t>(tok) >= config_.vocab_size) {
        throw std::out_of_range("forward: token " + std::to_string(tok) + " outside vocab of " +
                                std::to_string(config_.vocab_size));
      }
    }
    const std::size_t n = tokens.size();
    std::vector<int> positions(n);
    for (std::size_t i = 0; i < n; ++i) positions[i] = static_cast<int>(i);

    Var x = t.add(t.embedding(t.constant(token_embedding_), tokens),
                  t.embedding(t.constant(position_embedding_), positions));

    const std::size_t dh = config_.d_model / config_.n_heads;
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
    for (std::uint32_t l = 0; l < config_.n_layers; ++l) {
      const Var hn = t.layer_norm(x);
      const Var q = project(t, {l, SiteKind::q}, hn, binding, trace);
      const Var k = project(t, {l, SiteKind::k}, hn, binding, trace);
      const Var v = project(t, {l, SiteKind::v}, hn, binding, trace);
      std::vector<Var> heads;
      heads.reserve(config_.n_heads);
      for (std::size_t h = 0; h < config_.n_heads; ++h) {
        const Var qh = t.slice_rows(q, h * dh, dh);
        const Var kh = t.slice_rows(k, h * dh, dh);
        const Var vh = t.slice_rows(v, h * dh, dh);
        const Var scores = t.scale(t.matmul(t.transpose(qh), kh), inv_sqrt_dh);
        const Var probs = t.softmax_rows(scores, /*causal=*/true);
        heads.push_back(t.matmul(vh, t.transpose(probs)));
      }
      const Var attn = t.concat_rows(heads);
      x = t.add(x, project(t, {l, SiteKind::o}, attn, binding, trace));

      const Var hn2 = t.layer_norm(x);
      const Var g = project(t, {l, SiteKind::gate}, hn2, binding, trace);
      const Var u = project(t, {l, SiteKind::up}, hn2, binding, trace);
      const Var m = t.hadamard(t.silu(g), u);
      x = t.add(x, project(t, {l, SiteKind::down}, m, binding, trace));
    }
    const Var hf = t.layer_norm(x);
    return project(t, {static_cast<std::uint32_t>(config_.n_layers), SiteKind::lm_head}, hf,
                   binding, trace);
  }

  /// Continuation tokens after `prompt`, ending at (and including) the first
  /// stop token, after `max_new` tokens, or when the context is full.
  std::vector<int> generate(std::span<const int> prompt, const GenerateOptions& opts) const {
    if (prompt.empty()) throw std::invalid_argument("generate: empty prompt");
    if (prompt.size() > config_.max_seq) {
      throw std::invalid_argument("generate: prompt length " + std::to_string(prompt.size()) +
                                  " exceeds max_seq " + std::to_string(config_.max_seq));
    }
    if (opts.mode == DecodeMode::Sample && opts.prng == nullptr) {
      throw std::invalid_argument("generate: sampling needs a prng");
    }
    std::vector<int> seq(prompt.begin(), prompt.end());
    std::vector<int> out;
    while (out.size() < opts.max_new && seq.size() < config_.max_seq) {
      const Matrix logits = forward(seq);
      const int next = pick_token(logits, logits.cols() - 1, opts);
      out.push_back(next);
      seq.push_back(next);
      if (opts.stop_token && next == *opts.stop_token) break;
    }
    return out;
  }

  // ---- instrumentation ---------------------------------------------------

  /// Adapter delta applications since the last reset.
  std::uint64_t adapter_applications() const noexcept { return applications_.load(); }
  void reset_adapter_applications() noexcept { applications_.store(0); }

  /// FNV-1a over the bytes of every frozen parameter (W0, not dequantized values).
  std::uint64_t frozen_fingerprint() const {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    auto mix = [&h](const Matrix& m) {
      h = fnv1a(std::span(reinterpret_cast<const unsigned char*>(m.data().data()),
                          m.size() * sizeof(double)),
                h);
    };
    mix(token_embedding_);
    mix(position_embedding_);
    for (const auto& fl : linears_) mix(fl.w0);
    return h;
  }

 private:
  explicit HostModel(const HostConfig& config) : config_(config) {}
  HostModel() = default;

  void swap(HostModel& o) noexcept {
    std::swap(config_, o.config_);
    std::swap(token_embedding_, o.token_embedding_);
    std::swap(position_embedding_, o.position_embedding_);
    std::swap(linears_, o.linears_);
    std::swap(registry_, o.registry_);
    std::swap(quant_block_, o.quant_block_);
    const auto mine = applications_.load();
    applications_.store(o.applications_.load());
    o.applications_.store(mine);
  }

  Var project(GradientTape& t, AttachmentSite site, Var x, const TrainingBinding* binding,
              ForwardTrace* trace) const {
    if (trace) trace->site_inputs[site] = t.value(x);
    Var h = t.matmul(t.constant(linears_[site_index(site)].effective), x);
    if (auto it = registry_.find(site); it != registry_.end() && !it->second.empty()) {
      h = t.add(h, t.constant(it->second.delta(t.value(x))));
      applications_.fetch_add(it->second.applications());
    }
    if (binding) {
      if (auto it = binding->adapters.find(site); it != binding->adapters.end()) {
        const TrainableAdapter& ta = it->second;
        Var xin = x;
        if (binding->training && ta.dropout_p > 0.0) {
          if (binding->prng == nullptr) throw std::invalid_argument("forward: dropout needs a prng");
          const Matrix& xv = t.value(x);
          xin = t.hadamard(x, t.constant(dropout_mask(xv.rows(), xv.cols(), ta.dropout_p,
                                                      *binding->prng)));
        }
        const Var hidden = t.matmul(t.transpose(ta.b), xin);
        h = t.add(h, t.scale(t.matmul(ta.a, hidden), ta.scale));
        applications_.fetch_add(1);
      }
    }
    return h;
  }

  static int pick_token(const Matrix& logits, std::size_t col, const GenerateOptions& opts) {
    const std::size_t v = logits.rows();
    if (opts.mode == DecodeMode::Greedy) {
      std::size_t best = 0;
      for (std::size_t r = 1; r < v; ++r)
        if (logits(r, col) > logits(best, col)) best = r;
      return static_cast<int>(best);
    }
    if (!(opts.temperature > 0.0)) throw std::invalid_argument("generate: temperature must be > 0");
    double mx = logits(0, col);
    for (std::size_t r = 1; r < v; ++r) mx = std::max(mx, logits(r, col));
    std::vector<double> w(v);
    double z = 0.0;
    for (std::size_t r = 0; r < v; ++r) {
      w[r] = std::exp((logits(r, col) - mx) / opts.temperature);
      z += w[r];
    }
    double u = opts.prng->uniform01() * z;
    for (std::size_t r = 0; r < v; ++r) {
      u -= w[r];
      if (u < 0.0) return static_cast<int>(r);
    }
    return static_cast<int>(v - 1);
  }

  HostConfig config_;
  Matrix token_embedding_;
  Matrix position_embedding_;
  std::vector<FrozenLinear> linears_;
  std::map<AttachmentSite, ComposedSite> registry_;
  std::size_t quant_block_ = 0;
  mutable std::atomic<std::uint64_t> applications_{0};
};

// ---- host checkpoint --------------------------------------------------------

inline constexpr std::string_view kHostMagic = "LRCHOST1";
inline constexpr std::uint16_t kHostVersion = 1;

/// Host container, little-endian, same conventions as the adapter file:
///
///   magic "LRCHOST1" | u16 version | u32 n_layers | u32 d_model | u32 n_heads
///   | u32 d_ff | u32 vocab_size | u32 max_seq | u64 seed | u32 quant_block (0 = none)
///   | f64[] token embedding | f64[] position embedding | f64[] W0 per site
///
/// Frozen weights are stored as 64-bit reals so a reloaded host reproduces
/// the original bit for bit. Quantization is re-derived from W0 on load.
inline std::vector<char> encode_host(const HostModel& host) {
  const HostConfig& c = host.config();
  ByteWriter w;
  w.bytes(kHostMagic);
  w.u16(kHostVersion);
  for (std::size_t v : {c.n_layers, c.d_model, c.n_heads, c.d_ff, c.vocab_size, c.max_seq})
    w.u32(static_cast<std::uint32_t>(v));
  w.u64(c.seed);
  w.u32(static_cast<std::uint32_t>(host.quant_block_size()));
  for (double v : host.token_embedding().data()) w.f64(v);
  for (double v : host.position_embedding().data()) w.f64(v);
  for (const AttachmentSite& s : host.sites())
    for (double v : host.frozen(s).w0.data()) w.f64(v);
  return w.buffer();
}

inline HostModel decode_host(const std::vector<char>& bytes) {
  ByteReader r(bytes, FormatErrorKind::BadMagic);
  if (r.bytes(kHostMagic.size()) != kHostMagic) {
    throw FormatError(FormatErrorKind::BadMagic, "expected LRCHOST1");
  }
  r.set_short_kind(FormatErrorKind::BadHeader);
  const std::uint16_t version = r.u16();
  if (version != kHostVersion) {
    throw FormatError(FormatErrorKind::VersionMismatch, "host file version " + std::to_string(version));
  }
  HostConfig c;
  c.n_layers = r.u32();
  c.d_model = r.u32();
  c.n_heads = r.u32();
  c.d_ff = r.u32();
  c.vocab_size = r.u32();
  c.max_seq = r.u32();
  c.seed = r.u64();
  const std::uint32_t quant_block = r.u32();
  try {
    c.validate();
  } catch (const std::exception& e) {
    throw FormatError(FormatErrorKind::BadHeader, e.what());
  }
  const std::size_t per_layer = 4 * c.d_model * c.d_model + 3 * c.d_model * c.d_ff;
  const std::uint64_t expected =
      8ULL * (c.d_model * c.vocab_size + c.d_model * c.max_seq + c.n_layers * per_layer +
              c.vocab_size * c.d_model);
  if (r.remaining() != expected) {
    throw FormatError(FormatErrorKind::TruncatedPayload,
                      "header implies " + std::to_string(expected) + " payload bytes, file has " +
                          std::to_string(r.remaining()));
  }
  auto read = [&r](std::size_t rows, std::size_t cols) {
    Matrix m(rows, cols);
    for (double& v : m.data()) v = r.f64();
    return m;
  };
  HostWeights w;
  w.token_embedding = read(c.d_model, c.vocab_size);
  w.position_embedding = read(c.d_model, c.max_seq);
  for (const AttachmentSite& s : HostModel::sites_of(c)) {
    const auto [d_out, d_in] = HostModel::dims_of(c, s);
    w.projections.push_back(read(d_out, d_in));
  }
  HostModel host = HostModel::from_weights(c, std::move(w));
  if (quant_block != 0) host.quantize_frozen(quant_block);
  return host;
}

inline void save_host(const HostModel& host, const std::filesystem::path& path) {
  write_file_bytes(path, encode_host(host));
}

inline HostModel load_host(const std::filesystem::path& path) {
  return decode_host(read_file_bytes(path));
}

}  // namespace lrcompose
