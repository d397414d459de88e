// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "lrcompose/adapter_io.hpp"
#include "lrcompose/data.hpp"
#include "lrcompose/evaluate.hpp"
#include "lrcompose/host.hpp"
#include "lrcompose/tape.hpp"

namespace lrcompose {

enum class Scheduler { Constant, Cosine };

inline std::string_view to_string(Scheduler s) { return s == Scheduler::Constant ? "constant" : "cosine"; }

inline Scheduler parse_scheduler(std::string_view s) {
  if (s == "constant") return Scheduler::Constant;
  if (s == "cosine") return Scheduler::Cosine;
  throw std::invalid_argument("unknown scheduler '" + std::string(s) + "' (expected constant or cosine)");
}

struct TrainConfig {
  double learning_rate = 1e-3;
  Scheduler scheduler = Scheduler::Constant;
  std::size_t epochs = 3;
  std::size_t batch_size = 4;
  std::size_t rank = 4;
  double alpha = 8.0;
  double dropout = 0.1;
  double max_grad_norm = 1.0;
  double warmup_ratio = 0.1;
  double weight_decay = 0.5;  ///< decoupled, applied to both factors
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::uint64_t seed = 8989;
  DecodeSettings validation_decode;
  std::size_t validation_limit = 0;  ///< 0 = whole validation split

  void validate() const {
    if (epochs < 1) throw std::invalid_argument("TrainConfig: epochs must be >= 1");
    if (!(learning_rate >= 0.0)) throw std::invalid_argument("TrainConfig: learning_rate must be >= 0");
    if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
    if (rank < 1) throw std::invalid_argument("TrainConfig: rank must be >= 1");
    if (!(alpha > 0.0)) throw std::invalid_argument("TrainConfig: alpha must be > 0");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw std::invalid_argument("TrainConfig: dropout must be in [0, 1)");
    if (!(max_grad_norm > 0.0)) throw std::invalid_argument("TrainConfig: max_grad_norm must be > 0");
    if (!(warmup_ratio >= 0.0 && warmup_ratio < 1.0)) {
      throw std::invalid_argument("TrainConfig: warmup_ratio must be in [0, 1)");
    }
    if (!(weight_decay >= 0.0)) throw std::invalid_argument("TrainConfig: weight_decay must be >= 0");
  }

  /// Canonical text form; its FNV-1a hash identifies a run's configuration.
  std::string canonical() const {
    std::ostringstream os;
    os.precision(17);
    os << "lr=" << learning_rate << ";scheduler=" << to_string(scheduler) << ";epochs=" << epochs
       << ";batch=" << batch_size << ";r=" << rank << ";alpha=" << alpha << ";dropout=" << dropout
       << ";clip=" << max_grad_norm << ";warmup=" << warmup_ratio << ";wd=" << weight_decay
       << ";betas=" << beta1 << "," << beta2 << ";eps=" << epsilon << ";seed=" << seed
       << ";decode=" << static_cast<int>(validation_decode.mode) << "," << validation_decode.temperature << ","
       << validation_decode.max_new << "," << validation_decode.seed << ";vlimit=" << validation_limit;
    return os.str();
  }
  std::uint64_t hash() const { return fnv1a(canonical()); }
};

/// Adapter set after one epoch.
struct Checkpoint {
  std::size_t epoch = 0;  ///< 1-based
  std::vector<LowRankAdapter> adapters;
  double validation_ce = 0.0;
  double train_loss = 0.0;
};

struct TrainResult {
  double initial_loss = 0.0;  ///< loss of the fresh adapters on the first epoch's batches
  std::vector<Checkpoint> checkpoints;
};

// ---- loss --------------------------------------------------------------------------

/// Mean cross entropy over the completion tokens of a batch; prompt
/// positions are masked out. Items are weighted by their completion length.
inline Var lm_loss(GradientTape& t, const HostModel& host, std::span<const PromptExample> batch,
                   const TrainingBinding* binding = nullptr) {
  if (batch.empty()) throw std::invalid_argument("lm_loss: empty batch");
  std::optional<Var> total;
  std::size_t counted = 0;
  for (const auto& ex : batch) {
    std::vector<int> seq(ex.prompt);
    seq.insert(seq.end(), ex.completion.begin(), ex.completion.end());
    if (seq.size() < 2 || ex.completion.empty()) throw std::invalid_argument("lm_loss: empty completion");
    std::vector<int> input(seq.begin(), seq.end() - 1);
    std::vector<int> targets(input.size());
    for (std::size_t j = 0; j < targets.size(); ++j)
      targets[j] = j + 1 < ex.prompt.size() ? -1 : seq[j + 1];
    counted += ex.completion.size();
    const Var logits = host.forward(t, input, binding);
    const Var item = t.cross_entropy(logits, targets, Reduction::Sum);
    total = total ? t.add(*total, item) : item;
  }
  return t.scale(*total, 1.0 / static_cast<double>(counted));
}

/// Loss with whatever the host registry holds, no trainable parameters.
inline double lm_loss(const HostModel& host, std::span<const PromptExample> batch) {
  GradientTape t(false);
  return t.value(lm_loss(t, host, batch)).data()[0];
}

// ---- optimisation pieces -----------------------------------------------------------

/// Scales all gradients so their joint L2 norm is at most max_norm; returns
/// the norm before clipping.
inline double clip_global_norm(std::vector<Matrix*> grads, double max_norm) {
  double sq = 0.0;
  for (const Matrix* g : grads)
    for (double v : g->data()) sq += v * v;
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double s = max_norm / norm;
    for (Matrix* g : grads) *g *= s;
  }
  return norm;
}

/// Learning rate at 0-based `step` of `total`: linear warmup, then constant
/// or cosine decay to zero.
inline double scheduled_lr(const TrainConfig& c, std::size_t step, std::size_t total) {
  const auto warm = static_cast<std::size_t>(std::ceil(c.warmup_ratio * static_cast<double>(total)));
  if (step < warm) return c.learning_rate * static_cast<double>(step + 1) / static_cast<double>(warm);
  if (c.scheduler == Scheduler::Constant) return c.learning_rate;
  const double progress = static_cast<double>(step - warm) / static_cast<double>(std::max<std::size_t>(1, total - warm));
  return c.learning_rate * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
}

/// Adam moments for one parameter matrix, with decoupled weight decay.
struct AdamState {
  Matrix m;
  Matrix v;
  std::size_t t = 0;

  void step(Matrix& param, const Matrix& grad, double lr, const TrainConfig& c) {
    if (m.size() == 0) {
      m = Matrix(param.rows(), param.cols());
      v = Matrix(param.rows(), param.cols());
    }
    ++t;
    const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(t));
    auto p = param.data();
    auto g = grad.data();
    auto mm = m.data();
    auto vv = v.data();
    for (std::size_t i = 0; i < p.size(); ++i) {
      mm[i] = c.beta1 * mm[i] + (1.0 - c.beta1) * g[i];
      vv[i] = c.beta2 * vv[i] + (1.0 - c.beta2) * g[i] * g[i];
      p[i] -= lr * c.weight_decay * p[i];
      p[i] -= lr * (mm[i] / bc1) / (std::sqrt(vv[i] / bc2) + c.epsilon);
    }
  }
};

// ---- training ------------------------------------------------------------------------

/// Validation CE of `adapters` attached to `host` on the dataset's
/// validation split.
inline double validation_ce(const HostModel& host, const Vocabulary& vocab, const LabeledDataset& ds,
                            const std::vector<LowRankAdapter>& adapters, const TrainConfig& c) {
  if (ds.validation.empty()) return 0.0;
  HostModel adapted = host;
  for (const auto& ad : adapters) adapted.attach(ad);
  std::span<const LabeledText> items(ds.validation);
  if (c.validation_limit && items.size() > c.validation_limit) items = items.first(c.validation_limit);
  const auto records = generate_in_domain(adapted, vocab, ds.schema, items, c.validation_decode);
  return score_control(records, make_ensembles(vocab, ds.schema)).ce;
}

/// Trains one fresh adapter per site on the dataset's train split. Adapters
/// are named `name`; the host's own weights and registry are never modified.
inline TrainResult train_adapters(const HostModel& host, const Vocabulary& vocab, const LabeledDataset& ds,
                                  const std::vector<AttachmentSite>& sites, const TrainConfig& c,
                                  const std::string& name,
                                  const std::function<void(const std::string&)>& log = {}) {
  c.validate();
  if (sites.empty()) throw std::invalid_argument("train_adapters: no sites");
  if (ds.train.empty()) throw std::invalid_argument("train_adapters: dataset '" + ds.name + "' has no train items");

  Prng init = Prng::derive(c.seed, "init:" + name);
  std::vector<LowRankAdapter> adapters;
  for (const auto& s : sites) {
    if (!host.has_site(s)) throw std::out_of_range("train_adapters: unknown site " + s.to_string());
    const auto [d_out, d_in] = host.site_dims(s);
    adapters.push_back(init_adapter(name, s, d_out, d_in, c.rank, c.alpha, c.dropout, init));
  }
  const std::vector<LowRankAdapter> fresh = adapters;
  std::vector<AdamState> opt_a(adapters.size()), opt_b(adapters.size());

  Prng order = Prng::derive(c.seed, "order:" + name);
  Prng drop = Prng::derive(c.seed, "dropout:" + name);
  const std::size_t n_items = ds.train.size();
  const std::size_t per_epoch = (n_items + c.batch_size - 1) / c.batch_size;
  const std::size_t total_steps = per_epoch * c.epochs;
  std::size_t step = 0;

  TrainResult result;
  for (std::size_t epoch = 1; epoch <= c.epochs; ++epoch) {
    std::vector<std::size_t> idx(n_items);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    order.shuffle(std::span<std::size_t>(idx));
    std::vector<PromptExample> examples;
    examples.reserve(n_items);
    for (std::size_t i : idx) {
      const auto& item = ds.train[i];
      const std::size_t n = std::min<std::size_t>(order.below(6), item.words());
      examples.push_back(make_prompt_pair(vocab, ds.schema, item, n));
    }

    double loss_sum = 0.0;
    for (std::size_t b = 0; b < per_epoch; ++b, ++step) {
      const std::size_t lo = b * c.batch_size, hi = std::min(n_items, lo + c.batch_size);
      const std::span<const PromptExample> batch(examples.data() + lo, hi - lo);
      if (epoch == 1) {
        GradientTape probe(false);
        TrainingBinding before;
        for (const auto& ad : fresh)
          before.adapters[ad.site] = {probe.parameter(ad.a), probe.parameter(ad.b), ad.scale(), 0.0};
        result.initial_loss += probe.value(lm_loss(probe, host, batch, &before)).data()[0];
      }

      GradientTape t;
      TrainingBinding binding;
      binding.training = true;
      binding.prng = &drop;
      std::vector<std::pair<Var, Var>> vars;
      for (const auto& ad : adapters) {
        const Var a = t.parameter(ad.a), bv = t.parameter(ad.b);
        binding.adapters[ad.site] = {a, bv, ad.scale(), ad.dropout_p};
        vars.emplace_back(a, bv);
      }
      const Var loss = lm_loss(t, host, batch, &binding);
      loss_sum += t.value(loss).data()[0];
      Gradients grads = t.backward(loss);
      std::vector<Matrix> ga, gb;
      for (const auto& [a, bv] : vars) {
        ga.push_back(grads[a]);
        gb.push_back(grads[bv]);
      }
      std::vector<Matrix*> all;
      for (auto& g : ga) all.push_back(&g);
      for (auto& g : gb) all.push_back(&g);
      clip_global_norm(all, c.max_grad_norm);
      const double lr = scheduled_lr(c, step, total_steps);
      for (std::size_t i = 0; i < adapters.size(); ++i) {
        opt_a[i].step(adapters[i].a, ga[i], lr, c);
        opt_b[i].step(adapters[i].b, gb[i], lr, c);
      }
    }
    if (epoch == 1) result.initial_loss /= static_cast<double>(per_epoch);

    Checkpoint cp;
    cp.epoch = epoch;
    cp.adapters = adapters;
    cp.train_loss = loss_sum / static_cast<double>(per_epoch);
    cp.validation_ce = validation_ce(host, vocab, ds, adapters, c);
    if (log) {
      std::ostringstream os;
      os << name << " epoch " << epoch << ": loss " << cp.train_loss << ", validation CE " << cp.validation_ce;
      log(os.str());
    }
    result.checkpoints.push_back(std::move(cp));
  }
  return result;
}

/// Highest validation CE; the earliest epoch wins ties.
inline const Checkpoint& select_checkpoint(const std::vector<Checkpoint>& cps) {
  if (cps.empty()) throw std::invalid_argument("select_checkpoint: no checkpoints");
  std::size_t best = 0;
  for (std::size_t i = 1; i < cps.size(); ++i)
    if (cps[i].validation_ce > cps[best].validation_ce) best = i;
  return cps[best];
}

// ---- run directories ----------------------------------------------------------------------

/// Layout:
///   <dir>/epoch-<k>/<site>.lrc    one adapter file per site
///   <dir>/manifest.txt            key=value lines
inline std::string site_file_name(AttachmentSite s) { return s.to_string() + ".lrc"; }

inline void save_run(const std::filesystem::path& dir, const TrainResult& r, const TrainConfig& c) {
  std::filesystem::create_directories(dir);
  std::ostringstream m;
  m.precision(17);
  m << "seed=" << c.seed << '\n' << "config_hash=" << c.hash() << '\n' << "config=" << c.canonical() << '\n'
    << "initial_loss=" << r.initial_loss << '\n';
  for (const auto& cp : r.checkpoints) {
    const auto sub = dir / ("epoch-" + std::to_string(cp.epoch));
    std::filesystem::create_directories(sub);
    for (const auto& ad : cp.adapters) save_adapter(ad, sub / site_file_name(ad.site));
    m << "epoch." << cp.epoch << ".ce=" << cp.validation_ce << '\n'
      << "epoch." << cp.epoch << ".loss=" << cp.train_loss << '\n'
      << "epoch." << cp.epoch << ".sites=";
    for (std::size_t i = 0; i < cp.adapters.size(); ++i) m << (i ? "," : "") << cp.adapters[i].site.to_string();
    m << '\n';
  }
  if (!r.checkpoints.empty()) {
    const auto& best = select_checkpoint(r.checkpoints);
    m << "selected=" << best.epoch << '\n' << "selected.ce=" << best.validation_ce << '\n';
  }
  std::ofstream out(dir / "manifest.txt", std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + (dir / "manifest.txt").string());
  out << m.str();
}

/// Manifest of a run directory as key/value pairs.
inline std::map<std::string, std::string> read_manifest(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.txt");
  if (!in) throw std::runtime_error("missing run manifest " + (dir / "manifest.txt").string());
  std::map<std::string, std::string> kv;
  for (std::string line; std::getline(in, line);) {
    const auto eq = line.find('=');
    if (eq != std::string::npos) kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return kv;
}

/// Reloads every checkpoint listed in the manifest. A missing or damaged
/// adapter file is an error naming the file.
inline std::vector<Checkpoint> load_checkpoints(const std::filesystem::path& dir, std::uint32_t n_layers) {
  const auto kv = read_manifest(dir);
  std::vector<Checkpoint> out;
  for (std::size_t epoch = 1; kv.count("epoch." + std::to_string(epoch) + ".ce"); ++epoch) {
    const std::string key = "epoch." + std::to_string(epoch);
    Checkpoint cp;
    cp.epoch = epoch;
    cp.validation_ce = std::stod(kv.at(key + ".ce"));
    cp.train_loss = std::stod(kv.at(key + ".loss"));
    std::stringstream sites(kv.at(key + ".sites"));
    for (std::string s; std::getline(sites, s, ',');) {
      const auto path = dir / ("epoch-" + std::to_string(epoch)) / site_file_name(parse_site(s, n_layers));
      if (!std::filesystem::exists(path)) throw std::runtime_error("checkpoint file missing: " + path.string());
      cp.adapters.push_back(load_adapter(path));
    }
    out.push_back(std::move(cp));
  }
  if (out.empty()) throw std::runtime_error("run " + dir.string() + " lists no checkpoints");
  return out;
}

/// Re-selects the best checkpoint from disk and checks it against the
/// manifest's recorded choice.
inline Checkpoint load_selected(const std::filesystem::path& dir, std::uint32_t n_layers) {
  const auto cps = load_checkpoints(dir, n_layers);
  const Checkpoint& best = select_checkpoint(cps);
  const auto kv = read_manifest(dir);
  if (kv.count("selected") && std::stoul(kv.at("selected")) != best.epoch) {
    throw std::runtime_error("run " + dir.string() + ": manifest selects epoch " + kv.at("selected") +
                             " but checkpoints select " + std::to_string(best.epoch));
  }
  return best;
}

}  // namespace lrcompose
