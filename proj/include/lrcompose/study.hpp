// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "lrcompose/composition.hpp"
#include "lrcompose/data.hpp"
#include "lrcompose/evaluate.hpp"
#include "lrcompose/host.hpp"
#include "lrcompose/metrics.hpp"
#include "lrcompose/trainer.hpp"

namespace lrcompose {

// ---- configuration ------------------------------------------------------------------------

/// One individual dataset of a study.
struct DatasetEntry {
  std::string name;
  std::string family;
  std::optional<Slice> markers;
  std::optional<Slice> fillers;
  std::size_t train = 600;
  std::size_t validation = 40;
  std::size_t test_per_label = 20;
  std::size_t min_words = 12;
  std::size_t max_words = 24;
  double density = 0.5;
};

/// Everything a study needs. Loaded from an INI file; see configs/ and
/// docs/file-formats.md for the keys.
///
/// One study family gives the single-attribute layout (raw, one row per
/// dataset, the combined dataset, techniques over every subset). Two or more
/// families give the multi-attribute layout (raw, one combined row per
/// family, techniques over the combined modules and over all individual
/// modules), evaluated on a joint test set.
struct StudyConfig {
  HostConfig host;
  std::vector<FamilySpec> families;  ///< vocabulary families
  std::vector<std::string> study_families;
  std::vector<DatasetEntry> datasets;
  std::vector<CompositionStrategy> techniques{CompositionStrategy::OutputSum, CompositionStrategy::OutputAverage,
                                             CompositionStrategy::WeightAverageFactors};
  std::vector<std::uint64_t> seeds{8989, 8990, 8991};
  std::uint64_t data_seed = 8989;
  TrainConfig train;
  DecodeSettings decode;
  std::vector<std::string> sites;  ///< empty = every host site
  std::size_t ood_prompts = 35;
  std::size_t ood_min_words = 2;
  std::size_t ood_max_words = 4;
  std::size_t joint_test_per_label = 10;  ///< multi-attribute test set
  std::size_t eval_limit = 0;             ///< 0 = whole test split
  std::size_t jobs = 1;
  std::filesystem::path out = "study-out";

  bool multi() const noexcept { return study_families.size() > 1; }

  Vocabulary vocabulary() const { return Vocabulary(families, host.vocab_size); }

  /// Individual datasets that take part, in file order.
  std::vector<const DatasetEntry*> individuals() const {
    std::vector<const DatasetEntry*> out_;
    for (const auto& d : datasets)
      if (std::find(study_families.begin(), study_families.end(), d.family) != study_families.end())
        out_.push_back(&d);
    return out_;
  }
  std::vector<const DatasetEntry*> individuals(const std::string& family) const {
    std::vector<const DatasetEntry*> out_;
    for (const auto& d : datasets)
      if (d.family == family) out_.push_back(&d);
    return out_;
  }
  static std::string combined_name(const std::string& family) { return "combined_" + family; }
  static constexpr const char* kJointTest = "joint_test";

  std::vector<AttachmentSite> attachment_sites() const {
    if (sites.empty()) return HostModel::sites_of(host);
    std::vector<AttachmentSite> out_;
    for (const auto& s : sites) out_.push_back(parse_site(s, static_cast<std::uint32_t>(host.n_layers)));
    return out_;
  }

  /// Every module that is trained: individuals, then one combined per family.
  std::vector<std::string> module_names() const {
    std::vector<std::string> out_;
    for (const auto* d : individuals()) out_.push_back(d->name);
    for (const auto& f : study_families) out_.push_back(combined_name(f));
    return out_;
  }

  void validate() const {
    host.validate();
    train.validate();
    if (study_families.empty()) throw std::invalid_argument("study: no families selected");
    std::set<std::string> fams;
    for (const auto& f : families) fams.insert(f.name);
    for (const auto& f : study_families)
      if (!fams.count(f)) throw std::invalid_argument("study: family '" + f + "' is not in [vocab]");
    std::set<std::string> names;
    for (const auto& d : datasets) {
      if (!fams.count(d.family)) {
        throw std::invalid_argument("dataset '" + d.name + "': unknown family '" + d.family + "'");
      }
      if (!names.insert(d.name).second) throw std::invalid_argument("duplicate dataset '" + d.name + "'");
      if (d.name.find_first_of(",+/ \t") != std::string::npos) {
        throw std::invalid_argument("dataset name '" + d.name + "' may not contain , + / or spaces");
      }
    }
    for (const auto& f : study_families)
      if (individuals(f).empty()) throw std::invalid_argument("study: family '" + f + "' has no datasets");
    if (techniques.empty()) throw std::invalid_argument("study: no composition techniques");
    for (auto t : techniques) {
      if (is_reference_oracle(t)) {
        throw std::invalid_argument("study: '" + std::string(to_string(t)) +
                                    "' is a dense reference and cannot be attached to a host");
      }
    }
    if (seeds.empty()) throw std::invalid_argument("study: no seeds");
    if (jobs == 0) throw std::invalid_argument("study: jobs must be >= 1");
    (void)attachment_sites();
    (void)vocabulary();
  }

  static StudyConfig load(const std::filesystem::path& path);
};

namespace detail {

inline std::vector<std::string> split_list(const std::string& s, char sep = ',') {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, sep);) {
    const auto b = item.find_first_not_of(" \t");
    const auto e = item.find_last_not_of(" \t");
    if (b != std::string::npos) out.push_back(item.substr(b, e - b + 1));
  }
  return out;
}

inline Slice parse_slice(const std::string& s) {
  const auto colon = s.find(':');
  if (colon == std::string::npos) throw std::invalid_argument("slice '" + s + "' must look like begin:end");
  return {std::stoul(s.substr(0, colon)), std::stoul(s.substr(colon + 1))};
}

}  // namespace detail

inline StudyConfig StudyConfig::load(const std::filesystem::path& path) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  try {
    pt::read_ini(path.string(), tree);
  } catch (const pt::ini_parser_error& e) {
    throw std::runtime_error("config " + path.string() + ": " + e.what());
  }
  StudyConfig c;
  const std::set<std::string> known_sections{"study", "host", "vocab", "train", "decode"};
  try {
    if (auto h = tree.get_child_optional("host")) {
      c.host.n_layers = h->get("n_layers", c.host.n_layers);
      c.host.d_model = h->get("d_model", c.host.d_model);
      c.host.n_heads = h->get("n_heads", c.host.n_heads);
      c.host.d_ff = h->get("d_ff", c.host.d_ff);
      c.host.max_seq = h->get("max_seq", c.host.max_seq);
      c.host.seed = h->get("seed", c.host.seed);
    }
    c.host.vocab_size = tree.get("vocab.size", c.host.vocab_size);
    for (const auto& f : detail::split_list(tree.get<std::string>("vocab.families"))) {
      const std::string sec = "family." + f;
      const auto& node = tree.get_child(pt::ptree::path_type(sec, '/'));
      c.families.push_back({f, detail::split_list(node.get<std::string>("labels")),
                            node.get<std::size_t>("markers_per_label", 8)});
    }

    const auto& s = tree.get_child("study");
    c.study_families = detail::split_list(s.get<std::string>("families"));
    if (auto t = s.get_optional<std::string>("techniques")) {
      c.techniques.clear();
      for (const auto& x : detail::split_list(*t)) c.techniques.push_back(parse_strategy(x));
    }
    if (auto t = s.get_optional<std::string>("seeds")) {
      c.seeds.clear();
      for (const auto& x : detail::split_list(*t)) c.seeds.push_back(std::stoull(x));
    }
    c.data_seed = s.get("data_seed", c.data_seed);
    if (auto t = s.get_optional<std::string>("sites"); t && *t != "all") c.sites = detail::split_list(*t);
    c.ood_prompts = s.get("ood_prompts", c.ood_prompts);
    c.ood_min_words = s.get("ood_min_words", c.ood_min_words);
    c.ood_max_words = s.get("ood_max_words", c.ood_max_words);
    c.joint_test_per_label = s.get("joint_test_per_label", c.joint_test_per_label);
    c.eval_limit = s.get("eval_limit", c.eval_limit);
    c.jobs = s.get("jobs", c.jobs);
    if (auto o = s.get_optional<std::string>("out")) c.out = *o;

    if (auto t = tree.get_child_optional("train")) {
      TrainConfig& tc = c.train;
      tc.learning_rate = t->get("learning_rate", tc.learning_rate);
      if (auto v = t->get_optional<std::string>("scheduler")) tc.scheduler = parse_scheduler(*v);
      tc.epochs = t->get("epochs", tc.epochs);
      tc.batch_size = t->get("batch_size", tc.batch_size);
      tc.rank = t->get("rank", tc.rank);
      tc.alpha = t->get("alpha", tc.alpha);
      tc.dropout = t->get("dropout", tc.dropout);
      tc.max_grad_norm = t->get("max_grad_norm", tc.max_grad_norm);
      tc.warmup_ratio = t->get("warmup_ratio", tc.warmup_ratio);
      tc.weight_decay = t->get("weight_decay", tc.weight_decay);
      tc.validation_limit = t->get("validation_limit", tc.validation_limit);
    }
    if (auto d = tree.get_child_optional("decode")) {
      if (auto m = d->get_optional<std::string>("mode")) {
        if (*m == "greedy") c.decode.mode = DecodeMode::Greedy;
        else if (*m == "sample") c.decode.mode = DecodeMode::Sample;
        else throw std::invalid_argument("decode.mode must be greedy or sample, got '" + *m + "'");
      }
      c.decode.temperature = d->get("temperature", c.decode.temperature);
      c.decode.max_new = d->get("max_new", c.decode.max_new);
    }
    c.train.validation_decode = c.decode;

    for (const auto& [section, node] : tree) {
      if (section.rfind("dataset.", 0) == 0) {
        DatasetEntry d;
        d.name = section.substr(8);
        d.family = node.get<std::string>("family");
        if (auto v = node.get_optional<std::string>("markers")) d.markers = detail::parse_slice(*v);
        if (auto v = node.get_optional<std::string>("fillers")) d.fillers = detail::parse_slice(*v);
        d.train = node.get("train", d.train);
        d.validation = node.get("validation", d.validation);
        d.test_per_label = node.get("test_per_label", d.test_per_label);
        d.min_words = node.get("min_words", d.min_words);
        d.max_words = node.get("max_words", d.max_words);
        d.density = node.get("density", d.density);
        c.datasets.push_back(std::move(d));
      } else if (section.rfind("family.", 0) != 0 && !known_sections.count(section)) {
        throw std::invalid_argument("unknown section [" + section + "]");
      }
    }
  } catch (const pt::ptree_error& e) {
    throw std::runtime_error("config " + path.string() + ": " + e.what());
  }
  c.validate();
  return c;
}

// ---- row layout ---------------------------------------------------------------------------

struct Composition {
  CompositionStrategy technique;
  std::vector<std::size_t> subset;  ///< 0-based dataset indices, ascending
};

/// Subsets of {0..m-1} of size 2..m, by size and then lexicographically,
/// crossed with the techniques (technique-major).
inline std::vector<Composition> enumerate_compositions(std::size_t m,
                                                       const std::vector<CompositionStrategy>& techniques,
                                                       std::vector<std::string>* warnings = nullptr) {
  if (m < 2) {
    if (warnings) warnings->push_back("enumerate_compositions: m=" + std::to_string(m) + " gives no subsets");
    return {};
  }
  if (m > 20) throw std::invalid_argument("enumerate_compositions: m=" + std::to_string(m) + " is too large");
  std::vector<std::vector<std::size_t>> subsets;
  for (std::size_t k = 2; k <= m; ++k) {
    std::vector<std::size_t> idx(k);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    while (true) {
      subsets.push_back(idx);
      std::size_t i = k;
      while (i > 0 && idx[i - 1] == m - k + i - 1) --i;
      if (i == 0) break;
      ++idx[i - 1];
      for (std::size_t j = i; j < k; ++j) idx[j] = idx[j - 1] + 1;
    }
  }
  std::vector<Composition> out;
  for (auto t : techniques)
    for (const auto& s : subsets) out.push_back({t, s});
  return out;
}

enum class RowKind { Raw, Module, Combined, Composition };

inline std::string_view to_string(RowKind k) {
  switch (k) {
    case RowKind::Raw: return "raw";
    case RowKind::Module: return "module";
    case RowKind::Combined: return "combined";
    case RowKind::Composition: return "composition";
  }
  return "?";
}

struct StudyRow {
  std::string key;
  RowKind kind = RowKind::Raw;
  std::optional<CompositionStrategy> technique;
  std::vector<std::string> modules;
};

inline std::string join(const std::vector<std::string>& v, const std::string& sep) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? sep : "") + v[i];
  return out;
}

/// Rows of the results table in output order.
inline std::vector<StudyRow> study_rows(const StudyConfig& c, std::vector<std::string>* warnings = nullptr) {
  std::vector<StudyRow> rows{{"raw", RowKind::Raw, std::nullopt, {}}};
  std::vector<std::string> ind;
  for (const auto* d : c.individuals()) ind.push_back(d->name);
  if (!c.multi()) {
    for (const auto& n : ind) rows.push_back({"module:" + n, RowKind::Module, std::nullopt, {n}});
    const std::string comb = StudyConfig::combined_name(c.study_families[0]);
    rows.push_back({"combined:" + comb, RowKind::Combined, std::nullopt, {comb}});
    for (const auto& comp : enumerate_compositions(ind.size(), c.techniques, warnings)) {
      StudyRow r{std::string(to_string(comp.technique)) + "(", RowKind::Composition, comp.technique, {}};
      for (std::size_t i = 0; i < comp.subset.size(); ++i) {
        r.key += (i ? "+" : "") + std::to_string(comp.subset[i] + 1);
        r.modules.push_back(ind[comp.subset[i]]);
      }
      r.key += ")";
      rows.push_back(std::move(r));
    }
    return rows;
  }
  std::vector<std::string> combined;
  for (const auto& f : c.study_families) {
    combined.push_back(StudyConfig::combined_name(f));
    rows.push_back({"combined:" + combined.back(), RowKind::Combined, std::nullopt, {combined.back()}});
  }
  for (auto t : c.techniques) {
    rows.push_back({std::string(to_string(t)) + "(combined)", RowKind::Composition, t, combined});
    rows.push_back({std::string(to_string(t)) + "(individual)", RowKind::Composition, t, ind});
  }
  return rows;
}

/// 2 + m + p(2^m - m - 1).
inline std::size_t expected_row_count(std::size_t m, std::size_t p) {
  return 2 + m + p * ((std::size_t{1} << m) - m - 1);
}

// ---- paths --------------------------------------------------------------------------------

inline std::filesystem::path data_dir(const std::filesystem::path& out) { return out / "data"; }
inline std::filesystem::path run_dir(const std::filesystem::path& out, const std::string& module,
                                     std::uint64_t seed) {
  return out / "runs" / module / ("seed-" + std::to_string(seed));
}
inline std::filesystem::path results_dir(const std::filesystem::path& out) { return out / "results"; }

using LogFn = std::function<void(const std::string&)>;

// ---- gen-data -----------------------------------------------------------------------------

struct GeneratedData {
  std::vector<LabeledDataset> individuals;
  std::vector<LabeledDataset> combined;
  std::optional<LabeledDataset> joint_test;
  std::vector<std::string> warnings;
};

inline GeneratedData generate_study_data(const StudyConfig& c) {
  const Vocabulary vocab = c.vocabulary();
  GeneratedData g;
  for (const auto& f : c.study_families) {
    std::vector<LabeledDataset> sources;
    for (const auto* d : c.individuals(f)) {
      SynthSpec spec = make_synth_spec(vocab, d->name, {d->family}, d->markers, d->fillers);
      spec.train_size = d->train;
      spec.validation_size = d->validation;
      spec.test_per_label = d->test_per_label;
      spec.min_words = d->min_words;
      spec.max_words = d->max_words;
      spec.density = d->density;
      sources.push_back(gen_synthetic(spec, c.data_seed));
    }
    g.combined.push_back(build_combined(sources, c.data_seed, StudyConfig::combined_name(f), &g.warnings));
    for (auto& s : sources) g.individuals.push_back(std::move(s));
  }
  if (c.multi()) {
    SynthSpec spec = make_synth_spec(vocab, StudyConfig::kJointTest, c.study_families);
    spec.train_size = 1;
    spec.validation_size = 0;
    spec.test_per_label = c.joint_test_per_label;
    g.joint_test = gen_synthetic(spec, c.data_seed);
    g.joint_test->train.clear();
  }
  return g;
}

/// Writes every dataset of the study plus data/manifest.txt with one line
/// per dataset: "<name> <kind> train=<n> validation=<n> test=<n>".
inline void cmd_gen_data(const StudyConfig& c, const LogFn& log = {}) {
  const auto g = generate_study_data(c);
  const auto dir = data_dir(c.out);
  std::filesystem::create_directories(dir);
  std::ostringstream m;
  auto put = [&](const LabeledDataset& ds, const char* kind) {
    save_dataset(ds, dir);
    m << ds.name << ' ' << kind << " train=" << ds.train.size() << " validation=" << ds.validation.size()
      << " test=" << ds.test.size() << '\n';
    if (log) log("wrote " + ds.name + " (" + kind + ")");
  };
  for (const auto& ds : g.individuals) put(ds, "individual");
  for (const auto& ds : g.combined) put(ds, "combined");
  if (g.joint_test) put(*g.joint_test, "joint-test");
  const auto mpath = dir / "manifest.txt";
  std::ofstream out(mpath, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + mpath.string());
  out << m.str();
  std::ofstream w(dir / "warnings.txt", std::ios::binary | std::ios::trunc);
  for (const auto& s : g.warnings) w << s << '\n';
}

inline LabeledDataset load_study_dataset(const StudyConfig& c, const std::string& name) {
  const auto dir = data_dir(c.out);
  if (!std::filesystem::exists(dir / (name + ".manifest"))) {
    throw std::runtime_error("dataset '" + name + "' not found under " + dir.string() + " (run gen-data first)");
  }
  return load_dataset(dir, name);
}

// ---- train --------------------------------------------------------------------------------

inline TrainConfig train_config_for(const StudyConfig& c, std::uint64_t seed) {
  TrainConfig tc = c.train;
  tc.seed = seed;
  tc.validation_decode = c.decode;
  tc.validation_decode.seed = seed;
  return tc;
}

/// Trains one module for each of `seeds` and writes its run directories.
inline void cmd_train(const StudyConfig& c, const std::string& module, const std::vector<std::uint64_t>& seeds,
                      const LogFn& log = {}) {
  const auto names = c.module_names();
  if (std::find(names.begin(), names.end(), module) == names.end()) {
    throw std::invalid_argument("train: '" + module + "' is not a module of this study (have " + join(names, ", ") +
                                ")");
  }
  const LabeledDataset ds = load_study_dataset(c, module);
  const Vocabulary vocab = c.vocabulary();
  const HostModel host = HostModel::build(c.host);
  const auto sites = c.attachment_sites();
  for (std::uint64_t seed : seeds) {
    const TrainConfig tc = train_config_for(c, seed);
    const auto r = train_adapters(host, vocab, ds, sites, tc, module, log);
    save_run(run_dir(c.out, module, seed), r, tc);
    if (log) {
      const auto& best = select_checkpoint(r.checkpoints);
      log(module + " seed " + std::to_string(seed) + ": selected epoch " + std::to_string(best.epoch) +
          " (validation CE " + std::to_string(best.validation_ce) + ")");
    }
  }
}

// ---- results table ------------------------------------------------------------------------

/// One evaluation set: its name, schema and either labeled items or prompts.
struct EvalSet {
  std::string name;
  Schema schema;
  bool in_domain = true;
  std::vector<LabeledText> items;
  std::vector<std::vector<int>> prompts;
};

/// Metric column names for the given evaluation sets, in CSV order.
inline std::vector<std::string> metric_columns(const std::vector<EvalSet>& sets) {
  std::vector<std::string> cols;
  for (const auto& s : sets) {
    for (const char* m : {"distinct1", "distinct2", "distinct3", "slor", "ce"}) cols.push_back(s.name + "." + m);
    if (s.schema.size() > 1)
      for (const auto& a : s.schema) cols.push_back(s.name + ".ce." + a.name);
  }
  cols.push_back("ce.in_domain");
  cols.push_back("ce.all");
  return cols;
}

struct ResultRow {
  StudyRow row;
  std::vector<std::vector<double>> per_seed;  ///< [seed][column]
};

struct ResultsTable {
  std::vector<std::string> columns;
  std::vector<std::uint64_t> seeds;
  std::vector<ResultRow> rows;

  double mean(std::size_t r, std::size_t col) const {
    double s = 0.0;
    for (const auto& v : rows[r].per_seed) s += v[col];
    return s / static_cast<double>(rows[r].per_seed.size());
  }
  /// Sample standard deviation (n - 1); NaN with a single seed.
  double stddev(std::size_t r, std::size_t col) const {
    const auto& ps = rows[r].per_seed;
    if (ps.size() < 2) return std::nan("");
    const double m = mean(r, col);
    double ss = 0.0;
    for (const auto& v : ps) ss += (v[col] - m) * (v[col] - m);
    return std::sqrt(ss / static_cast<double>(ps.size() - 1));
  }

  std::string header() const {
    std::string h = "row,kind,technique,modules,seeds";
    for (const auto& c : columns) h += "," + c + ".mean," + c + ".std";
    return h;
  }

  static std::string fmt(double v) {
    if (std::isnan(v)) return "nan";
    char buf[48];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    std::string s(buf);
    return s == "-0.000000" ? "0.000000" : s;
  }

  std::string to_csv() const {
    std::ostringstream os;
    os << header() << '\n';
    for (std::size_t r = 0; r < rows.size(); ++r) {
      const auto& row = rows[r].row;
      os << row.key << ',' << to_string(row.kind) << ','
         << (row.technique ? std::string(to_string(*row.technique)) : "") << ',' << join(row.modules, "+") << ','
         << rows[r].per_seed.size();
      for (std::size_t c = 0; c < columns.size(); ++c) os << ',' << fmt(mean(r, c)) << ',' << fmt(stddev(r, c));
      os << '\n';
    }
    return os.str();
  }

  /// Long form: one line per row and seed.
  std::string to_seed_csv() const {
    std::ostringstream os;
    os << "row,seed";
    for (const auto& c : columns) os << ',' << c;
    os << '\n';
    for (const auto& rr : rows) {
      for (std::size_t s = 0; s < rr.per_seed.size(); ++s) {
        os << rr.row.key << ',' << seeds[s];
        for (double v : rr.per_seed[s]) os << ',' << fmt(v);
        os << '\n';
      }
    }
    return os.str();
  }

  /// Aligned text: one block per evaluation set with "mean (std)" cells.
  std::string to_text() const {
    std::ostringstream os;
    auto cell = [&](std::size_t r, std::size_t c) {
      char buf[64];
      const double sd = stddev(r, c);
      if (std::isnan(sd)) std::snprintf(buf, sizeof buf, "%.2f", mean(r, c));
      else std::snprintf(buf, sizeof buf, "%.2f (%.2f)", mean(r, c), sd);
      return std::string(buf);
    };
    std::map<std::string, std::vector<std::size_t>> groups;
    std::vector<std::string> order;
    for (std::size_t c = 0; c < columns.size(); ++c) {
      const auto dot = columns[c].find('.');
      std::string g = columns[c].substr(0, dot);
      if (g == "ce") g = "average";
      if (!groups.count(g)) order.push_back(g);
      groups[g].push_back(c);
    }
    std::size_t key_w = 3;
    for (const auto& rr : rows) key_w = std::max(key_w, rr.row.key.size());
    for (const auto& g : order) {
      const auto& cols = groups[g];
      std::vector<std::size_t> w;
      for (std::size_t c : cols) {
        std::size_t width = columns[c].size() - (g == "average" ? 0 : g.size() + 1);
        for (std::size_t r = 0; r < rows.size(); ++r) width = std::max(width, cell(r, c).size());
        w.push_back(width);
      }
      os << "== " << g << " ==\n" << std::left << std::setw(static_cast<int>(key_w)) << "row";
      for (std::size_t i = 0; i < cols.size(); ++i) {
        const std::string name = g == "average" ? columns[cols[i]] : columns[cols[i]].substr(g.size() + 1);
        os << "  " << std::right << std::setw(static_cast<int>(w[i])) << name;
      }
      os << '\n';
      for (std::size_t r = 0; r < rows.size(); ++r) {
        os << std::left << std::setw(static_cast<int>(key_w)) << rows[r].row.key;
        for (std::size_t i = 0; i < cols.size(); ++i)
          os << "  " << std::right << std::setw(static_cast<int>(w[i])) << cell(r, cols[i]);
        os << '\n';
      }
      os << '\n';
    }
    return os.str();
  }
};

// ---- run-study ----------------------------------------------------------------------------

inline std::vector<EvalSet> study_eval_sets(const StudyConfig& c) {
  const Vocabulary vocab = c.vocabulary();
  std::vector<EvalSet> sets;
  auto limited = [&](std::vector<LabeledText> items) {
    if (c.eval_limit && items.size() > c.eval_limit) {
      // keep every joint label represented: take a strided subset
      std::vector<LabeledText> out;
      const double step = static_cast<double>(items.size()) / static_cast<double>(c.eval_limit);
      for (std::size_t i = 0; i < c.eval_limit; ++i)
        out.push_back(items[static_cast<std::size_t>(static_cast<double>(i) * step)]);
      return out;
    }
    return items;
  };
  Schema schema;
  if (!c.multi()) {
    for (const auto* d : c.individuals()) {
      auto ds = load_study_dataset(c, d->name);
      schema = ds.schema;
      sets.push_back({d->name, ds.schema, true, limited(ds.test), {}});
    }
  } else {
    auto ds = load_study_dataset(c, StudyConfig::kJointTest);
    schema = ds.schema;
    sets.push_back({StudyConfig::kJointTest, ds.schema, true, limited(ds.test), {}});
  }
  if (c.ood_prompts > 0) {
    sets.push_back({"ood", schema, false, {},
                    make_ood_prompts(vocab, c.ood_prompts, c.ood_min_words, c.ood_max_words, c.data_seed)});
  }
  return sets;
}

/// Module runs a row needs that are not on disk, as "<module>/seed-<s>".
inline std::vector<std::string> missing_runs(const StudyConfig& c, const std::vector<StudyRow>& rows,
                                             std::vector<std::string>* absent_rows = nullptr) {
  std::set<std::string> missing;
  for (const auto& r : rows) {
    bool row_missing = false;
    for (const auto& m : r.modules) {
      for (auto s : c.seeds) {
        if (!std::filesystem::exists(run_dir(c.out, m, s) / "manifest.txt")) {
          missing.insert(m + "/seed-" + std::to_string(s));
          row_missing = true;
        }
      }
    }
    if (row_missing && absent_rows) absent_rows->push_back(r.key);
  }
  return {missing.begin(), missing.end()};
}

/// Runs `work(i)` for i in [0, n) on up to `jobs` threads. The first
/// exception is rethrown after every worker has stopped.
inline void parallel_for(std::size_t n, std::size_t jobs, const std::function<void(std::size_t)>& work) {
  if (jobs <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) work(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex mu;
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < std::min(jobs, n); ++t) {
    pool.emplace_back([&] {
      for (std::size_t i; (i = next++) < n;) {
        try {
          work(i);
        } catch (...) {
          std::lock_guard lock(mu);
          if (!error) error = std::current_exception();
          next = n;
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

/// Corpus for the fluency unigram and bigram models: every train item of the
/// study's individual datasets.
inline FluencyScorers study_fluency(const StudyConfig& c) {
  std::vector<std::vector<int>> corpus;
  for (const auto* d : c.individuals()) {
    const auto ds = load_study_dataset(c, d->name);
    for (const auto& item : ds.train) corpus.push_back(item.tokens);
  }
  HostConfig scorer = c.host;
  scorer.seed = c.host.seed ^ fnv1a("fluency-scorer");
  return FluencyScorers::build(c.host.vocab_size, corpus, scorer);
}

/// Metric values of one row for one seed, in metric_columns order.
inline std::vector<double> evaluate_row(const StudyConfig& c, const HostModel& base, const Vocabulary& vocab,
                                        const StudyRow& row, std::uint64_t seed, const std::vector<EvalSet>& sets,
                                        const FluencyScorers& fluency, std::vector<std::string>* warnings) {
  HostModel host = base;
  for (const auto& m : row.modules) {
    const auto dir = run_dir(c.out, m, seed);
    for (const auto& ad : load_selected(dir, static_cast<std::uint32_t>(c.host.n_layers)).adapters) host.attach(ad);
  }
  if (row.technique) host.set_strategy_all(*row.technique);

  std::vector<double> values;
  double in_sum = 0.0, all_sum = 0.0;
  std::size_t in_n = 0;
  for (const auto& s : sets) {
    DecodeSettings ds = c.decode;
    ds.seed = seed ^ fnv1a("eval:" + s.name);
    const auto records = s.prompts.empty() ? generate_in_domain(host, vocab, s.schema, s.items, ds)
                                           : generate_prompted(host, vocab, s.schema, s.prompts, ds);
    const auto ens = make_ensembles(vocab, s.schema);
    std::vector<std::string> local;
    const MetricReport r = evaluate_records(records, ens, &fluency, &local);
    for (auto& w : local) warnings->push_back(row.key + " seed " + std::to_string(seed) + " " + s.name + ": " + w);
    values.insert(values.end(), {r.distinct1, r.distinct2, r.distinct3, r.slor, r.ce});
    if (s.schema.size() > 1)
      for (std::size_t a = 0; a < s.schema.size(); ++a)
        values.push_back(control_effectiveness_single(records, ens[a], a).ce);
    all_sum += r.ce;
    if (s.in_domain) {
      in_sum += r.ce;
      ++in_n;
    }
  }
  values.push_back(in_n ? in_sum / static_cast<double>(in_n) : std::nan(""));
  values.push_back(all_sum / static_cast<double>(sets.size()));
  return values;
}

struct StudyOptions {
  bool train_missing = false;
};

/// Evaluates every row for every seed and writes results/results.csv,
/// results/results_seeds.csv, results/results.txt and results/warnings.txt.
inline ResultsTable cmd_run_study(const StudyConfig& c, const StudyOptions& opt = {}, const LogFn& log = {}) {
  std::vector<std::string> warnings;
  const auto rows = study_rows(c, &warnings);
  std::vector<std::string> absent_rows;
  const auto missing = missing_runs(c, rows, &absent_rows);
  if (!missing.empty()) {
    if (!opt.train_missing) {
      throw std::runtime_error("missing adapters for rows: " + join(absent_rows, ", ") + " (absent runs: " +
                               join(missing, ", ") + "; train them or pass --train-missing)");
    }
    if (!std::filesystem::exists(data_dir(c.out) / "manifest.txt")) cmd_gen_data(c, log);
    std::map<std::string, std::vector<std::uint64_t>> todo;
    for (const auto& m : missing) {
      const auto slash = m.rfind("/seed-");
      todo[m.substr(0, slash)].push_back(std::stoull(m.substr(slash + 6)));
    }
    for (const auto& [module, seeds] : todo) cmd_train(c, module, seeds, log);
  }

  const Vocabulary vocab = c.vocabulary();
  const HostModel host = HostModel::build(c.host);
  const auto sets = study_eval_sets(c);
  const FluencyScorers fluency = study_fluency(c);

  ResultsTable table;
  table.columns = metric_columns(sets);
  table.seeds = c.seeds;
  const std::size_t n_seeds = c.seeds.size();
  std::vector<std::vector<double>> values(rows.size() * n_seeds);
  std::vector<std::vector<std::string>> task_warnings(values.size());
  std::mutex log_mu;
  parallel_for(values.size(), c.jobs, [&](std::size_t i) {
    const auto& row = rows[i / n_seeds];
    const auto seed = c.seeds[i % n_seeds];
    values[i] = evaluate_row(c, host, vocab, row, seed, sets, fluency, &task_warnings[i]);
    if (log) {
      std::lock_guard lock(log_mu);
      log("evaluated " + row.key + " seed " + std::to_string(seed));
    }
  });
  for (std::size_t r = 0; r < rows.size(); ++r) {
    ResultRow rr{rows[r], {}};
    for (std::size_t s = 0; s < n_seeds; ++s) rr.per_seed.push_back(std::move(values[r * n_seeds + s]));
    table.rows.push_back(std::move(rr));
  }
  for (auto& tw : task_warnings) warnings.insert(warnings.end(), tw.begin(), tw.end());

  const auto dir = results_dir(c.out);
  std::filesystem::create_directories(dir);
  auto write = [&](const char* name, const std::string& text) {
    std::ofstream out(dir / name, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + (dir / name).string());
    out << text;
  };
  write("results.csv", table.to_csv());
  write("results_seeds.csv", table.to_seed_csv());
  write("results.txt", table.to_text());
  std::string w;
  for (const auto& s : warnings) w += s + '\n';
  write("warnings.txt", w);
  return table;
}

// ---- correlate ----------------------------------------------------------------------------

/// A results CSV as row key -> column -> value.
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::string> keys;
  std::map<std::string, std::map<std::string, std::string>> cells;

  static CsvTable read(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read " + path.string());
    CsvTable t;
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error(path.string() + ": empty file");
    t.header = detail::split_list(line);
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      std::vector<std::string> f;
      std::stringstream ss(line);
      for (std::string x; std::getline(ss, x, ',');) f.push_back(x);
      if (line.back() == ',') f.emplace_back();
      if (f.size() != t.header.size()) {
        throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": expected " +
                                 std::to_string(t.header.size()) + " fields, got " + std::to_string(f.size()));
      }
      if (t.cells.count(f[0])) throw std::runtime_error(path.string() + ": duplicate row '" + f[0] + "'");
      t.keys.push_back(f[0]);
      for (std::size_t i = 0; i < f.size(); ++i) t.cells[f[0]][t.header[i]] = f[i];
    }
    return t;
  }
};

struct Correlation {
  std::string column;
  std::size_t n = 0;
  std::optional<double> pearson;   ///< empty when a column has zero variance
  std::optional<double> spearman;
};

/// Pearson and Spearman between the CE mean columns shared by two results
/// tables, paired by row key. Both tables must hold the same row keys.
inline std::vector<Correlation> correlate_tables(const CsvTable& a, const CsvTable& b) {
  std::set<std::string> ka(a.keys.begin(), a.keys.end()), kb(b.keys.begin(), b.keys.end());
  if (ka != kb) {
    std::vector<std::string> only_a, only_b;
    std::set_difference(ka.begin(), ka.end(), kb.begin(), kb.end(), std::back_inserter(only_a));
    std::set_difference(kb.begin(), kb.end(), ka.begin(), ka.end(), std::back_inserter(only_b));
    throw std::invalid_argument("correlate: row keys differ (only in first: " + join(only_a, " ") +
                                "; only in second: " + join(only_b, " ") + ")");
  }
  std::vector<Correlation> out;
  for (const auto& col : a.header) {
    if (col.size() <= 5 || col.compare(col.size() - 5, 5, ".mean") != 0) continue;
    const std::string name = col.substr(0, col.size() - 5);
    const bool ce_col = name.rfind("ce.", 0) == 0 || name.find(".ce.") != std::string::npos ||
                        (name.size() > 3 && name.compare(name.size() - 3, 3, ".ce") == 0);
    if (!ce_col || std::find(b.header.begin(), b.header.end(), col) == b.header.end()) continue;
    std::vector<double> x, y;
    for (const auto& k : a.keys) {
      x.push_back(std::stod(a.cells.at(k).at(col)));
      y.push_back(std::stod(b.cells.at(k).at(col)));
    }
    Correlation c{name, x.size(), std::nullopt, std::nullopt};
    try {
      c.pearson = pearson(x, y);
    } catch (const std::invalid_argument&) {
    }
    try {
      c.spearman = spearman(x, y);
    } catch (const std::invalid_argument&) {
    }
    out.push_back(std::move(c));
  }
  if (out.empty()) throw std::invalid_argument("correlate: tables share no CE columns");
  return out;
}

/// "column,n,pearson,spearman" lines; undefined coefficients print as "nan".
inline std::string correlation_csv(const std::vector<Correlation>& cs) {
  std::ostringstream os;
  os << "column,n,pearson,spearman\n";
  for (const auto& c : cs)
    os << c.column << ',' << c.n << ',' << ResultsTable::fmt(c.pearson.value_or(std::nan(""))) << ','
       << ResultsTable::fmt(c.spearman.value_or(std::nan(""))) << '\n';
  return os.str();
}

inline std::vector<Correlation> cmd_correlate(const std::filesystem::path& a, const std::filesystem::path& b) {
  return correlate_tables(CsvTable::read(a), CsvTable::read(b));
}

}  // namespace lrcompose
