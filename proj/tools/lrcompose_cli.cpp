// SPDX-License-Identifier: Apache-2.0
// lrcompose: generate study data, train modules, run the composition study
// and correlate result tables.

#include <CLI11.hpp>

#include <chrono>
#include <fstream>
#include <iostream>

#include "lrcompose/study.hpp"

using namespace lrcompose;

namespace {

struct Common {
  std::string config;
  std::string out;
  std::vector<std::uint64_t> seeds;
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--config", c.config, "study configuration (INI)")->required()->check(CLI::ExistingFile);
  sub->add_option("--out", c.out, "output directory (overrides [study] out)");
  sub->add_option("--seed", c.seeds, "seed to use instead of [study] seeds; repeatable");
}

StudyConfig load(const Common& c) {
  StudyConfig cfg = StudyConfig::load(c.config);
  if (!c.out.empty()) cfg.out = c.out;
  if (!c.seeds.empty()) cfg.seeds = c.seeds;
  return cfg;
}

void log_line(const std::string& s) {
  static const auto t0 = std::chrono::steady_clock::now();
  const double t = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::cerr << "[" << std::fixed << std::setprecision(1) << t << "s] " << s << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Low-rank adapter composition study"};
  app.require_subcommand(1);

  Common gen_opts;
  auto* gen = app.add_subcommand("gen-data", "write the study's datasets and manifest");
  add_common(gen, gen_opts);

  Common train_opts;
  std::vector<std::string> modules;
  auto* train = app.add_subcommand("train", "train modules for every seed");
  add_common(train, train_opts);
  train->add_option("--dataset", modules, "module to train (default: all); repeatable");

  Common study_opts;
  bool train_missing = false;
  auto* study = app.add_subcommand("run-study", "evaluate every row and write the result tables");
  add_common(study, study_opts);
  study->add_flag("--train-missing", train_missing, "generate data and train any absent runs first");

  std::string table_a, table_b, corr_out;
  auto* corr = app.add_subcommand("correlate", "correlate the CE columns of two result tables");
  corr->add_option("first", table_a, "results.csv")->required()->check(CLI::ExistingFile);
  corr->add_option("second", table_b, "results.csv")->required()->check(CLI::ExistingFile);
  corr->add_option("--out", corr_out, "write the report here instead of stdout");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      cmd_gen_data(load(gen_opts), log_line);
    } else if (*train) {
      const StudyConfig cfg = load(train_opts);
      if (modules.empty()) modules = cfg.module_names();
      for (const auto& m : modules) cmd_train(cfg, m, cfg.seeds, log_line);
    } else if (*study) {
      const StudyConfig cfg = load(study_opts);
      const auto table = cmd_run_study(cfg, {train_missing}, log_line);
      std::cout << table.to_text();
      log_line("wrote " + results_dir(cfg.out).string());
    } else if (*corr) {
      const std::string report = correlation_csv(cmd_correlate(table_a, table_b));
      if (corr_out.empty()) {
        std::cout << report;
      } else {
        std::ofstream out(corr_out, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot write " + corr_out);
        out << report;
      }
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
