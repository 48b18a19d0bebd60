// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "nmil/bagdata.hpp"
#include "nmil/model.hpp"
#include "nmil/train.hpp"

// Reproducible experiment runs: dataset generation, training, evaluation,
// attention export, and the full architecture × attention grid. Every run is
// pinned by one master seed; see derive_seed() for the sub-stream layout.

namespace nmil {

enum class Architecture { mil, nmil };

const char* architecture_name(Architecture a);
Architecture architecture_from_string(const std::string& s);

struct RunConfig {
  Experiment experiment = Experiment::exp1;
  Architecture architecture = Architecture::nmil;
  bool attention = true;
  Aggregator aggregator = Aggregator::sum;
  int levels = 0;  // 0 = derived from experiment/architecture

  // dataset
  std::size_t train_samples = 400;
  std::size_t test_samples = 200;
  int positive_class = 9;
  double positive_fraction = 0.5;
  std::vector<FanOut> fan_outs;  // empty = experiment defaults

  // model
  std::size_t hidden_dim = 128;
  std::size_t embed_dim = 64;
  std::size_t attention_dim = 64;

  TrainConfig train;

  // instance pool
  bool synthetic = false;
  std::string data_dir;
  std::size_t pool_limit = 0;  // idx pools; 0 = everything
  std::size_t synth_dim = 32;
  std::size_t synth_per_class = 300;
  double synth_noise = 0.1;

  std::uint64_t seed = 1;
  std::string out_dir = "out";
  bool svg = false;
  std::size_t svg_samples = 3;
  bool quiet = false;
};

// Fills derived fields (levels) and rejects invalid combinations, e.g. an
// exp3 MIL run.
void validate(RunConfig& cfg);

// Sub-stream seeds derived from the master seed (splitmix64).
enum class SeedStream : std::uint64_t {
  train_pool = 1,
  test_pool = 2,
  train_data = 3,
  test_data = 4,
  init = 5,
  shuffle = 6,
};
std::uint64_t derive_seed(std::uint64_t master, SeedStream stream);

struct RunReport {
  RunConfig config;
  std::string kernel_lane;
  std::string train_checksum;
  std::string test_checksum;
  std::size_t train_count = 0;
  std::size_t test_count = 0;
  double train_positive_fraction = 0.0;
  double test_positive_fraction = 0.0;
  TrainResult training;
  Metrics test_metrics;
  std::map<int, double> localization_auc;  // per level, weak-positive test samples
  double duration_seconds = 0.0;
  std::string report_checksum;  // over everything except the duration
};

std::string report_to_json(const RunReport& report);

// Pools for the configured source. Train and test draw from distinct pools
// (IDX train/t10k files, or two synthetic seeds).
InstancePool make_pool(const RunConfig& cfg, bool train_split);

// Rebuild the pool a manifest was generated from; idx manifests resolve
// their file names against data_dir when it is non-empty.
InstancePool pool_from_manifest(const std::string& manifest_path, const std::string& data_dir);

// generate → train → evaluate → attention analysis; writes
// train_manifest.json, test_manifest.json, model.nmil, history.csv and
// report.json into cfg.out_dir.
RunReport cmd_train(const RunConfig& cfg);

// Dataset generation only; writes manifest.json into cfg.out_dir.
std::string cmd_generate(const RunConfig& cfg);

// Attention export for a trained model against a manifest: attention.csv
// plus optional per-sample SVG bar charts.
void cmd_attend(const std::string& model_path, const std::string& manifest_path,
                const RunConfig& cfg);

struct Table1Cell {
  Experiment experiment;
  Architecture architecture;
  bool attention = true;
  std::optional<Metrics> metrics;  // empty = the sub-run failed
  std::string error;
};

struct Table1Result {
  std::vector<Table1Cell> cells;
  std::string rendered;  // text table
};

// The {MIL, NMIL} × {w/o Att, w/ Att} grid for exp1/exp2 plus the NMIL rows
// for exp3. Failed cells are marked and the grid continues.
Table1Result cmd_table1(const RunConfig& base);

}  // namespace nmil
