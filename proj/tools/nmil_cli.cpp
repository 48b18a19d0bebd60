// SPDX-License-Identifier: Apache-2.0
//
// Command-line entry point: dataset generation, training runs, attention
// export, and the full results grid.

#include <iostream>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "nmil/errors.hpp"
#include "nmil/experiment.hpp"

namespace {

struct CliOptions {
  nmil::RunConfig cfg;
  std::string experiment = "exp1";
  std::string architecture = "nmil";
  std::string attention = "on";
  std::string aggregator = "sum";
  std::string fanouts;  // e.g. "3-6,4-8"
  std::string model_path;
  std::string manifest_path;
};

std::vector<nmil::FanOut> parse_fanouts(const std::string& text) {
  std::vector<nmil::FanOut> fans;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, ',')) {
    const auto dash = part.find('-');
    if (dash == std::string::npos)
      throw nmil::ContractError("fan-out must look like min-max, got: " + part);
    fans.push_back({static_cast<std::size_t>(std::stoul(part.substr(0, dash))),
                    static_cast<std::size_t>(std::stoul(part.substr(dash + 1)))});
  }
  if (fans.empty()) throw nmil::ContractError("empty fan-out list");
  return fans;
}

void resolve(CliOptions& opt) {
  opt.cfg.experiment = nmil::experiment_from_string(opt.experiment);
  opt.cfg.architecture = nmil::architecture_from_string(opt.architecture);
  if (opt.attention != "on" && opt.attention != "off")
    throw nmil::ContractError("--attention must be on or off");
  opt.cfg.attention = opt.attention == "on";
  opt.cfg.aggregator = nmil::aggregator_from_string(opt.aggregator);
  if (!opt.fanouts.empty()) opt.cfg.fan_outs = parse_fanouts(opt.fanouts);
}

void add_common_options(CLI::App* cmd, CliOptions& opt) {
  cmd->add_option("--experiment", opt.experiment, "exp1, exp2 or exp3");
  cmd->add_option("--architecture", opt.architecture, "mil or nmil");
  cmd->add_option("--attention", opt.attention, "on or off");
  cmd->add_option("--aggregator", opt.aggregator, "mean, max or sum");
  cmd->add_option("--levels", opt.cfg.levels, "nesting depth (0 = derived)");
  cmd->add_option("--seed", opt.cfg.seed, "master seed");
  cmd->add_option("--data-dir", opt.cfg.data_dir, "directory with the IDX files");
  cmd->add_flag("--synthetic", opt.cfg.synthetic, "use the synthetic instance pool");
  cmd->add_option("--out", opt.cfg.out_dir, "output directory");
  cmd->add_option("--positive-class", opt.cfg.positive_class, "positive instance class");
  cmd->add_option("--positive-fraction", opt.cfg.positive_fraction,
                  "target positive sample fraction");
  cmd->add_option("--fanouts", opt.fanouts, "per-level bag sizes, e.g. 3-6,4-8");
  cmd->add_option("--pool-limit", opt.cfg.pool_limit, "cap on loaded training instances");
  cmd->add_option("--synth-dim", opt.cfg.synth_dim, "synthetic pool dimension");
  cmd->add_option("--synth-per-class", opt.cfg.synth_per_class,
                  "synthetic instances per class");
}

void add_train_options(CLI::App* cmd, CliOptions& opt) {
  cmd->add_option("--train-samples", opt.cfg.train_samples, "training samples to generate");
  cmd->add_option("--test-samples", opt.cfg.test_samples, "test samples to generate");
  cmd->add_option("--lr", opt.cfg.train.learning_rate, "SGD learning rate");
  cmd->add_option("--max-epochs", opt.cfg.train.max_epochs, "epoch cap");
  cmd->add_option("--patience", opt.cfg.train.patience, "early-stopping patience");
  cmd->add_option("--val-fraction", opt.cfg.train.validation_fraction,
                  "validation split fraction");
  cmd->add_option("--threshold", opt.cfg.train.threshold, "prediction threshold");
  cmd->add_option("--hidden-dim", opt.cfg.hidden_dim, "extractor hidden width");
  cmd->add_option("--embed-dim", opt.cfg.embed_dim, "embedding dimension");
  cmd->add_option("--attention-dim", opt.cfg.attention_dim, "attention hidden dimension");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"nested multiple instance learning with gated attention"};
  app.set_config("--config");
  app.require_subcommand(1);

  CliOptions opt;

  CLI::App* generate = app.add_subcommand("generate", "generate a dataset manifest");
  add_common_options(generate, opt);
  generate->add_option("--samples", opt.cfg.train_samples, "samples to generate");

  CLI::App* train = app.add_subcommand("train", "train and evaluate one model");
  add_common_options(train, opt);
  add_train_options(train, opt);

  CLI::App* attend = app.add_subcommand("attend", "export attention records for a model");
  attend->add_option("--model", opt.model_path, "model file")->required();
  attend->add_option("--manifest", opt.manifest_path, "dataset manifest")->required();
  attend->add_option("--data-dir", opt.cfg.data_dir, "directory with the IDX files");
  attend->add_option("--out", opt.cfg.out_dir, "output directory");
  attend->add_flag("--svg", opt.cfg.svg, "emit per-sample bar charts");
  attend->add_option("--svg-samples", opt.cfg.svg_samples, "samples to chart");

  CLI::App* table1 = app.add_subcommand("table1", "run the architecture/attention grid");
  add_common_options(table1, opt);
  add_train_options(table1, opt);

  CLI11_PARSE(app, argc, argv);

  try {
    if (generate->parsed()) {
      resolve(opt);
      nmil::cmd_generate(opt.cfg);
    } else if (train->parsed()) {
      resolve(opt);
      nmil::cmd_train(opt.cfg);
    } else if (attend->parsed()) {
      nmil::cmd_attend(opt.model_path, opt.manifest_path, opt.cfg);
    } else if (table1->parsed()) {
      resolve(opt);
      nmil::cmd_table1(opt.cfg);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
