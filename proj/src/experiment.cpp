// SPDX-License-Identifier: Apache-2.0

#include "nmil/experiment.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "json.hpp"
#include "nmil/errors.hpp"
#include "nmil/kernels.hpp"
#include "nmil/svg.hpp"

namespace nmil {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

const char* architecture_name(Architecture a) {
  return a == Architecture::mil ? "mil" : "nmil";
}

Architecture architecture_from_string(const std::string& s) {
  if (s == "mil") return Architecture::mil;
  if (s == "nmil") return Architecture::nmil;
  throw ContractError("unknown architecture: " + s);
}

std::uint64_t derive_seed(std::uint64_t master, SeedStream stream) {
  // splitmix64 over the master seed and the stream tag
  std::uint64_t z = master + 0x9e3779b97f4a7c15ULL * (static_cast<std::uint64_t>(stream) + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

void validate(RunConfig& cfg) {
  int derived = 0;
  switch (cfg.experiment) {
    case Experiment::exp1:
      derived = cfg.architecture == Architecture::mil ? 1 : 2;
      break;
    case Experiment::exp2:
      derived = 2;
      break;
    case Experiment::exp3:
      if (cfg.architecture == Architecture::mil)
        throw ContractError("exp3 requires the nmil architecture");
      derived = 3;
      break;
  }
  if (cfg.levels == 0) cfg.levels = derived;
  if (cfg.levels != derived)
    throw ContractError(std::string(experiment_name(cfg.experiment)) + " with " +
                        architecture_name(cfg.architecture) + " requires " +
                        std::to_string(derived) + " levels, got " + std::to_string(cfg.levels));
  if (cfg.fan_outs.empty()) cfg.fan_outs = default_fan_outs(cfg.experiment, cfg.levels);
  if (cfg.fan_outs.size() != static_cast<std::size_t>(cfg.levels))
    throw ContractError("fan-out count does not match the level count");
  if (!cfg.synthetic && cfg.data_dir.empty())
    throw ContractError("either --synthetic or --data-dir is required");
  if (cfg.train_samples < 2 || cfg.test_samples < 1)
    throw ContractError("sample counts too small");
}

InstancePool make_pool(const RunConfig& cfg, bool train_split) {
  if (cfg.synthetic) {
    SynthSpec s;
    s.n_per_class = cfg.synth_per_class;
    s.dim = cfg.synth_dim;
    s.noise_sigma = cfg.synth_noise;
    s.seed = derive_seed(cfg.seed,
                         train_split ? SeedStream::train_pool : SeedStream::test_pool);
    return synth_pool(s);
  }
  const fs::path dir(cfg.data_dir);
  const char* images = train_split ? "train-images-idx3-ubyte" : "t10k-images-idx3-ubyte";
  const char* labels = train_split ? "train-labels-idx1-ubyte" : "t10k-labels-idx1-ubyte";
  return load_idx((dir / images).string(), (dir / labels).string(),
                  train_split ? cfg.pool_limit : 0);
}

InstancePool pool_from_manifest(const std::string& manifest_path, const std::string& data_dir) {
  const PoolInfo info = manifest_pool_info(manifest_path);
  if (info.kind == "synthetic") {
    SynthSpec s;
    s.n_per_class = info.n_per_class;
    s.classes = info.classes;
    s.dim = info.dim;
    s.seed = info.seed;
    s.noise_sigma = info.noise_sigma;
    return synth_pool(s);
  }
  auto resolve = [&](const std::string& recorded) {
    if (data_dir.empty()) return recorded;
    return (fs::path(data_dir) / fs::path(recorded).filename()).string();
  };
  return load_idx(resolve(info.images_file), resolve(info.labels_file), info.limit);
}

namespace {

DatasetSpec dataset_spec(const RunConfig& cfg, bool train_split) {
  DatasetSpec spec;
  spec.levels = cfg.levels;
  spec.fan_outs = cfg.fan_outs;
  spec.positive_class = cfg.positive_class;
  spec.positive_fraction = cfg.positive_fraction;
  spec.n_samples = train_split ? cfg.train_samples : cfg.test_samples;
  spec.seed = derive_seed(cfg.seed,
                          train_split ? SeedStream::train_data : SeedStream::test_data);
  return spec;
}

json fan_outs_json(const std::vector<FanOut>& fans) {
  json j = json::array();
  for (const FanOut& f : fans) j.push_back({f.min, f.max});
  return j;
}

json config_to_json(const RunConfig& cfg) {
  json j;
  j["experiment"] = experiment_name(cfg.experiment);
  j["architecture"] = architecture_name(cfg.architecture);
  j["attention"] = cfg.attention;
  j["aggregator"] = aggregator_name(cfg.aggregator);
  j["levels"] = cfg.levels;
  j["train_samples"] = cfg.train_samples;
  j["test_samples"] = cfg.test_samples;
  j["positive_class"] = cfg.positive_class;
  j["positive_fraction"] = cfg.positive_fraction;
  j["fan_outs"] = fan_outs_json(cfg.fan_outs);
  j["hidden_dim"] = cfg.hidden_dim;
  j["embed_dim"] = cfg.embed_dim;
  j["attention_dim"] = cfg.attention_dim;
  j["learning_rate"] = cfg.train.learning_rate;
  j["max_epochs"] = cfg.train.max_epochs;
  j["patience"] = cfg.train.patience;
  j["validation_fraction"] = cfg.train.validation_fraction;
  j["threshold"] = cfg.train.threshold;
  j["synthetic"] = cfg.synthetic;
  j["data_dir"] = cfg.data_dir;
  j["pool_limit"] = cfg.pool_limit;
  j["synth_dim"] = cfg.synth_dim;
  j["synth_per_class"] = cfg.synth_per_class;
  j["synth_noise"] = cfg.synth_noise;
  j["seed"] = cfg.seed;
  return j;
}

json metrics_to_json(const Metrics& m) {
  json j;
  j["f1"] = m.f1;
  j["precision"] = m.precision;
  j["recall"] = m.recall;
  j["accuracy"] = m.accuracy;
  j["tp"] = m.tp;
  j["fp"] = m.fp;
  j["tn"] = m.tn;
  j["fn"] = m.fn;
  return j;
}

json report_body(const RunReport& r) {
  json j;
  j["format"] = "nmil-report";
  j["version"] = 1;
  j["config"] = config_to_json(r.config);
  j["kernel_lane"] = r.kernel_lane;
  json ds;
  ds["train_checksum"] = r.train_checksum;
  ds["test_checksum"] = r.test_checksum;
  ds["train_samples"] = r.train_count;
  ds["test_samples"] = r.test_count;
  ds["train_positive_fraction"] = r.train_positive_fraction;
  ds["test_positive_fraction"] = r.test_positive_fraction;
  j["dataset"] = std::move(ds);
  json hist = json::array();
  for (const EpochRecord& e : r.training.history) {
    json h;
    h["epoch"] = e.epoch;
    h["train_loss"] = e.train_loss;
    h["val_loss"] = e.val_loss;
    hist.push_back(std::move(h));
  }
  j["history"] = std::move(hist);
  j["best_epoch"] = r.training.best_epoch;
  j["best_val_loss"] = r.training.best_val_loss;
  j["test_metrics"] = metrics_to_json(r.test_metrics);
  json auc;
  for (const auto& [level, value] : r.localization_auc)
    auc["level" + std::to_string(level)] = value;
  j["localization_auc"] = std::move(auc);
  return j;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("failed writing " + path.string());
}

std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << v;
  return os.str();
}

bool latent_positive(Experiment e, int level, int latent, int positive_class) {
  if (level == 1) return e == Experiment::exp3 ? latent % 2 != 0 : latent == positive_class;
  return latent == 1;
}

}  // namespace

std::string report_to_json(const RunReport& r) {
  json j = report_body(r);
  j["duration_seconds"] = r.duration_seconds;
  j["report_checksum"] = r.report_checksum;
  return j.dump(1) + "\n";
}

std::string cmd_generate(const RunConfig& raw) {
  RunConfig cfg = raw;
  validate(cfg);
  fs::create_directories(cfg.out_dir);
  InstancePool pool = make_pool(cfg, true);
  Dataset ds = build_dataset(pool, dataset_spec(cfg, true), cfg.experiment);
  verify_dataset(ds, pool);
  const fs::path path = fs::path(cfg.out_dir) / "manifest.json";
  write_manifest(ds, pool, path.string());
  if (!cfg.quiet) {
    std::cout << "wrote " << path.string() << ": " << ds.samples.size() << " samples, "
              << ds.positive_count() << " positive ("
              << static_cast<double>(ds.positive_count()) / static_cast<double>(ds.samples.size())
              << ")\n";
  }
  return path.string();
}

RunReport cmd_train(const RunConfig& raw) {
  RunConfig cfg = raw;
  validate(cfg);
  const auto t0 = std::chrono::steady_clock::now();
  fs::create_directories(cfg.out_dir);

  InstancePool train_pool = make_pool(cfg, true);
  InstancePool test_pool = make_pool(cfg, false);

  Dataset train_ds = build_dataset(train_pool, dataset_spec(cfg, true), cfg.experiment);
  Dataset test_ds = build_dataset(test_pool, dataset_spec(cfg, false), cfg.experiment);
  verify_dataset(train_ds, train_pool);
  verify_dataset(test_ds, test_pool);

  // a MIL run sees every sample as one flat bag
  if (cfg.architecture == Architecture::mil) {
    train_ds = flatten(train_ds);
    test_ds = flatten(test_ds);
  }

  const fs::path out(cfg.out_dir);
  write_manifest(train_ds, train_pool, (out / "train_manifest.json").string());
  write_manifest(test_ds, test_pool, (out / "test_manifest.json").string());

  ModelDims dims;
  dims.input_dim = train_pool.dim();
  dims.hidden_dim = cfg.hidden_dim;
  dims.embed_dim = cfg.embed_dim;
  dims.attention_dim = cfg.attention_dim;
  dims.levels = cfg.architecture == Architecture::mil ? 1 : cfg.levels;
  NmilModel model = init_params(dims, cfg.aggregator, cfg.attention,
                                derive_seed(cfg.seed, SeedStream::init));

  TrainConfig tc = cfg.train;
  tc.seed = derive_seed(cfg.seed, SeedStream::shuffle);
  TrainResult training = train(model, train_ds, train_pool, tc);
  if (!cfg.quiet)
    for (const EpochRecord& e : training.history)
      std::cout << "epoch " << e.epoch << " train_loss " << e.train_loss << " val_loss "
                << e.val_loss << "\n";

  RunReport report;
  report.config = cfg;
  report.kernel_lane = kernels::lane_name(kernels::active_lane());
  report.train_checksum = hex64(fnv1a(manifest_to_string(train_ds, train_pool)));
  report.test_checksum = hex64(fnv1a(manifest_to_string(test_ds, test_pool)));
  report.train_count = train_ds.samples.size();
  report.test_count = test_ds.samples.size();
  report.train_positive_fraction = static_cast<double>(train_ds.positive_count()) /
                                   static_cast<double>(train_ds.samples.size());
  report.test_positive_fraction = static_cast<double>(test_ds.positive_count()) /
                                  static_cast<double>(test_ds.samples.size());
  report.training = training;
  report.test_metrics = evaluate(model, test_ds, test_pool, cfg.train.threshold);

  // localization on weak-positive test samples, per level
  auto records = extract_attention(model, test_ds, test_pool);
  std::vector<AttentionRecord> positives;
  for (auto& r : records)
    if (r.weak_label == 1) positives.push_back(r);
  for (int level = 1; level <= dims.levels; ++level) {
    try {
      report.localization_auc[level] = attention_localization_auc(
          positives, level,
          [&](int latent) { return latent_positive(cfg.experiment, level, latent, cfg.positive_class); });
    } catch (const UndefinedAucError&) {
      // level without both classes; omitted from the report
    }
  }

  save_model(model, (out / "model.nmil").string());

  std::ostringstream csv;
  csv << "epoch,train_loss,val_loss\n";
  for (const EpochRecord& e : training.history) {
    char line[96];
    std::snprintf(line, sizeof(line), "%zu,%.17g,%.17g\n", e.epoch, e.train_loss, e.val_loss);
    csv << line;
  }
  write_text(out / "history.csv", csv.str());

  report.duration_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  report.report_checksum = hex64(fnv1a(report_body(report).dump()));
  write_text(out / "report.json", report_to_json(report));

  if (!cfg.quiet) {
    std::cout << "test f1 " << report.test_metrics.f1 << " precision "
              << report.test_metrics.precision << " recall " << report.test_metrics.recall
              << " accuracy " << report.test_metrics.accuracy << "\n";
    for (const auto& [level, value] : report.localization_auc)
      std::cout << "localization auc level " << level << ": " << value << "\n";
  }
  return report;
}

void cmd_attend(const std::string& model_path, const std::string& manifest_path,
                const RunConfig& cfg) {
  NmilModel model = load_model(model_path);
  InstancePool pool = pool_from_manifest(manifest_path, cfg.data_dir);
  Dataset ds = read_manifest(manifest_path, &pool);

  if (ds.spec.levels != model.levels())
    throw StructureError("model has " + std::to_string(model.levels()) + " levels, manifest has " +
                         std::to_string(ds.spec.levels));
  if (pool.dim() != model.dims.input_dim)
    throw StructureError("model input dimension " + std::to_string(model.dims.input_dim) +
                         " does not match pool dimension " + std::to_string(pool.dim()));

  fs::create_directories(cfg.out_dir);
  const auto records = extract_attention(model, ds, pool);

  std::ostringstream csv;
  csv << "sample_id,level,bag_index,member_index,weight,latent_label\n";
  for (const auto& rec : records) {
    for (int level = 1; level <= model.levels(); ++level) {
      std::size_t bag_idx = 0;
      std::function<void(const AttentionNode&, const LatentNode&)> walk =
          [&](const AttentionNode& a, const LatentNode& l) {
            if (a.level == level) {
              for (std::size_t i = 0; i < a.weights.size(); ++i) {
                char line[128];
                std::snprintf(line, sizeof(line), "%llu,%d,%zu,%zu,%.17g,%d\n",
                              static_cast<unsigned long long>(rec.sample_id), level, bag_idx, i,
                              a.weights[i], l.member_latents[i]);
                csv << line;
              }
              ++bag_idx;
              return;
            }
            for (std::size_t c = 0; c < a.children.size(); ++c) walk(a.children[c], l.children[c]);
          };
      walk(rec.attention, rec.latents);
    }
  }
  write_text(fs::path(cfg.out_dir) / "attention.csv", csv.str());

  if (cfg.svg) {
    const std::size_t n = std::min(cfg.svg_samples, records.size());
    for (std::size_t i = 0; i < n; ++i) {
      for (int level = 1; level <= model.levels(); ++level) {
        std::ostringstream title;
        title << "sample " << records[i].sample_id << " level " << level << " (label "
              << records[i].weak_label << ")";
        const std::string svg = attention_bar_chart(records[i], level, title.str());
        std::ostringstream name;
        name << "attn_sample" << records[i].sample_id << "_level" << level << ".svg";
        write_text(fs::path(cfg.out_dir) / name.str(), svg);
      }
    }
  }
  if (!cfg.quiet)
    std::cout << "wrote attention records for " << records.size() << " samples to "
              << cfg.out_dir << "\n";
}

Table1Result cmd_table1(const RunConfig& base) {
  struct CellSpec {
    Experiment e;
    Architecture a;
    bool att;
  };
  const std::vector<CellSpec> grid = {
      {Experiment::exp1, Architecture::mil, false},  {Experiment::exp1, Architecture::mil, true},
      {Experiment::exp1, Architecture::nmil, false}, {Experiment::exp1, Architecture::nmil, true},
      {Experiment::exp2, Architecture::mil, false},  {Experiment::exp2, Architecture::mil, true},
      {Experiment::exp2, Architecture::nmil, false}, {Experiment::exp2, Architecture::nmil, true},
      {Experiment::exp3, Architecture::nmil, false}, {Experiment::exp3, Architecture::nmil, true},
  };

  Table1Result result;
  for (const CellSpec& cell : grid) {
    RunConfig cfg = base;
    cfg.experiment = cell.e;
    cfg.architecture = cell.a;
    cfg.attention = cell.att;
    cfg.levels = 0;
    cfg.fan_outs.clear();
    cfg.quiet = true;
    std::ostringstream sub;
    sub << base.out_dir << "/cells/" << experiment_name(cell.e) << "_"
        << architecture_name(cell.a) << "_" << (cell.att ? "att" : "noatt");
    cfg.out_dir = sub.str();

    Table1Cell out;
    out.experiment = cell.e;
    out.architecture = cell.a;
    out.attention = cell.att;
    try {
      RunReport report = cmd_train(cfg);
      out.metrics = report.test_metrics;
      std::cout << experiment_name(cell.e) << " " << architecture_name(cell.a) << " "
                << (cell.att ? "w/ att" : "w/o att") << ": f1 " << report.test_metrics.f1
                << "\n";
    } catch (const Error& e) {
      out.error = e.what();
      std::cout << experiment_name(cell.e) << " " << architecture_name(cell.a) << " "
                << (cell.att ? "w/ att" : "w/o att") << ": failed: " << e.what() << "\n";
    }
    result.cells.push_back(std::move(out));
  }

  auto cell_text = [&](Experiment e, Architecture a, bool att) -> std::string {
    if (e == Experiment::exp3 && a == Architecture::mil) return "n/a";
    for (const Table1Cell& c : result.cells)
      if (c.experiment == e && c.architecture == a && c.attention == att) {
        if (!c.metrics) return "ERR";
        char buf[16];
        std::snprintf(buf, sizeof(buf), "%.3f", c.metrics->f1);
        return buf;
      }
    return "?";
  };

  std::ostringstream table;
  table << "F1 scores (held-out test split)\n";
  table << "                  Exp1     Exp2     Exp3\n";
  const std::vector<std::pair<Architecture, bool>> rows = {
      {Architecture::mil, false},
      {Architecture::mil, true},
      {Architecture::nmil, false},
      {Architecture::nmil, true},
  };
  for (const auto& [arch, att] : rows) {
    char label[32];
    std::snprintf(label, sizeof(label), "%-5s %-8s", att ? "" : architecture_name(arch),
                  att ? "w/ Att" : "w/o Att");
    table << label;
    for (Experiment e : {Experiment::exp1, Experiment::exp2, Experiment::exp3}) {
      char buf[16];
      std::snprintf(buf, sizeof(buf), "%8s", cell_text(e, arch, att).c_str());
      table << buf;
    }
    table << "\n";
  }
  result.rendered = table.str();

  json j;
  j["format"] = "nmil-table1";
  j["version"] = 1;
  j["config"] = config_to_json(base);
  json cells = json::array();
  for (const Table1Cell& c : result.cells) {
    json cj;
    cj["experiment"] = experiment_name(c.experiment);
    cj["architecture"] = architecture_name(c.architecture);
    cj["attention"] = c.attention;
    if (c.metrics)
      cj["metrics"] = metrics_to_json(*c.metrics);
    else
      cj["error"] = c.error;
    cells.push_back(std::move(cj));
  }
  j["cells"] = std::move(cells);
  fs::create_directories(base.out_dir);
  write_text(fs::path(base.out_dir) / "table1.json", j.dump(1) + "\n");
  write_text(fs::path(base.out_dir) / "table1.txt", result.rendered);
  std::cout << result.rendered;
  return result;
}

}  // namespace nmil
