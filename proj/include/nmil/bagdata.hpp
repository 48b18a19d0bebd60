// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

// Nested-bag dataset model: instance pools (IDX files or synthetic Gaussian
// clusters), bag trees with hidden latent labels, the three experiment label
// oracles, and the rejection-sampling dataset builder.
//
// Level convention: a bag's `level` is the level of its members. Innermost
// bags (members are instances) sit at level 1; the root bag of a J-level
// sample sits at level J. A bag's latent label describes the bag itself as a
// member of its parent, i.e. a level-l bag carries a y^{l+1} label.

namespace nmil {

struct Instance {
  std::vector<float> features;  // normalized to [0, 1]
  int latent_label = 0;
};

struct PoolInfo {
  std::string kind;  // "idx" | "synthetic"
  // idx
  std::string images_file;
  std::string labels_file;
  std::size_t limit = 0;
  // synthetic
  std::size_t n_per_class = 0;
  std::vector<int> classes;
  std::uint64_t seed = 0;
  double noise_sigma = 0.0;
  std::size_t dim = 0;
};

class InstancePool {
 public:
  InstancePool(std::vector<Instance> instances, std::size_t dim, PoolInfo info);

  std::size_t size() const { return instances_.size(); }
  std::size_t dim() const { return dim_; }
  const Instance& operator[](std::size_t i) const { return instances_[i]; }
  const PoolInfo& info() const { return info_; }

  const std::vector<int>& classes() const { return classes_; }
  bool has_class(int c) const;
  // indices of instances with the given latent label
  const std::vector<std::size_t>& by_class(int c) const;

  std::uint64_t checksum() const { return checksum_; }

 private:
  std::vector<Instance> instances_;
  std::size_t dim_;
  PoolInfo info_;
  std::vector<int> classes_;
  std::vector<std::pair<int, std::vector<std::size_t>>> by_class_;
  std::uint64_t checksum_;
};

// IDX readers (big-endian headers, magics 0x00000803 / 0x00000801). With
// limit > 0 only the first `limit` items are kept.
InstancePool load_idx(const std::string& images_path, const std::string& labels_path,
                      std::size_t limit = 0);

struct SynthSpec {
  std::size_t n_per_class = 300;
  std::vector<int> classes = {0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
  std::size_t dim = 32;
  std::uint64_t seed = 1;
  double noise_sigma = 0.1;
};

// Gaussian clusters, one mean per class, clipped to [0, 1]. Class means are
// kept far enough apart that a nearest-centroid classifier separates the
// pool perfectly.
InstancePool synth_pool(const SynthSpec& spec);

struct BagNode {
  int level = 1;
  std::vector<BagNode> children;          // level > 1
  std::vector<std::size_t> instance_ids;  // level == 1
  int latent_label = -1;                  // -1 = unset (root bags)

  bool is_leaf_bag() const { return level == 1; }
  std::size_t member_count() const {
    return is_leaf_bag() ? instance_ids.size() : children.size();
  }
};

struct NestedSample {
  BagNode root;
  int weak_label = 0;
  std::uint64_t id = 0;
};

struct FanOut {
  std::size_t min = 1;
  std::size_t max = 1;
};

struct DatasetSpec {
  int levels = 2;                // J
  std::vector<FanOut> fan_outs;  // [0]=root members … [J-1]=instances per innermost bag
  int positive_class = 9;
  double positive_fraction = 0.5;
  std::size_t n_samples = 200;
  std::uint64_t seed = 1;
};

enum class Experiment { exp1, exp2, exp3 };

const char* experiment_name(Experiment e);
Experiment experiment_from_string(const std::string& s);

// Default bag-size ranges for each experiment construction.
std::vector<FanOut> default_fan_outs(Experiment e, int levels);

// ---- label oracles ---------------------------------------------------------

// Bag positive iff it contains the positive class.
int oracle_exp1(std::span<const int> instance_labels, int positive_class);

// Inner bag positive iff it holds more than one positive instance; the weak
// label is positive iff some inner bag is.
std::pair<int, std::vector<int>> oracle_exp2(
    const std::vector<std::vector<int>>& inner_bags, int positive_class);

struct Exp3Labels {
  int y = 0;
  std::vector<std::vector<int>> y2;  // per level-2 group, per level-1 bag: 0/1/2
  std::vector<int> y3;               // per level-2 group: 0/1/2
};

// digits[g][b] holds the instance digits of level-1 bag b inside level-2
// group g. y2: 0 all even, 1 all odd, 2 mixed. y3: 0 if the group has an
// all-even bag and no all-odd bag, 1 if an all-odd bag and no all-even bag,
// 2 otherwise. y = 1 iff some y3 equals 1.
Exp3Labels oracle_exp3(const std::vector<std::vector<std::vector<int>>>& digits);

// ---- datasets --------------------------------------------------------------

struct Dataset {
  Experiment experiment = Experiment::exp1;
  DatasetSpec spec;
  std::vector<NestedSample> samples;

  std::size_t positive_count() const;
};

// Rejection sampling: structure sizes drawn uniformly from the fan-out
// ranges, instances drawn from the pool under per-experiment class
// constraints, weak labels computed by the matching oracle. The generated
// positive fraction matches spec.positive_fraction to within rounding.
Dataset build_dataset(const InstancePool& pool, const DatasetSpec& spec, Experiment e);

// Recompute every weak label from instance digits via the oracles; throws
// GenerationError on any mismatch.
void verify_dataset(const Dataset& ds, const InstancePool& pool);

// All leaves of the sample gathered into one level-1 bag (the flat-MIL view).
NestedSample flatten(const NestedSample& sample);
Dataset flatten(const Dataset& ds);

// Instance digits of one sample arranged per innermost bag, in tree order.
std::vector<std::vector<int>> leaf_digits(const NestedSample& s, const InstancePool& pool);

// ---- manifests --------------------------------------------------------------

// Text manifest (JSON): spec, seed, pool provenance + checksum, and every
// sample's bag tree as nested index lists with latent labels. Identical
// inputs produce byte-identical files.
std::string manifest_to_string(const Dataset& ds, const InstancePool& pool);
void write_manifest(const Dataset& ds, const InstancePool& pool, const std::string& path);

// Reads back a manifest. When pool is given its checksum is verified.
Dataset read_manifest(const std::string& path, const InstancePool* pool = nullptr);

// Pool parameters recorded in a manifest, needed to rebuild an idx/synthetic
// pool for commands that start from a manifest file.
PoolInfo manifest_pool_info(const std::string& path);

// FNV-1a over a byte buffer; used for dataset/report checksums.
std::uint64_t fnv1a(std::span<const unsigned char> bytes);
std::uint64_t fnv1a(const std::string& s);

}  // namespace nmil
