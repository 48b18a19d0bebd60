// SPDX-License-Identifier: Apache-2.0

#include "nmil/bagdata.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>

#include "json.hpp"
#include "nmil/errors.hpp"

namespace nmil {

namespace {

using json = nlohmann::ordered_json;

constexpr std::uint64_t kFnvOffset = 14695981039346656037ULL;
constexpr std::uint64_t kFnvPrime = 1099511628211ULL;

struct FnvHasher {
  std::uint64_t h = kFnvOffset;
  void update(const unsigned char* p, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) {
      h ^= p[i];
      h *= kFnvPrime;
    }
  }
  void u64(std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    update(b, 8);
  }
  void i32(std::int32_t v) { u64(static_cast<std::uint64_t>(static_cast<std::uint32_t>(v))); }
  void f32(float v) { u64(std::bit_cast<std::uint32_t>(v)); }
};

std::uint32_t be32(const std::vector<unsigned char>& buf, std::size_t off) {
  return (std::uint32_t(buf[off]) << 24) | (std::uint32_t(buf[off + 1]) << 16) |
         (std::uint32_t(buf[off + 2]) << 8) | std::uint32_t(buf[off + 3]);
}

std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::vector<unsigned char> buf((std::istreambuf_iterator<char>(in)),
                                 std::istreambuf_iterator<char>());
  return buf;
}

std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << v;
  return os.str();
}

}  // namespace

std::uint64_t fnv1a(std::span<const unsigned char> bytes) {
  FnvHasher f;
  f.update(bytes.data(), bytes.size());
  return f.h;
}

std::uint64_t fnv1a(const std::string& s) {
  return fnv1a(std::span(reinterpret_cast<const unsigned char*>(s.data()), s.size()));
}

InstancePool::InstancePool(std::vector<Instance> instances, std::size_t dim, PoolInfo info)
    : instances_(std::move(instances)), dim_(dim), info_(std::move(info)) {
  if (dim_ == 0) throw ContractError("instance pool dimension must be positive");
  for (const Instance& ins : instances_)
    if (ins.features.size() != dim_)
      throw DimensionError("instance feature length " + std::to_string(ins.features.size()) +
                           " does not match pool dim " + std::to_string(dim_));
  for (std::size_t i = 0; i < instances_.size(); ++i) {
    const int c = instances_[i].latent_label;
    auto it = std::find_if(by_class_.begin(), by_class_.end(),
                           [c](const auto& p) { return p.first == c; });
    if (it == by_class_.end()) {
      by_class_.push_back({c, {}});
      it = std::prev(by_class_.end());
    }
    it->second.push_back(i);
  }
  std::sort(by_class_.begin(), by_class_.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });
  for (const auto& [c, ids] : by_class_) classes_.push_back(c);

  FnvHasher f;
  f.u64(dim_);
  f.u64(instances_.size());
  for (const Instance& ins : instances_) {
    f.i32(ins.latent_label);
    for (float v : ins.features) f.f32(v);
  }
  checksum_ = f.h;
}

bool InstancePool::has_class(int c) const {
  return std::find(classes_.begin(), classes_.end(), c) != classes_.end();
}

const std::vector<std::size_t>& InstancePool::by_class(int c) const {
  for (const auto& [cls, ids] : by_class_)
    if (cls == c) return ids;
  throw ContractError("pool has no instances of class " + std::to_string(c));
}

InstancePool load_idx(const std::string& images_path, const std::string& labels_path,
                      std::size_t limit) {
  const auto img = read_file(images_path);
  if (img.size() < 16)
    throw FormatError(images_path + ": truncated header, " + std::to_string(img.size()) +
                      " bytes at offset 0 (need 16)");
  if (be32(img, 0) != 0x00000803u)
    throw FormatError(images_path + ": bad image magic at offset 0 (want 0x00000803)");
  const std::size_t n_img = be32(img, 4);
  const std::size_t rows = be32(img, 8);
  const std::size_t cols = be32(img, 12);
  const std::size_t dim = rows * cols;
  if (dim == 0) throw FormatError(images_path + ": zero image dimensions at offset 8");
  const std::size_t want_img = 16 + n_img * dim;
  if (img.size() != want_img)
    throw FormatError(images_path + ": expected " + std::to_string(want_img) + " bytes, got " +
                      std::to_string(img.size()) + " (offset " +
                      std::to_string(std::min(img.size(), want_img)) + ")");

  const auto lab = read_file(labels_path);
  if (lab.size() < 8)
    throw FormatError(labels_path + ": truncated header, " + std::to_string(lab.size()) +
                      " bytes at offset 0 (need 8)");
  if (be32(lab, 0) != 0x00000801u)
    throw FormatError(labels_path + ": bad label magic at offset 0 (want 0x00000801)");
  const std::size_t n_lab = be32(lab, 4);
  const std::size_t want_lab = 8 + n_lab;
  if (lab.size() != want_lab)
    throw FormatError(labels_path + ": expected " + std::to_string(want_lab) + " bytes, got " +
                      std::to_string(lab.size()) + " (offset " +
                      std::to_string(std::min(lab.size(), want_lab)) + ")");
  if (n_img != n_lab)
    throw FormatError(images_path + ": count mismatch, " + std::to_string(n_img) +
                      " images vs " + std::to_string(n_lab) + " labels");

  const std::size_t n = (limit > 0 && limit < n_img) ? limit : n_img;
  std::vector<Instance> instances(n);
  for (std::size_t i = 0; i < n; ++i) {
    Instance& ins = instances[i];
    ins.latent_label = lab[8 + i];
    ins.features.resize(dim);
    const unsigned char* px = img.data() + 16 + i * dim;
    for (std::size_t d = 0; d < dim; ++d) ins.features[d] = static_cast<float>(px[d]) / 255.0f;
  }
  PoolInfo info;
  info.kind = "idx";
  info.images_file = images_path;
  info.labels_file = labels_path;
  info.limit = limit;
  info.dim = dim;
  return InstancePool(std::move(instances), dim, std::move(info));
}

InstancePool synth_pool(const SynthSpec& spec) {
  if (spec.n_per_class < 1) throw ContractError("synth_pool: n_per_class must be >= 1");
  if (spec.classes.empty()) throw ContractError("synth_pool: classes must be non-empty");
  if (spec.dim == 0) throw ContractError("synth_pool: dim must be positive");

  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> mean_dist(0.15, 0.85);
  // 10σ between class means keeps a nearest-centroid classifier exact
  const double min_sep = 10.0 * spec.noise_sigma;

  std::vector<std::vector<double>> means;
  for (std::size_t c = 0; c < spec.classes.size(); ++c) {
    bool placed = false;
    for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
      std::vector<double> m(spec.dim);
      for (double& v : m) v = mean_dist(rng);
      placed = true;
      for (const auto& prev : means) {
        double d2 = 0.0;
        for (std::size_t d = 0; d < spec.dim; ++d) d2 += (m[d] - prev[d]) * (m[d] - prev[d]);
        if (std::sqrt(d2) < min_sep) {
          placed = false;
          break;
        }
      }
      if (placed) means.push_back(std::move(m));
    }
    if (!placed)
      throw GenerationError("synth_pool: unable to place " + std::to_string(spec.classes.size()) +
                            " separated class means in dimension " + std::to_string(spec.dim));
  }

  std::normal_distribution<double> noise(0.0, spec.noise_sigma);
  std::vector<Instance> instances;
  instances.reserve(spec.classes.size() * spec.n_per_class);
  for (std::size_t c = 0; c < spec.classes.size(); ++c) {
    for (std::size_t i = 0; i < spec.n_per_class; ++i) {
      Instance ins;
      ins.latent_label = spec.classes[c];
      ins.features.resize(spec.dim);
      for (std::size_t d = 0; d < spec.dim; ++d) {
        const double v = std::clamp(means[c][d] + noise(rng), 0.0, 1.0);
        ins.features[d] = static_cast<float>(v);
      }
      instances.push_back(std::move(ins));
    }
  }
  PoolInfo info;
  info.kind = "synthetic";
  info.n_per_class = spec.n_per_class;
  info.classes = spec.classes;
  info.seed = spec.seed;
  info.noise_sigma = spec.noise_sigma;
  info.dim = spec.dim;
  return InstancePool(std::move(instances), spec.dim, std::move(info));
}

const char* experiment_name(Experiment e) {
  switch (e) {
    case Experiment::exp1:
      return "exp1";
    case Experiment::exp2:
      return "exp2";
    case Experiment::exp3:
      return "exp3";
  }
  return "?";
}

Experiment experiment_from_string(const std::string& s) {
  if (s == "exp1") return Experiment::exp1;
  if (s == "exp2") return Experiment::exp2;
  if (s == "exp3") return Experiment::exp3;
  throw ContractError("unknown experiment: " + s);
}

std::vector<FanOut> default_fan_outs(Experiment e, int levels) {
  switch (e) {
    case Experiment::exp1:
      if (levels == 1) return {{12, 48}};
      return {{3, 6}, {4, 8}};
    case Experiment::exp2:
      return {{3, 6}, {4, 8}};
    case Experiment::exp3:
      return {{2, 4}, {2, 4}, {2, 5}};
  }
  return {};
}

int oracle_exp1(std::span<const int> instance_labels, int positive_class) {
  if (instance_labels.empty()) throw DegenerateInputError("oracle_exp1: empty bag");
  for (int l : instance_labels)
    if (l == positive_class) return 1;
  return 0;
}

std::pair<int, std::vector<int>> oracle_exp2(const std::vector<std::vector<int>>& inner_bags,
                                             int positive_class) {
  if (inner_bags.empty()) throw DegenerateInputError("oracle_exp2: no inner bags");
  std::vector<int> y2;
  y2.reserve(inner_bags.size());
  int y = 0;
  for (const auto& bag : inner_bags) {
    if (bag.empty()) throw DegenerateInputError("oracle_exp2: empty inner bag");
    const long count = std::count(bag.begin(), bag.end(), positive_class);
    const int label = count > 1 ? 1 : 0;
    y2.push_back(label);
    y |= label;
  }
  return {y, y2};
}

Exp3Labels oracle_exp3(const std::vector<std::vector<std::vector<int>>>& digits) {
  if (digits.empty()) throw StructureError("oracle_exp3: no level-2 groups");
  Exp3Labels out;
  for (const auto& group : digits) {
    if (group.empty()) throw StructureError("oracle_exp3: empty level-2 group");
    std::vector<int> y2;
    bool has0 = false, has1 = false;
    for (const auto& bag : group) {
      if (bag.empty()) throw StructureError("oracle_exp3: empty level-1 bag");
      bool any_odd = false, any_even = false;
      for (int d : bag) (d % 2 != 0 ? any_odd : any_even) = true;
      const int label = any_odd && any_even ? 2 : (any_odd ? 1 : 0);
      y2.push_back(label);
      if (label == 0) has0 = true;
      if (label == 1) has1 = true;
    }
    const int y3 = (has0 && !has1) ? 0 : (has1 && !has0) ? 1 : 2;
    out.y2.push_back(std::move(y2));
    out.y3.push_back(y3);
    if (y3 == 1) out.y = 1;
  }
  return out;
}

std::size_t Dataset::positive_count() const {
  std::size_t n = 0;
  for (const auto& s : samples) n += s.weak_label == 1 ? 1 : 0;
  return n;
}

namespace {

constexpr int kMaxSampleRetries = 1000;

class Generator {
 public:
  Generator(const InstancePool& pool, const DatasetSpec& spec, Experiment e)
      : pool_(pool), spec_(spec), exp_(e), rng_(spec.seed) {
    if (spec_.fan_outs.size() != static_cast<std::size_t>(spec_.levels))
      throw ContractError("dataset spec has " + std::to_string(spec_.fan_outs.size()) +
                          " fan-out ranges for " + std::to_string(spec_.levels) + " levels");
    for (const FanOut& f : spec_.fan_outs)
      if (f.min < 1 || f.min > f.max)
        throw ContractError("fan-out range [" + std::to_string(f.min) + ", " +
                            std::to_string(f.max) + "] is invalid");
    if (!(spec_.positive_fraction > 0.0 && spec_.positive_fraction < 1.0))
      throw ContractError("positive fraction must lie in (0, 1)");
    if (spec_.n_samples < 1) throw ContractError("n_samples must be >= 1");

    switch (exp_) {
      case Experiment::exp1:
        if (spec_.levels != 1 && spec_.levels != 2)
          throw ContractError("exp1 requires 1 or 2 levels");
        break;
      case Experiment::exp2:
        if (spec_.levels != 2) throw ContractError("exp2 requires 2 levels");
        break;
      case Experiment::exp3:
        if (spec_.levels != 3) throw ContractError("exp3 requires 3 levels");
        break;
    }

    if (exp_ == Experiment::exp3) {
      for (int c : pool_.classes()) (c % 2 != 0 ? odd_ : even_).push_back(c);
      if (odd_.empty() || even_.empty())
        throw GenerationError("exp3 needs both odd and even classes in the pool");
    } else {
      if (!pool_.has_class(spec_.positive_class))
        throw GenerationError("pool lacks the positive class " +
                              std::to_string(spec_.positive_class));
      for (int c : pool_.classes())
        if (c != spec_.positive_class) negatives_.push_back(c);
      if (negatives_.empty())
        throw GenerationError("pool lacks non-positive classes for negative instances");
    }
  }

  Dataset run() {
    Dataset ds;
    ds.experiment = exp_;
    ds.spec = spec_;
    const std::size_t n_pos =
        static_cast<std::size_t>(std::llround(spec_.positive_fraction *
                                              static_cast<double>(spec_.n_samples)));
    std::vector<int> targets(spec_.n_samples, 0);
    for (std::size_t i = 0; i < std::min(n_pos, targets.size()); ++i) targets[i] = 1;
    shuffle(targets);

    ds.samples.reserve(spec_.n_samples);
    for (std::size_t i = 0; i < spec_.n_samples; ++i) {
      NestedSample s = make_sample(targets[i], i);
      s.id = i;
      ds.samples.push_back(std::move(s));
    }
    return ds;
  }

 private:
  std::size_t draw(std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng_);
  }
  double urand() { return std::uniform_real_distribution<double>(0.0, 1.0)(rng_); }
  int pick(const std::vector<int>& classes) { return classes[draw(0, classes.size() - 1)]; }

  std::size_t instance_of(int cls) {
    const auto& ids = pool_.by_class(cls);
    return ids[draw(0, ids.size() - 1)];
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[draw(0, i - 1)]);
  }

  // first n distinct indices of 0..total-1, in random order
  std::vector<std::size_t> sample_positions(std::size_t total, std::size_t n) {
    std::vector<std::size_t> idx(total);
    for (std::size_t i = 0; i < total; ++i) idx[i] = i;
    for (std::size_t i = 0; i < n; ++i) std::swap(idx[i], idx[draw(i, total - 1)]);
    idx.resize(n);
    return idx;
  }

  std::vector<std::size_t> draw_bag_sizes(const FanOut& f, std::size_t count) {
    std::vector<std::size_t> sizes(count);
    for (auto& s : sizes) s = draw(f.min, f.max);
    return sizes;
  }

  NestedSample make_sample(int target, std::size_t index) {
    for (int attempt = 0; attempt < kMaxSampleRetries; ++attempt) {
      NestedSample s = exp_ == Experiment::exp3 ? gen_exp3(target)
                       : spec_.levels == 1      ? gen_flat(target)
                                                : gen_two_level(target);
      if (s.weak_label == target) return s;
    }
    throw GenerationError("sample " + std::to_string(index) + ": could not generate target label " +
                          std::to_string(target) + " after " + std::to_string(kMaxSampleRetries) +
                          " attempts");
  }

  // exp1, J=1: one flat bag under the MIL assumption.
  NestedSample gen_flat(int target) {
    const std::size_t total = draw(spec_.fan_outs[0].min, spec_.fan_outs[0].max);
    std::vector<int> digits(total);
    for (int& d : digits) d = pick(negatives_);
    if (target == 1) {
      const std::size_t n_inject = draw(1, std::min<std::size_t>(3, total));
      for (std::size_t p : sample_positions(total, n_inject)) digits[p] = spec_.positive_class;
    }
    NestedSample s;
    s.root.level = 1;
    for (int d : digits) s.root.instance_ids.push_back(instance_of(d));
    s.weak_label = oracle_exp1(digits, spec_.positive_class);
    return s;
  }

  // exp1/exp2, J=2. exp1 injects positives anywhere (random grouping of a
  // flat bag); exp2 controls the per-bag positive count.
  NestedSample gen_two_level(int target) {
    const std::size_t n_bags = draw(spec_.fan_outs[0].min, spec_.fan_outs[0].max);
    const auto sizes = draw_bag_sizes(spec_.fan_outs[1], n_bags);

    std::vector<std::vector<int>> digits(n_bags);
    for (std::size_t b = 0; b < n_bags; ++b) {
      digits[b].resize(sizes[b]);
      for (int& d : digits[b]) d = pick(negatives_);
    }

    if (exp_ == Experiment::exp1) {
      if (target == 1) {
        std::size_t total = 0;
        for (auto s : sizes) total += s;
        const std::size_t n_inject = draw(1, std::min<std::size_t>(3, total));
        for (std::size_t p : sample_positions(total, n_inject)) {
          std::size_t off = p;
          for (std::size_t b = 0; b < n_bags; ++b) {
            if (off < sizes[b]) {
              digits[b][off] = spec_.positive_class;
              break;
            }
            off -= sizes[b];
          }
        }
      }
    } else {
      // The total positive count is drawn from one distribution for both
      // classes, so the flat multiset of a sample carries no label signal;
      // only the per-bag arrangement does. Negatives scatter lone positives
      // across distinct bags, positives concentrate one pair and scatter
      // the rest.
      if (n_bags >= 2) {
        const std::size_t total =
            draw(2, std::max<std::size_t>(2, std::min<std::size_t>(n_bags, 4)));
        if (target == 1) {
          std::vector<std::size_t> candidates;
          for (std::size_t b = 0; b < n_bags; ++b)
            if (sizes[b] >= 2) candidates.push_back(b);
          if (!candidates.empty()) {
            // otherwise the oracle yields 0 and the retry loop redraws sizes
            const std::size_t hot = candidates[draw(0, candidates.size() - 1)];
            const std::size_t pair =
                std::min({total, sizes[hot], static_cast<std::size_t>(3)});
            for (std::size_t p : sample_positions(sizes[hot], pair))
              digits[hot][p] = spec_.positive_class;
            std::vector<std::size_t> others;
            for (std::size_t b = 0; b < n_bags; ++b)
              if (b != hot) others.push_back(b);
            shuffle(others);
            for (std::size_t i = 0; i + pair < total && i < others.size(); ++i)
              digits[others[i]][draw(0, sizes[others[i]] - 1)] = spec_.positive_class;
          }
        } else {
          std::vector<std::size_t> bags(n_bags);
          for (std::size_t b = 0; b < n_bags; ++b) bags[b] = b;
          shuffle(bags);
          for (std::size_t i = 0; i < total && i < n_bags; ++i)
            digits[bags[i]][draw(0, sizes[bags[i]] - 1)] = spec_.positive_class;
        }
      } else if (target == 1 && sizes[0] >= 2) {
        for (std::size_t p : sample_positions(sizes[0], 2)) digits[0][p] = spec_.positive_class;
      }
    }

    NestedSample s;
    s.root.level = 2;
    std::vector<int> flat;
    for (std::size_t b = 0; b < n_bags; ++b) {
      BagNode bag;
      bag.level = 1;
      for (int d : digits[b]) {
        bag.instance_ids.push_back(instance_of(d));
        flat.push_back(d);
      }
      s.root.children.push_back(std::move(bag));
    }

    if (exp_ == Experiment::exp1) {
      for (std::size_t b = 0; b < n_bags; ++b)
        s.root.children[b].latent_label = oracle_exp1(digits[b], spec_.positive_class);
      s.weak_label = oracle_exp1(flat, spec_.positive_class);
    } else {
      auto [y, y2] = oracle_exp2(digits, spec_.positive_class);
      for (std::size_t b = 0; b < n_bags; ++b) s.root.children[b].latent_label = y2[b];
      s.weak_label = y;
    }
    return s;
  }

  enum class BagKind { pure_even, pure_odd, mixed };

  std::vector<int> fill_kind(BagKind kind, std::size_t size) {
    std::vector<int> d(size);
    switch (kind) {
      case BagKind::pure_even:
        for (int& v : d) v = pick(even_);
        break;
      case BagKind::pure_odd:
        for (int& v : d) v = pick(odd_);
        break;
      case BagKind::mixed: {
        for (std::size_t i = 0; i < size; ++i) d[i] = urand() < 0.5 ? pick(odd_) : pick(even_);
        const auto pos = sample_positions(size, 2);
        d[pos[0]] = pick(odd_);
        d[pos[1]] = pick(even_);
        break;
      }
    }
    return d;
  }

  NestedSample gen_exp3(int target) {
    const std::size_t n_groups = draw(spec_.fan_outs[0].min, spec_.fan_outs[0].max);
    std::vector<std::vector<std::vector<int>>> digits(n_groups);
    const std::size_t pos_group = target == 1 ? draw(0, n_groups - 1) : n_groups;

    for (std::size_t gi = 0; gi < n_groups; ++gi) {
      const std::size_t n_bags = draw(spec_.fan_outs[1].min, spec_.fan_outs[1].max);
      const auto sizes = draw_bag_sizes(spec_.fan_outs[2], n_bags);
      std::vector<BagKind> kinds(n_bags);
      if (gi == pos_group) {
        // at least one all-odd bag, no all-even bag
        const std::size_t odd_at = draw(0, n_bags - 1);
        for (std::size_t b = 0; b < n_bags; ++b) {
          if (b == odd_at)
            kinds[b] = BagKind::pure_odd;
          else
            kinds[b] = (sizes[b] >= 2 && urand() < 0.6) ? BagKind::mixed : BagKind::pure_odd;
        }
      } else if (urand() < 0.5) {
        // negative: an all-even bag neutralizes any all-odd bag
        const std::size_t even_at = draw(0, n_bags - 1);
        for (std::size_t b = 0; b < n_bags; ++b) {
          if (b == even_at) {
            kinds[b] = BagKind::pure_even;
          } else {
            const double u = urand();
            kinds[b] = u < 0.34                  ? BagKind::pure_even
                       : u < 0.67                ? BagKind::pure_odd
                       : sizes[b] >= 2           ? BagKind::mixed
                                                 : BagKind::pure_even;
          }
        }
      } else {
        // negative: only mixed bags (single-instance bags fall back to even)
        for (std::size_t b = 0; b < n_bags; ++b)
          kinds[b] = sizes[b] >= 2 ? BagKind::mixed : BagKind::pure_even;
      }
      digits[gi].resize(n_bags);
      for (std::size_t b = 0; b < n_bags; ++b) digits[gi][b] = fill_kind(kinds[b], sizes[b]);
    }

    const Exp3Labels labels = oracle_exp3(digits);
    NestedSample s;
    s.root.level = 3;
    for (std::size_t gi = 0; gi < n_groups; ++gi) {
      BagNode group;
      group.level = 2;
      group.latent_label = labels.y3[gi];
      for (std::size_t b = 0; b < digits[gi].size(); ++b) {
        BagNode bag;
        bag.level = 1;
        bag.latent_label = labels.y2[gi][b];
        for (int d : digits[gi][b]) bag.instance_ids.push_back(instance_of(d));
        group.children.push_back(std::move(bag));
      }
      s.root.children.push_back(std::move(group));
    }
    s.weak_label = labels.y;
    return s;
  }

  const InstancePool& pool_;
  DatasetSpec spec_;
  Experiment exp_;
  std::mt19937_64 rng_;
  std::vector<int> negatives_;
  std::vector<int> odd_, even_;
};

void validate_tree(const BagNode& node, int expected_level) {
  if (node.level != expected_level)
    throw StructureError("bag level " + std::to_string(node.level) + " where " +
                         std::to_string(expected_level) + " was expected");
  if (node.member_count() == 0) throw DegenerateInputError("empty bag in sample tree");
  if (node.is_leaf_bag()) {
    if (!node.children.empty())
      throw StructureError("level-1 bag must hold instances, not bags");
    return;
  }
  if (!node.instance_ids.empty())
    throw StructureError("inner bag holds instances at level " + std::to_string(node.level));
  for (const BagNode& c : node.children) validate_tree(c, expected_level - 1);
}

}  // namespace

Dataset build_dataset(const InstancePool& pool, const DatasetSpec& spec, Experiment e) {
  DatasetSpec resolved = spec;
  if (resolved.fan_outs.empty()) resolved.fan_outs = default_fan_outs(e, resolved.levels);
  Dataset ds = Generator(pool, resolved, e).run();
  for (const NestedSample& s : ds.samples) validate_tree(s.root, resolved.levels);
  return ds;
}

void verify_dataset(const Dataset& ds, const InstancePool& pool) {
  for (const NestedSample& s : ds.samples) {
    int expected = 0;
    switch (ds.experiment) {
      case Experiment::exp1: {
        std::vector<int> flat;
        for (const auto& bag : leaf_digits(s, pool)) flat.insert(flat.end(), bag.begin(), bag.end());
        expected = oracle_exp1(flat, ds.spec.positive_class);
        break;
      }
      case Experiment::exp2: {
        auto [y, y2] = oracle_exp2(leaf_digits(s, pool), ds.spec.positive_class);
        expected = y;
        for (std::size_t b = 0; b < y2.size(); ++b)
          if (s.root.children[b].latent_label != y2[b])
            throw GenerationError("sample " + std::to_string(s.id) +
                                  ": stored inner-bag label disagrees with the oracle");
        break;
      }
      case Experiment::exp3: {
        std::vector<std::vector<std::vector<int>>> digits;
        for (const BagNode& group : s.root.children) {
          std::vector<std::vector<int>> bags;
          for (const BagNode& bag : group.children) {
            std::vector<int> d;
            for (std::size_t id : bag.instance_ids) d.push_back(pool[id].latent_label);
            bags.push_back(std::move(d));
          }
          digits.push_back(std::move(bags));
        }
        const Exp3Labels labels = oracle_exp3(digits);
        expected = labels.y;
        for (std::size_t gi = 0; gi < labels.y3.size(); ++gi) {
          if (s.root.children[gi].latent_label != labels.y3[gi])
            throw GenerationError("sample " + std::to_string(s.id) +
                                  ": stored level-2 label disagrees with the oracle");
          for (std::size_t b = 0; b < labels.y2[gi].size(); ++b)
            if (s.root.children[gi].children[b].latent_label != labels.y2[gi][b])
              throw GenerationError("sample " + std::to_string(s.id) +
                                    ": stored level-1 label disagrees with the oracle");
        }
        break;
      }
    }
    if (expected != s.weak_label)
      throw GenerationError("sample " + std::to_string(s.id) + ": weak label " +
                            std::to_string(s.weak_label) + " disagrees with oracle " +
                            std::to_string(expected));
  }
}

namespace {

void collect_leaves(const BagNode& node, std::vector<std::size_t>& out) {
  if (node.is_leaf_bag()) {
    out.insert(out.end(), node.instance_ids.begin(), node.instance_ids.end());
    return;
  }
  for (const BagNode& c : node.children) collect_leaves(c, out);
}

}  // namespace

NestedSample flatten(const NestedSample& sample) {
  NestedSample flat;
  flat.id = sample.id;
  flat.weak_label = sample.weak_label;
  flat.root.level = 1;
  collect_leaves(sample.root, flat.root.instance_ids);
  return flat;
}

Dataset flatten(const Dataset& ds) {
  Dataset out;
  out.experiment = ds.experiment;
  out.spec = ds.spec;
  out.spec.levels = 1;
  out.spec.fan_outs.clear();
  out.samples.reserve(ds.samples.size());
  for (const NestedSample& s : ds.samples) out.samples.push_back(flatten(s));
  return out;
}

namespace {

void collect_leaf_bags(const BagNode& node, const InstancePool& pool,
                       std::vector<std::vector<int>>& out) {
  if (node.is_leaf_bag()) {
    std::vector<int> digits;
    for (std::size_t id : node.instance_ids) digits.push_back(pool[id].latent_label);
    out.push_back(std::move(digits));
    return;
  }
  for (const BagNode& c : node.children) collect_leaf_bags(c, pool, out);
}

}  // namespace

std::vector<std::vector<int>> leaf_digits(const NestedSample& s, const InstancePool& pool) {
  std::vector<std::vector<int>> out;
  collect_leaf_bags(s.root, pool, out);
  return out;
}

namespace {

json node_to_json(const BagNode& node, const InstancePool& pool) {
  json j;
  j["latent"] = node.latent_label >= 0 ? json(node.latent_label) : json(nullptr);
  if (node.is_leaf_bag()) {
    j["instances"] = node.instance_ids;
    std::vector<int> classes;
    for (std::size_t id : node.instance_ids) classes.push_back(pool[id].latent_label);
    j["classes"] = classes;
  } else {
    json bags = json::array();
    for (const BagNode& c : node.children) bags.push_back(node_to_json(c, pool));
    j["bags"] = std::move(bags);
  }
  return j;
}

BagNode node_from_json(const json& j, int level) {
  BagNode node;
  node.level = level;
  node.latent_label = j.at("latent").is_null() ? -1 : j.at("latent").get<int>();
  if (j.contains("instances")) {
    node.instance_ids = j.at("instances").get<std::vector<std::size_t>>();
  } else {
    for (const json& c : j.at("bags")) node.children.push_back(node_from_json(c, level - 1));
  }
  return node;
}

// manifests store instance classes next to ids; with a pool at hand, make
// sure they still describe the same data
void check_node_classes(const json& j, const InstancePool& pool, const std::string& path) {
  if (j.contains("instances")) {
    const auto ids = j.at("instances").get<std::vector<std::size_t>>();
    const auto classes = j.at("classes").get<std::vector<int>>();
    if (ids.size() != classes.size())
      throw FormatError(path + ": instances/classes length mismatch");
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (ids[i] >= pool.size())
        throw FormatError(path + ": instance id " + std::to_string(ids[i]) +
                          " outside pool of size " + std::to_string(pool.size()));
      if (pool[ids[i]].latent_label != classes[i])
        throw FormatError(path + ": stored class " + std::to_string(classes[i]) +
                          " disagrees with pool instance " + std::to_string(ids[i]));
    }
    return;
  }
  for (const json& c : j.at("bags")) check_node_classes(c, pool, path);
}

json pool_to_json(const InstancePool& pool) {
  const PoolInfo& info = pool.info();
  json j;
  j["kind"] = info.kind;
  if (info.kind == "idx") {
    j["images"] = info.images_file;
    j["labels"] = info.labels_file;
    j["limit"] = info.limit;
  } else {
    j["n_per_class"] = info.n_per_class;
    j["classes"] = info.classes;
    j["seed"] = info.seed;
    j["noise_sigma"] = info.noise_sigma;
  }
  j["dim"] = pool.dim();
  j["n"] = pool.size();
  j["checksum"] = hex64(pool.checksum());
  return j;
}

}  // namespace

std::string manifest_to_string(const Dataset& ds, const InstancePool& pool) {
  json j;
  j["format"] = "nmil-dataset";
  j["version"] = 1;
  j["experiment"] = experiment_name(ds.experiment);
  json spec;
  spec["levels"] = ds.spec.levels;
  json fans = json::array();
  for (const FanOut& f : ds.spec.fan_outs) fans.push_back({f.min, f.max});
  spec["fan_outs"] = std::move(fans);
  spec["positive_class"] = ds.spec.positive_class;
  spec["positive_fraction"] = ds.spec.positive_fraction;
  spec["n_samples"] = ds.spec.n_samples;
  spec["seed"] = ds.spec.seed;
  j["spec"] = std::move(spec);
  j["pool"] = pool_to_json(pool);
  json samples = json::array();
  for (const NestedSample& s : ds.samples) {
    json sj;
    sj["id"] = s.id;
    sj["label"] = s.weak_label;
    sj["root"] = node_to_json(s.root, pool);
    samples.push_back(std::move(sj));
  }
  j["samples"] = std::move(samples);
  return j.dump(1) + "\n";
}

void write_manifest(const Dataset& ds, const InstancePool& pool, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out << manifest_to_string(ds, pool);
  if (!out) throw IoError("failed writing " + path);
}

namespace {

json parse_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw FormatError(path + ": " + e.what());
  }
  if (!j.contains("format") || j["format"] != "nmil-dataset")
    throw FormatError(path + ": not a dataset manifest");
  if (!j.contains("version") || j["version"] != 1)
    throw FormatError(path + ": unsupported manifest version");
  return j;
}

}  // namespace

Dataset read_manifest(const std::string& path, const InstancePool* pool) {
  const json j = parse_manifest(path);
  Dataset ds;
  try {
    ds.experiment = experiment_from_string(j.at("experiment").get<std::string>());
    const json& spec = j.at("spec");
    ds.spec.levels = spec.at("levels").get<int>();
    for (const json& f : spec.at("fan_outs"))
      ds.spec.fan_outs.push_back({f.at(0).get<std::size_t>(), f.at(1).get<std::size_t>()});
    ds.spec.positive_class = spec.at("positive_class").get<int>();
    ds.spec.positive_fraction = spec.at("positive_fraction").get<double>();
    ds.spec.n_samples = spec.at("n_samples").get<std::size_t>();
    ds.spec.seed = spec.at("seed").get<std::uint64_t>();
    if (pool) {
      const std::string want = j.at("pool").at("checksum").get<std::string>();
      if (want != hex64(pool->checksum()))
        throw FormatError(path + ": pool checksum mismatch (manifest " + want + ", pool " +
                          hex64(pool->checksum()) + ")");
    }
    for (const json& sj : j.at("samples")) {
      NestedSample s;
      s.id = sj.at("id").get<std::uint64_t>();
      s.weak_label = sj.at("label").get<int>();
      s.root = node_from_json(sj.at("root"), ds.spec.levels);
      if (pool) check_node_classes(sj.at("root"), *pool, path);
      ds.samples.push_back(std::move(s));
    }
  } catch (const json::exception& e) {
    throw FormatError(path + ": " + e.what());
  }
  for (const NestedSample& s : ds.samples) validate_tree(s.root, ds.spec.levels);
  return ds;
}

PoolInfo manifest_pool_info(const std::string& path) {
  const json j = parse_manifest(path);
  PoolInfo info;
  try {
    const json& p = j.at("pool");
    info.kind = p.at("kind").get<std::string>();
    info.dim = p.at("dim").get<std::size_t>();
    if (info.kind == "idx") {
      info.images_file = p.at("images").get<std::string>();
      info.labels_file = p.at("labels").get<std::string>();
      info.limit = p.at("limit").get<std::size_t>();
    } else if (info.kind == "synthetic") {
      info.n_per_class = p.at("n_per_class").get<std::size_t>();
      info.classes = p.at("classes").get<std::vector<int>>();
      info.seed = p.at("seed").get<std::uint64_t>();
      info.noise_sigma = p.at("noise_sigma").get<double>();
    } else {
      throw FormatError(path + ": unknown pool kind " + info.kind);
    }
  } catch (const json::exception& e) {
    throw FormatError(path + ": " + e.what());
  }
  return info;
}

}  // namespace nmil
