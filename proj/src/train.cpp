// SPDX-License-Identifier: Apache-2.0

#include "nmil/train.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include "nmil/errors.hpp"

namespace nmil {

namespace {

double sample_loss(const NmilModel& model, const NestedSample& s, const InstancePool& pool) {
  Graph g;
  Tensor p = forward_graph(g, model, s, pool);
  Tensor loss = bce_loss(g, p, static_cast<double>(s.weak_label));
  return loss.item();
}

template <typename T>
void shuffle_with(std::vector<T>& v, std::mt19937_64& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    std::uniform_int_distribution<std::size_t> d(0, i - 1);
    std::swap(v[i - 1], v[d(rng)]);
  }
}

}  // namespace

TrainResult train(NmilModel& model, const Dataset& data, const InstancePool& pool,
                  const TrainConfig& cfg) {
  if (data.samples.empty()) throw ContractError("train: empty dataset");
  if (!(cfg.validation_fraction > 0.0 && cfg.validation_fraction < 1.0))
    throw ContractError("train: validation fraction must lie in (0, 1)");
  if (cfg.patience < 1) throw ContractError("train: patience must be >= 1");

  // stratified split, deterministic in cfg.seed
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> pos, neg;
  for (std::size_t i = 0; i < data.samples.size(); ++i)
    (data.samples[i].weak_label == 1 ? pos : neg).push_back(i);
  shuffle_with(pos, rng);
  shuffle_with(neg, rng);

  std::vector<std::size_t> train_idx, val_idx;
  for (auto* group : {&pos, &neg}) {
    const std::size_t n_val =
        static_cast<std::size_t>(std::llround(cfg.validation_fraction *
                                              static_cast<double>(group->size())));
    for (std::size_t i = 0; i < group->size(); ++i)
      (i < n_val ? val_idx : train_idx).push_back((*group)[i]);
  }
  if (train_idx.empty() || val_idx.empty())
    throw ContractError("train: split leaves an empty train or validation set (" +
                        std::to_string(train_idx.size()) + " train, " +
                        std::to_string(val_idx.size()) + " validation)");

  auto params = model.trainable_params();
  std::span<Tensor> param_span(params);

  TrainResult res;
  res.best_val_loss = std::numeric_limits<double>::infinity();
  auto best = model.snapshot();
  std::size_t since_best = 0;

  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    shuffle_with(train_idx, rng);
    double train_loss = 0.0;
    for (std::size_t idx : train_idx) {
      const NestedSample& s = data.samples[idx];
      Graph g;
      Tensor p = forward_graph(g, model, s, pool);
      Tensor loss = bce_loss(g, p, static_cast<double>(s.weak_label));
      const double lv = loss.item();
      if (!std::isfinite(lv))
        throw TrainingDivergenceError("non-finite loss at epoch " + std::to_string(epoch) +
                                      ", sample " + std::to_string(s.id));
      train_loss += lv;
      g.backward(loss);
      sgd_step(param_span, cfg.learning_rate);
    }
    train_loss /= static_cast<double>(train_idx.size());

    double val_loss = 0.0;
    for (std::size_t idx : val_idx) val_loss += sample_loss(model, data.samples[idx], pool);
    val_loss /= static_cast<double>(val_idx.size());
    if (!std::isfinite(val_loss))
      throw TrainingDivergenceError("non-finite validation loss at epoch " +
                                    std::to_string(epoch));

    res.history.push_back({epoch, train_loss, val_loss});

    if (val_loss < res.best_val_loss) {
      res.best_val_loss = val_loss;
      res.best_epoch = epoch;
      best = model.snapshot();
      since_best = 0;
    } else {
      ++since_best;
      if (since_best >= cfg.patience) break;
    }
  }

  model.restore(best);
  return res;
}

Metrics metrics_from_counts(std::size_t tp, std::size_t fp, std::size_t tn, std::size_t fn) {
  Metrics m;
  m.tp = tp;
  m.fp = fp;
  m.tn = tn;
  m.fn = fn;
  const double total = static_cast<double>(tp + fp + tn + fn);
  m.precision = tp + fp > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
  m.recall = tp + fn > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
  m.f1 = m.precision + m.recall > 0.0
             ? 2.0 * m.precision * m.recall / (m.precision + m.recall)
             : 0.0;
  m.accuracy = total > 0.0 ? static_cast<double>(tp + tn) / total : 0.0;
  return m;
}

Metrics evaluate(const NmilModel& model, const Dataset& data, const InstancePool& pool,
                 double threshold) {
  if (data.samples.empty()) throw ContractError("evaluate: empty dataset");
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
  for (const NestedSample& s : data.samples) {
    const int pred = forward(model, s, pool).probability >= threshold ? 1 : 0;
    if (pred == 1 && s.weak_label == 1)
      ++tp;
    else if (pred == 1)
      ++fp;
    else if (s.weak_label == 1)
      ++fn;
    else
      ++tn;
  }
  return metrics_from_counts(tp, fp, tn, fn);
}

namespace {

LatentNode latent_tree(const BagNode& bag, const InstancePool& pool) {
  LatentNode node;
  node.level = bag.level;
  node.label = bag.latent_label;
  if (bag.is_leaf_bag()) {
    for (std::size_t id : bag.instance_ids) node.member_latents.push_back(pool[id].latent_label);
    return node;
  }
  for (const BagNode& c : bag.children) {
    node.member_latents.push_back(c.latent_label);
    node.children.push_back(latent_tree(c, pool));
  }
  return node;
}

struct BagAuc {
  double total = 0.0;
  std::size_t count = 0;
};

void auc_walk(const AttentionNode& a, const LatentNode& l, int level,
              const std::function<bool(int)>& positive, BagAuc& acc) {
  if (a.level == level) {
    const std::size_t n = a.weights.size();
    std::size_t n_pos = 0;
    for (int lab : l.member_latents)
      if (positive(lab)) ++n_pos;
    if (n_pos == 0 || n_pos == n) return;  // needs both classes

    // Mann-Whitney with average ranks for ties
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::sort(order.begin(), order.end(),
              [&](std::size_t x, std::size_t y) { return a.weights[x] < a.weights[y]; });
    std::vector<double> rank(n);
    std::size_t i = 0;
    while (i < n) {
      std::size_t j = i;
      while (j + 1 < n && a.weights[order[j + 1]] == a.weights[order[i]]) ++j;
      const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
      for (std::size_t k = i; k <= j; ++k) rank[order[k]] = avg;
      i = j + 1;
    }
    double pos_ranks = 0.0;
    for (std::size_t m = 0; m < n; ++m)
      if (positive(l.member_latents[m])) pos_ranks += rank[m];
    const double n_neg = static_cast<double>(n - n_pos);
    const double u = pos_ranks - static_cast<double>(n_pos) * (static_cast<double>(n_pos) + 1.0) / 2.0;
    acc.total += u / (static_cast<double>(n_pos) * n_neg);
    acc.count += 1;
    return;
  }
  for (std::size_t c = 0; c < a.children.size(); ++c)
    auc_walk(a.children[c], l.children[c], level, positive, acc);
}

}  // namespace

std::vector<AttentionRecord> extract_attention(const NmilModel& model, const Dataset& data,
                                               const InstancePool& pool) {
  std::vector<AttentionRecord> out;
  out.reserve(data.samples.size());
  for (const NestedSample& s : data.samples) {
    AttentionRecord rec;
    rec.sample_id = s.id;
    rec.weak_label = s.weak_label;
    ForwardResult fr = forward(model, s, pool);
    rec.probability = fr.probability;
    rec.attention = std::move(fr.attention);
    rec.latents = latent_tree(s.root, pool);
    out.push_back(std::move(rec));
  }
  return out;
}

double attention_localization_auc(std::span<const AttentionRecord> records, int level,
                                  const std::function<bool(int)>& positive) {
  if (records.empty()) throw UndefinedAucError("no attention records");
  BagAuc acc;
  for (const AttentionRecord& r : records) auc_walk(r.attention, r.latents, level, positive, acc);
  if (acc.count == 0)
    throw UndefinedAucError("no bag at level " + std::to_string(level) +
                            " holds both positive and negative members");
  return acc.total / static_cast<double>(acc.count);
}

}  // namespace nmil
