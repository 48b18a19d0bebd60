// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "nmil/bagdata.hpp"
#include "nmil/model.hpp"

// Plain SGD (batch size 1) with binary cross-entropy and early stopping on a
// stratified validation split, plus evaluation metrics and attention-record
// extraction for interpretability analysis.

namespace nmil {

struct TrainConfig {
  double learning_rate = 0.01;
  std::size_t max_epochs = 100;
  std::size_t patience = 10;          // epochs without validation improvement
  double validation_fraction = 0.2;   // stratified by weak label
  std::uint64_t seed = 0;             // split + shuffle
  double threshold = 0.5;
};

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_loss = 0.0;
};

struct TrainResult {
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;  // 1-based epoch whose parameters were kept
  double best_val_loss = 0.0;
};

// Trains in place; on return the model carries the parameters of the best
// validation epoch. Throws TrainingDivergenceError when a loss goes
// non-finite, naming the epoch and sample.
TrainResult train(NmilModel& model, const Dataset& data, const InstancePool& pool,
                  const TrainConfig& cfg);

struct Metrics {
  double f1 = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double accuracy = 0.0;
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
};

Metrics metrics_from_counts(std::size_t tp, std::size_t fp, std::size_t tn, std::size_t fn);

Metrics evaluate(const NmilModel& model, const Dataset& data, const InstancePool& pool,
                 double threshold = 0.5);

// Latent labels arranged to mirror an AttentionNode tree: member_latents[i]
// is the latent label of member i (instance digit at level 1, child-bag
// label above).
struct LatentNode {
  int level = 1;
  int label = -1;
  std::vector<int> member_latents;
  std::vector<LatentNode> children;
};

struct AttentionRecord {
  std::uint64_t sample_id = 0;
  int weak_label = 0;
  double probability = 0.0;
  AttentionNode attention;
  LatentNode latents;
};

std::vector<AttentionRecord> extract_attention(const NmilModel& model, const Dataset& data,
                                               const InstancePool& pool);

// Rank-based AUC of attention weight as a score for latent positivity at one
// level: computed per bag (bags holding both classes), then averaged over
// bags. Ties contribute 0.5. Throws UndefinedAucError when no bag at the
// level holds both a positive and a negative member.
double attention_localization_auc(std::span<const AttentionRecord> records, int level,
                                  const std::function<bool(int)>& positive);

}  // namespace nmil
