// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "nmil/bagdata.hpp"
#include "nmil/tensor.hpp"

// The nested multiple-instance network: a shared MLP feature extractor, one
// gated-attention MI block per nesting level (applied innermost-first), and a
// linear+sigmoid classifier on the final bag-of-bags embedding. A model with
// one level is exactly conventional MIL.

namespace nmil {

enum class Aggregator { mean, max, sum };
enum class Activation { relu, tanh, none };

const char* aggregator_name(Aggregator a);
Aggregator aggregator_from_string(const std::string& s);

struct LinearLayer {
  Tensor w;  // in×out
  Tensor b;  // 1×out
};

struct FeatureExtractorParams {
  std::vector<LinearLayer> layers;
  Activation hidden_activation = Activation::relu;  // between layers, not after the last
};

// Eq. parameters of one gated-attention block: logit(x) = wᵀ(tanh(Vxᵀ) ⊙ sigm(Uxᵀ)).
struct GatedAttentionParams {
  Tensor w;  // H×1
  Tensor v;  // H×M
  Tensor u;  // H×M
};

struct MiBlockConfig {
  Aggregator aggregator = Aggregator::sum;
  bool attention_enabled = true;
  int level = 1;  // 1 = innermost (weights over instances), J = outermost
};

struct ModelDims {
  std::size_t input_dim = 784;
  std::size_t hidden_dim = 128;
  std::size_t embed_dim = 64;      // M
  std::size_t attention_dim = 64;  // H
  int levels = 1;                  // J
};

struct NmilModel {
  ModelDims dims;
  FeatureExtractorParams extractor;
  std::vector<std::pair<GatedAttentionParams, MiBlockConfig>> blocks;  // level order 1..J
  LinearLayer classifier;  // M→1

  int levels() const { return dims.levels; }
  // Parameters updated by SGD; attention parameters of disabled blocks are excluded.
  std::vector<Tensor> trainable_params() const;
  // Every parameter tensor, in serialization order.
  std::vector<Tensor> all_params() const;

  std::vector<std::vector<double>> snapshot() const;
  void restore(const std::vector<std::vector<double>>& snap);
};

// Xavier-uniform weights (a = sqrt(6/(fan_in+fan_out))), zero biases, fully
// determined by the seed.
NmilModel init_params(const ModelDims& dims, Aggregator aggregator, bool attention,
                      std::uint64_t seed);

// Per-bag attention weights recorded during a forward pass; mirrors the
// sample's bag tree. Weights are nonnegative and sum to 1 per bag.
struct AttentionNode {
  int level = 1;
  std::vector<double> weights;
  std::vector<AttentionNode> children;
};

struct ForwardResult {
  double probability = 0.0;
  AttentionNode attention;
};

// ---- graph-building pieces --------------------------------------------------

// All instances of a sample stacked into a B×D_in leaf matrix.
Tensor leaf_matrix(const NestedSample& sample, const InstancePool& pool);

// MLP forward for a batch of instance rows.
Tensor embed_instances(Graph& g, const FeatureExtractorParams& fe, const Tensor& rows);
// Single-instance convenience: returns the 1×M embedding of one feature vector.
Tensor embed_instance(Graph& g, const FeatureExtractorParams& fe,
                      std::span<const double> features);

// Gated-attention weights over the rows of a bag's member embeddings;
// returns a B×1 tensor that sums to 1.
Tensor attention_scores(Graph& g, const GatedAttentionParams& p, const Tensor& embeddings);

// Ξ over attention-weighted member rows. An undefined weights tensor selects
// the no-attention path (all-ones weighting, i.e. plain pooling).
Tensor aggregate(Graph& g, const Tensor& embeddings, const Tensor& weights, Aggregator agg);

// attention_scores ∘ aggregate; returns the 1×M bag embedding and the weight
// vector (uniform when attention is disabled).
std::pair<Tensor, Tensor> mi_block(Graph& g, const Tensor& embeddings,
                                   const GatedAttentionParams& p, const MiBlockConfig& cfg);

// Full forward pass on one sample; returns the prediction tensor (1×1
// probability) and fills the attention tree.
Tensor forward_graph(Graph& g, const NmilModel& model, const NestedSample& sample,
                     const InstancePool& pool, AttentionNode* attention = nullptr);

// Forward pass without keeping the graph.
ForwardResult forward(const NmilModel& model, const NestedSample& sample,
                      const InstancePool& pool);

// ---- serialization ----------------------------------------------------------

// Single self-describing binary file; see docs/model_format.md for the exact
// byte layout.
void save_model(const NmilModel& model, const std::string& path);
NmilModel load_model(const std::string& path);

}  // namespace nmil
