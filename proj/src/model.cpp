// SPDX-License-Identifier: Apache-2.0

#include "nmil/model.hpp"

#include <cmath>
#include <random>

#include "nmil/errors.hpp"

namespace nmil {

const char* aggregator_name(Aggregator a) {
  switch (a) {
    case Aggregator::mean:
      return "mean";
    case Aggregator::max:
      return "max";
    case Aggregator::sum:
      return "sum";
  }
  return "?";
}

Aggregator aggregator_from_string(const std::string& s) {
  if (s == "mean") return Aggregator::mean;
  if (s == "max") return Aggregator::max;
  if (s == "sum") return Aggregator::sum;
  throw ContractError("unknown aggregator: " + s);
}

std::vector<Tensor> NmilModel::trainable_params() const {
  std::vector<Tensor> out;
  for (const LinearLayer& l : extractor.layers) {
    out.push_back(l.w);
    out.push_back(l.b);
  }
  for (const auto& [p, cfg] : blocks) {
    if (!cfg.attention_enabled) continue;
    out.push_back(p.w);
    out.push_back(p.v);
    out.push_back(p.u);
  }
  out.push_back(classifier.w);
  out.push_back(classifier.b);
  return out;
}

std::vector<Tensor> NmilModel::all_params() const {
  std::vector<Tensor> out;
  for (const LinearLayer& l : extractor.layers) {
    out.push_back(l.w);
    out.push_back(l.b);
  }
  for (const auto& [p, cfg] : blocks) {
    out.push_back(p.w);
    out.push_back(p.v);
    out.push_back(p.u);
  }
  out.push_back(classifier.w);
  out.push_back(classifier.b);
  return out;
}

std::vector<std::vector<double>> NmilModel::snapshot() const {
  std::vector<std::vector<double>> snap;
  for (const Tensor& t : all_params())
    snap.emplace_back(t.values().begin(), t.values().end());
  return snap;
}

void NmilModel::restore(const std::vector<std::vector<double>>& snap) {
  auto params = all_params();
  if (snap.size() != params.size())
    throw ContractError("snapshot does not match the model's parameter list");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (snap[i].size() != params[i].size())
      throw ContractError("snapshot tensor size mismatch");
    std::copy(snap[i].begin(), snap[i].end(), params[i].values().begin());
  }
}

namespace {

Tensor xavier(std::mt19937_64& rng, std::size_t fan_in, std::size_t fan_out,
              std::vector<std::size_t> shape) {
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-a, a);
  std::size_t total = 1;
  for (std::size_t e : shape) total *= e;
  std::vector<double> vals(total);
  for (double& v : vals) v = dist(rng);
  return Tensor(std::move(shape), std::move(vals), true);
}

}  // namespace

NmilModel init_params(const ModelDims& dims, Aggregator aggregator, bool attention,
                      std::uint64_t seed) {
  if (dims.input_dim == 0 || dims.hidden_dim == 0 || dims.embed_dim == 0 ||
      dims.attention_dim == 0)
    throw ContractError("model dimensions must be positive");
  if (dims.levels < 1) throw ContractError("model needs at least one nesting level");

  std::mt19937_64 rng(seed);
  NmilModel m;
  m.dims = dims;
  m.extractor.hidden_activation = Activation::relu;
  m.extractor.layers.push_back(
      {xavier(rng, dims.input_dim, dims.hidden_dim, {dims.input_dim, dims.hidden_dim}),
       Tensor::zeros({1, dims.hidden_dim}, true)});
  m.extractor.layers.push_back(
      {xavier(rng, dims.hidden_dim, dims.embed_dim, {dims.hidden_dim, dims.embed_dim}),
       Tensor::zeros({1, dims.embed_dim}, true)});
  for (int level = 1; level <= dims.levels; ++level) {
    GatedAttentionParams p;
    p.v = xavier(rng, dims.embed_dim, dims.attention_dim,
                 {dims.attention_dim, dims.embed_dim});
    p.u = xavier(rng, dims.embed_dim, dims.attention_dim,
                 {dims.attention_dim, dims.embed_dim});
    p.w = xavier(rng, dims.attention_dim, 1, {dims.attention_dim, 1});
    MiBlockConfig cfg;
    cfg.aggregator = aggregator;
    cfg.attention_enabled = attention;
    cfg.level = level;
    m.blocks.emplace_back(std::move(p), cfg);
  }
  m.classifier.w = xavier(rng, dims.embed_dim, 1, {dims.embed_dim, 1});
  m.classifier.b = Tensor::zeros({1, 1}, true);
  return m;
}

Tensor leaf_matrix(const NestedSample& sample, const InstancePool& pool) {
  std::vector<std::size_t> ids;
  const NestedSample flat = flatten(sample);
  ids = flat.root.instance_ids;
  if (ids.empty()) throw DegenerateInputError("sample has no instances");
  const std::size_t dim = pool.dim();
  std::vector<double> vals;
  vals.reserve(ids.size() * dim);
  for (std::size_t id : ids) {
    if (id >= pool.size())
      throw StructureError("instance id " + std::to_string(id) + " outside pool of size " +
                           std::to_string(pool.size()));
    for (float f : pool[id].features) vals.push_back(static_cast<double>(f));
  }
  return Tensor({ids.size(), dim}, std::move(vals));
}

Tensor embed_instances(Graph& g, const FeatureExtractorParams& fe, const Tensor& rows) {
  if (fe.layers.empty()) throw ContractError("feature extractor has no layers");
  if (rows.cols() != fe.layers.front().w.rows())
    throw DimensionError("instance dimension " + std::to_string(rows.cols()) +
                         " does not match extractor input " +
                         std::to_string(fe.layers.front().w.rows()));
  Tensor x = rows;
  for (std::size_t i = 0; i < fe.layers.size(); ++i) {
    x = add_rowvec(g, matmul(g, x, fe.layers[i].w), fe.layers[i].b);
    const bool last = i + 1 == fe.layers.size();
    if (!last) {
      switch (fe.hidden_activation) {
        case Activation::relu:
          x = relu(g, x);
          break;
        case Activation::tanh:
          x = tanh(g, x);
          break;
        case Activation::none:
          break;
      }
    }
  }
  return x;
}

Tensor embed_instance(Graph& g, const FeatureExtractorParams& fe,
                      std::span<const double> features) {
  Tensor row({1, features.size()}, {features.begin(), features.end()});
  return embed_instances(g, fe, row);
}

Tensor attention_scores(Graph& g, const GatedAttentionParams& p, const Tensor& embeddings) {
  if (embeddings.rows() < 1) throw DegenerateInputError("attention over an empty bag");
  Tensor gated = hadamard(g, tanh(g, matmul_nt(g, embeddings, p.v)),
                          sigmoid(g, matmul_nt(g, embeddings, p.u)));
  Tensor logits = matmul(g, gated, p.w);  // B×1
  return softmax(g, logits);
}

Tensor aggregate(Graph& g, const Tensor& embeddings, const Tensor& weights, Aggregator agg) {
  if (embeddings.rows() < 1) throw DegenerateInputError("aggregate over an empty bag");
  Tensor weighted = embeddings;
  if (weights.defined()) {
    if (weights.size() != embeddings.rows())
      throw DimensionError("aggregate: " + std::to_string(weights.size()) + " weights for " +
                           std::to_string(embeddings.rows()) + " members");
    double total = 0.0;
    for (double w : weights.values()) total += w;
    if (std::abs(total - 1.0) > 1e-6)
      throw ContractError("aggregate: weights sum to " + std::to_string(total) + ", expected 1");
    weighted = scale_rows(g, embeddings, weights);
  }
  switch (agg) {
    case Aggregator::mean:
      return reduce_mean(g, weighted, Axis::rows);
    case Aggregator::max:
      return reduce_max(g, weighted, Axis::rows);
    case Aggregator::sum:
      return reduce_sum(g, weighted, Axis::rows);
  }
  throw ContractError("unknown aggregator");
}

std::pair<Tensor, Tensor> mi_block(Graph& g, const Tensor& embeddings,
                                   const GatedAttentionParams& p, const MiBlockConfig& cfg) {
  if (embeddings.rows() < 1) throw DegenerateInputError("mi_block over an empty bag");
  if (cfg.attention_enabled) {
    Tensor weights = attention_scores(g, p, embeddings);
    return {aggregate(g, embeddings, weights, cfg.aggregator), weights};
  }
  // plain pooling; report uniform weights for the attention tree
  Tensor bag = aggregate(g, embeddings, Tensor(), cfg.aggregator);
  Tensor uniform = Tensor::full({embeddings.rows(), 1},
                                1.0 / static_cast<double>(embeddings.rows()));
  return {bag, uniform};
}

namespace {

void check_depth(const BagNode& node, int expected) {
  if (node.level != expected)
    throw StructureError("sample level " + std::to_string(node.level) +
                         " does not match the model's expected level " +
                         std::to_string(expected));
  if (node.member_count() == 0) throw DegenerateInputError("empty bag in sample");
  if (!node.is_leaf_bag())
    for (const BagNode& c : node.children) check_depth(c, expected - 1);
}

Tensor eval_bag(Graph& g, const NmilModel& model, const BagNode& bag, const Tensor& leaf_emb,
                std::size_t& cursor, AttentionNode& anode) {
  anode.level = bag.level;
  Tensor members;
  if (bag.is_leaf_bag()) {
    members = slice_rows(g, leaf_emb, cursor, cursor + bag.instance_ids.size());
    cursor += bag.instance_ids.size();
  } else {
    std::vector<Tensor> rows;
    rows.reserve(bag.children.size());
    anode.children.resize(bag.children.size());
    for (std::size_t i = 0; i < bag.children.size(); ++i)
      rows.push_back(eval_bag(g, model, bag.children[i], leaf_emb, cursor, anode.children[i]));
    members = concat_rows(g, rows);
  }
  const auto& [params, cfg] = model.blocks[static_cast<std::size_t>(bag.level - 1)];
  auto [emb, weights] = mi_block(g, members, params, cfg);
  anode.weights.assign(weights.values().begin(), weights.values().end());
  return emb;
}

}  // namespace

Tensor forward_graph(Graph& g, const NmilModel& model, const NestedSample& sample,
                     const InstancePool& pool, AttentionNode* attention) {
  if (model.blocks.size() != static_cast<std::size_t>(model.levels()))
    throw ContractError("model block list does not match its level count");
  check_depth(sample.root, model.levels());
  if (pool.dim() != model.dims.input_dim)
    throw DimensionError("pool dimension " + std::to_string(pool.dim()) +
                         " does not match model input " + std::to_string(model.dims.input_dim));

  Tensor leaves = leaf_matrix(sample, pool);
  Tensor leaf_emb = embed_instances(g, model.extractor, leaves);

  AttentionNode local;
  AttentionNode& anode = attention ? *attention : local;
  std::size_t cursor = 0;
  Tensor bag_emb = eval_bag(g, model, sample.root, leaf_emb, cursor, anode);

  Tensor logits = add(g, matmul(g, bag_emb, model.classifier.w), model.classifier.b);
  return sigmoid(g, logits);
}

ForwardResult forward(const NmilModel& model, const NestedSample& sample,
                      const InstancePool& pool) {
  Graph g;
  ForwardResult res;
  Tensor p = forward_graph(g, model, sample, pool, &res.attention);
  res.probability = p.item();
  return res;
}

}  // namespace nmil
