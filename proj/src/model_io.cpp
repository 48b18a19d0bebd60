// SPDX-License-Identifier: Apache-2.0
//
// Model file writer/reader. Byte layout documented in docs/model_format.md;
// everything is little-endian regardless of host order.

#include <bit>
#include <cstring>
#include <fstream>

#include "nmil/bagdata.hpp"
#include "nmil/errors.hpp"
#include "nmil/model.hpp"

namespace nmil {

namespace {

constexpr char kMagic[8] = {'N', 'M', 'I', 'L', 'M', 'O', 'D', 'L'};
constexpr std::uint32_t kVersion = 1;

struct Writer {
  std::vector<unsigned char> buf;

  void u8(std::uint8_t v) { buf.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf.push_back(static_cast<unsigned char>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf.push_back(static_cast<unsigned char>(v >> (8 * i)));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void array(const Tensor& t) {
    u64(t.rows());
    u64(t.cols());
    for (double v : t.values()) f64(v);
  }
};

struct Reader {
  const std::vector<unsigned char>& buf;
  std::size_t pos = 0;
  const std::string& path;

  void need(std::size_t n) {
    if (pos + n > buf.size())
      throw FormatError(path + ": truncated at offset " + std::to_string(pos));
  }
  std::uint8_t u8() {
    need(1);
    return buf[pos++];
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(buf[pos + i]) << (8 * i);
    pos += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(buf[pos + i]) << (8 * i);
    pos += 8;
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  Tensor array() {
    const std::size_t rows = u64();
    const std::size_t cols = u64();
    if (rows == 0 || cols == 0)
      throw FormatError(path + ": zero array extent at offset " + std::to_string(pos));
    std::vector<double> vals(rows * cols);
    for (double& v : vals) v = f64();
    return Tensor({rows, cols}, std::move(vals), true);
  }
};

std::uint8_t activation_code(Activation a) {
  switch (a) {
    case Activation::relu:
      return 0;
    case Activation::tanh:
      return 1;
    case Activation::none:
      return 2;
  }
  return 0;
}

Activation activation_from(std::uint8_t c, const std::string& path) {
  switch (c) {
    case 0:
      return Activation::relu;
    case 1:
      return Activation::tanh;
    case 2:
      return Activation::none;
  }
  throw FormatError(path + ": unknown activation code " + std::to_string(c));
}

std::uint8_t aggregator_code(Aggregator a) {
  switch (a) {
    case Aggregator::mean:
      return 0;
    case Aggregator::max:
      return 1;
    case Aggregator::sum:
      return 2;
  }
  return 2;
}

Aggregator aggregator_from(std::uint8_t c, const std::string& path) {
  switch (c) {
    case 0:
      return Aggregator::mean;
    case 1:
      return Aggregator::max;
    case 2:
      return Aggregator::sum;
  }
  throw FormatError(path + ": unknown aggregator code " + std::to_string(c));
}

}  // namespace

void save_model(const NmilModel& model, const std::string& path) {
  Writer w;
  w.buf.insert(w.buf.end(), kMagic, kMagic + 8);
  w.u32(kVersion);
  w.u64(model.dims.input_dim);
  w.u64(model.dims.hidden_dim);
  w.u64(model.dims.embed_dim);
  w.u64(model.dims.attention_dim);
  w.u32(static_cast<std::uint32_t>(model.dims.levels));
  w.u8(activation_code(model.extractor.hidden_activation));
  w.u32(static_cast<std::uint32_t>(model.extractor.layers.size()));
  for (const LinearLayer& l : model.extractor.layers) {
    w.array(l.w);
    w.array(l.b);
  }
  for (const auto& [p, cfg] : model.blocks) {
    w.u8(aggregator_code(cfg.aggregator));
    w.u8(cfg.attention_enabled ? 1 : 0);
    w.u32(static_cast<std::uint32_t>(cfg.level));
    w.array(p.w);
    w.array(p.v);
    w.array(p.u);
  }
  w.array(model.classifier.w);
  w.array(model.classifier.b);
  w.u64(fnv1a(std::span<const unsigned char>(w.buf.data(), w.buf.size())));

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out.write(reinterpret_cast<const char*>(w.buf.data()),
            static_cast<std::streamsize>(w.buf.size()));
  if (!out) throw IoError("failed writing " + path);
}

NmilModel load_model(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::vector<unsigned char> buf((std::istreambuf_iterator<char>(in)),
                                 std::istreambuf_iterator<char>());
  if (buf.size() < 8 + 4 + 8) throw FormatError(path + ": too short for a model file");
  if (std::memcmp(buf.data(), kMagic, 8) != 0)
    throw FormatError(path + ": bad magic, not a model file");

  std::uint64_t stored = 0;
  for (int i = 0; i < 8; ++i) stored |= std::uint64_t(buf[buf.size() - 8 + i]) << (8 * i);
  const std::uint64_t computed =
      fnv1a(std::span<const unsigned char>(buf.data(), buf.size() - 8));
  if (stored != computed) throw FormatError(path + ": checksum mismatch");

  Reader r{buf, 8, path};
  const std::uint32_t version = r.u32();
  if (version != kVersion)
    throw FormatError(path + ": unsupported model version " + std::to_string(version));

  NmilModel m;
  m.dims.input_dim = r.u64();
  m.dims.hidden_dim = r.u64();
  m.dims.embed_dim = r.u64();
  m.dims.attention_dim = r.u64();
  m.dims.levels = static_cast<int>(r.u32());
  m.extractor.hidden_activation = activation_from(r.u8(), path);
  const std::uint32_t n_layers = r.u32();
  for (std::uint32_t i = 0; i < n_layers; ++i) {
    LinearLayer l;
    l.w = r.array();
    l.b = r.array();
    m.extractor.layers.push_back(std::move(l));
  }
  for (int level = 1; level <= m.dims.levels; ++level) {
    MiBlockConfig cfg;
    cfg.aggregator = aggregator_from(r.u8(), path);
    cfg.attention_enabled = r.u8() != 0;
    cfg.level = static_cast<int>(r.u32());
    if (cfg.level != level)
      throw FormatError(path + ": block level " + std::to_string(cfg.level) +
                        " out of order");
    GatedAttentionParams p;
    p.w = r.array();
    p.v = r.array();
    p.u = r.array();
    m.blocks.emplace_back(std::move(p), cfg);
  }
  m.classifier.w = r.array();
  m.classifier.b = r.array();
  if (r.pos != buf.size() - 8)
    throw FormatError(path + ": trailing bytes at offset " + std::to_string(r.pos));
  return m;
}

}  // namespace nmil
