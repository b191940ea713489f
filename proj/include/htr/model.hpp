#pragma once

#include <cstdint>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "htr/cost.hpp"
#include "htr/gru.hpp"
#include "htr/layers.hpp"
#include "htr/tensor.hpp"
#include "htr/util.hpp"

namespace htr {

// One convolutional block: main conv (standard or depthwise-separable),
// PReLU, batch norm, optionally a gated conv companion and dropout.
struct BlockConfig {
  char kind = 'C';  // 'C' standard, 'D' depthwise-separable
  std::size_t filters = 16;
  std::size_t kh = 3, kw = 3;
  std::size_t sh = 1, sw = 1;
  bool gated = false;
  double dropout = 0.0;
};

struct ModelConfig {
  std::size_t input_h = 128, input_w = 1024;
  std::size_t charset_size = 97;  // C; the model emits C+1 columns
  std::vector<BlockConfig> blocks;
  std::size_t pool_h = 2, pool_w = 1;  // final max-pool
  std::vector<std::size_t> rnn_units;  // BGRU units per direction, per layer
  std::size_t dense_between = 0;       // dense width after the first BGRU; 0 = none
  double rnn_dropout = 0.0;            // dropout on each BGRU input

  // The full line-recognition architecture: six gated conv blocks stepping
  // 16..64 filters, two BGRU(128) layers bridged by a 256-wide dense.
  static ModelConfig reference(std::size_t charset_size = 97) {
    ModelConfig cfg;
    cfg.input_h = 128;
    cfg.input_w = 1024;
    cfg.charset_size = charset_size;
    cfg.blocks = {
        {'C', 16, 3, 3, 2, 2, true, 0.0},
        {'C', 32, 3, 3, 1, 1, true, 0.0},
        {'C', 40, 4, 2, 4, 2, true, 0.2},
        {'C', 48, 3, 3, 1, 1, true, 0.2},
        {'C', 56, 4, 2, 4, 2, true, 0.2},
        {'C', 64, 3, 3, 1, 1, false, 0.0},
    };
    cfg.pool_h = 2;
    cfg.pool_w = 1;
    cfg.rnn_units = {128, 128};
    cfg.dense_between = 256;
    cfg.rnn_dropout = 0.5;
    return cfg;
  }

  // Desk-scale variant that trains in minutes on one core.
  static ModelConfig micro(std::size_t charset_size = 5) {
    ModelConfig cfg;
    cfg.input_h = 32;
    cfg.input_w = 192;
    cfg.charset_size = charset_size;
    cfg.blocks = {
        {'C', 8, 3, 3, 2, 2, false, 0.0},
        {'C', 16, 3, 3, 2, 2, false, 0.0},
    };
    cfg.pool_h = 2;
    cfg.pool_w = 1;
    cfg.rnn_units = {64};
    cfg.dense_between = 0;
    cfg.rnn_dropout = 0.0;
    return cfg;
  }

  void validate() const {
    if (input_h < 1 || input_w < 1) throw ValidationError("model: empty input dims");
    if (charset_size < 1) throw ValidationError("model: charset_size must be >= 1");
    if (blocks.empty()) throw ValidationError("model: at least one conv block");
    if (rnn_units.empty()) throw ValidationError("model: at least one BGRU layer");
    for (const BlockConfig& b : blocks) {
      if (b.kind != 'C' && b.kind != 'D')
        throw ValidationError("model: block kind must be C or D");
      if (b.filters < 1 || b.kh < 1 || b.kw < 1 || b.sh < 1 || b.sw < 1)
        throw ValidationError("model: bad block geometry");
      if (b.dropout < 0 || b.dropout >= 1) throw ValidationError("model: bad dropout");
    }
    if (pool_h < 1 || pool_w < 1) throw ValidationError("model: bad pool extent");
    if (rnn_dropout < 0 || rnn_dropout >= 1) throw ValidationError("model: bad dropout");
    if (time_steps() < 1 || feature_dim() < 1)
      throw ValidationError("model: input collapses to an empty sequence");
  }

  // Geometry of the main conv of block i given the incoming spatial dims.
  ConvGeometry block_geometry(std::size_t i, std::size_t h, std::size_t w,
                              std::size_t in_ch) const {
    const BlockConfig& b = blocks.at(i);
    ConvGeometry g;
    g.in_h = h;
    g.in_w = w;
    g.in_ch = in_ch;
    g.out_ch = b.filters;
    g.kh = b.kh;
    g.kw = b.kw;
    g.sh = b.sh;
    g.sw = b.sw;
    return g;
  }

  // Gate companion: 3x3, stride 1, same channel count, applied to the block
  // output.
  ConvGeometry gate_geometry(std::size_t h, std::size_t w, std::size_t ch) const {
    ConvGeometry g;
    g.in_h = h;
    g.in_w = w;
    g.in_ch = ch;
    g.out_ch = ch;
    g.kh = 3;
    g.kw = 3;
    g.sh = 1;
    g.sw = 1;
    return g;
  }

  void conv_output_dims(std::size_t& h, std::size_t& w) const {
    h = input_h;
    w = input_w;
    for (const BlockConfig& b : blocks) {
      h = (h + b.sh - 1) / b.sh;
      w = (w + b.sw - 1) / b.sw;
    }
    h /= pool_h;
    w /= pool_w;
  }

  // Collapse contract: time axis = width, features = height x channels.
  std::size_t time_steps() const {
    std::size_t h, w;
    conv_output_dims(h, w);
    return w;
  }

  std::size_t feature_dim() const {
    std::size_t h, w;
    conv_output_dims(h, w);
    return h * blocks.back().filters;
  }

  std::string layout() const {
    std::string s;
    for (const BlockConfig& b : blocks) {
      if (!s.empty()) s += "--";
      s += b.kind;
    }
    return s;
  }

  // Accepts "C--C--C--D--D--C" and the compact "CCCDDC" alike.
  void apply_layout(const std::string& layout) {
    std::string symbols;
    for (char c : layout)
      if (c != '-') symbols.push_back(c);
    if (symbols.size() != blocks.size())
      throw ValidationError("layout '" + layout + "' has " +
                            std::to_string(symbols.size()) + " symbols, model has " +
                            std::to_string(blocks.size()) + " blocks");
    for (char c : symbols)
      if (c != 'C' && c != 'D')
        throw ValidationError("layout symbol must be C or D, got '" +
                              std::string(1, c) + "'");
    for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].kind = symbols[i];
  }
};

// ---------------------------------------------------------------------------
// Config text round-trip (also embedded in checkpoints)

namespace detail {

inline std::string fmt_double(double v) {
  std::ostringstream ss;
  ss.precision(17);
  ss << v;
  return ss.str();
}

}  // namespace detail

inline std::string serialize_config(const ModelConfig& cfg) {
  std::ostringstream ss;
  ss << "input " << cfg.input_h << " " << cfg.input_w << "\n";
  ss << "charset_size " << cfg.charset_size << "\n";
  ss << "pool " << cfg.pool_h << " " << cfg.pool_w << "\n";
  ss << "rnn_units";
  for (std::size_t u : cfg.rnn_units) ss << " " << u;
  ss << "\n";
  ss << "dense_between " << cfg.dense_between << "\n";
  ss << "rnn_dropout " << detail::fmt_double(cfg.rnn_dropout) << "\n";
  for (const BlockConfig& b : cfg.blocks)
    ss << "block " << b.kind << " " << b.filters << " " << b.kh << " " << b.kw << " "
       << b.sh << " " << b.sw << " " << (b.gated ? 1 : 0) << " "
       << detail::fmt_double(b.dropout) << "\n";
  return ss.str();
}

inline ModelConfig parse_config(const std::string& text) {
  ModelConfig cfg;
  cfg.blocks.clear();
  cfg.rnn_units.clear();
  for (const std::string& raw : split_lines(text)) {
    const std::string line = trim(raw);
    if (line.empty() || line[0] == '#') continue;
    const auto tok = split_ws(line);
    const std::string& key = tok[0];
    const auto need = [&](std::size_t n) {
      if (tok.size() != n + 1)
        throw ValidationError("config line '" + line + "': expected " +
                              std::to_string(n) + " values");
    };
    try {
      if (key == "input") {
        need(2);
        cfg.input_h = std::stoull(tok[1]);
        cfg.input_w = std::stoull(tok[2]);
      } else if (key == "charset_size") {
        need(1);
        cfg.charset_size = std::stoull(tok[1]);
      } else if (key == "pool") {
        need(2);
        cfg.pool_h = std::stoull(tok[1]);
        cfg.pool_w = std::stoull(tok[2]);
      } else if (key == "rnn_units") {
        if (tok.size() < 2) throw ValidationError("config: rnn_units needs values");
        for (std::size_t i = 1; i < tok.size(); ++i)
          cfg.rnn_units.push_back(std::stoull(tok[i]));
      } else if (key == "dense_between") {
        need(1);
        cfg.dense_between = std::stoull(tok[1]);
      } else if (key == "rnn_dropout") {
        need(1);
        cfg.rnn_dropout = std::stod(tok[1]);
      } else if (key == "block") {
        need(8);
        BlockConfig b;
        if (tok[1].size() != 1) throw ValidationError("config: bad block kind");
        b.kind = tok[1][0];
        b.filters = std::stoull(tok[2]);
        b.kh = std::stoull(tok[3]);
        b.kw = std::stoull(tok[4]);
        b.sh = std::stoull(tok[5]);
        b.sw = std::stoull(tok[6]);
        b.gated = tok[7] == "1";
        b.dropout = std::stod(tok[8]);
        cfg.blocks.push_back(b);
      } else {
        throw ValidationError("config: unknown key '" + key + "'");
      }
    } catch (const std::invalid_argument&) {
      throw ValidationError("config line '" + line + "': bad number");
    } catch (const std::out_of_range&) {
      throw ValidationError("config line '" + line + "': number out of range");
    }
  }
  cfg.validate();
  return cfg;
}

// ---------------------------------------------------------------------------
// Built model

struct ModelBlock {
  char kind = 'C';
  ConvLayer conv;        // kind == 'C'
  DWSepConvLayer dwsep;  // kind == 'D'
  PReLULayer prelu;
  BatchNormLayer bn;
  bool gated = false;
  GatedConvLayer gate;
  double dropout = 0.0;
};

struct Model {
  ModelConfig cfg;
  std::vector<ModelBlock> blocks;
  MaxPoolLayer pool;
  std::vector<BGRULayer> rnns;
  DenseLayer mid_dense;  // present iff cfg.dense_between > 0
  DenseLayer out_dense;
};

inline Model build_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Model m;
  m.cfg = cfg;
  Rng rng(derive_seed(seed, 0x6d6f64656cull));  // one stream, fixed draw order

  std::size_t h = cfg.input_h, w = cfg.input_w, ch = 1;
  for (std::size_t i = 0; i < cfg.blocks.size(); ++i) {
    const BlockConfig& bc = cfg.blocks[i];
    ModelBlock blk;
    blk.kind = bc.kind;
    blk.dropout = bc.dropout;
    const ConvGeometry g = cfg.block_geometry(i, h, w, ch);
    if (bc.kind == 'C') {
      blk.conv.geom = g;
      blk.conv.weight = glorot_uniform({g.kh, g.kw, g.in_ch, g.out_ch},
                                       g.kernel_area() * g.in_ch,
                                       g.kernel_area() * g.out_ch, rng);
      blk.conv.bias = Tensor({g.out_ch});
    } else {
      blk.dwsep.geom = g;
      blk.dwsep.depth_weight = glorot_uniform({g.kh, g.kw, g.in_ch}, g.kernel_area(),
                                              g.kernel_area(), rng);
      blk.dwsep.depth_bias = Tensor({g.in_ch});
      blk.dwsep.point_weight =
          glorot_uniform({g.in_ch, g.out_ch}, g.in_ch, g.out_ch, rng);
      blk.dwsep.point_bias = Tensor({g.out_ch});
    }
    h = g.out_h();
    w = g.out_w();
    ch = g.out_ch;
    blk.prelu = PReLULayer::make(ch);
    blk.bn = BatchNormLayer::make(ch);
    if (bc.gated) {
      blk.gated = true;
      const ConvGeometry gg = cfg.gate_geometry(h, w, ch);
      for (ConvLayer* c : {&blk.gate.feature, &blk.gate.gate}) {
        c->geom = gg;
        c->weight = glorot_uniform({gg.kh, gg.kw, gg.in_ch, gg.out_ch},
                                   gg.kernel_area() * gg.in_ch,
                                   gg.kernel_area() * gg.out_ch, rng);
        c->bias = Tensor({gg.out_ch});
      }
    }
    m.blocks.push_back(std::move(blk));
  }
  m.pool = MaxPoolLayer{cfg.pool_h, cfg.pool_w};

  std::size_t dim = cfg.feature_dim();
  for (std::size_t j = 0; j < cfg.rnn_units.size(); ++j) {
    BGRULayer bgru = BGRULayer::make(dim, cfg.rnn_units[j]);
    bgru.init(rng);
    m.rnns.push_back(std::move(bgru));
    dim = 2 * cfg.rnn_units[j];
    if (j == 0 && cfg.dense_between > 0) {
      m.mid_dense.in_dim = dim;
      m.mid_dense.out_dim = cfg.dense_between;
      m.mid_dense.weight = glorot_uniform({dim, cfg.dense_between}, dim,
                                          cfg.dense_between, rng);
      m.mid_dense.bias = Tensor({cfg.dense_between});
      dim = cfg.dense_between;
    }
  }
  const std::size_t K = cfg.charset_size + 1;
  m.out_dense.in_dim = dim;
  m.out_dense.out_dim = K;
  m.out_dense.weight = glorot_uniform({dim, K}, dim, K, rng);
  m.out_dense.bias = Tensor({K});
  return m;
}

// ---------------------------------------------------------------------------
// Named parameter enumeration: stable order and names, used by the
// optimizer, the checkpoint writer, and the count_params cross-check.

struct ParamRef {
  std::string name;
  LayerKind kind;
  Tensor* tensor;
  bool trainable;
};

inline std::vector<ParamRef> collect_params(Model& m) {
  std::vector<ParamRef> out;
  const auto add = [&](std::string name, LayerKind kind, Tensor& t, bool trainable) {
    out.push_back(ParamRef{std::move(name), kind, &t, trainable});
  };
  for (std::size_t i = 0; i < m.blocks.size(); ++i) {
    ModelBlock& b = m.blocks[i];
    const std::string p = "block" + std::to_string(i) + ".";
    if (b.kind == 'C') {
      add(p + "conv.weight", LayerKind::Conv, b.conv.weight, true);
      add(p + "conv.bias", LayerKind::Conv, b.conv.bias, true);
    } else {
      add(p + "dwsep.depth_weight", LayerKind::DWSepConv, b.dwsep.depth_weight, true);
      add(p + "dwsep.depth_bias", LayerKind::DWSepConv, b.dwsep.depth_bias, true);
      add(p + "dwsep.point_weight", LayerKind::DWSepConv, b.dwsep.point_weight, true);
      add(p + "dwsep.point_bias", LayerKind::DWSepConv, b.dwsep.point_bias, true);
    }
    add(p + "prelu.alpha", LayerKind::Activation, b.prelu.alpha, true);
    add(p + "bn.scale", LayerKind::BatchNorm, b.bn.scale, true);
    add(p + "bn.shift", LayerKind::BatchNorm, b.bn.shift, true);
    add(p + "bn.mean", LayerKind::BatchNorm, b.bn.mean, false);
    add(p + "bn.var", LayerKind::BatchNorm, b.bn.var, false);
    if (b.gated) {
      add(p + "gate.feature.weight", LayerKind::GatedConv, b.gate.feature.weight, true);
      add(p + "gate.feature.bias", LayerKind::GatedConv, b.gate.feature.bias, true);
      add(p + "gate.gate.weight", LayerKind::GatedConv, b.gate.gate.weight, true);
      add(p + "gate.gate.bias", LayerKind::GatedConv, b.gate.gate.bias, true);
    }
  }
  const auto add_gru = [&](const std::string& prefix, GRULayer& g) {
    add(prefix + "wz", LayerKind::BGRU, g.wz, true);
    add(prefix + "wr", LayerKind::BGRU, g.wr, true);
    add(prefix + "wh", LayerKind::BGRU, g.wh, true);
    add(prefix + "uz", LayerKind::BGRU, g.uz, true);
    add(prefix + "ur", LayerKind::BGRU, g.ur, true);
    add(prefix + "uh", LayerKind::BGRU, g.uh, true);
    add(prefix + "bz", LayerKind::BGRU, g.bz, true);
    add(prefix + "br", LayerKind::BGRU, g.br, true);
    add(prefix + "bh", LayerKind::BGRU, g.bh, true);
  };
  for (std::size_t j = 0; j < m.rnns.size(); ++j) {
    const std::string p = "rnn" + std::to_string(j) + ".";
    add_gru(p + "fwd.", m.rnns[j].fwd);
    add_gru(p + "bwd.", m.rnns[j].bwd);
  }
  if (m.cfg.dense_between > 0) {
    add("mid_dense.weight", LayerKind::Dense, m.mid_dense.weight, true);
    add("mid_dense.bias", LayerKind::Dense, m.mid_dense.bias, true);
  }
  add("out_dense.weight", LayerKind::Dense, m.out_dense.weight, true);
  add("out_dense.bias", LayerKind::Dense, m.out_dense.bias, true);
  return out;
}

// ---------------------------------------------------------------------------
// Forward and backward over the whole pipeline

struct BlockCache {
  Tensor in, conv_out, act_out, bn_out, gated_out, drop_mask;
};

struct ForwardCache {
  std::vector<BlockCache> blocks;
  Tensor pool_in, pool_out;
  Tensor collapsed;
  std::vector<Tensor> rnn_in;
  std::vector<Tensor> rnn_drop_mask;
  std::vector<BGRUCache> rnn_caches;
  std::vector<Tensor> rnn_out;
  Tensor mid_in, mid_out;
  Tensor head_in;
  Tensor logits, probs;
};

namespace detail {

// (H, W, CH) feature maps to a (T=W, H*CH) sequence.
inline Tensor collapse_maps(const Tensor& x) {
  const std::size_t H = x.dim(0), W = x.dim(1), CH = x.dim(2);
  Tensor out({W, H * CH});
  for (std::size_t h = 0; h < H; ++h)
    for (std::size_t w = 0; w < W; ++w)
      for (std::size_t c = 0; c < CH; ++c) out.at(w, h * CH + c) = x.at(h, w, c);
  return out;
}

inline Tensor collapse_maps_backward(const Tensor& grad, std::size_t H, std::size_t W,
                                     std::size_t CH) {
  Tensor out({H, W, CH});
  for (std::size_t h = 0; h < H; ++h)
    for (std::size_t w = 0; w < W; ++w)
      for (std::size_t c = 0; c < CH; ++c) out.at(h, w, c) = grad.at(w, h * CH + c);
  return out;
}

}  // namespace detail

// Training forward keeps every intermediate needed by the backward pass and
// draws dropout masks from rng; inference skips both.
inline Tensor model_forward_impl(const Model& m, const Tensor& img, bool training,
                                 Rng* rng, ForwardCache* cache) {
  if (img.rank() != 3 || img.dim(0) != m.cfg.input_h || img.dim(1) != m.cfg.input_w ||
      img.dim(2) != 1)
    throw ValidationError("model: input shape " + img.shape_str() + " wants (" +
                          std::to_string(m.cfg.input_h) + "," +
                          std::to_string(m.cfg.input_w) + ",1)");
  Tensor x = img;
  if (cache) cache->blocks.resize(m.blocks.size());
  for (std::size_t i = 0; i < m.blocks.size(); ++i) {
    const ModelBlock& b = m.blocks[i];
    BlockCache* bc = cache ? &cache->blocks[i] : nullptr;
    if (bc) bc->in = x;
    Tensor a = b.kind == 'C' ? conv2d_forward(b.conv, x) : dwsep_conv2d_forward(b.dwsep, x);
    if (bc) bc->conv_out = a;
    Tensor act = prelu_forward(b.prelu, a);
    if (bc) bc->act_out = act;
    Tensor bn = batchnorm_forward(b.bn, act);
    if (bc) bc->bn_out = bn;
    Tensor y = b.gated ? gated_conv2d_forward(b.gate, bn) : std::move(bn);
    if (bc && b.gated) bc->gated_out = y;
    if (training && b.dropout > 0) {
      DropoutResult dr = dropout_forward(y, b.dropout, *rng);
      if (bc) bc->drop_mask = dr.mask;
      y = std::move(dr.output);
    }
    x = std::move(y);
  }
  if (cache) cache->pool_in = x;
  Tensor pooled = maxpool_forward(m.pool, x);
  if (cache) cache->pool_out = pooled;
  Tensor seq = detail::collapse_maps(pooled);
  if (cache) cache->collapsed = seq;

  if (cache) {
    cache->rnn_in.resize(m.rnns.size());
    cache->rnn_drop_mask.resize(m.rnns.size());
    cache->rnn_caches.resize(m.rnns.size());
    cache->rnn_out.resize(m.rnns.size());
  }
  for (std::size_t j = 0; j < m.rnns.size(); ++j) {
    if (training && m.cfg.rnn_dropout > 0) {
      DropoutResult dr = dropout_forward(seq, m.cfg.rnn_dropout, *rng);
      if (cache) cache->rnn_drop_mask[j] = dr.mask;
      seq = std::move(dr.output);
    }
    if (cache) cache->rnn_in[j] = seq;
    seq = bgru_forward(m.rnns[j], seq, cache ? &cache->rnn_caches[j] : nullptr);
    if (cache) cache->rnn_out[j] = seq;
    if (j == 0 && m.cfg.dense_between > 0) {
      if (cache) cache->mid_in = seq;
      seq = dense_forward(m.mid_dense, seq);
      if (cache) cache->mid_out = seq;
    }
  }
  if (cache) cache->head_in = seq;
  Tensor logits = dense_forward(m.out_dense, seq);
  Tensor probs = softmax_rows(logits);
  if (cache) {
    cache->logits = logits;
    cache->probs = probs;
  }
  return probs;
}

inline Tensor model_forward(const Model& m, const Tensor& img) {
  return model_forward_impl(m, img, false, nullptr, nullptr);
}

inline Tensor model_forward_train(const Model& m, const Tensor& img, Rng& rng,
                                  ForwardCache& cache) {
  return model_forward_impl(m, img, true, &rng, &cache);
}

using GradMap = std::map<std::string, Tensor>;

inline void grad_accumulate(GradMap& acc, const GradMap& g, double scale = 1.0) {
  for (const auto& [name, t] : g) {
    const auto it = acc.find(name);
    if (it == acc.end()) {
      Tensor scaled(t.shape());
      axpy(scale, t, scaled);
      acc.emplace(name, std::move(scaled));
    } else {
      axpy(scale, t, it->second);
    }
  }
}

// Gradients for every trainable tensor, keyed by the collect_params names.
// grad_logits is dLoss/dlogits, e.g. the fused softmax+CTC gradient.
inline GradMap model_backward(const Model& m, const ForwardCache& cache,
                              const Tensor& grad_logits) {
  GradMap grads;
  DenseGrads dg = dense_backward(m.out_dense, cache.head_in, grad_logits);
  grads.emplace("out_dense.weight", std::move(dg.weight));
  grads.emplace("out_dense.bias", std::move(dg.bias));
  Tensor g = std::move(dg.input);

  for (std::size_t j = m.rnns.size(); j-- > 0;) {
    if (j == 0 && m.cfg.dense_between > 0) {
      DenseGrads mg = dense_backward(m.mid_dense, cache.mid_in, g);
      grads.emplace("mid_dense.weight", std::move(mg.weight));
      grads.emplace("mid_dense.bias", std::move(mg.bias));
      g = std::move(mg.input);
    }
    BGRUGrads bg = bgru_backward(m.rnns[j], cache.rnn_in[j], cache.rnn_caches[j], g);
    const std::string p = "rnn" + std::to_string(j) + ".";
    const auto store = [&](const char* dir, GRUGrads& gg) {
      grads.emplace(p + dir + "wz", std::move(gg.wz));
      grads.emplace(p + dir + "wr", std::move(gg.wr));
      grads.emplace(p + dir + "wh", std::move(gg.wh));
      grads.emplace(p + dir + "uz", std::move(gg.uz));
      grads.emplace(p + dir + "ur", std::move(gg.ur));
      grads.emplace(p + dir + "uh", std::move(gg.uh));
      grads.emplace(p + dir + "bz", std::move(gg.bz));
      grads.emplace(p + dir + "br", std::move(gg.br));
      grads.emplace(p + dir + "bh", std::move(gg.bh));
    };
    store("fwd.", bg.fwd);
    store("bwd.", bg.bwd);
    g = std::move(bg.input);
    if (!cache.rnn_drop_mask[j].empty()) g = dropout_backward(cache.rnn_drop_mask[j], g);
  }

  const Tensor& pooled = cache.pool_out;
  g = detail::collapse_maps_backward(g, pooled.dim(0), pooled.dim(1), pooled.dim(2));
  g = maxpool_backward(m.pool, cache.pool_in, g);

  for (std::size_t i = m.blocks.size(); i-- > 0;) {
    const ModelBlock& b = m.blocks[i];
    const BlockCache& bc = cache.blocks[i];
    const std::string p = "block" + std::to_string(i) + ".";
    if (!bc.drop_mask.empty()) g = dropout_backward(bc.drop_mask, g);
    if (b.gated) {
      GatedConvGrads gg = gated_conv2d_backward(b.gate, bc.bn_out, g);
      grads.emplace(p + "gate.feature.weight", std::move(gg.feature.weight));
      grads.emplace(p + "gate.feature.bias", std::move(gg.feature.bias));
      grads.emplace(p + "gate.gate.weight", std::move(gg.gate.weight));
      grads.emplace(p + "gate.gate.bias", std::move(gg.gate.bias));
      g = std::move(gg.input);
    }
    BatchNormGrads bng = batchnorm_backward(b.bn, bc.act_out, g);
    grads.emplace(p + "bn.scale", std::move(bng.scale));
    grads.emplace(p + "bn.shift", std::move(bng.shift));
    g = std::move(bng.input);
    PReLUGrads pg = prelu_backward(b.prelu, bc.conv_out, g);
    grads.emplace(p + "prelu.alpha", std::move(pg.alpha));
    g = std::move(pg.input);
    if (b.kind == 'C') {
      ConvGrads cg = conv2d_backward(b.conv, bc.in, g);
      grads.emplace(p + "conv.weight", std::move(cg.weight));
      grads.emplace(p + "conv.bias", std::move(cg.bias));
      g = std::move(cg.input);
    } else {
      DWSepGrads sg = dwsep_conv2d_backward(b.dwsep, bc.in, g);
      grads.emplace(p + "dwsep.depth_weight", std::move(sg.depth_weight));
      grads.emplace(p + "dwsep.depth_bias", std::move(sg.depth_bias));
      grads.emplace(p + "dwsep.point_weight", std::move(sg.point_weight));
      grads.emplace(p + "dwsep.point_bias", std::move(sg.point_bias));
      g = std::move(sg.input);
    }
  }
  return grads;
}

// ---------------------------------------------------------------------------
// Cost report from the closed-form counts

inline CostReport model_cost(const ModelConfig& cfg) {
  cfg.validate();
  CostReport report;
  std::size_t h = cfg.input_h, w = cfg.input_w, ch = 1;
  for (std::size_t i = 0; i < cfg.blocks.size(); ++i) {
    const BlockConfig& b = cfg.blocks[i];
    const ConvGeometry g = cfg.block_geometry(i, h, w, ch);
    const std::string p = "block" + std::to_string(i);
    if (b.kind == 'C')
      report.add({p + ".conv", "Conv", conv_param_count(g),
                  count_mults(g, ConvKind::Standard)});
    else
      report.add({p + ".dwsep", "DWSepConv", dwsep_param_count(g),
                  count_mults(g, ConvKind::DWSep)});
    h = g.out_h();
    w = g.out_w();
    ch = g.out_ch;
    report.add({p + ".prelu", "Activation", prelu_param_count(ch), 0});
    report.add({p + ".bn", "BatchNorm", batchnorm_param_count(ch), 0});
    if (b.gated) {
      const ConvGeometry gg = cfg.gate_geometry(h, w, ch);
      report.add({p + ".gate", "GatedConv", gated_conv_param_count(gg),
                  gated_conv_mults(gg)});
    }
  }
  report.add({"pool", "MaxPool", 0, 0});
  std::size_t dim = cfg.feature_dim();
  for (std::size_t j = 0; j < cfg.rnn_units.size(); ++j) {
    report.add({"rnn" + std::to_string(j), "BGRU",
                bgru_param_count(dim, cfg.rnn_units[j]), 0});
    dim = 2 * cfg.rnn_units[j];
    if (j == 0 && cfg.dense_between > 0) {
      report.add({"mid_dense", "Dense", dense_param_count(dim, cfg.dense_between), 0});
      dim = cfg.dense_between;
    }
  }
  report.add({"out_dense", "Dense", dense_param_count(dim, cfg.charset_size + 1), 0});
  return report;
}

// The six layout variants the cost subcommand reports, with the reference
// totals they are compared against. The first row is the layout this model
// family ships with.
struct LayoutVariant {
  std::string layout;
  std::uint64_t reference_total;
};

inline const std::vector<LayoutVariant>& layout_variants() {
  static const std::vector<LayoutVariant> v = {
      {"C--C--C--D--D--C", 820778}, {"D--D--D--D--D--D", 818492},
      {"C--C--C--D--D--D", 821122}, {"C--D--C--D--C--D", 819682},
      {"C--C--D--D--D--D", 820386}, {"C--D--D--D--D--D", 818610},
  };
  return v;
}

// Reference total for the all-standard baseline the variants derive from.
constexpr std::uint64_t kBaselineReferenceTotal = 822770;

}  // namespace htr
