#pragma once

#include <cmath>
#include <cstddef>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "timecheat/autodiff.hpp"
#include "timecheat/params.hpp"

namespace timecheat {

/// How the patch Transformer mixes channels. `ci` attends over the P patches
/// of each channel separately with shared weights; `cd` attends jointly over
/// all C * P patch tokens.
enum class EncoderMode { ci, cd };

inline std::string to_string(EncoderMode m) { return m == EncoderMode::ci ? "ci" : "cd"; }

inline EncoderMode parse_encoder_mode(const std::string& s) {
  if (s == "ci") return EncoderMode::ci;
  if (s == "cd") return EncoderMode::cd;
  throw ConfigError("unknown encoder mode '" + s + "' (expected ci or cd)");
}

/// Sinusoidal patch-position table, P x T_P.
inline Tensor positional_encoding(std::size_t patches, std::size_t width) {
  if (width == 0 || width % 2 != 0) throw ConfigError("positional_encoding: T_P must be even, got " + std::to_string(width));
  if (patches == 0) throw ConfigError("positional_encoding: P must be positive");
  Tensor pe(Shape{patches, width});
  for (std::size_t p = 0; p < patches; ++p) {
    for (std::size_t i = 0; 2 * i < width; ++i) {
      const double angle =
          static_cast<double>(p) / std::pow(10000.0, static_cast<double>(2 * i) / static_cast<double>(width));
      pe(p, 2 * i) = std::sin(angle);
      pe(p, 2 * i + 1) = std::cos(angle);
    }
  }
  return pe;
}

struct EncoderConfig {
  std::size_t layers = 2;
  std::size_t heads = 2;
  std::size_t ff_hidden = 64;
  EncoderMode mode = EncoderMode::ci;
};

struct EncoderLayerParams {
  std::size_t query = 0, key = 0, value = 0, output = 0;
  std::size_t norm1_gain = 0, norm1_shift = 0, norm2_gain = 0, norm2_shift = 0;
  Dense ff1, ff2;
};

/// One parameter set shared by every channel.
struct EncoderParams {
  EncoderConfig config;
  std::size_t width = 0;  // T_P
  std::vector<EncoderLayerParams> layers;

  static EncoderParams create(ParamStore& store, std::size_t width, const EncoderConfig& cfg, std::mt19937_64& rng) {
    if (width == 0 || width % 2 != 0) throw ConfigError("encoder: T_P must be even");
    if (cfg.heads == 0 || width % cfg.heads != 0) throw ConfigError("encoder: heads must divide T_P");
    if (cfg.ff_hidden == 0) throw ConfigError("encoder: ff_hidden must be positive");
    EncoderParams p;
    p.config = cfg;
    p.width = width;
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      const std::string pre = "encoder.layer" + std::to_string(l) + ".";
      EncoderLayerParams lp;
      lp.query = store.add(pre + "attn.query", init::glorot(width, width, rng));
      lp.key = store.add(pre + "attn.key", init::glorot(width, width, rng));
      lp.value = store.add(pre + "attn.value", init::glorot(width, width, rng));
      lp.output = store.add(pre + "attn.output", init::glorot(width, width, rng));
      lp.norm1_gain = store.add(pre + "norm1.gain", init::ones(width));
      lp.norm1_shift = store.add(pre + "norm1.shift", init::zeros(width));
      lp.ff1 = Dense::create(store, pre + "ff1", width, cfg.ff_hidden, rng);
      lp.ff2 = Dense::create(store, pre + "ff2", cfg.ff_hidden, width, rng);
      lp.norm2_gain = store.add(pre + "norm2.gain", init::ones(width));
      lp.norm2_shift = store.add(pre + "norm2.shift", init::zeros(width));
      p.layers.push_back(lp);
    }
    return p;
  }
};

/// Attention maps of one encoder pass, one trace per layer.
struct EncoderTrace {
  std::vector<AttentionTrace> layers;
  std::shared_ptr<const AttentionPattern> pattern;
};

/// Post-norm Transformer over channel-major patch tokens ((C * P) x T_P, row
/// c * P + p). Returns the representation in the same layout.
inline Var encode_tokens(Tape& tape, const ParamStore& store, const EncoderParams& p, Var tokens, std::size_t channels,
                         std::size_t patches, EncoderTrace* trace = nullptr) {
  const Shape expected{channels * patches, p.width};
  if (tokens.shape() != expected) {
    throw ShapeError("encode: expected (P, C, T_P) = (" + std::to_string(patches) + ", " + std::to_string(channels) +
                     ", " + std::to_string(p.width) + "), got tokens " + to_string(tokens.shape()));
  }
  const Tensor pe = positional_encoding(patches, p.width);
  Tensor tiled(expected);
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t q = 0; q < patches; ++q)
      std::copy(pe.row(q).begin(), pe.row(q).end(), tiled.row(c * patches + q).begin());
  Var x = ops::add(tokens, tape.constant(std::move(tiled)));

  auto pattern = std::make_shared<const AttentionPattern>(p.config.mode == EncoderMode::ci
                                                              ? AttentionPattern::blocks(channels, patches)
                                                              : AttentionPattern::blocks(1, channels * patches));
  if (trace) {
    trace->layers.assign(p.layers.size(), {});
    trace->pattern = pattern;
  }
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    const auto& lp = p.layers[l];
    Var q = ops::matmul(x, store.bind(tape, lp.query));
    Var k = ops::matmul(x, store.bind(tape, lp.key));
    Var v = ops::matmul(x, store.bind(tape, lp.value));
    Var att = ops::sparse_attention(q, k, v, pattern, p.config.heads, trace ? &trace->layers[l] : nullptr);
    Var mixed = ops::matmul(att, store.bind(tape, lp.output));
    x = ops::layer_norm(ops::add(x, mixed), store.bind(tape, lp.norm1_gain), store.bind(tape, lp.norm1_shift));
    Var ff = lp.ff2(tape, store, ops::relu(lp.ff1(tape, store, x)));
    x = ops::layer_norm(ops::add(x, ff), store.bind(tape, lp.norm2_gain), store.bind(tape, lp.norm2_shift));
  }
  return x;
}

/// (P, C, T_P) tensor to channel-major token rows.
inline Tensor to_tokens(const Tensor& h) {
  if (h.rank() != 3) throw ShapeError("to_tokens: expected a (P, C, T_P) tensor, got " + to_string(h.shape()));
  const std::size_t P = h.dim(0), C = h.dim(1), T = h.dim(2);
  Tensor out(Shape{C * P, T});
  for (std::size_t p = 0; p < P; ++p)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t t = 0; t < T; ++t) out(c * P + p, t) = h[(p * C + c) * T + t];
  return out;
}

/// Channel-major token rows back to a (P, C, T_P) tensor.
inline Tensor from_tokens(const Tensor& tokens, std::size_t channels, std::size_t patches) {
  const std::size_t T = tokens.cols();
  Tensor out(Shape{patches, channels, T});
  for (std::size_t p = 0; p < patches; ++p)
    for (std::size_t c = 0; c < channels; ++c)
      for (std::size_t t = 0; t < T; ++t) out[(p * channels + c) * T + t] = tokens(c * patches + p, t);
  return out;
}

}  // namespace timecheat
