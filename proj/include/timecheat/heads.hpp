#pragma once

#include <cstddef>
#include <numbers>
#include <random>
#include <span>
#include <vector>

#include "timecheat/autodiff.hpp"
#include "timecheat/data.hpp"
#include "timecheat/params.hpp"
#include "timecheat/patcher.hpp"

namespace timecheat {

struct HeadConfig {
  std::size_t decoder_hidden = 32;
  std::size_t time_dim = 16;
};

/// Mean-pool over patches and channels followed by a linear map to logits.
struct ClassifierHead {
  Dense linear;

  static ClassifierHead create(ParamStore& store, std::size_t width, std::size_t classes, std::mt19937_64& rng) {
    if (classes < 2) throw ConfigError("classifier: need at least two classes");
    return {Dense::create(store, "head.classifier", width, classes, rng)};
  }
};

/// Predicts a value for a (channel, time) query from the representation row of
/// the query's patch and a learned sinusoidal encoding of the time.
struct ValueDecoder {
  HeadConfig config;
  Dense time_ffn, hidden, output;

  static ValueDecoder create(ParamStore& store, std::size_t width, const HeadConfig& cfg, std::mt19937_64& rng) {
    if (cfg.decoder_hidden == 0 || cfg.time_dim == 0) throw ConfigError("decoder: widths must be positive");
    ValueDecoder d;
    d.config = cfg;
    // Inputs: absolute normalised time and the offset inside the patch.
    d.time_ffn.weight = store.add("head.decoder.time_ffn.weight", init::uniform(Shape{2, cfg.time_dim}, -6.0, 6.0, rng));
    d.time_ffn.bias = store.add("head.decoder.time_ffn.bias",
                                init::uniform(Shape{1, cfg.time_dim}, -std::numbers::pi, std::numbers::pi, rng));
    d.hidden = Dense::create(store, "head.decoder.hidden", width + cfg.time_dim, cfg.decoder_hidden, rng);
    d.output = Dense::create(store, "head.decoder.output", cfg.decoder_hidden, 1, rng);
    return d;
  }
};

/// Logits (1 x classes) from channel-major representation rows.
inline Var classify(Tape& tape, const ParamStore& store, const ClassifierHead& head, Var representation) {
  return head.linear(tape, store, ops::mean_rows(representation));
}

/// One prediction per query, shape (queries x 1). Query times beyond the last
/// patch use the last patch's context.
inline Var decode_values(Tape& tape, const ParamStore& store, const ValueDecoder& dec, Var representation,
                         std::size_t channels, std::size_t patches, std::span<const Observation> queries) {
  if (queries.empty()) throw ShapeError("decode_values: no queries");
  std::vector<std::size_t> rows;
  rows.reserve(queries.size());
  Tensor times(Shape{queries.size(), 2});
  for (std::size_t i = 0; i < queries.size(); ++i) {
    const auto& q = queries[i];
    if (q.channel >= channels) {
      throw RangeError("decode_values: channel " + std::to_string(q.channel) + " out of range for C=" +
                       std::to_string(channels));
    }
    const std::size_t p = patch_of(q.time, patches);
    rows.push_back(q.channel * patches + p);
    times(i, 0) = q.time;
    times(i, 1) = q.time * static_cast<double>(patches) - static_cast<double>(p);
  }
  Var context = ops::gather_rows(representation, std::move(rows));
  Var tenc = ops::sin(dec.time_ffn(tape, store, tape.constant(std::move(times))));
  Var h = ops::relu(dec.hidden(tape, store, ops::concat_cols({context, tenc})));
  return dec.output(tape, store, h);
}

/// Mean cross-entropy of a batch of logits rows.
inline double cross_entropy(const Tensor& logits, const std::vector<std::size_t>& labels) {
  Tape tape;
  Var l = tape.constant(logits.rank() == 2 ? logits : logits.reshaped(Shape{1, logits.size()}));
  return ops::cross_entropy(l, labels).value().item();
}

inline double masked_mse(const Tensor& pred, const Tensor& target, const Tensor& mask) {
  Tape tape;
  return ops::masked_mse(tape.constant(pred), target, mask).value().item();
}

}  // namespace timecheat
