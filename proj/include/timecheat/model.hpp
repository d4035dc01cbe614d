#pragma once

#include <cstddef>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "timecheat/autodiff.hpp"
#include "timecheat/ci_encoder.hpp"
#include "timecheat/data.hpp"
#include "timecheat/graph_embedder.hpp"
#include "timecheat/heads.hpp"
#include "timecheat/params.hpp"

namespace timecheat {

struct ModelConfig {
  std::size_t channels = 0;
  Task task = Task::classification;
  std::size_t classes = 2;
  std::size_t patches = 4;  // P
  EmbedderConfig embedder;
  EncoderConfig encoder;
  HeadConfig head;
  std::uint64_t init_seed = 0;
};

inline nlohmann::json to_json(const ModelConfig& m) {
  return {{"channels", m.channels},
          {"task", to_string(m.task)},
          {"classes", m.classes},
          {"patches", m.patches},
          {"ref_points", m.embedder.ref_points},
          {"init_seed", m.init_seed},
          {"embedder",
           {{"layers", m.embedder.layers},
            {"heads", m.embedder.heads},
            {"hidden", m.embedder.hidden},
            {"patch_dim", m.embedder.patch_dim},
            {"node_residual", m.embedder.node_residual},
            {"patch_relative_time", m.embedder.patch_relative_time},
            {"freeze_channel_matrix", m.embedder.freeze_channel_matrix}}},
          {"encoder",
           {{"layers", m.encoder.layers},
            {"heads", m.encoder.heads},
            {"ff_hidden", m.encoder.ff_hidden},
            {"mode", to_string(m.encoder.mode)}}},
          {"head", {{"decoder_hidden", m.head.decoder_hidden}, {"time_dim", m.head.time_dim}}}};
}

/// Overlays keys present in `j` onto `m`; absent keys keep their values.
inline void merge_json(ModelConfig& m, const nlohmann::json& j) {
  auto get = [](const nlohmann::json& obj, const char* key, auto& field) {
    if (obj.contains(key)) field = obj[key].get<std::decay_t<decltype(field)>>();
  };
  get(j, "channels", m.channels);
  if (j.contains("task")) m.task = parse_task(j["task"].get<std::string>());
  get(j, "classes", m.classes);
  get(j, "patches", m.patches);
  get(j, "ref_points", m.embedder.ref_points);
  get(j, "init_seed", m.init_seed);
  if (j.contains("embedder")) {
    const auto& e = j["embedder"];
    get(e, "layers", m.embedder.layers);
    get(e, "heads", m.embedder.heads);
    get(e, "hidden", m.embedder.hidden);
    get(e, "ref_points", m.embedder.ref_points);
    get(e, "patch_dim", m.embedder.patch_dim);
    get(e, "node_residual", m.embedder.node_residual);
    get(e, "patch_relative_time", m.embedder.patch_relative_time);
    get(e, "freeze_channel_matrix", m.embedder.freeze_channel_matrix);
  }
  if (j.contains("encoder")) {
    const auto& e = j["encoder"];
    get(e, "layers", m.encoder.layers);
    get(e, "heads", m.encoder.heads);
    get(e, "ff_hidden", m.encoder.ff_hidden);
    if (e.contains("mode")) m.encoder.mode = parse_encoder_mode(e["mode"].get<std::string>());
  }
  if (j.contains("head")) {
    get(j["head"], "decoder_hidden", m.head.decoder_hidden);
    get(j["head"], "time_dim", m.head.time_dim);
    get(j["head"], "classes", m.classes);
  }
}

/// Embedder, channel-independent encoder and task head over one parameter store.
class TimeCheatModel {
 public:
  explicit TimeCheatModel(const ModelConfig& cfg) : config_(cfg) {
    if (cfg.patches == 0) throw ConfigError("model: patch count must be at least 1");
    std::mt19937_64 rng(cfg.init_seed);
    embedder_ = EmbedderParams::create(store_, cfg.channels, cfg.embedder, rng);
    encoder_ = EncoderParams::create(store_, cfg.embedder.patch_dim, cfg.encoder, rng);
    if (cfg.task == Task::classification) {
      classifier_ = ClassifierHead::create(store_, cfg.embedder.patch_dim, cfg.classes, rng);
    } else {
      decoder_ = ValueDecoder::create(store_, cfg.embedder.patch_dim, cfg.head, rng);
    }
  }

  const ModelConfig& config() const noexcept { return config_; }
  ParamStore& params() noexcept { return store_; }
  const ParamStore& params() const noexcept { return store_; }
  const EmbedderParams& embedder() const noexcept { return embedder_; }
  const EncoderParams& encoder() const noexcept { return encoder_; }
  std::size_t channels() const noexcept { return config_.channels; }
  std::size_t patches() const noexcept { return config_.patches; }
  std::size_t patch_dim() const noexcept { return config_.embedder.patch_dim; }

  // Tape-level stages; token layout is channel-major (row c * P + p).

  Var embed(Tape& tape, const Instance& inst) const {
    return embed_series_tokens(tape, store_, embedder_, inst, config_.patches);
  }

  Var encode(Tape& tape, Var tokens, EncoderTrace* trace = nullptr) const {
    return encode_tokens(tape, store_, encoder_, tokens, config_.channels, config_.patches, trace);
  }

  Var logits(Tape& tape, Var representation) const {
    require(Task::classification, "logits");
    return classify(tape, store_, classifier_, representation);
  }

  Var predict(Tape& tape, Var representation, std::span<const Observation> queries) const {
    if (config_.task == Task::classification) throw UsageError("predict: model was built for classification");
    return decode_values(tape, store_, decoder_, representation, config_.channels, config_.patches, queries);
  }

  /// Training objective for one normalised instance: cross-entropy for
  /// classification, masked squared error over the queries otherwise.
  /// Returns an unattached Var when a value instance has no queries.
  Var loss(Tape& tape, const Instance& inst) const {
    Var r = encode(tape, embed(tape, inst));
    if (config_.task == Task::classification) {
      if (!inst.label()) throw ConfigError("loss: classification instance without a label");
      return ops::cross_entropy(logits(tape, r), {*inst.label()});
    }
    if (inst.queries().empty()) return Var{};
    Var pred = predict(tape, r, inst.queries());
    Tensor target(Shape{inst.queries().size(), 1});
    for (std::size_t i = 0; i < inst.queries().size(); ++i) target[i] = inst.queries()[i].value;
    return ops::masked_mse(pred, std::move(target), Tensor(Shape{inst.queries().size(), 1}, 1.0));
  }

  // Tensor-level conveniences.

  /// Series embedding H with shape (P, C, T_P).
  Tensor embed_series(const Instance& inst) const {
    Tape tape;
    return from_tokens(embed(tape, inst).value(), config_.channels, config_.patches);
  }

  /// Representation R with shape (P, C, T_P) for an embedding of the same shape.
  Tensor encode(const Tensor& h, EncoderTrace* trace = nullptr) const {
    const Shape expected{config_.patches, config_.channels, patch_dim()};
    if (h.shape() != expected) {
      throw ShapeError("encode: expected (P, C, T_P) = " + to_string(expected) + ", got " + to_string(h.shape()));
    }
    Tape tape;
    Var r = encode(tape, tape.constant(to_tokens(h)), trace);
    return from_tokens(r.value(), config_.channels, config_.patches);
  }

  Tensor forward_representation(const Instance& inst) const {
    Tape tape;
    return from_tokens(encode(tape, embed(tape, inst)).value(), config_.channels, config_.patches);
  }

  /// Class logits, shape (1, classes).
  Tensor logits(const Instance& inst) const {
    Tape tape;
    return logits(tape, encode(tape, embed(tape, inst))).value();
  }

  /// Class probabilities.
  std::vector<double> probabilities(const Instance& inst) const {
    Tensor p = kernels::row_softmax(logits(inst));
    return {p.data().begin(), p.data().end()};
  }

  std::vector<double> predict(const Instance& inst, std::span<const Observation> queries) const {
    if (queries.empty()) return {};
    Tape tape;
    Tensor out = predict(tape, encode(tape, embed(tape, inst)), queries).value();
    return {out.data().begin(), out.data().end()};
  }

 private:
  void require(Task t, const char* what) const {
    if (config_.task != t) throw UsageError(std::string(what) + ": model task is " + to_string(config_.task));
  }

  ModelConfig config_;
  ParamStore store_;
  EmbedderParams embedder_;
  EncoderParams encoder_;
  ClassifierHead classifier_;
  ValueDecoder decoder_;
};

}  // namespace timecheat
