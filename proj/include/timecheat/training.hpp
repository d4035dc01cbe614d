#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <json.hpp>

#include "timecheat/data.hpp"
#include "timecheat/errors.hpp"
#include "timecheat/metrics.hpp"
#include "timecheat/model.hpp"
#include "timecheat/synthetic.hpp"

namespace timecheat {

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Configuration

struct DataConfig {
  std::string train_path;
  std::string val_path;
  std::string test_path;
  std::optional<SyntheticSpec> synthetic;
  std::array<double, 3> split{0.8, 0.1, 0.1};
  double observed_fraction = 0.5;
  bool resample_interpolation = true;
};

struct OptimizerConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

struct TrainConfig {
  std::size_t batch_size = 16;
  std::size_t epochs = 200;
  std::size_t patience = 30;  // 0 disables early stopping
  std::uint64_t seed = 0;
  std::size_t threads = 1;
};

/// Everything a run depends on; (config, seed) reproduces the run.
struct RunConfig {
  DataConfig data;
  ModelConfig model;
  OptimizerConfig optimizer;
  TrainConfig train;
  std::string output_dir;
};

inline nlohmann::json to_json(const RunConfig& c) {
  nlohmann::json data{{"train", c.data.train_path},
                      {"val", c.data.val_path},
                      {"test", c.data.test_path},
                      {"split", c.data.split},
                      {"observed_fraction", c.data.observed_fraction},
                      {"resample_interpolation", c.data.resample_interpolation}};
  if (c.data.synthetic) data["synthetic"] = to_json(*c.data.synthetic);
  return {{"data", data},
          {"model", to_json(c.model)},
          {"optimizer",
           {{"lr", c.optimizer.lr},
            {"beta1", c.optimizer.beta1},
            {"beta2", c.optimizer.beta2},
            {"eps", c.optimizer.eps},
            {"weight_decay", c.optimizer.weight_decay}}},
          {"train",
           {{"batch_size", c.train.batch_size},
            {"epochs", c.train.epochs},
            {"patience", c.train.patience},
            {"seed", c.train.seed},
            {"threads", c.train.threads}}},
          {"output_dir", c.output_dir}};
}

/// Overlays keys present in `j` onto `c`.
inline void merge_json(RunConfig& c, const nlohmann::json& j) {
  auto get = [](const nlohmann::json& obj, const char* key, auto& field) {
    if (obj.contains(key) && !obj[key].is_null()) field = obj[key].get<std::decay_t<decltype(field)>>();
  };
  try {
    if (j.contains("data")) {
      const auto& d = j["data"];
      get(d, "train", c.data.train_path);
      get(d, "val", c.data.val_path);
      get(d, "test", c.data.test_path);
      get(d, "split", c.data.split);
      get(d, "observed_fraction", c.data.observed_fraction);
      get(d, "resample_interpolation", c.data.resample_interpolation);
      if (d.contains("synthetic") && !d["synthetic"].is_null()) {
        c.data.synthetic = d["synthetic"].is_string() ? synthetic_preset(d["synthetic"].get<std::string>())
                                                      : synthetic_spec_from_json(d["synthetic"]);
      }
    }
    if (j.contains("model")) merge_json(c.model, j["model"]);
    if (j.contains("optimizer")) {
      const auto& o = j["optimizer"];
      get(o, "lr", c.optimizer.lr);
      get(o, "beta1", c.optimizer.beta1);
      get(o, "beta2", c.optimizer.beta2);
      get(o, "eps", c.optimizer.eps);
      get(o, "weight_decay", c.optimizer.weight_decay);
    }
    if (j.contains("train")) {
      const auto& t = j["train"];
      get(t, "batch_size", c.train.batch_size);
      get(t, "epochs", c.train.epochs);
      get(t, "patience", c.train.patience);
      get(t, "seed", c.train.seed);
      get(t, "threads", c.train.threads);
    }
    get(j, "output_dir", c.output_dir);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config '" + path + "': " + e.what());
  }
  RunConfig c;
  merge_json(c, j);
  return c;
}

/// Applies the TIMECHEAT_SEED environment override, if set.
inline void apply_seed_override(RunConfig& c) {
  if (const char* s = std::getenv("TIMECHEAT_SEED"); s && *s) {
    try {
      c.train.seed = std::stoull(s);
    } catch (const std::exception&) {
      throw ConfigError(std::string("TIMECHEAT_SEED is not an unsigned integer: ") + s);
    }
  }
}

// ---------------------------------------------------------------------------
// Interpolation protocol

/// Keeps floor(fraction * n) (at least one) randomly chosen observations as
/// conditioning input and turns the rest into query targets.
inline Instance interpolation_protocol(const Instance& inst, double observed_fraction, std::mt19937_64& rng) {
  if (!(observed_fraction > 0.0 && observed_fraction < 1.0)) {
    throw ConfigError("observed fraction must lie in (0, 1), got " + std::to_string(observed_fraction));
  }
  std::vector<Observation> all = inst.observations();
  const std::size_t n = all.size();
  std::size_t keep = static_cast<std::size_t>(std::floor(observed_fraction * static_cast<double>(n) + 1e-9));
  keep = std::min(n, std::max<std::size_t>(keep, 1));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<Observation> cond, target;
  for (std::size_t i = 0; i < n; ++i) (i < keep ? cond : target).push_back(all[order[i]]);
  Instance out(inst.channels(), inst.span(), cond, inst.label(), std::move(target));
  out.set_original_span(inst.original_span());
  return out;
}

inline Dataset interpolation_protocol(const Dataset& ds, double observed_fraction, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Dataset out = ds;
  for (auto& inst : out.instances) {
    // Instances that ship explicit query triples keep them.
    if (inst.queries().empty()) inst = interpolation_protocol(inst, observed_fraction, rng);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation

/// Task-appropriate metrics for a normalised dataset. Parameters are read only.
inline metrics::MetricsReport evaluate(const TimeCheatModel& model, const Dataset& ds) {
  if (model.config().task != ds.task) {
    throw ConfigError("evaluate: model task " + to_string(model.config().task) + " does not match dataset task " +
                      to_string(ds.task));
  }
  metrics::MetricsReport report;
  report.task = ds.task;
  report.samples = ds.size();
  if (ds.task == Task::classification) {
    std::vector<std::size_t> pred, truth;
    std::vector<double> score;
    std::vector<int> binary;
    double loss = 0.0;
    for (const auto& inst : ds.instances) {
      const auto probs = model.probabilities(inst);
      const auto arg = static_cast<std::size_t>(std::max_element(probs.begin(), probs.end()) - probs.begin());
      pred.push_back(arg);
      truth.push_back(*inst.label());
      loss -= std::log(std::max(probs[*inst.label()], 1e-300));
      if (probs.size() == 2) {
        score.push_back(probs[1]);
        binary.push_back(*inst.label() == 1 ? 1 : 0);
      }
    }
    if (ds.empty()) return report;
    const auto suite = metrics::classification_suite(pred, truth, model.config().classes);
    report.values["accuracy"] = suite.accuracy;
    report.values["precision"] = suite.precision;
    report.values["recall"] = suite.recall;
    report.values["f1"] = suite.f1;
    report.values["loss"] = loss / static_cast<double>(ds.size());
    if (model.config().classes == 2) {
      const bool has_pos = std::count(binary.begin(), binary.end(), 1) > 0;
      const bool has_neg = std::count(binary.begin(), binary.end(), 0) > 0;
      if (has_pos && has_neg) report.values["auroc"] = metrics::auroc(score, binary);
      else diag::warn("evaluate: AUROC undefined, only one class present");
      if (has_pos) report.values["auprc"] = metrics::auprc(score, binary);
    }
  } else {
    std::vector<double> pred, target, mask;
    for (const auto& inst : ds.instances) {
      if (inst.queries().empty()) continue;
      const auto p = model.predict(inst, inst.queries());
      for (std::size_t i = 0; i < p.size(); ++i) {
        pred.push_back(p[i]);
        target.push_back(inst.queries()[i].value);
        mask.push_back(1.0);
      }
    }
    report.values["mse"] = metrics::mse_report(pred, target, mask);
    report.values["targets"] = static_cast<double>(pred.size());
  }
  return report;
}

/// Score used for model selection; larger is better.
inline double selection_score(const metrics::MetricsReport& r) {
  if (r.task != Task::classification) return r.contains("mse") ? -r.at("mse") : 0.0;
  if (r.contains("auroc")) return r.at("auroc");
  return r.contains("accuracy") ? r.at("accuracy") : 0.0;
}

// ---------------------------------------------------------------------------
// Checkpoints

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  metrics::MetricsReport val;
  bool improved = false;

  nlohmann::json to_json() const {
    return {{"epoch", epoch}, {"train_loss", train_loss}, {"val", val.to_json()}, {"improved", improved}};
  }
};

struct Checkpoint {
  RunConfig config;
  NormalizationStats stats;
  std::size_t epoch = 0;
  std::vector<std::pair<std::string, Tensor>> params;
  std::vector<EpochRecord> history;

  static Checkpoint capture(const RunConfig& cfg, const TimeCheatModel& model, const NormalizationStats& stats,
                            std::size_t epoch) {
    Checkpoint c;
    c.config = cfg;
    c.config.model = model.config();
    c.stats = stats;
    c.epoch = epoch;
    for (const auto& p : model.params()) c.params.emplace_back(p.name, p.value);
    return c;
  }

  /// Rebuilds the model and restores every parameter bit-exactly.
  TimeCheatModel restore() const {
    TimeCheatModel model(config.model);
    auto& store = model.params();
    if (store.size() != params.size()) throw ConfigError("checkpoint: parameter count does not match the model");
    for (const auto& [name, value] : params) {
      Parameter& p = store[store.slot(name)];
      if (p.value.shape() != value.shape()) throw ConfigError("checkpoint: shape mismatch for '" + name + "'");
      p.value = value;
    }
    return model;
  }

  nlohmann::json to_json() const {
    nlohmann::json ps = nlohmann::json::array();
    for (const auto& [name, t] : params) {
      ps.push_back({{"name", name}, {"shape", t.shape()}, {"data", std::vector<double>(t.data().begin(), t.data().end())}});
    }
    nlohmann::json st = nlohmann::json::array();
    for (const auto& s : stats) st.push_back({s.mean, s.std});
    nlohmann::json hist = nlohmann::json::array();
    for (const auto& h : history) hist.push_back(h.to_json());
    return {{"format", "timecheat-checkpoint"}, {"version", 1},     {"epoch", epoch}, {"config", timecheat::to_json(config)},
            {"stats", st},                      {"history", hist}, {"params", ps}};
  }

  static Checkpoint from_json(const nlohmann::json& j) {
    if (j.value("format", "") != "timecheat-checkpoint") throw ConfigError("not a timecheat checkpoint");
    Checkpoint c;
    merge_json(c.config, j.at("config"));
    c.epoch = j.at("epoch").get<std::size_t>();
    for (const auto& s : j.at("stats")) c.stats.push_back({s.at(0).get<double>(), s.at(1).get<double>()});
    for (const auto& p : j.at("params")) {
      c.params.emplace_back(p.at("name").get<std::string>(),
                            Tensor(p.at("shape").get<Shape>(), p.at("data").get<std::vector<double>>()));
    }
    for (const auto& h : j.at("history")) {
      EpochRecord r;
      r.epoch = h.at("epoch").get<std::size_t>();
      r.train_loss = h.at("train_loss").get<double>();
      r.improved = h.at("improved").get<bool>();
      r.val.task = parse_task(h.at("val").at("task").get<std::string>());
      r.val.samples = h.at("val").at("samples").get<std::size_t>();
      r.val.values = h.at("val").at("metrics").get<std::map<std::string, double>>();
      c.history.push_back(std::move(r));
    }
    return c;
  }

  void save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write checkpoint '" + path + "'");
    out << to_json().dump() << '\n';
    if (!out) throw std::runtime_error("write failed for checkpoint '" + path + "'");
  }

  static Checkpoint load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open checkpoint '" + path + "'");
    try {
      return from_json(nlohmann::json::parse(in));
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("checkpoint '" + path + "': " + e.what());
    }
  }
};

// ---------------------------------------------------------------------------
// Optimiser

/// Adaptive moment estimation over a parameter store; frozen parameters are
/// never touched.
class Adam {
 public:
  Adam(const ParamStore& store, OptimizerConfig cfg) : cfg_(cfg) {
    for (const auto& p : store) {
      m_.emplace_back(p.value.shape(), 0.0);
      v_.emplace_back(p.value.shape(), 0.0);
    }
  }

  void step(ParamStore& store, const std::vector<Tensor>& grads) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t s = 0; s < store.size(); ++s) {
      Parameter& p = store[s];
      if (p.frozen) continue;
      const Tensor& g = grads[s];
      Tensor& m = m_[s];
      Tensor& v = v_[s];
      for (std::size_t i = 0; i < p.value.size(); ++i) {
        const double gi = g[i] + cfg_.weight_decay * p.value[i];
        m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi;
        v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi;
        p.value[i] -= cfg_.lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg_.eps);
      }
    }
  }

 private:
  OptimizerConfig cfg_;
  std::vector<Tensor> m_, v_;
  std::size_t t_ = 0;
};

// ---------------------------------------------------------------------------
// Training

struct BatchGradient {
  double loss = 0.0;
  std::size_t counted = 0;
  std::vector<Tensor> grads;  // one per parameter slot
};

/// Mean loss and gradient over a batch. Instances may be evaluated on worker
/// threads, each with its own tape; the reduction runs in batch order.
inline BatchGradient batch_gradient(const TimeCheatModel& model, const std::vector<const Instance*>& batch,
                                    std::size_t threads = 1) {
  const ParamStore& store = model.params();
  struct Item {
    bool used = false;
    double loss = 0.0;
    std::vector<std::pair<std::size_t, Tensor>> grads;
    std::string error;
  };
  std::vector<Item> items(batch.size());
  auto work = [&](std::size_t i) {
    try {
      Tape tape;
      Var loss = model.loss(tape, *batch[i]);
      if (!loss.attached()) return;
      items[i].used = true;
      items[i].loss = loss.value().item();
      tape.backward(loss);
      items[i].grads = tape.parameter_gradients();
    } catch (const std::exception& e) {
      items[i].error = e.what();
    }
  };
  threads = std::max<std::size_t>(1, std::min(threads, batch.size()));
  if (threads == 1) {
    for (std::size_t i = 0; i < batch.size(); ++i) work(i);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < threads; ++w) {
      pool.emplace_back([&, w] {
        for (std::size_t i = w; i < batch.size(); i += threads) work(i);
      });
    }
    for (auto& t : pool) t.join();
  }

  BatchGradient out;
  out.grads.reserve(store.size());
  for (const auto& p : store) out.grads.emplace_back(p.value.shape(), 0.0);
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (!items[i].error.empty()) throw NumericError("instance " + std::to_string(i) + " of batch: " + items[i].error);
    if (!items[i].used) continue;
    if (!std::isfinite(items[i].loss)) throw NumericError("instance " + std::to_string(i) + " of batch: non-finite loss");
    ++out.counted;
    out.loss += items[i].loss;
    for (const auto& [slot, g] : items[i].grads) {
      Tensor& acc = out.grads[slot];
      for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += g[k];
    }
  }
  if (out.counted > 0) {
    const double inv = 1.0 / static_cast<double>(out.counted);
    out.loss *= inv;
    for (auto& g : out.grads)
      for (auto& v : g.data()) v *= inv;
  }
  return out;
}

struct TrainResult {
  Checkpoint best;
  Checkpoint last;
  std::vector<EpochRecord> history;
};

/// Minibatch training with best-validation selection and early stopping.
/// Datasets must already be normalised. When `metrics_log` is given one JSON
/// line per epoch is written to it.
inline TrainResult fit(TimeCheatModel& model, const RunConfig& cfg, const Dataset& train, const Dataset& val,
                       std::ostream* metrics_log = nullptr) {
  if (train.empty()) throw ConfigError("train: training split is empty");
  if (cfg.train.batch_size == 0) throw ConfigError("train: batch size must be positive");
  const NormalizationStats stats = train.stats.value_or(NormalizationStats(train.channels));
  std::mt19937_64 rng(cfg.train.seed);
  Adam adam(model.params(), cfg.optimizer);

  TrainResult result;
  double best_score = -std::numeric_limits<double>::infinity();
  std::size_t since_best = 0;
  const bool interp = train.task == Task::interpolation;
  Dataset epoch_train = train;
  if (interp && !cfg.data.resample_interpolation) {
    epoch_train = interpolation_protocol(train, cfg.data.observed_fraction, cfg.train.seed + 1);
  }

  for (std::size_t epoch = 0; epoch < cfg.train.epochs; ++epoch) {
    if (interp && cfg.data.resample_interpolation) {
      epoch_train = interpolation_protocol(train, cfg.data.observed_fraction, cfg.train.seed * 1000003 + epoch);
    }
    std::vector<std::size_t> order(epoch_train.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);

    double loss_sum = 0.0;
    std::size_t loss_count = 0;
    for (std::size_t b = 0, batch_no = 0; b < order.size(); b += cfg.train.batch_size, ++batch_no) {
      std::vector<const Instance*> batch;
      for (std::size_t i = b; i < std::min(order.size(), b + cfg.train.batch_size); ++i) {
        batch.push_back(&epoch_train.instances[order[i]]);
      }
      BatchGradient bg;
      try {
        bg = batch_gradient(model, batch, cfg.train.threads);
      } catch (const NumericError& e) {
        std::string ids;
        for (std::size_t i = b; i < std::min(order.size(), b + cfg.train.batch_size); ++i) {
          ids += (ids.empty() ? "" : ",") + std::to_string(order[i]);
        }
        throw TrainingError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                            std::to_string(batch_no) + " (instances " + ids + "): " + e.what());
      }
      if (bg.counted == 0) continue;
      adam.step(model.params(), bg.grads);
      loss_sum += bg.loss * static_cast<double>(bg.counted);
      loss_count += bg.counted;
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_count ? loss_sum / static_cast<double>(loss_count) : 0.0;
    double score;
    if (!val.empty()) {
      rec.val = evaluate(model, val);
      score = selection_score(rec.val);
    } else {
      rec.val.task = train.task;
      score = -rec.train_loss;
    }
    rec.improved = score > best_score;
    if (rec.improved) {
      best_score = score;
      since_best = 0;
      result.best = Checkpoint::capture(cfg, model, stats, epoch);
    } else {
      ++since_best;
    }
    result.history.push_back(rec);
    if (metrics_log) *metrics_log << rec.to_json().dump() << '\n' << std::flush;
    if (cfg.train.patience > 0 && since_best >= cfg.train.patience) break;
  }
  result.last = Checkpoint::capture(cfg, model, stats, result.history.empty() ? 0 : result.history.back().epoch);
  result.best.history = result.history;
  result.last.history = result.history;
  return result;
}

/// Datasets of a run after loading, splitting, normalising and (for
/// interpolation) applying the conditioning/target protocol to val and test.
struct PreparedData {
  Dataset train, val, test;
};

inline PreparedData prepare_data(const RunConfig& cfg) {
  Dataset all;
  Dataset val_raw, test_raw;
  bool explicit_splits = false;
  if (cfg.data.synthetic) {
    all = generate_synthetic(*cfg.data.synthetic, cfg.train.seed);
  } else if (!cfg.data.train_path.empty()) {
    all = load_dataset(cfg.data.train_path);
    if (!cfg.data.val_path.empty()) {
      val_raw = load_dataset(cfg.data.val_path);
      test_raw = cfg.data.test_path.empty() ? Dataset{} : load_dataset(cfg.data.test_path);
      explicit_splits = true;
    }
  } else {
    throw ConfigError("train: no dataset given (data.train or data.synthetic)");
  }
  Dataset train_raw;
  if (explicit_splits) {
    train_raw = std::move(all);
    if (test_raw.channels == 0) {
      test_raw = val_raw;
      test_raw.instances.clear();
    }
  } else {
    auto parts = split(all, cfg.data.split, cfg.train.seed);
    train_raw = std::move(parts.train);
    val_raw = std::move(parts.val);
    test_raw = std::move(parts.test);
  }
  PreparedData out;
  out.train = normalize(train_raw);
  out.val = normalize(val_raw, out.train.stats);
  out.test = normalize(test_raw, out.train.stats);
  if (out.train.task == Task::interpolation) {
    out.val = interpolation_protocol(out.val, cfg.data.observed_fraction, cfg.train.seed + 7919);
    out.test = interpolation_protocol(out.test, cfg.data.observed_fraction, cfg.train.seed + 104729);
  }
  return out;
}

/// Model configuration completed from the data: channels, task and classes.
inline ModelConfig resolve_model_config(const RunConfig& cfg, const Dataset& train) {
  ModelConfig m = cfg.model;
  m.channels = train.channels;
  m.task = train.task;
  if (train.task == Task::classification) m.classes = std::max<std::size_t>(train.classes, 2);
  m.init_seed = cfg.train.seed;
  return m;
}

struct RunOutcome {
  TrainResult result;
  metrics::MetricsReport test_report;
};

/// Full run: data preparation, training and the run directory layout
/// (config.json, best.ckpt, last.ckpt, metrics.jsonl, final_report.json).
inline RunOutcome train_run(RunConfig cfg) {
  PreparedData data = prepare_data(cfg);
  cfg.model = resolve_model_config(cfg, data.train);
  TimeCheatModel model(cfg.model);

  namespace fs = std::filesystem;
  std::ofstream metrics_file;
  if (!cfg.output_dir.empty()) {
    std::error_code ec;
    fs::create_directories(cfg.output_dir, ec);
    if (ec) throw std::runtime_error("cannot create run directory '" + cfg.output_dir + "': " + ec.message());
    std::ofstream cfg_out(fs::path(cfg.output_dir) / "config.json");
    cfg_out << to_json(cfg).dump(2) << '\n';
    if (!cfg_out) throw std::runtime_error("cannot write config.json in '" + cfg.output_dir + "'");
    metrics_file.open(fs::path(cfg.output_dir) / "metrics.jsonl");
    if (!metrics_file) throw std::runtime_error("cannot write metrics.jsonl in '" + cfg.output_dir + "'");
  }

  RunOutcome out;
  out.result = fit(model, cfg, data.train, data.val, metrics_file.is_open() ? &metrics_file : nullptr);
  TimeCheatModel best = out.result.best.restore();
  if (!data.test.empty()) out.test_report = evaluate(best, data.test);
  else out.test_report.task = data.train.task;

  if (!cfg.output_dir.empty()) {
    out.result.best.save((fs::path(cfg.output_dir) / "best.ckpt").string());
    out.result.last.save((fs::path(cfg.output_dir) / "last.ckpt").string());
    std::ofstream rep(fs::path(cfg.output_dir) / "final_report.json");
    rep << nlohmann::json{{"best_epoch", out.result.best.epoch}, {"test", out.test_report.to_json()}}.dump(2) << '\n';
    if (!rep) throw std::runtime_error("cannot write final_report.json in '" + cfg.output_dir + "'");
  }
  return out;
}

}  // namespace timecheat
