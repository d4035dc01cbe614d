#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "timecheat/data.hpp"
#include "timecheat/metrics.hpp"
#include "timecheat/synthetic.hpp"
#include "timecheat/training.hpp"

namespace timecheat::cli {

/// Long-format CSV (instance_id, channel, time, value) to the JSONL dataset
/// format. Instances keep their first-appearance order. Labels, when given,
/// come from a second CSV of (instance_id, label).
inline Dataset convert_csv(std::istream& in, std::optional<std::size_t> channels, Task task,
                           std::istream* labels_in = nullptr, std::optional<Span> span = std::nullopt) {
  struct Rows {
    std::vector<Observation> obs;
  };
  std::vector<std::string> order;
  std::map<std::string, Rows> by_id;
  std::string line;
  std::size_t line_no = 0;
  std::size_t max_channel = 0;
  auto split_line = [](const std::string& s) {
    std::vector<std::string> f;
    std::stringstream ss(s);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      cell.erase(0, cell.find_first_not_of(" \t\r"));
      cell.erase(cell.find_last_not_of(" \t\r") + 1);
      f.push_back(cell);
    }
    return f;
  };
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    auto f = split_line(line);
    if (f.size() != 4) throw ParseError("expected 4 fields (instance_id, channel, time, value)", line_no);
    Observation o;
    try {
      std::size_t used = 0;
      const long long ch = std::stoll(f[1], &used);
      if (used != f[1].size() || ch < 0) throw std::invalid_argument("channel");
      o.channel = static_cast<std::size_t>(ch);
      o.time = std::stod(f[2]);
      o.value = std::stod(f[3]);
    } catch (const std::exception&) {
      if (line_no == 1) continue;  // header row
      throw ParseError("non-numeric channel, time or value", line_no);
    }
    if (!by_id.count(f[0])) order.push_back(f[0]);
    by_id[f[0]].obs.push_back(o);
    max_channel = std::max(max_channel, o.channel);
  }
  std::map<std::string, std::size_t> labels;
  if (labels_in) {
    std::size_t ln = 0;
    while (std::getline(*labels_in, line)) {
      ++ln;
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      auto f = split_line(line);
      if (f.size() != 2) throw ParseError("labels: expected (instance_id, label)", ln);
      try {
        labels[f[0]] = static_cast<std::size_t>(std::stoul(f[1]));
      } catch (const std::exception&) {
        if (ln == 1) continue;
        throw ParseError("labels: non-numeric label", ln);
      }
    }
  }

  Dataset ds;
  ds.task = task;
  ds.channels = channels.value_or(order.empty() ? 1 : max_channel + 1);
  for (const auto& id : order) {
    const auto& obs = by_id[id].obs;
    Span s;
    if (span) {
      s = *span;
    } else {
      auto [lo, hi] = std::minmax_element(obs.begin(), obs.end(),
                                          [](const Observation& a, const Observation& b) { return a.time < b.time; });
      s = {lo->time, hi->time};
    }
    std::optional<std::size_t> label;
    if (task == Task::classification) {
      auto it = labels.find(id);
      if (it == labels.end()) throw ConfigError("convert-csv: no label for instance '" + id + "'");
      label = it->second;
      ds.classes = std::max(ds.classes, it->second + 1);
    }
    ds.instances.emplace_back(ds.channels, s, obs, label);
  }
  return ds;
}

/// Writes a Dataset's query predictions as JSONL: one line per instance with
/// [channel, time, predicted, target] rows in raw units.
inline void write_predictions(std::ostream& out, const Dataset& normalized, const TimeCheatModel& model) {
  const auto& st = *normalized.stats;
  for (std::size_t n = 0; n < normalized.size(); ++n) {
    const auto& inst = normalized.instances[n];
    const auto pred = model.predict(inst, inst.queries());
    const Span span = inst.original_span();
    nlohmann::json rows = nlohmann::json::array();
    for (std::size_t i = 0; i < pred.size(); ++i) {
      const auto& q = inst.queries()[i];
      const auto& cs = st[q.channel];
      rows.push_back({q.channel, q.time * span.width() + span.begin, pred[i] * cs.std + cs.mean,
                      q.value * cs.std + cs.mean});
    }
    out << nlohmann::json{{"instance", n}, {"predictions", rows}}.dump() << '\n';
  }
}

/// Entry point of the command-line tool. Returns the process exit status:
/// 0 on success, 2 for usage errors, 1 for any other failure.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"TimeCHEAT: channel-harmony Transformer for irregularly sampled multivariate time series", "timecheat"};
  app.require_subcommand(1);

  // generate
  auto* gen = app.add_subcommand("generate", "Write a synthetic dataset as JSONL");
  std::string gen_spec = "two-class", gen_out;
  std::uint64_t gen_seed = 0;
  std::optional<std::size_t> gen_instances, gen_channels;
  gen->add_option("--spec", gen_spec, "Preset (two-class, coupled-two-class, interpolation, forecasting) or JSON file")
      ->capture_default_str();
  gen->add_option("--seed", gen_seed, "Generator seed")->capture_default_str();
  gen->add_option("--out", gen_out, "Output JSONL path")->required();
  gen->add_option("--instances", gen_instances, "Override the instance count");
  gen->add_option("--channels", gen_channels, "Override the channel count");

  // train
  auto* train = app.add_subcommand("train", "Train a model; writes a run directory");
  std::string cfg_path, data_path, val_path, test_path, synthetic, out_dir, encoder_mode;
  bool freeze_cm = false, no_node_residual = false, absolute_time = false;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> epochs, batch, patience, patches, ref_points, hidden, patch_dim, threads, emb_layers,
      enc_layers;
  std::optional<double> lr, observed_fraction;
  train->add_option("--config", cfg_path, "JSON run configuration");
  train->add_option("--data", data_path, "Training JSONL (split 80/10/10 unless --val-data is given)");
  train->add_option("--val-data", val_path, "Validation JSONL");
  train->add_option("--test-data", test_path, "Test JSONL");
  train->add_option("--synthetic", synthetic, "Train on a generated preset instead of a file");
  train->add_option("--out", out_dir, "Run directory");
  train->add_option("--encoder-mode", encoder_mode, "Patch encoder channel strategy")
      ->check(CLI::IsMember({"ci", "cd"}));
  train->add_flag("--freeze-channel-matrix", freeze_cm, "Keep the channel matrix and channel FFN at initialisation");
  train->add_flag("--no-node-residual", no_node_residual, "Disable the node residual in the graph layers");
  train->add_flag("--absolute-time", absolute_time, "Feed absolute instead of patch-relative time to the embedder");
  train->add_option("--seed", seed, "Run seed");
  train->add_option("--epochs", epochs);
  train->add_option("--batch-size", batch);
  train->add_option("--patience", patience, "Early-stopping patience in epochs (0 disables)");
  train->add_option("--lr", lr, "Adam step size");
  train->add_option("--patches", patches, "Number of patches P");
  train->add_option("--ref-points", ref_points, "Reference points per patch K");
  train->add_option("--hidden", hidden, "Graph feature width d_h");
  train->add_option("--patch-dim", patch_dim, "Patch embedding width T_P");
  train->add_option("--gnn-layers", emb_layers, "Graph layers L");
  train->add_option("--encoder-layers", enc_layers, "Transformer layers");
  train->add_option("--threads", threads, "Worker threads for batch gradients");
  train->add_option("--observed-fraction", observed_fraction, "Interpolation conditioning fraction");

  // evaluate
  auto* eval = app.add_subcommand("evaluate", "Evaluate a checkpoint; prints a JSON report");
  std::string ckpt_path, eval_data, eval_out;
  std::optional<double> eval_fraction;
  std::uint64_t eval_seed = 0;
  eval->add_option("--checkpoint", ckpt_path)->required();
  eval->add_option("--data", eval_data)->required();
  eval->add_option("--out", eval_out, "Also write the report to this file");
  eval->add_option("--observed-fraction", eval_fraction, "Interpolation conditioning fraction");
  eval->add_option("--seed", eval_seed, "Seed of the interpolation protocol")->capture_default_str();

  // interpolate
  auto* interp = app.add_subcommand("interpolate", "Predict held-out values with a checkpoint");
  std::string interp_ckpt, interp_data, interp_out;
  double interp_fraction = 0.5;
  std::uint64_t interp_seed = 0;
  interp->add_option("--checkpoint", interp_ckpt)->required();
  interp->add_option("--data", interp_data)->required();
  interp->add_option("--observed-fraction", interp_fraction)->capture_default_str();
  interp->add_option("--seed", interp_seed)->capture_default_str();
  interp->add_option("--out", interp_out, "Predictions JSONL");

  // convert-csv
  auto* conv = app.add_subcommand("convert-csv", "Convert long-format CSV to JSONL");
  std::string csv_in, csv_out, csv_labels, csv_task = "interpolation";
  std::optional<std::size_t> csv_channels;
  std::vector<double> csv_span;
  conv->add_option("--input", csv_in, "CSV with instance_id,channel,time,value")->required();
  conv->add_option("--out", csv_out)->required();
  conv->add_option("--labels", csv_labels, "CSV with instance_id,label (implies classification)");
  conv->add_option("--task", csv_task)->check(CLI::IsMember({"classification", "interpolation", "forecasting"}));
  conv->add_option("--channels", csv_channels);
  conv->add_option("--span", csv_span, "Common span t_min t_max")->expected(2);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    if (app.get_subcommands().empty()) {
      out << app.help("", CLI::AppFormatMode::All);
      return 0;
    }
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << '\n';
    return 2;
  }

  try {
    if (*gen) {
      SyntheticSpec spec;
      if (std::filesystem::exists(gen_spec)) {
        std::ifstream in(gen_spec);
        spec = synthetic_spec_from_json(nlohmann::json::parse(in));
      } else {
        spec = synthetic_preset(gen_spec);
      }
      if (gen_instances) spec.instances = *gen_instances;
      if (gen_channels) spec.channels = *gen_channels;
      save_dataset(gen_out, generate_synthetic(spec, gen_seed));
      return 0;
    }

    if (*train) {
      RunConfig cfg = cfg_path.empty() ? RunConfig{} : load_run_config(cfg_path);
      if (!data_path.empty()) {
        cfg.data.train_path = data_path;
        cfg.data.synthetic.reset();
      }
      if (!val_path.empty()) cfg.data.val_path = val_path;
      if (!test_path.empty()) cfg.data.test_path = test_path;
      if (!synthetic.empty()) cfg.data.synthetic = synthetic_preset(synthetic);
      if (!out_dir.empty()) cfg.output_dir = out_dir;
      if (!encoder_mode.empty()) cfg.model.encoder.mode = parse_encoder_mode(encoder_mode);
      if (freeze_cm) cfg.model.embedder.freeze_channel_matrix = true;
      if (no_node_residual) cfg.model.embedder.node_residual = false;
      if (absolute_time) cfg.model.embedder.patch_relative_time = false;
      apply_seed_override(cfg);
      if (seed) cfg.train.seed = *seed;
      if (epochs) cfg.train.epochs = *epochs;
      if (batch) cfg.train.batch_size = *batch;
      if (patience) cfg.train.patience = *patience;
      if (threads) cfg.train.threads = *threads;
      if (lr) cfg.optimizer.lr = *lr;
      if (patches) cfg.model.patches = *patches;
      if (ref_points) cfg.model.embedder.ref_points = *ref_points;
      if (hidden) cfg.model.embedder.hidden = *hidden;
      if (patch_dim) cfg.model.embedder.patch_dim = *patch_dim;
      if (emb_layers) cfg.model.embedder.layers = *emb_layers;
      if (enc_layers) cfg.model.encoder.layers = *enc_layers;
      if (observed_fraction) cfg.data.observed_fraction = *observed_fraction;
      if (cfg.output_dir.empty()) cfg.output_dir = "run";
      RunOutcome outcome = train_run(cfg);
      out << nlohmann::json{{"run_dir", cfg.output_dir},
                            {"best_epoch", outcome.result.best.epoch},
                            {"epochs_run", outcome.result.history.size()},
                            {"test", outcome.test_report.to_json()}}
                 .dump()
          << '\n';
      return 0;
    }

    if (*eval || *interp) {
      const bool is_eval = static_cast<bool>(*eval);
      const Checkpoint ckpt = Checkpoint::load(is_eval ? ckpt_path : interp_ckpt);
      const TimeCheatModel model = ckpt.restore();
      Dataset raw = load_dataset(is_eval ? eval_data : interp_data);
      if (raw.channels != model.channels()) {
        throw ConfigError("dataset has " + std::to_string(raw.channels) + " channels, checkpoint expects " +
                          std::to_string(model.channels()));
      }
      if (raw.task != model.config().task) {
        throw ConfigError("checkpoint task " + to_string(model.config().task) + " does not match dataset task " +
                          to_string(raw.task));
      }
      Dataset ds = normalize(raw, ckpt.stats);
      if (ds.task == Task::interpolation) {
        const double f = is_eval ? eval_fraction.value_or(ckpt.config.data.observed_fraction) : interp_fraction;
        ds = interpolation_protocol(ds, f, is_eval ? eval_seed : interp_seed);
      }
      if (is_eval) {
        const auto report = evaluate(model, ds);
        out << report.to_json().dump() << '\n';
        if (!eval_out.empty()) {
          std::ofstream f(eval_out);
          f << report.to_json().dump(2) << '\n';
          if (!f) throw std::runtime_error("cannot write report '" + eval_out + "'");
        }
        return 0;
      }
      if (ds.task == Task::classification) throw ConfigError("interpolate: checkpoint is a classification model");
      if (!interp_out.empty()) {
        std::ofstream f(interp_out);
        if (!f) throw std::runtime_error("cannot write predictions '" + interp_out + "'");
        write_predictions(f, ds, model);
      }
      out << evaluate(model, ds).to_json().dump() << '\n';
      return 0;
    }

    if (*conv) {
      std::ifstream in(csv_in);
      if (!in) throw std::runtime_error("cannot open '" + csv_in + "'");
      std::ifstream labels;
      Task task = parse_task(csv_task);
      if (!csv_labels.empty()) {
        labels.open(csv_labels);
        if (!labels) throw std::runtime_error("cannot open '" + csv_labels + "'");
        task = Task::classification;
      }
      std::optional<Span> span;
      if (csv_span.size() == 2) span = Span{csv_span[0], csv_span[1]};
      save_dataset(csv_out, convert_csv(in, csv_channels, task, csv_labels.empty() ? nullptr : &labels, span));
      return 0;
    }
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

}  // namespace timecheat::cli
