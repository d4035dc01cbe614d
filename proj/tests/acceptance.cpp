// Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any FAIL.
// Pass criterion numbers as arguments to run a subset.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "support/oracles.hpp"
#include "timecheat/timecheat.hpp"

using namespace timecheat;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int precision = 4) {
  std::ostringstream s;
  s << std::setprecision(precision) << v;
  return s.str();
}

double at(const Tensor& h, std::size_t p, std::size_t c, std::size_t t) { return h[(p * h.dim(1) + c) * h.dim(2) + t]; }

bool patch_equal(const Tensor& a, const Tensor& b, std::size_t p) {
  const std::size_t stride = a.dim(1) * a.dim(2);
  return std::equal(a.data().begin() + static_cast<std::ptrdiff_t>(p * stride),
                    a.data().begin() + static_cast<std::ptrdiff_t>((p + 1) * stride),
                    b.data().begin() + static_cast<std::ptrdiff_t>(p * stride));
}

bool channel_equal(const Tensor& a, const Tensor& b, std::size_t c) {
  for (std::size_t p = 0; p < a.dim(0); ++p)
    for (std::size_t t = 0; t < a.dim(2); ++t)
      if (at(a, p, c, t) != at(b, p, c, t)) return false;
  return true;
}

ModelConfig small_model(std::size_t channels, Task task, std::size_t patches = 4) {
  ModelConfig cfg;
  cfg.channels = channels;
  cfg.task = task;
  cfg.patches = patches;
  cfg.embedder.hidden = 8;
  cfg.embedder.ref_points = 4;
  cfg.embedder.patch_dim = 16;
  cfg.encoder.ff_hidden = 16;
  cfg.head.decoder_hidden = 8;
  cfg.head.time_dim = 4;
  cfg.init_seed = 17;
  return cfg;
}

std::vector<Observation> random_observations(std::size_t channels, std::size_t count, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> g(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> ch(0, channels - 1);
  std::vector<Observation> obs;
  for (std::size_t i = 0; i < count; ++i) obs.push_back({ch(rng), u(rng), g(rng)});
  return obs;
}

// ---------------------------------------------------------------------------

Outcome gradient_correctness() {
  const auto t0 = Clock::now();
  oracle::GradCheck r;
  for (Task task : {Task::classification, Task::interpolation}) {
    ModelConfig cfg;
    cfg.channels = 3;
    cfg.task = task;
    cfg.patches = 4;
    cfg.embedder.ref_points = 4;
    cfg.embedder.hidden = 8;
    cfg.embedder.layers = 2;
    cfg.init_seed = 5;
    TimeCheatModel model(cfg);
    std::mt19937_64 rng(21);
    auto obs = random_observations(3, 24, rng);
    Instance inst = task == Task::classification
                        ? Instance(3, {0, 1}, obs, std::size_t{1})
                        : Instance(3, {0, 1}, obs, std::nullopt, {{0, 0.15, 0.4}, {1, 0.55, -0.7}, {2, 0.95, 1.1}});
    Tape tape;
    tape.backward(model.loss(tape, inst));
    for (const auto& [slot, grad] : tape.parameter_gradients()) {
      Tensor& value = model.params()[slot].value;
      for (std::size_t i = 0; i < value.size(); ++i) {
        const double numeric = oracle::central_difference(
            [&] {
              Tape t;
              return model.loss(t, inst).value().item();
            },
            value[i], 1e-5);
        oracle::compare(r, grad[i], numeric, 1e-3, 1e-7, to_string(task) + " " + model.params()[slot].name);
      }
    }
  }
  const double secs = seconds_since(t0);
  Outcome o;
  o.pass = r.failed == 0 && secs < 60.0;
  o.detail = std::to_string(r.checked) + " coordinates, " + std::to_string(r.failed) + " over tolerance, " +
             fmt(secs, 3) + " s" + (r.failed ? " (worst " + fmt(r.worst) + " at " + r.worst_where + ")" : "");
  return o;
}

Outcome shape_totality() {
  std::mt19937_64 rng(2);
  std::size_t failures = 0, empties = 0, empty_channels = 0, singles = 0;
  std::string first;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t C = 1 + rng() % 4, P = 1 + rng() % 6;
    std::vector<Observation> obs;
    const int kind = trial % 4;
    if (kind == 0) {
      ++empties;
    } else if (kind == 1) {
      // channel 0 left empty
      for (auto& o : random_observations(C, 1 + rng() % 30, rng))
        if (o.channel != 0) obs.push_back(o);
      ++empty_channels;
    } else if (kind == 2) {
      // exactly one observation in every patch
      std::uniform_real_distribution<double> u(0.0, 1.0);
      for (std::size_t p = 0; p < P; ++p)
        obs.push_back({rng() % C, (static_cast<double>(p) + u(rng)) / static_cast<double>(P), u(rng)});
      ++singles;
    } else {
      obs = random_observations(C, 1 + rng() % 60, rng);
    }
    try {
      TimeCheatModel model(small_model(C, Task::classification, P));
      const Shape expected{P, C, model.patch_dim()};
      Instance inst(C, {0, 1}, obs);
      const Tensor h = model.embed_series(inst);
      const Tensor r = model.encode(h);
      bool finite = true;
      for (double v : r.data()) finite = finite && std::isfinite(v);
      if (h.shape() != expected || r.shape() != expected || !finite) {
        ++failures;
        if (first.empty()) first = "trial " + std::to_string(trial) + " got " + to_string(r.shape());
      }
    } catch (const std::exception& e) {
      ++failures;
      if (first.empty()) first = "trial " + std::to_string(trial) + ": " + e.what();
    }
  }
  return {failures == 0, "100 instances (" + std::to_string(empties) + " empty, " + std::to_string(empty_channels) +
                             " with an empty channel, " + std::to_string(singles) + " single-observation patches), " +
                             std::to_string(failures) + " failures" + (first.empty() ? "" : "; " + first)};
}

Outcome patch_locality() {
  std::mt19937_64 rng(3);
  std::size_t leaks = 0, unchanged = 0;
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t C = 2 + rng() % 3, P = 4;
    TimeCheatModel model(small_model(C, Task::classification, P));
    auto obs = random_observations(C, 40, rng);
    const std::size_t target = rng() % P;
    const Tensor before = model.embed_series(Instance(C, {0, 1}, obs));
    std::normal_distribution<double> g(0.0, 1.0);
    bool touched = false;
    for (auto& o : obs) {
      if (patch_of(o.time, P) != target) continue;
      o.value += g(rng);
      touched = true;
    }
    if (!touched) obs.push_back({0, (static_cast<double>(target) + 0.5) / P, 1.0});
    const Tensor after = model.embed_series(Instance(C, {0, 1}, obs));
    for (std::size_t p = 0; p < P; ++p) {
      if (p != target && !patch_equal(before, after, p)) ++leaks;
    }
    if (patch_equal(before, after, target)) ++unchanged;
  }
  return {leaks == 0 && unchanged == 0, "50 trials, " + std::to_string(leaks) + " other patches changed, " +
                                            std::to_string(unchanged) + " perturbed patches unchanged"};
}

Outcome channel_independence() {
  auto leaks_in = [](EncoderMode mode) {
    std::mt19937_64 rng(4);
    std::size_t leaking_trials = 0;
    for (int trial = 0; trial < 50; ++trial) {
      const std::size_t C = 2 + rng() % 4;
      ModelConfig cfg = small_model(C, Task::classification);
      cfg.encoder.mode = mode;
      TimeCheatModel model(cfg);
      Tensor h(Shape{cfg.patches, C, model.patch_dim()});
      std::normal_distribution<double> g(0.0, 1.0);
      for (auto& v : h.data()) v = g(rng);
      const std::size_t c = rng() % C;
      Tensor hp = h;
      for (std::size_t p = 0; p < cfg.patches; ++p)
        for (std::size_t t = 0; t < model.patch_dim(); ++t) hp[(p * C + c) * model.patch_dim() + t] += g(rng);
      const Tensor r = model.encode(h), rp = model.encode(hp);
      bool leaked = false;
      for (std::size_t other = 0; other < C; ++other) {
        if (other != c && !channel_equal(r, rp, other)) leaked = true;
      }
      leaking_trials += leaked;
    }
    return leaking_trials;
  };
  const std::size_t ci = leaks_in(EncoderMode::ci), cd = leaks_in(EncoderMode::cd);
  return {ci == 0 && cd == 50, "ci: " + std::to_string(ci) + "/50 trials leaked; cd: " + std::to_string(cd) +
                                   "/50 trials leaked (expected 0 and 50)"};
}

Outcome permutation_equivariance() {
  std::mt19937_64 rng(5);
  const std::size_t C = 5;
  TimeCheatModel model(small_model(C, Task::classification));
  const std::size_t P = model.patches(), T = model.patch_dim();
  double worst = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    Tensor h(Shape{P, C, T});
    std::normal_distribution<double> g(0.0, 1.0);
    for (auto& v : h.data()) v = g(rng);
    std::vector<std::size_t> perm(C);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::shuffle(perm.begin(), perm.end(), rng);
    Tensor hp(h.shape());
    for (std::size_t p = 0; p < P; ++p)
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t t = 0; t < T; ++t) hp[(p * C + c) * T + t] = at(h, p, perm[c], t);
    const Tensor r = model.encode(h), rp = model.encode(hp);
    for (std::size_t p = 0; p < P; ++p)
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t t = 0; t < T; ++t) worst = std::max(worst, std::abs(at(rp, p, c, t) - at(r, p, perm[c], t)));
  }
  return {worst <= 1e-9, "20 permutations, max deviation " + fmt(worst)};
}

Outcome order_invariance() {
  std::mt19937_64 rng(6);
  std::size_t mismatches = 0;
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t C = 1 + rng() % 4;
    const Task task = trial % 2 ? Task::classification : Task::interpolation;
    TimeCheatModel model(small_model(C, task));
    auto obs = random_observations(C, 30, rng);
    // duplicate timestamps across channels exercise shared time nodes
    for (std::size_t i = 0; i + 1 < obs.size(); i += 5)
      if (obs[i + 1].channel != obs[i].channel) obs[i + 1].time = obs[i].time;
    const std::vector<Observation> queries{{0, 0.1, 0}, {C - 1, 0.6, 0}};
    auto output = [&](const std::vector<Observation>& o) {
      Instance inst(C, {0, 1}, o);
      Tensor r = model.forward_representation(inst);
      std::vector<double> out(r.data().begin(), r.data().end());
      if (task == Task::classification) {
        Tensor l = model.logits(inst);
        out.insert(out.end(), l.data().begin(), l.data().end());
      } else {
        auto p = model.predict(inst, queries);
        out.insert(out.end(), p.begin(), p.end());
      }
      return out;
    };
    const auto a = output(obs);
    std::shuffle(obs.begin(), obs.end(), rng);
    mismatches += a != output(obs);
  }
  return {mismatches == 0, "50 shuffles, " + std::to_string(mismatches) + " outputs differed"};
}

Outcome metric_oracles() {
  std::mt19937_64 rng(7);
  double worst = 0.0;
  std::size_t sets = 0;
  while (sets < 1000) {
    const std::size_t n = 2 + rng() % 199;
    std::vector<double> scores(n);
    std::vector<int> labels(n);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const bool coarse = rng() % 2;
    for (std::size_t i = 0; i < n; ++i) {
      scores[i] = coarse ? std::round(u(rng) * 10.0) / 10.0 : u(rng);
      labels[i] = u(rng) < 0.3 ? 1 : 0;
    }
    if (std::count(labels.begin(), labels.end(), 1) == 0 || std::count(labels.begin(), labels.end(), 0) == 0) continue;
    worst = std::max(worst, std::abs(metrics::auroc(scores, labels) - oracle::brute_force_auroc(scores, labels)));
    ++sets;
  }
  const std::vector<double> es{0.8, 0.6, 0.4, 0.2};
  const std::vector<int> el{1, 0, 1, 0};
  const double example = metrics::auroc(es, el);
  return {worst <= 1e-12 && example == 0.75,
          "1000 sets, max deviation " + fmt(worst) + "; worked example " + fmt(example, 17)};
}

Outcome masked_loss() {
  std::mt19937_64 rng(8);
  std::size_t changed = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 1 + rng() % 50;
    Tensor pred(Shape{n, 1}), target(Shape{n, 1}), mask(Shape{n, 1});
    std::normal_distribution<double> g(0.0, 1.0);
    for (std::size_t i = 0; i < n; ++i) {
      pred[i] = g(rng);
      target[i] = g(rng);
      mask[i] = rng() % 3 ? 1.0 : 0.0;
    }
    mask[rng() % n] = 1.0;
    Tensor scrambled = target;
    for (std::size_t i = 0; i < n; ++i)
      if (mask[i] == 0.0) scrambled[i] = g(rng) * 1e6;
    changed += masked_mse(pred, target, mask) != masked_mse(pred, scrambled, mask);
  }
  const double hand = masked_mse(Tensor::matrix(3, 1, {1, 2, 3}), Tensor::matrix(3, 1, {1, 0, 5}), Tensor::matrix(3, 1, {1, 0, 1}));
  return {changed == 0 && hand == 2.0,
          "100 trials, " + std::to_string(changed) + " changed by masked targets; hand case " + fmt(hand, 17)};
}

RunConfig classification_run(const char* preset, std::uint64_t seed) {
  RunConfig cfg;
  cfg.data.synthetic = synthetic_preset(preset);
  cfg.train.seed = seed;
  cfg.train.threads = 1;
  return cfg;
}

Outcome overfit_smoke() {
  const auto t0 = Clock::now();
  RunConfig cfg = classification_run("two-class", 0);
  cfg.train.patience = 0;
  cfg.train.epochs = 200;
  const Dataset raw = generate_synthetic(*cfg.data.synthetic, cfg.train.seed);
  const Dataset train = normalize(raw);
  TimeCheatModel model(resolve_model_config(cfg, train));
  const TrainResult res = fit(model, cfg, train, train);
  const double secs = seconds_since(t0);

  double best_acc = 0.0;
  std::size_t reached = 0;
  for (const auto& rec : res.history) {
    if (rec.val.at("accuracy") > best_acc) best_acc = rec.val.at("accuracy");
    if (!reached && rec.val.at("accuracy") >= 0.95) reached = rec.epoch + 1;
  }
  // 20-epoch moving average of the training loss
  std::size_t rises = 0, last_rise = 0;
  double max_rise = 0.0, prev = std::numeric_limits<double>::infinity();
  for (std::size_t e = 20; e <= res.history.size(); ++e) {
    double avg = 0.0;
    for (std::size_t i = e - 20; i < e; ++i) avg += res.history[i].train_loss;
    avg /= 20.0;
    if (avg > prev) {
      ++rises;
      last_rise = e - 1;
      max_rise = std::max(max_rise, avg - prev);
    }
    prev = avg;
  }

  std::size_t correct = 0;
  std::size_t observed = 0, slots = 0;
  for (const auto& inst : raw.instances) {
    correct += oracle::periodogram_classify(inst, cfg.data.synthetic->class_frequencies) == *inst.label();
    observed += inst.observation_count();
  }
  slots = raw.instances.size() * raw.channels * cfg.data.synthetic->grid_steps;
  const double separable = static_cast<double>(correct) / static_cast<double>(raw.size());
  const double missing = 1.0 - static_cast<double>(observed) / static_cast<double>(slots);

  Outcome o;
  o.pass = best_acc >= 0.95 && secs < 300.0 && separable >= 0.99 && missing >= 0.5;
  o.detail = "train accuracy " + fmt(best_acc) + (reached ? " (>=0.95 at epoch " + std::to_string(reached) + ")" : "") +
             ", " + fmt(secs, 3) + " s; periodogram " + fmt(separable) + "; missing " + fmt(missing, 3) +
             "; 20-epoch moving-average loss rose " + std::to_string(rises) + " times" +
             (rises ? " (max +" + fmt(max_rise, 2) + ", last at epoch " + std::to_string(last_rise) + ")" : "");
  return o;
}

Outcome interpolation_analogue() {
  const auto t0 = Clock::now();
  RunConfig cfg;
  cfg.data.synthetic = synthetic_preset("interpolation");
  cfg.data.observed_fraction = 0.5;
  cfg.train.seed = 0;
  cfg.train.threads = 1;
  PreparedData data = prepare_data(cfg);
  TimeCheatModel model(resolve_model_config(cfg, data.train));
  const TrainResult res = fit(model, cfg, data.train, data.val);
  TimeCheatModel best = res.best.restore();
  const double model_mse = evaluate(best, data.test).at("mse");

  // Baseline: each target predicted by its channel's mean over the
  // instance's conditioning observations (0, the normalised global mean,
  // when the channel has none).
  double sq = 0.0;
  std::size_t n = 0;
  for (const auto& inst : data.test.instances) {
    for (const auto& q : inst.queries()) {
      const auto ch = inst.channel(q.channel);
      double mean = 0.0;
      for (const auto& tv : ch) mean += tv.value;
      if (!ch.empty()) mean /= static_cast<double>(ch.size());
      sq += (q.value - mean) * (q.value - mean);
      ++n;
    }
  }
  const double baseline = sq / static_cast<double>(n);
  const double secs = seconds_since(t0);
  return {model_mse <= 0.5 * baseline && secs < 600.0,
          "model MSE " + fmt(model_mse) + " vs channel-mean baseline " + fmt(baseline) + " (ratio " +
              fmt(model_mse / baseline, 3) + ") on " + std::to_string(n) + " targets, " +
              std::to_string(res.history.size()) + " epochs, " + fmt(secs, 3) + " s"};
}

Outcome ablation_direction() {
  const auto t0 = Clock::now();
  std::vector<double> frozen, full;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    for (bool freeze : {false, true}) {
      RunConfig cfg = classification_run("coupled-two-class", seed);
      cfg.model.embedder.freeze_channel_matrix = freeze;
      PreparedData data = prepare_data(cfg);
      TimeCheatModel model(resolve_model_config(cfg, data.train));
      const TrainResult res = fit(model, cfg, data.train, data.val);
      double best = 0.0;
      for (const auto& rec : res.history) best = std::max(best, rec.val.at("auroc"));
      (freeze ? frozen : full).push_back(best);
    }
  }
  auto median = [](std::vector<double> v) {
    std::sort(v.begin(), v.end());
    return v[v.size() / 2];
  };
  auto list = [](const std::vector<double>& v) {
    std::string s;
    for (double x : v) s += (s.empty() ? "" : ",") + fmt(x, 3);
    return s;
  };
  const double mf = median(frozen), md = median(full);
  return {mf <= md, "median val AUROC frozen " + fmt(mf) + " [" + list(frozen) + "] vs default " + fmt(md) + " [" +
                        list(full) + "], " + fmt(seconds_since(t0), 3) + " s"};
}

Outcome reproducibility() {
  RunConfig cfg = classification_run("two-class", 3);
  cfg.train.epochs = 10;
  cfg.train.batch_size = 8;
  auto run = [&](const std::string& name) {
    cfg.output_dir = (std::filesystem::temp_directory_path() / ("timecheat_accept_" + name)).string();
    std::filesystem::remove_all(cfg.output_dir);
    train_run(cfg);
    std::ifstream in(std::filesystem::path(cfg.output_dir) / "metrics.jsonl", std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), {});
  };
  const std::string a = run("a"), b = run("b");
  const auto lines = std::count(a.begin(), a.end(), '\n');
  return {!a.empty() && a == b, std::to_string(lines) + " epochs logged, files " + (a == b ? "identical" : "differ")};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"gradient correctness", gradient_correctness},
      {"shape totality", shape_totality},
      {"patch locality", patch_locality},
      {"channel independence", channel_independence},
      {"channel-permutation equivariance", permutation_equivariance},
      {"order invariance", order_invariance},
      {"metric oracles", metric_oracles},
      {"masked-loss contract", masked_loss},
      {"overfit smoke test", overfit_smoke},
      {"interpolation analogue", interpolation_analogue},
      {"ablation direction", ablation_direction},
      {"reproducibility", reproducibility},
  };
  std::set<std::size_t> selected;
  for (int i = 1; i < argc; ++i) selected.insert(static_cast<std::size_t>(std::stoul(argv[i])));

  diag::set_warning_sink({});
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (!selected.empty() && !selected.count(i + 1)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << "  " << std::setw(2) << i + 1 << "  " << criteria[i].first << ": "
              << o.detail << std::endl;
  }
  return failed ? 1 : 0;
}
