#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "support/oracles.hpp"
#include "timecheat/model.hpp"

using namespace timecheat;

namespace {

ModelConfig tiny(Task task) {
  ModelConfig cfg;
  cfg.channels = 3;
  cfg.task = task;
  cfg.embedder.hidden = 8;
  cfg.embedder.ref_points = 4;
  cfg.embedder.patch_dim = 8;
  cfg.encoder.ff_hidden = 8;
  cfg.head.decoder_hidden = 8;
  cfg.head.time_dim = 4;
  cfg.init_seed = 3;
  return cfg;
}

Instance random_instance(std::size_t channels, std::mt19937_64& rng, std::optional<std::size_t> label = {},
                         std::vector<Observation> queries = {}) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<Observation> obs;
  for (std::size_t i = 0; i < 12; ++i) obs.push_back({i % channels, u(rng), u(rng) * 2 - 1});
  return Instance(channels, {0, 1}, obs, label, std::move(queries));
}

}  // namespace

TEST(CrossEntropy, DocumentedValues) {
  EXPECT_LT(cross_entropy(Tensor::matrix(1, 2, {10, -10}), {0}), 1e-4);
  EXPECT_DOUBLE_EQ(cross_entropy(Tensor::matrix(1, 2, {0, 0}), {1}), std::log(2.0));
  const double batch = cross_entropy(Tensor::matrix(2, 2, {10, -10, 0, 0}), {0, 1});
  EXPECT_DOUBLE_EQ(batch, (cross_entropy(Tensor::matrix(1, 2, {10, -10}), {0}) + std::log(2.0)) / 2.0);
  EXPECT_THROW(cross_entropy(Tensor::matrix(1, 2, {0, 0}), {2}), RangeError);
}

TEST(CrossEntropy, LogitGradientSumsToZero) {
  Tape tape;
  Var x = tape.variable(Tensor::matrix(1, 4, {0.3, -1.2, 2.0, 0.1}));
  tape.backward(ops::cross_entropy(x, {2}));
  const Tensor g = tape.grad(x);
  EXPECT_NEAR(g[0] + g[1] + g[2] + g[3], 0.0, 1e-15);
}

TEST(MaskedMse, DocumentedValues) {
  const Tensor pred = Tensor::matrix(3, 1, {1, 2, 3});
  const Tensor mask = Tensor::matrix(3, 1, {1, 0, 1});
  EXPECT_EQ(masked_mse(pred, Tensor::matrix(3, 1, {1, 0, 5}), mask), 2.0);
  EXPECT_EQ(masked_mse(pred, Tensor::matrix(3, 1, {1, 1e6, 5}), mask), 2.0);
  std::vector<std::string> warnings;
  diag::ScopedWarningSink sink([&](const std::string& m) { warnings.push_back(m); });
  EXPECT_EQ(masked_mse(pred, pred, Tensor(Shape{3, 1}, 0.0)), 0.0);
  EXPECT_EQ(warnings.size(), 1u);
}

TEST(Classifier, ZeroWeightsGiveUniformProbabilities) {
  TimeCheatModel model(tiny(Task::classification));
  for (std::size_t i = 0; i < model.params().size(); ++i) {
    if (model.params()[i].name.rfind("head.classifier", 0) == 0) model.params()[i].value.fill(0.0);
  }
  std::mt19937_64 rng(1);
  Instance inst = random_instance(3, rng, 1);
  const auto probs = model.probabilities(inst);
  EXPECT_EQ(probs, (std::vector<double>{0.5, 0.5}));
  Tape tape;
  EXPECT_DOUBLE_EQ(model.loss(tape, inst).value().item(), std::log(2.0));
}

TEST(Classifier, LogitsInvariantToChannelPermutationOfR) {
  TimeCheatModel model(tiny(Task::classification));
  std::mt19937_64 rng(2);
  Tensor r(Shape{3 * 4, 8});
  std::normal_distribution<double> g;
  for (auto& v : r.data()) v = g(rng);
  Tensor rp(r.shape());
  const std::size_t perm[] = {2, 0, 1};
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t p = 0; p < 4; ++p)
      for (std::size_t t = 0; t < 8; ++t) rp(c * 4 + p, t) = r(perm[c] * 4 + p, t);
  Tape tape;
  const Tensor a = model.logits(tape, tape.constant(r)).value();
  const Tensor b = model.logits(tape, tape.constant(rp)).value();
  EXPECT_LE(max_abs_diff(a, b), 1e-12);
}

TEST(Decoder, RepeatedQueriesAndForecastClamp) {
  TimeCheatModel model(tiny(Task::forecasting));
  std::mt19937_64 rng(3);
  Instance inst = random_instance(3, rng);
  const std::vector<Observation> q{{1, 0.3, 0}, {1, 0.3, 0}, {2, 1.2, 0}};
  const auto pred = model.predict(inst, q);
  ASSERT_EQ(pred.size(), 3u);
  EXPECT_EQ(pred[0], pred[1]);
  EXPECT_EQ(patch_of(1.2, 4), 3u);
  EXPECT_THROW(model.predict(inst, std::vector<Observation>{{3, 0.5, 0}}), RangeError);
}

TEST(Decoder, PredictionIgnoresOtherChannelsRepresentation) {
  TimeCheatModel model(tiny(Task::interpolation));
  std::mt19937_64 rng(4);
  Tensor r(Shape{3 * 4, 8});
  std::normal_distribution<double> g;
  for (auto& v : r.data()) v = g(rng);
  Tensor r2 = r;
  for (std::size_t t = 0; t < 8; ++t) r2(2 * 4 + 1, t) += 1.0;  // channel 2
  const std::vector<Observation> q{{0, 0.3, 0}, {1, 0.9, 0}};
  Tape tape;
  EXPECT_EQ(model.predict(tape, tape.constant(r), q).value(), model.predict(tape, tape.constant(r2), q).value());
}

TEST(Model, EndToEndGradientsMatchFiniteDifferences) {
  for (Task task : {Task::classification, Task::interpolation}) {
    ModelConfig cfg = tiny(task);
    cfg.embedder.hidden = 4;
    cfg.embedder.ref_points = 2;
    cfg.embedder.patch_dim = 4;
    cfg.encoder.ff_hidden = 4;
    TimeCheatModel model(cfg);
    std::mt19937_64 rng(5);
    Instance inst = task == Task::classification
                        ? random_instance(3, rng, 1)
                        : random_instance(3, rng, std::nullopt, {{0, 0.2, 0.5}, {2, 0.7, -0.3}});
    Tape tape;
    tape.backward(model.loss(tape, inst));
    oracle::GradCheck r;
    for (const auto& [slot, grad] : tape.parameter_gradients()) {
      Tensor& value = model.params()[slot].value;
      for (std::size_t i = 0; i < value.size(); ++i) {
        const double numeric = oracle::central_difference(
            [&] {
              Tape t;
              return model.loss(t, inst).value().item();
            },
            value[i]);
        oracle::compare(r, grad[i], numeric, 1e-3, 1e-7, model.params()[slot].name);
      }
    }
    EXPECT_EQ(r.failed, 0u) << to_string(task) << ": " << r.worst << " at " << r.worst_where;
  }
}
