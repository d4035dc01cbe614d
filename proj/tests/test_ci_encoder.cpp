#include <gtest/gtest.h>

#include <numeric>
#include <random>

#include "support/oracles.hpp"
#include "timecheat/ci_encoder.hpp"

using namespace timecheat;

namespace {

struct Encoder {
  ParamStore store;
  EncoderParams params;

  Encoder(std::size_t width, EncoderConfig cfg = {}, std::uint64_t seed = 1) {
    std::mt19937_64 rng(seed);
    params = EncoderParams::create(store, width, cfg, rng);
  }

  Tensor operator()(const Tensor& h, EncoderTrace* trace = nullptr) const {
    Tape tape;
    Var r = encode_tokens(tape, store, params, tape.constant(to_tokens(h)), h.dim(1), h.dim(0), trace);
    return from_tokens(r.value(), h.dim(1), h.dim(0));
  }
};

Tensor random_embedding(std::size_t P, std::size_t C, std::size_t T, std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  Tensor h(Shape{P, C, T});
  for (auto& v : h.data()) v = g(rng);
  return h;
}

double at(const Tensor& h, std::size_t p, std::size_t c, std::size_t t) { return h[(p * h.dim(1) + c) * h.dim(2) + t]; }

bool channel_equal(const Tensor& a, const Tensor& b, std::size_t c) {
  for (std::size_t p = 0; p < a.dim(0); ++p)
    for (std::size_t t = 0; t < a.dim(2); ++t)
      if (at(a, p, c, t) != at(b, p, c, t)) return false;
  return true;
}

}  // namespace

TEST(PositionalEncoding, DocumentedValues) {
  Tensor pe = positional_encoding(4, 8);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(pe(0, 2 * i), 0.0);
    EXPECT_EQ(pe(0, 2 * i + 1), 1.0);
  }
  EXPECT_NEAR(pe(1, 0), 0.841471, 1e-6);
  EXPECT_DOUBLE_EQ(pe(1, 0), std::sin(1.0));
  EXPECT_DOUBLE_EQ(pe(3, 5), std::cos(3.0 / std::pow(10000.0, 4.0 / 8.0)));
  for (double v : pe.data()) EXPECT_LE(std::abs(v), 1.0);
  EXPECT_THROW(positional_encoding(4, 7), ConfigError);
}

TEST(Tokens, RoundTrip) {
  std::mt19937_64 rng(1);
  Tensor h = random_embedding(3, 2, 4, rng);
  Tensor tokens = to_tokens(h);
  EXPECT_EQ(tokens(1 * 3 + 2, 1), at(h, 2, 1, 1));
  EXPECT_EQ(from_tokens(tokens, 2, 3), h);
}

TEST(Encode, ShapeMismatchNamesTheExpectedShape) {
  Encoder enc(8);
  Tape tape;
  try {
    encode_tokens(tape, enc.store, enc.params, tape.constant(Tensor(Shape{6, 4})), 2, 3);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("(3, 2, 8)"), std::string::npos) << e.what();
  }
}

TEST(Encode, SingleTokenReducesToTheFeedForwardPath) {
  EncoderConfig cfg;
  cfg.layers = 1;
  Encoder enc(4, cfg);
  std::mt19937_64 rng(2);
  Tensor h = random_embedding(1, 3, 4, rng);
  const Tensor r = enc(h);
  const auto& lp = enc.params.layers[0];
  const auto& s = enc.store;
  auto layer_norm = [](Tensor x, const Tensor& gain, const Tensor& shift) {
    for (std::size_t i = 0; i < x.rows(); ++i) {
      auto row = x.row(i);
      const double mean = std::accumulate(row.begin(), row.end(), 0.0) / static_cast<double>(row.size());
      double var = 0.0;
      for (double v : row) var += (v - mean) * (v - mean);
      var /= static_cast<double>(row.size());
      for (std::size_t j = 0; j < row.size(); ++j) row[j] = (row[j] - mean) / std::sqrt(var + 1e-5) * gain[j] + shift[j];
    }
    return x;
  };
  // PE of patch 0 is (0, 1, 0, 1); the single-token softmax weight is 1 so attention returns V.
  Tensor x = to_tokens(h);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    x(i, 1) += 1.0;
    x(i, 3) += 1.0;
  }
  Tensor v = kernels::matmul(kernels::matmul(x, s[lp.value].value), s[lp.output].value);
  Tensor x1 = layer_norm(kernels::add(x, v), s[lp.norm1_gain].value, s[lp.norm1_shift].value);
  Tensor hidden = kernels::map(kernels::affine(x1, s[lp.ff1.weight].value, s[lp.ff1.bias].value),
                               [](double a) { return a > 0.0 ? a : 0.0; });
  Tensor ff = kernels::affine(hidden, s[lp.ff2.weight].value, s[lp.ff2.bias].value);
  Tensor expect = layer_norm(kernels::add(x1, ff), s[lp.norm2_gain].value, s[lp.norm2_shift].value);
  EXPECT_LE(max_abs_diff(to_tokens(r), expect), 1e-12);
}

TEST(Encode, ChannelPermutationEquivariance) {
  Encoder enc(8);
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 5; ++trial) {
    Tensor h = random_embedding(4, 5, 8, rng);
    std::vector<std::size_t> perm(5);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::shuffle(perm.begin(), perm.end(), rng);
    Tensor hp(h.shape());
    for (std::size_t p = 0; p < 4; ++p)
      for (std::size_t c = 0; c < 5; ++c)
        for (std::size_t t = 0; t < 8; ++t) hp[(p * 5 + c) * 8 + t] = at(h, p, perm[c], t);
    const Tensor r = enc(h), rp = enc(hp);
    double worst = 0.0;
    for (std::size_t p = 0; p < 4; ++p)
      for (std::size_t c = 0; c < 5; ++c)
        for (std::size_t t = 0; t < 8; ++t) worst = std::max(worst, std::abs(at(rp, p, c, t) - at(r, p, perm[c], t)));
    EXPECT_LE(worst, 1e-9);
  }
}

TEST(Encode, ZeroingOneChannelOnlyChangesThatChannel) {
  Encoder enc(8);
  std::mt19937_64 rng(4);
  Tensor h = random_embedding(4, 3, 8, rng);
  Tensor z = h;
  for (std::size_t p = 0; p < 4; ++p)
    for (std::size_t t = 0; t < 8; ++t) z[(p * 3 + 1) * 8 + t] = 0.0;
  const Tensor r = enc(h), rz = enc(z);
  EXPECT_TRUE(channel_equal(r, rz, 0));
  EXPECT_FALSE(channel_equal(r, rz, 1));
  EXPECT_TRUE(channel_equal(r, rz, 2));
}

TEST(Encode, ChannelDependentModeMixesChannels) {
  EncoderConfig cfg;
  cfg.mode = EncoderMode::cd;
  Encoder enc(8, cfg);
  std::mt19937_64 rng(5);
  Tensor h = random_embedding(4, 3, 8, rng);
  Tensor z = h;
  for (std::size_t t = 0; t < 8; ++t) z[(2 * 3 + 1) * 8 + t] += 0.5;
  const Tensor r = enc(h), rz = enc(z);
  EXPECT_FALSE(channel_equal(r, rz, 0));
  EXPECT_FALSE(channel_equal(r, rz, 2));
}

TEST(Encode, AttentionRowsSumToOne) {
  Encoder enc(8);
  std::mt19937_64 rng(6);
  EncoderTrace trace;
  enc(random_embedding(5, 2, 8, rng), &trace);
  ASSERT_EQ(trace.layers.size(), 2u);
  const auto& pat = *trace.pattern;
  for (const auto& layer : trace.layers) {
    for (std::size_t q = 0; q < pat.num_queries(); ++q) {
      EXPECT_EQ(pat.degree(q), 5u);
      for (std::size_t h = 0; h < layer.heads; ++h) {
        double s = 0.0;
        for (std::size_t j = pat.offsets[q]; j < pat.offsets[q + 1]; ++j) s += layer.weights[j * layer.heads + h];
        EXPECT_NEAR(s, 1.0, 1e-9);
      }
    }
  }
}

TEST(Encode, GradientsMatchFiniteDifferences) {
  EncoderConfig cfg;
  cfg.ff_hidden = 6;
  Encoder enc(4, cfg, 7);
  std::mt19937_64 rng(8);
  const Tensor h = random_embedding(3, 2, 4, rng);
  std::vector<Tensor> inputs{to_tokens(h)};
  auto r = oracle::check_primitive(inputs, [&](Tape& tape, std::span<const Var> v) {
    Var out = encode_tokens(tape, enc.store, enc.params, v[0], 2, 3);
    Tensor w(out.shape());
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = std::sin(static_cast<double>(i));
    return ops::sum(ops::mul(out, tape.constant(w)));
  });
  EXPECT_EQ(r.failed, 0u) << r.worst << " at " << r.worst_where;
}
