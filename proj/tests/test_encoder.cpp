#include <gtest/gtest.h>

#include <cmath>

#include "physiosync/ad/gradcheck.hpp"
#include "physiosync/encoder.hpp"

using namespace physiosync;
using namespace physiosync::model;

namespace {

Tensor<double> random_input(std::size_t rows, std::size_t cols, std::uint64_t seed, bool grad = false) {
  Rng rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<double> v(rows * cols);
  for (auto& x : v) x = n(rng);
  return Tensor<double>({rows, cols}, std::move(v), grad);
}

EncoderConfig small_config(std::size_t input_dim) {
  EncoderConfig c;
  c.views = 3;
  c.embed_dim = 8;
  c.heads = 2;
  c.blocks = 2;
  c.prompts = 2;
  c.input_dim = input_dim;
  c.dropout = 0.0;
  return c;
}

}  // namespace

TEST(Attention, SingleTokenReturnsValues) {
  auto q = random_input(1, 4, 1), k = random_input(1, 4, 2), v = random_input(1, 4, 3);
  auto r3 = [](const Tensor<double>& t) { return ad::reshape(t, {1, 1, 4}); };
  EXPECT_EQ(attention(r3(q), r3(k), r3(v)).values(), v.values());
}

TEST(Attention, IdenticalKeysAverageValues) {
  auto q = ad::reshape(random_input(3, 2, 4), {1, 3, 2});
  auto k = Tensor<double>::full({1, 3, 2}, 0.7);
  auto v = Tensor<double>({1, 3, 1}, {1.0, 2.0, 6.0});
  const auto out = attention(q, k, v);
  for (double y : out.values()) EXPECT_NEAR(y, 3.0, 1e-12);
}

TEST(Attention, TwoByTwoHandCase) {
  auto eye = Tensor<double>({1, 2, 2}, {1, 0, 0, 1});
  auto v = Tensor<double>({1, 2, 2}, {1, 2, 3, 4});
  const double s = 1.0 / std::sqrt(2.0);
  const double w = std::exp(s) / (std::exp(s) + 1.0);  // softmax([s, 0])[0]
  auto out = attention(eye, eye, v);
  EXPECT_NEAR(out[0], w * 1 + (1 - w) * 3, 1e-12);
  EXPECT_NEAR(out[1], w * 2 + (1 - w) * 4, 1e-12);
  EXPECT_NEAR(out[2], (1 - w) * 1 + w * 3, 1e-12);
  EXPECT_NEAR(out[3], (1 - w) * 2 + w * 4, 1e-12);
}

TEST(Mvge, MatchesIndependentEvaluation) {
  Rng rng(5);
  auto cfg = small_config(6);
  Encoder<double> enc(cfg, rng);
  auto& bn = enc.view_norm();
  for (std::size_t j = 0; j < bn.state.running_mean.size(); ++j) {
    bn.state.running_mean[j] = 0.05 * static_cast<double>(j % 5);
    bn.state.running_var[j] = 0.5 + 0.1 * static_cast<double>(j % 7);
  }
  auto x = random_input(4, 6, 6);
  auto tokens = enc.mvge_forward(x, Mode{});
  ASSERT_EQ(tokens.shape(), (ad::Shape{4, 3, 8}));
  const auto& W = enc.views().weight;
  const auto& bw = enc.views().bias;
  const auto& G = enc.gate().weight;
  const auto& bg = enc.gate().bias;
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 8; ++j) {
        double e = bw[i * 8 + j], g = bg[j];
        for (std::size_t k = 0; k < 6; ++k) {
          e += x[r * 6 + k] * W[k * 24 + i * 8 + j];
          g += x[r * 6 + k] * G[k * 8 + j];
        }
        const std::size_t f = i * 8 + j;
        const double gated = e / (1.0 + std::exp(-g));
        const double normed = bn.gamma[f] * (gated - bn.state.running_mean[f]) / std::sqrt(bn.state.running_var[f] + 1e-5) + bn.beta[f];
        EXPECT_NEAR(tokens[(r * 3 + i) * 8 + j], std::max(0.0, normed), 1e-6);
      }
}

TEST(Mvge, ClosedGateSuppressesAllViews) {
  Rng rng(7);
  auto cfg = small_config(5);
  Encoder<double> enc(cfg, rng);
  std::fill(enc.gate().weight.mutable_values().begin(), enc.gate().weight.mutable_values().end(), 0.0);
  std::fill(enc.gate().bias.mutable_values().begin(), enc.gate().bias.mutable_values().end(), -40.0);
  auto tokens = enc.mvge_forward(random_input(3, 5, 8), Mode{});
  // BN of a zero input in eval mode with fresh stats is beta = 0.
  for (double v : tokens.values()) EXPECT_NEAR(v, 0.0, 1e-12);
}

TEST(Tokens, LayoutAndEmbeddings) {
  Rng rng(9);
  auto cfg = small_config(4);
  cfg.views = 1;
  Encoder<double> enc(cfg, rng);
  EXPECT_EQ(enc.mvge_forward(random_input(2, 4, 1), Mode{}).dim(1), 1u);

  auto zeros = Tensor<double>::zeros({2, 1, 8});
  std::fill(enc.positional().mutable_values().begin(), enc.positional().mutable_values().end(), 0.0);
  std::fill(enc.modality_embedding().mutable_values().begin(), enc.modality_embedding().mutable_values().end(), 0.0);
  auto seq = enc.assemble_tokens(zeros);
  ASSERT_EQ(seq.shape(), (ad::Shape{2, 1 + 1 + 2, 8}));
  for (std::size_t j = 0; j < 8; ++j) EXPECT_EQ(seq[j], enc.cls_token()[j]);

  auto before = seq.values();
  auto& mod = enc.modality_embedding().mutable_values();
  for (std::size_t j = 0; j < 8; ++j) mod[j] = 0.25 * static_cast<double>(j);
  auto shifted = enc.assemble_tokens(zeros);
  for (std::size_t p = 0; p < shifted.size(); ++p) EXPECT_NEAR(shifted[p] - before[p], 0.25 * static_cast<double>(p % 8), 1e-12);
}

TEST(Encode, ShapeDeterminismAndRowEquivariance) {
  Rng rng(10);
  Encoder<double> enc(small_config(6), rng);
  auto x = random_input(3, 6, 11);
  auto h = enc.encode(x, Mode{});
  ASSERT_EQ(h.shape(), (ad::Shape{3, 8}));
  EXPECT_EQ(enc.encode(x, Mode{}).values(), h.values());

  std::vector<double> dup(x.values().begin(), x.values().begin() + 6);
  dup.insert(dup.end(), dup.begin(), dup.end());
  auto hd = enc.encode(Tensor<double>({2, 6}, dup), Mode{});
  for (std::size_t j = 0; j < 8; ++j) EXPECT_EQ(hd[j], hd[8 + j]);

  std::vector<double> swapped;
  for (std::size_t r : {2, 0, 1}) swapped.insert(swapped.end(), x.values().begin() + 6 * r, x.values().begin() + 6 * (r + 1));
  auto hs = enc.encode(Tensor<double>({3, 6}, swapped), Mode{});
  const std::size_t order[] = {2, 0, 1};
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t j = 0; j < 8; ++j) EXPECT_NEAR(hs[r * 8 + j], h[order[r] * 8 + j], 1e-12);
}

TEST(Encode, GradientMatchesFiniteDifferences) {
  Rng rng(12);
  Encoder<double> enc(small_config(5), rng);
  auto x = random_input(4, 5, 13, true);
  auto params = enc.parameters();
  std::vector<Tensor<double>> inputs{x};
  for (auto& p : params.params) inputs.push_back(p.tensor);
  auto w = random_input(4, 8, 14);
  auto r = ad::grad_check([&] { return ad::sum_all(ad::hadamard(enc.encode(x, Mode{true, nullptr}), w)); }, inputs);
  EXPECT_GT(r.checked, 100u);
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst;
}

TEST(Encode, Errors) {
  auto cfg = small_config(6);
  cfg.heads = 3;
  Rng rng(1);
  EXPECT_THROW(Encoder<double>(cfg, rng), ConfigError);
  Encoder<double> enc(small_config(6), rng);
  EXPECT_THROW(enc.encode(random_input(2, 5, 1), Mode{}), ShapeError);
  auto drop = small_config(6);
  drop.dropout = 0.2;
  Encoder<double> noisy(drop, rng);
  EXPECT_THROW(noisy.encode(random_input(2, 6, 1), Mode{true, nullptr}), ConfigError);
}

TEST(Clips, FlattenRejectsMixedBatches) {
  data::Clip a;
  a.data = data::Signal(2, 3, std::vector<float>{1, 2, 3, 4, 5, 6});
  a.modality = "eeg";
  a.t_seconds = 1.0;
  auto t = clips_to_tensor<double>({a, a});
  EXPECT_EQ(t.shape(), (ad::Shape{2, 6}));
  EXPECT_EQ(t[7], 2.0);
  auto b = a;
  b.modality = "pps";
  EXPECT_THROW(clips_to_tensor<double>({a, b}), DatasetError);
  EXPECT_THROW(clips_to_tensor<double>({}), ShapeError);
}
