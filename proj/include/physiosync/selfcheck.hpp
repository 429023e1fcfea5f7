#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "physiosync/ad/gradcheck.hpp"
#include "physiosync/ad/nn.hpp"
#include "physiosync/trainer.hpp"

// Finite-difference checks of every differentiable primitive and of the
// composed pre-training loss, shared by the test suite and `physiosync gradcheck`.
namespace physiosync::selfcheck {

using ad::Tensor;

inline Tensor<double> random_tensor(ad::Shape shape, ad::Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(ad::numel(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor<double>(std::move(shape), std::move(v), true);
}

/// Weighted sum with fixed random weights so every output component matters.
inline Tensor<double> probe(const Tensor<double>& y, std::uint64_t seed) {
  ad::Rng rng(seed);
  auto w = random_tensor(y.shape(), rng);
  w.set_requires_grad(false);
  return ad::sum_all(ad::hadamard(y, w));
}

using Inputs = std::vector<Tensor<double>>;
using ScalarFn = std::function<Tensor<double>()>;

struct Case {
  std::string name;
  std::function<std::pair<Inputs, ScalarFn>(ad::Rng&)> make;
  ad::GradCheckOptions options{};
};

inline std::vector<Case> primitive_cases() {
  using namespace ad;
  std::vector<Case> cases;
  auto add = [&](std::string name, std::function<std::pair<Inputs, ScalarFn>(Rng&)> make) { cases.push_back({std::move(name), std::move(make)}); };
  add("matmul", [](Rng& r) {
    auto a = random_tensor({3, 4}, r), b = random_tensor({4, 5}, r);
    return std::pair<Inputs, ScalarFn>{{a, b}, [=] { return probe(matmul(a, b), 1); }};
  });
  add("bmm", [](Rng& r) {
    auto a = random_tensor({2, 3, 4}, r), b = random_tensor({2, 4, 2}, r);
    return std::pair<Inputs, ScalarFn>{{a, b}, [=] { return probe(bmm(a, b), 2); }};
  });
  add("add", [](Rng& r) {
    auto a = random_tensor({3, 4}, r), b = random_tensor({3, 4}, r);
    return std::pair<Inputs, ScalarFn>{{a, b}, [=] { return probe(ad::add(a, b), 3); }};
  });
  add("add_bias", [](Rng& r) {
    auto a = random_tensor({3, 4}, r), b = random_tensor({4}, r);
    return std::pair<Inputs, ScalarFn>{{a, b}, [=] { return probe(add_bias(a, b), 4); }};
  });
  add("hadamard", [](Rng& r) {
    auto a = random_tensor({3, 4}, r), b = random_tensor({3, 4}, r);
    return std::pair<Inputs, ScalarFn>{{a, b}, [=] { return probe(hadamard(a, b), 5); }};
  });
  add("concat", [](Rng& r) {
    auto a = random_tensor({2, 3, 2}, r), b = random_tensor({2, 1, 2}, r);
    return std::pair<Inputs, ScalarFn>{{a, b}, [=] { return probe(concat<double>({a, b, a}, 1), 6); }};
  });
  add("sum_mean", [](Rng& r) {
    auto a = random_tensor({3, 4, 2}, r);
    return std::pair<Inputs, ScalarFn>{{a}, [=] { return ad::add(probe(sum(a, 1), 7), probe(mean(a, 2), 8)); }};
  });
  add("relu", [](Rng& r) {
    auto a = random_tensor({4, 5}, r);
    return std::pair<Inputs, ScalarFn>{{a}, [=] { return probe(relu(a), 9); }};
  });
  add("sigmoid", [](Rng& r) {
    auto a = random_tensor({4, 5}, r, -3, 3);
    return std::pair<Inputs, ScalarFn>{{a}, [=] { return probe(sigmoid(a), 10); }};
  });
  add("softmax", [](Rng& r) {
    auto a = random_tensor({3, 5}, r, -2, 2);
    return std::pair<Inputs, ScalarFn>{{a}, [=] { return probe(softmax(a), 11); }};
  });
  add("logsumexp", [](Rng& r) {
    auto a = random_tensor({3, 5}, r, -2, 2);
    return std::pair<Inputs, ScalarFn>{{a}, [=] { return probe(logsumexp(a), 12); }};
  });
  add("exp_log", [](Rng& r) {
    auto a = random_tensor({3, 3}, r, 0.5, 2.0);
    return std::pair<Inputs, ScalarFn>{{a}, [=] { return ad::add(probe(exp(a), 13), probe(log(a), 14)); }};
  });
  add("scale_permute", [](Rng& r) {
    auto a = random_tensor({2, 3, 4, 2}, r);
    return std::pair<Inputs, ScalarFn>{{a}, [=] { return probe(scale(permute(a, {2, 0, 3, 1}), 1.7), 15); }};
  });
  add("transpose_reshape_slice", [](Rng& r) {
    auto a = random_tensor({3, 4}, r);
    return std::pair<Inputs, ScalarFn>{{a}, [=] { return probe(slice(reshape(transpose(a), {2, 6}), 1, 1, 4), 16); }};
  });
  add("normalize_rows", [](Rng& r) {
    auto a = random_tensor({3, 4}, r);
    return std::pair<Inputs, ScalarFn>{{a}, [=] { return probe(normalize_rows(a), 17); }};
  });
  add("batch_norm_train", [](Rng& r) {
    auto x = random_tensor({6, 3}, r), g = random_tensor({3}, r), b = random_tensor({3}, r);
    auto state = std::make_shared<BatchNormState<double>>(3);
    return std::pair<Inputs, ScalarFn>{{x, g, b}, [=] { return probe(batch_norm(x, g, b, *state, true), 18); }};
  });
  add("batch_norm_eval", [](Rng& r) {
    auto x = random_tensor({4, 3}, r), g = random_tensor({3}, r), b = random_tensor({3}, r);
    auto state = std::make_shared<BatchNormState<double>>(3);
    state->running_mean = {0.1, -0.2, 0.3};
    state->running_var = {0.5, 1.5, 2.0};
    return std::pair<Inputs, ScalarFn>{{x, g, b}, [=] { return probe(batch_norm(x, g, b, *state, false), 19); }};
  });
  add("layer_norm", [](Rng& r) {
    auto x = random_tensor({2, 3, 5}, r), g = random_tensor({5}, r), b = random_tensor({5}, r);
    return std::pair<Inputs, ScalarFn>{{x, g, b}, [=] { return probe(layer_norm(x, g, b), 20); }};
  });
  add("dropout", [](Rng& r) {
    auto x = random_tensor({4, 5}, r);
    return std::pair<Inputs, ScalarFn>{{x}, [=] {
                                         Rng stream(77);  // same mask on every evaluation
                                         return probe(dropout(x, 0.3, stream, true), 21);
                                       }};
  });
  return cases;
}

/// Small configuration for the composed-loss check: long clips only, no dropout.
inline RunConfig composed_config() {
  RunConfig c;
  c.encoder.views = 2;
  c.encoder.embed_dim = 8;
  c.encoder.heads = 2;
  c.encoder.blocks = 1;
  c.encoder.ffn_dim = 16;
  c.encoder.prompts = 1;
  c.encoder.dropout = 0.0;
  c.projector = {16, 8, 0.0};
  c.plan.use_short = false;
  c.pretrain.k = 2;
  return c;
}

/// In-memory paired batch of random clips (K slots, augmented when DA is on).
inline data::MiniBatch random_batch(const RunConfig& cfg, std::size_t samples, ad::Rng& rng) {
  data::MiniBatch b;
  b.modalities = {cfg.eeg_modality, cfg.pps_modality};
  b.subjects = {"a", "b"};
  b.clips.resize(2);
  std::normal_distribution<float> n(0.0f, 1.0f);
  const std::size_t channels[] = {3, 2};
  for (std::size_t m = 0; m < 2; ++m)
    for (std::size_t s = 0; s < 2; ++s)
      for (std::size_t i = 0; i < cfg.pretrain.k; ++i) {
        data::Clip c;
        c.data = data::Signal(channels[m], samples);
        for (auto& v : c.data.data) v = n(rng);
        c.modality = b.modalities[m];
        c.subject = b.subjects[s];
        c.stimulus = "v" + std::to_string(i);
        c.t_seconds = cfg.plan.t_long;
        b.clips[m][s].push_back(std::move(c));
      }
  return cfg.use_da ? augment::expand_batch(b, cfg.effective_augment(), rng) : b;
}

/// alpha L_eeg + beta L_pps + gamma L_cc through encoders, projectors and the
/// cross-modal map, with respect to every parameter (strided sample per tensor).
inline Case composed_pretrain_case() {
  Case c;
  c.name = "pretrain_loss";
  c.options.max_components_per_input = 4;
  c.make = [](ad::Rng& rng) {
    const auto cfg = composed_config();
    auto model = std::make_shared<train::PretrainModel<double>>(cfg, std::array<std::size_t, 2>{3 * 4, 2 * 4}, rng);
    auto batch = std::make_shared<data::MiniBatch>(random_batch(cfg, 4, rng));
    Inputs inputs;
    for (auto& p : model->parameters().params) inputs.push_back(p.tensor);
    return std::pair<Inputs, ScalarFn>{inputs, [model, batch] { return model->loss(*batch, model::Mode{true, nullptr}).total; }};
  };
  return c;
}

struct CaseResult {
  std::string name;
  double worst = 0.0;
  std::size_t checked = 0;
  bool passed = false;
};

/// Runs each case on `seeds` seeds; a case passes when its worst relative error is below `tolerance`.
inline std::vector<CaseResult> run_suite(const std::vector<Case>& cases, std::size_t seeds = 20, double tolerance = 1e-4) {
  std::vector<CaseResult> out;
  for (const auto& c : cases) {
    CaseResult r{c.name};
    for (std::size_t seed = 0; seed < seeds; ++seed) {
      ad::Rng rng(1000 + seed);
      auto [inputs, f] = c.make(rng);
      const auto res = ad::grad_check(f, inputs, c.options);
      r.worst = std::max(r.worst, res.max_rel_error);
      r.checked += res.checked;
    }
    r.passed = r.worst < tolerance && r.checked > 0;
    out.push_back(r);
  }
  return out;
}

inline std::vector<Case> all_cases() {
  auto cases = primitive_cases();
  cases.push_back(composed_pretrain_case());
  return cases;
}

}  // namespace physiosync::selfcheck
