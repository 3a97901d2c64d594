// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <numeric>

#include "test_util.hpp"
#include "tspm/error.hpp"
#include "tspm/gradcheck.hpp"
#include "tspm/temporal.hpp"

using namespace tspm;
using namespace tspm::testing;

namespace {

Linear identity_key(std::size_t d) {
  std::vector<float> w(d * d, 0.0f);
  for (std::size_t i = 0; i < d; ++i) w[i * d + i] = 1.0f;
  return {Tensor({d, d}, w), Tensor::zeros({d})};
}

// Full stable sort by descending weight; the first k, ascending.
std::vector<std::size_t> full_sort_topk(std::span<const float> w, std::size_t k) {
  std::vector<std::size_t> order(w.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return w[a] > w[b]; });
  order.resize(k);
  std::sort(order.begin(), order.end());
  return order;
}

}  // namespace

TEST_CASE("identical frames give uniform weights") {
  const std::size_t t = 7, d = 4;
  std::vector<float> frames;
  for (std::size_t i = 0; i < t; ++i) frames.insert(frames.end(), {0.1f, -0.4f, 0.3f, 0.2f});
  const Tensor w = attention_weights(Tensor::vector({1, 2, 3, 4}), Tensor({t, d}, frames), identity_key(d));
  for (float v : w.data()) CHECK(v == doctest::Approx(1.0 / t).epsilon(1e-6));
}

TEST_CASE("a dominant prompt saturates the softmax") {
  const std::size_t t = 5, d = 5;
  std::vector<float> frames(t * d, 0.0f);
  for (std::size_t i = 0; i < t; ++i) frames[i * d + i] = 1.0f;
  std::vector<float> prompt(d, 0.0f);
  prompt[3] = 200.0f;
  const Tensor w = attention_weights(Tensor::vector(prompt), Tensor({t, d}, frames), identity_key(d));
  CHECK(w.at(3) == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("attention weights match the composed oracle") {
  Rng rng(11);
  const std::size_t t = 6, dv = 5, d = 4;
  const Tensor frames = random_tensor(rng, {t, dv});
  const Tensor kw = random_tensor(rng, {dv, d}), kb = random_tensor(rng, {d});
  const Tensor prompt = random_tensor(rng, {d});
  const Tensor w = attention_weights(prompt, frames, Linear{kw, kb});

  std::vector<double> keys = naive_matmul(frames.data(), kw.data(), t, dv, d);
  std::vector<float> scores(t);
  for (std::size_t i = 0; i < t; ++i) {
    double acc = 0.0;
    for (std::size_t c = 0; c < d; ++c) acc += double(prompt.at(c)) * (keys[i * d + c] + kb.at(c));
    scores[i] = static_cast<float>(acc / 2.0);
  }
  CHECK(max_abs_diff(w.data(), naive_softmax(scores)) < 1e-5);
  double total = 0.0;
  for (float v : w.data()) total += v;
  CHECK(total == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("attention weights validate dimensions") {
  Rng rng(12);
  const Tensor frames = random_tensor(rng, {4, 3});
  CHECK_THROWS_AS(attention_weights(random_tensor(rng, {2}), frames, identity_key(3)), DimensionError);
  CHECK_THROWS_AS(attention_weights(random_tensor(rng, {3}), frames, identity_key(2)), DimensionError);
  const Linear proj{random_tensor(rng, {2, 3}), Tensor()};
  CHECK(attention_weights(random_tensor(rng, {2}), frames, identity_key(3), proj).shape() == Shape{4});
}

TEST_CASE("attention weights are differentiable") {
  Rng rng(13);
  const std::size_t t = 5, dv = 4;
  const Tensor frames = random_tensor(rng, {t, dv});
  const Tensor kw = random_tensor(rng, {dv, dv}, 0.5), kb = random_tensor(rng, {dv});
  const Tensor prompt = random_tensor(rng, {dv});
  const Tensor mix = random_tensor(rng, {t});
  auto weigh = [&](const Tensor& w) { return sum(elementwise_mul(w, mix)); };
  CHECK(finite_diff_check([&](const Tensor& x) { return weigh(attention_weights(prompt, frames, Linear{x, kb})); }, kw) <
        1e-3);
  CHECK(finite_diff_check([&](const Tensor& x) { return weigh(attention_weights(prompt, frames, Linear{kw, x})); }, kb) <
        1e-3);
  CHECK(finite_diff_check([&](const Tensor& x) { return weigh(attention_weights(x, frames, Linear{kw, kb})); }, prompt) <
        1e-3);
  CHECK(finite_diff_check([&](const Tensor& x) { return weigh(attention_weights(prompt, x, Linear{kw, kb})); }, frames) <
        1e-3);
}

TEST_CASE("top-k picks the largest weights") {
  const std::vector<float> w = {0.05f, 0.50f, 0.20f, 0.15f, 0.10f};
  CHECK(topk_indices(w, 2) == std::vector<std::size_t>{1, 2});
  const std::vector<float> uniform(5, 0.2f);
  CHECK(topk_indices(uniform, 3) == std::vector<std::size_t>{0, 1, 2});
  CHECK(topk_indices(w, 5) == std::vector<std::size_t>{0, 1, 2, 3, 4});
  CHECK_THROWS_AS(topk_indices(w, 6), ConfigError);
  CHECK_THROWS_AS(topk_indices(w, 0), ConfigError);
}

TEST_CASE("top-k agrees with a full-sort oracle") {
  Rng rng(14);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t t = 1 + rng.index(12);
    std::vector<float> w(t);
    // Coarse values so that ties are common.
    for (float& v : w) v = static_cast<float>(rng.index(5)) * 0.25f;
    const std::size_t k = 1 + rng.index(t);
    REQUIRE(topk_indices(w, k) == full_sort_topk(w, k));
  }
}

TEST_CASE("selection gathers exactly and keeps the top-k property") {
  Rng rng(15);
  const std::size_t t = 9, da = 3, dv = 4, k = 4;
  const Tensor audio = random_tensor(rng, {t, da}), frames = random_tensor(rng, {t, dv});
  const Tensor w = softmax(random_tensor(rng, {t}), 0);
  const TemporalSelection sel = select_topk(w, audio, frames, k);
  REQUIRE(sel.omega.size() == k);
  CHECK(std::is_sorted(sel.omega.begin(), sel.omega.end()));
  float min_in = 1.0f, max_out = 0.0f;
  for (std::size_t i = 0; i < t; ++i) {
    if (std::binary_search(sel.omega.begin(), sel.omega.end(), i)) {
      min_in = std::min(min_in, w.at(i));
    } else {
      max_out = std::max(max_out, w.at(i));
    }
  }
  CHECK(min_in >= max_out);
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t c = 0; c < da; ++c) CHECK(sel.selected_audio.at(i * da + c) == audio.at(sel.omega[i] * da + c));
    for (std::size_t c = 0; c < dv; ++c) CHECK(sel.selected_frames.at(i * dv + c) == frames.at(sel.omega[i] * dv + c));
  }
  for (std::size_t i = 1; i < k; ++i) {
    CHECK(w.at(sel.omega[sel.by_weight[i - 1]]) >= w.at(sel.omega[sel.by_weight[i]]));
  }
  CHECK_THROWS_AS(select_topk(w, audio, frames, t + 1), ConfigError);
  CHECK_THROWS_AS(select_topk(w, random_tensor(rng, {t - 1, da}), frames, k), DimensionError);
}

TEST_CASE("selecting every segment is a reordering") {
  Rng rng(16);
  const std::size_t t = 6;
  const Tensor audio = random_tensor(rng, {t, 2}), frames = random_tensor(rng, {t, 3});
  const TemporalSelection sel = select_topk(softmax(random_tensor(rng, {t}), 0), audio, frames, t);
  CHECK(sel.selected_frames.to_vector() == frames.to_vector());
  CHECK(sel.selected_audio.to_vector() == audio.to_vector());
}

TEST_CASE("selection passes gradient to the weights") {
  Rng rng(17);
  const std::size_t t = 6, dv = 3;
  const Tensor audio = random_tensor(rng, {t, 2}), frames = random_tensor(rng, {t, dv});
  const Tensor logits = random_tensor(rng, {t});
  const Tensor mix = random_tensor(rng, {3, dv});
  GradTape tape;
  TapeScope scope(tape);
  Tensor x = logits.detach();
  x.set_requires_grad(true);
  const TemporalSelection sel = select_topk(softmax(x, 0), audio, frames, 3);
  backward(sum(elementwise_mul(sel.selected_frames, mix)));
  REQUIRE(x.has_grad());
  double norm = 0.0;
  for (float g : x.grad()) norm += std::abs(g);
  CHECK(norm > 0.0);
}

TEST_CASE("increasing a selected score keeps it selected") {
  Rng rng(18);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t t = 8, k = 3;
    std::vector<float> scores(t);
    for (float& s : scores) s = static_cast<float>(rng.normal());
    const auto before = topk_indices(naive_softmax_f(scores), k);
    const std::size_t pick = before[rng.index(k)];
    scores[pick] += static_cast<float>(rng.uniform(0.0, 3.0));
    const auto after = topk_indices(naive_softmax_f(scores), k);
    CHECK(std::binary_search(after.begin(), after.end(), pick));
  }
}

TEST_CASE("fixed selection uses uniform weights") {
  Rng rng(19);
  const Tensor audio = random_tensor(rng, {5, 2}), frames = random_tensor(rng, {5, 3});
  const TemporalSelection sel = select_fixed({3, 0}, audio, frames);
  CHECK(sel.omega == std::vector<std::size_t>{0, 3});
  for (float v : sel.weights.data()) CHECK(v == doctest::Approx(0.2));
  CHECK(sel.selected_frames.at(3) == frames.at(9));
  CHECK_FALSE(sel.gate.defined());
}
