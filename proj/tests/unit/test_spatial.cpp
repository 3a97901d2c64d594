// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <map>
#include <numeric>

#include "test_util.hpp"
#include "tspm/error.hpp"
#include "tspm/gradcheck.hpp"
#include "tspm/spatial.hpp"

using namespace tspm;
using namespace tspm::testing;

namespace {

// Overwrites every parameter with random values so no branch is closed.
void randomize(ParameterStore& store, Rng& rng, double scale = 0.4) {
  for (const auto& [name, t] : store.params()) {
    Tensor p = t;
    for (float& v : p.mutable_data()) v = static_cast<float>(scale * rng.normal());
  }
}

std::vector<TransformerBlock> random_blocks(ParameterStore& store, Rng& rng, std::size_t count, std::size_t width,
                                            std::size_t heads) {
  std::vector<TransformerBlock> blocks;
  for (std::size_t b = 0; b < count; ++b) {
    blocks.push_back(TransformerBlock::create(store, "b" + std::to_string(b), width, heads, 2 * width, rng));
  }
  randomize(store, rng);
  return blocks;
}

Tensor rows(std::vector<std::vector<float>> r) {
  std::vector<float> flat;
  for (const auto& row : r) flat.insert(flat.end(), row.begin(), row.end());
  return Tensor({r.size(), r.front().size()}, flat);
}

// Checks every post-merge token against the size-weighted mean of the
// pre-merge tokens it absorbed.
double worst_mean_error(const Tensor& before, const Tensor& after, const Provenance& prov_before,
                        const Provenance& prov_after, std::size_t d) {
  std::map<std::size_t, std::size_t> owner;  // original index → after position
  for (std::size_t i = 0; i < prov_after.size(); ++i)
    for (std::size_t j : prov_after[i]) owner[j] = i;
  std::vector<std::vector<double>> acc(prov_after.size(), std::vector<double>(d, 0.0));
  for (std::size_t j = 0; j < prov_before.size(); ++j) {
    const std::size_t i = owner.at(prov_before[j].front());
    const double w = double(prov_before[j].size()) / double(prov_after[i].size());
    for (std::size_t c = 0; c < d; ++c) acc[i][c] += w * before.at(j * d + c);
  }
  double worst = 0.0;
  for (std::size_t i = 0; i < prov_after.size(); ++i)
    for (std::size_t c = 0; c < d; ++c) worst = std::max(worst, std::abs(acc[i][c] - after.at(i * d + c)));
  return worst;
}

std::vector<std::size_t> sorted_sizes(const Provenance& p) {
  std::vector<std::size_t> s;
  for (const auto& set : p) s.push_back(set.size());
  std::sort(s.begin(), s.end());
  return s;
}

}  // namespace

TEST_CASE("gather copies the selected segments") {
  Rng rng(1);
  const Tensor tokens = random_tensor(rng, {3, 4, 2});
  CHECK(gather_tokens(tokens, {0, 1, 2}).to_vector() == tokens.to_vector());
  const Tensor one = gather_tokens(tokens, {2});
  CHECK(one.shape() == Shape{1, 4, 2});
  for (std::size_t i = 0; i < 8; ++i) CHECK(one.at(i) == tokens.at(16 + i));
  const Tensor some = gather_tokens(tokens, {2, 0});
  for (std::size_t i = 0; i < 8; ++i) CHECK(some.at(8 + i) == tokens.at(i));
  CHECK_THROWS_AS(gather_tokens(tokens, {3}), IndexError);
  CHECK_THROWS_AS(gather_tokens(random_tensor(rng, {3, 4}), {0}), DimensionError);
}

TEST_CASE("merging two identical tokens") {
  const Tensor x = rows({{1, 2, 3}, {1, 2, 3}});
  const MergeStepResult r = bipartite_merge_step(x, 1, identity_provenance(2));
  CHECK(r.tokens.to_vector() == std::vector<float>{1, 2, 3});
  CHECK(r.provenance == Provenance{{0, 1}});
}

TEST_CASE("hand-enumerated merge of four tokens") {
  // A = {e1, e2} at positions 0 and 2, B = {e1, e3} at 1 and 3. A0 proposes
  // B0 with cosine 1, A1 proposes with cosine 0; the cosine-1 edge is kept.
  const Tensor x = rows({{1, 0, 0}, {1, 0, 0}, {0, 1, 0}, {0, 0, 1}});
  const MergeStepResult r = bipartite_merge_step(x, 1, identity_provenance(4));
  CHECK(r.tokens.to_vector() == std::vector<float>{1, 0, 0, 0, 1, 0, 0, 0, 1});
  CHECK(r.provenance == Provenance{{0, 1}, {2}, {3}});
  CHECK(r.edges == std::vector<std::pair<std::size_t, std::size_t>>{{0, 1}});
}

TEST_CASE("merged tokens are size-weighted means") {
  Rng rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor x = random_tensor(rng, {6, 5});
    const MergeStepResult r = bipartite_merge_step(x, 2, identity_provenance(6));
    CHECK(r.tokens.shape() == Shape{4, 5});
    CHECK(is_partition(r.provenance, 6));
    CHECK(worst_mean_error(x, r.tokens, identity_provenance(6), r.provenance, 5) < 1e-6);
    // A second step re-merges with weights from the accumulated sizes.
    const Tensor y = r.tokens.detach();
    const MergeStepResult r2 = bipartite_merge_step(y, 1, r.provenance);
    CHECK(is_partition(r2.provenance, 6));
    CHECK(worst_mean_error(y, r2.tokens, r.provenance, r2.provenance, 5) < 1e-6);
  }
}

TEST_CASE("merge step validates its inputs") {
  Rng rng(3);
  const Tensor x = random_tensor(rng, {5, 2});
  CHECK_THROWS_AS(bipartite_merge_step(x, 3, identity_provenance(5)), ConfigError);
  CHECK_THROWS_AS(bipartite_merge_step(x, 0, identity_provenance(5)), ConfigError);
  CHECK_THROWS_AS(bipartite_merge_step(random_tensor(rng, {1, 2}), 1, identity_provenance(1)), ConfigError);
  CHECK_NOTHROW(bipartite_merge_step(x, 2, identity_provenance(5)));
  CHECK_THROWS_AS(bipartite_merge_step(random_tensor(rng, {4, 2}), 2, identity_provenance(4), true), ConfigError);
  const MergeStepResult kept = bipartite_merge_step(x, 1, identity_provenance(5), true);
  CHECK(kept.provenance.front() == std::vector<std::size_t>{0});
}

TEST_CASE("swapping tokens inside A keeps the size multiset") {
  Rng rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t m = 8, d = 6;
    Tensor x = random_tensor(rng, {m, d});
    const auto before = sorted_sizes(bipartite_merge_step(x, 3, identity_provenance(m)).provenance);
    const std::size_t a = 2 * rng.index(4), b = 2 * rng.index(4);
    auto v = x.mutable_data();
    for (std::size_t c = 0; c < d; ++c) std::swap(v[a * d + c], v[b * d + c]);
    CHECK(sorted_sizes(bipartite_merge_step(x, 3, identity_provenance(m)).provenance) == before);
  }
}

TEST_CASE("merge config") {
  const MergeConfig c = MergeConfig::for_target(16, 14, 1);
  CHECK(c.r_schedule == std::vector<std::size_t>{2});
  CHECK(MergeConfig::for_target(16, 9, 3).r_schedule == std::vector<std::size_t>{3, 2, 2});
  CHECK(MergeConfig::for_target(16, 16, 2).r_schedule == std::vector<std::size_t>{0, 0});
  CHECK_THROWS_AS(MergeConfig::for_target(16, 17, 1), ConfigError);
  CHECK_THROWS_AS(MergeConfig::for_target(16, 1, 1), ConfigError);
  CHECK_THROWS_AS(MergeConfig::for_target(16, 4, 1), ConfigError);
  MergeConfig bad = c;
  bad.r_schedule = {1};
  CHECK_THROWS_AS(bad.validate(16), ConfigError);
  bad.r_schedule = {1, 1};
  CHECK_THROWS_AS(bad.validate(16), ConfigError);
}

TEST_CASE("fresh blocks pass tokens through") {
  Rng rng(5);
  ParameterStore store;
  const TransformerBlock block = TransformerBlock::create(store, "b", 4, 2, 8, rng);
  const Tensor x = random_tensor(rng, {3, 4});
  CHECK(block.feed_forward(block.attend(x)).to_vector() == x.to_vector());
  CHECK_THROWS_AS(TransformerBlock::create(store, "c", 5, 2, 8, rng), ConfigError);
}

TEST_CASE("block attention matches a per-head oracle") {
  Rng rng(6);
  ParameterStore store;
  const std::size_t m = 4, d = 6, heads = 2, hd = 3;
  const TransformerBlock block = random_blocks(store, rng, 1, d, heads)[0];
  const Tensor x = random_tensor(rng, {m, d});
  const Tensor h = block.ln1(x);
  const Tensor q = block.q(h), k = block.k(h), v = block.v(h);
  std::vector<float> concat(m * d);
  for (std::size_t head = 0; head < heads; ++head) {
    auto cols = [&](const Tensor& t) {
      std::vector<float> out;
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t c = 0; c < hd; ++c) out.push_back(t.at(i * d + head * hd + c));
      return out;
    };
    const auto qs = cols(q), ks = cols(k), vs = cols(v);
    for (std::size_t i = 0; i < m; ++i) {
      const auto o = naive_attention(std::span(qs).subspan(i * hd, hd), ks, vs, m, hd, hd);
      for (std::size_t c = 0; c < hd; ++c) concat[i * d + head * hd + c] = static_cast<float>(o[c]);
    }
  }
  const std::vector<double> proj = naive_matmul(concat, block.o.weight.data(), m, d, d);
  std::vector<double> expect(m * d);
  for (std::size_t i = 0; i < m * d; ++i) expect[i] = x.at(i) + proj[i] + block.o.bias.at(i % d);
  CHECK(max_abs_diff(block.attend(x).data(), expect) < 1e-5);
}

TEST_CASE("merge without removals is a plain block") {
  Rng rng(7);
  ParameterStore store;
  const auto blocks = random_blocks(store, rng, 1, 4, 1);
  const Tensor tokens = random_tensor(rng, {2, 5, 4});
  MergeConfig c = MergeConfig::for_target(5, 5, 1);
  const MergedTokenSet out = merge(tokens, blocks, c);
  CHECK(out.tokens() == 5);
  CHECK(out.features.to_vector() == blocks[0].feed_forward(blocks[0].attend(tokens)).to_vector());
  CHECK(out.provenance[1] == identity_provenance(5));
}

TEST_CASE("identical tokens stay identical through merge") {
  Rng rng(8);
  ParameterStore store;
  const auto blocks = random_blocks(store, rng, 2, 4, 2);
  const Tensor row = random_tensor(rng, {1, 1, 4});
  std::vector<float> flat;
  for (int i = 0; i < 10; ++i) flat.insert(flat.end(), row.data().begin(), row.data().end());
  const MergedTokenSet out = merge(Tensor({1, 10, 4}, flat), blocks, MergeConfig::for_target(10, 5, 2));
  CHECK(out.tokens() == 5);
  CHECK(is_partition(out.provenance[0], 10));
  // Attention over equal tokens is count-independent, so two unmerged copies
  // give the block-transformed value.
  std::vector<float> pair(flat.begin(), flat.begin() + 8);
  const Tensor ref = merge(Tensor({1, 2, 4}, pair), blocks, MergeConfig::for_target(2, 2, 2)).features;
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t c = 0; c < 4; ++c) CHECK(out.features.at(i * 4 + c) == doctest::Approx(ref.at(c)).epsilon(1e-5));
}

TEST_CASE("sixteen tokens merge to fourteen") {
  Rng rng(9);
  ParameterStore store;
  const auto blocks = random_blocks(store, rng, 1, 8, 2);
  const MergedTokenSet out = merge(random_tensor(rng, {3, 16, 8}), blocks, MergeConfig::for_target(16, 14, 1));
  CHECK(out.features.shape() == Shape{3, 14, 8});
  for (std::size_t s = 0; s < 3; ++s) {
    CHECK(is_partition(out.provenance[s], 16));
    const auto sizes = out.sizes(s);
    CHECK(std::accumulate(sizes.begin(), sizes.end(), std::size_t{0}) == 16);
  }
  CHECK_THROWS_AS(merge(random_tensor(rng, {3, 15, 8}), blocks, MergeConfig::for_target(16, 14, 1)), ConfigError);
}

TEST_CASE("traced merge steps hold the mean invariant") {
  Rng rng(10);
  for (int trial = 0; trial < 20; ++trial) {
    ParameterStore store;
    const auto blocks = random_blocks(store, rng, 3, 6, 2);
    const std::size_t k = 2, m = 16, d = 6;
    MergeTrace trace;
    const MergedTokenSet out = merge(random_tensor(rng, {k, m, d}), blocks, MergeConfig::for_target(m, 7, 3), &trace);
    REQUIRE(trace.steps.size() == 3);
    CHECK(out.tokens() == 7);
    for (const auto& step : trace.steps) {
      const std::size_t before = step.before.dim(1), after = step.after.dim(1);
      for (std::size_t s = 0; s < k; ++s) {
        CHECK(is_partition(step.provenance_after[s], m));
        const Tensor b = Tensor({before, d}, std::vector<float>(step.before.data().begin() + s * before * d,
                                                                step.before.data().begin() + (s + 1) * before * d));
        const Tensor a = Tensor({after, d}, std::vector<float>(step.after.data().begin() + s * after * d,
                                                               step.after.data().begin() + (s + 1) * after * d));
        CHECK(worst_mean_error(b, a, step.provenance_before[s], step.provenance_after[s], d) < 1e-5);
      }
    }
  }
}

TEST_CASE("cross-modal aggregation over identical tokens triples them") {
  Rng rng(11);
  ParameterStore store;
  const CrossModalParams params = CrossModalParams::create(store, "x", 3, 4, rng);
  const Tensor t = random_tensor(rng, {4});
  MergedTokenSet merged;
  std::vector<float> flat;
  for (int i = 0; i < 5; ++i) flat.insert(flat.end(), t.data().begin(), t.data().end());
  merged.features = Tensor({1, 5, 4}, flat);
  merged.provenance = {identity_provenance(5)};
  const AggregateResult r = cross_modal_aggregate(merged, random_tensor(rng, {1, 3}), params);
  for (std::size_t i = 0; i < 20; ++i) CHECK(r.aggregated.at(i) == doctest::Approx(3.0 * t.at(i % 4)));
  for (float w : r.audio_attention[0]) CHECK(w == doctest::Approx(0.2));
}

TEST_CASE("zero value maps leave the residual") {
  Rng rng(12);
  ParameterStore store;
  CrossModalParams params = CrossModalParams::create(store, "x", 3, 4, rng);
  for (Tensor t : {params.self_value, params.audio_value}) {
    auto v = t.mutable_data();
    std::fill(v.begin(), v.end(), 0.0f);
  }
  MergedTokenSet merged{random_tensor(rng, {2, 3, 4}), {identity_provenance(3), identity_provenance(3)}};
  const AggregateResult r = cross_modal_aggregate(merged, random_tensor(rng, {2, 3}), params);
  CHECK(r.aggregated.to_vector() == merged.features.to_vector());
}

TEST_CASE("cross-modal aggregation matches composed attention oracles") {
  Rng rng(13);
  ParameterStore store;
  const std::size_t k = 2, s = 4, d = 8, da = 3;
  const CrossModalParams params = CrossModalParams::create(store, "x", da, d, rng);
  randomize(store, rng, 0.5);
  MergedTokenSet merged{random_tensor(rng, {k, s, d}), {identity_provenance(s), identity_provenance(s)}};
  const Tensor audio = random_tensor(rng, {k, da});
  const AggregateResult r = cross_modal_aggregate(merged, audio, params);

  for (std::size_t seg = 0; seg < k; ++seg) {
    const auto f = merged.features.data().subspan(seg * s * d, s * d);
    std::vector<float> fv(f.begin(), f.end());
    const auto sv = naive_matmul(fv, params.self_value.data(), s, d, d);
    const auto av = naive_matmul(fv, params.audio_value.data(), s, d, d);
    const std::vector<float> svf(sv.begin(), sv.end()), avf(av.begin(), av.end());
    const auto qa = naive_matmul(audio.data().subspan(seg * da, da), params.audio_proj.weight.data(), 1, da, d);
    std::vector<float> query(d);
    for (std::size_t c = 0; c < d; ++c) query[c] = static_cast<float>(qa[c] + params.audio_proj.bias.at(c));
    const auto heard = naive_attention(query, fv, avf, s, d, d);
    std::vector<double> expect(s * d);
    for (std::size_t i = 0; i < s; ++i) {
      const auto self = naive_attention(std::span(fv).subspan(i * d, d), fv, svf, s, d, d);
      for (std::size_t c = 0; c < d; ++c) expect[i * d + c] = fv[i * d + c] + self[c] + heard[c];
    }
    CHECK(max_abs_diff(r.aggregated.data().subspan(seg * s * d, s * d), expect) < 1e-5);
  }
}

TEST_CASE("audio changes the aggregate") {
  Rng rng(14);
  ParameterStore store;
  const CrossModalParams params = CrossModalParams::create(store, "x", 3, 4, rng);
  randomize(store, rng, 0.8);
  MergedTokenSet merged{random_tensor(rng, {2, 5, 4}), {identity_provenance(5), identity_provenance(5)}};
  const Tensor audio = random_tensor(rng, {2, 3});
  const Tensor with = cross_modal_aggregate(merged, audio, params).aggregated;
  const Tensor without = cross_modal_aggregate(merged, Tensor::zeros({2, 3}), params).aggregated;
  CHECK(max_abs_diff(with.data(), without.data()) > 1e-4);
  CHECK_THROWS_AS(cross_modal_aggregate(merged, random_tensor(rng, {3, 3}), params), ContractError);
}

TEST_CASE("gradients flow through merge and aggregation") {
  Rng rng(15);
  ParameterStore store;
  const auto blocks = random_blocks(store, rng, 1, 4, 2);
  const CrossModalParams params = CrossModalParams::create(store, "x", 3, 4, rng);
  randomize(store, rng, 0.4);
  const Tensor tokens = random_tensor(rng, {2, 6, 4});
  const Tensor audio = random_tensor(rng, {2, 3});
  const Tensor mix = random_tensor(rng, {2, 4, 4});
  const MergeConfig config = MergeConfig::for_target(6, 4, 1);
  auto run = [&](const Tensor& t, const Tensor& a, const CrossModalParams& p) {
    return sum(elementwise_mul(cross_modal_aggregate(merge(t, blocks, config), a, p).aggregated, mix));
  };
  CHECK(finite_diff_check([&](const Tensor& t) { return run(t, audio, params); }, tokens) < 1e-3);
  CHECK(finite_diff_check([&](const Tensor& a) { return run(tokens, a, params); }, audio) < 1e-3);
  CHECK(finite_diff_check(
            [&](const Tensor& w) {
              CrossModalParams p = params;
              p.audio_value = w;
              return run(tokens, audio, p);
            },
            params.audio_value.detach()) < 1e-3);
}

TEST_CASE("token heat spreads weight over provenance") {
  const std::vector<float> w = {0.5f, 0.5f};
  CHECK(token_heat(w, {{0, 1}, {2}}, 3) == std::vector<float>{0.25f, 0.25f, 0.5f});
  CHECK_THROWS_AS(token_heat(w, {{0, 1}}, 3), DimensionError);
  CHECK_THROWS_AS(token_heat(w, {{0, 1}, {5}}, 3), IndexError);
  CHECK(is_partition({{0, 2}, {1}}, 3));
  CHECK_FALSE(is_partition({{0, 2}, {2}}, 3));
  CHECK_FALSE(is_partition({{0}, {1}}, 3));
}
