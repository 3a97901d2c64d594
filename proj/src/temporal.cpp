// SPDX-License-Identifier: Apache-2.0
#include "tspm/temporal.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "tspm/error.hpp"

namespace tspm {

Tensor attention_weights(const Tensor& prompt_feature, const Tensor& frames, const Linear& key,
                         const std::optional<Linear>& query_proj) {
  if (frames.rank() != 2) throw DimensionError("attention_weights: frames must be [T, D_v], got " + shape_to_string(frames.shape()));
  if (key.in_features() != frames.dim(1)) {
    throw DimensionError("attention_weights: key projection expects width " + std::to_string(key.in_features()) +
                         ", frames are " + shape_to_string(frames.shape()));
  }
  const Tensor query = query_proj ? (*query_proj)(prompt_feature) : prompt_feature;
  if (query.rank() != 1 || query.dim(0) != key.out_features()) {
    throw DimensionError("attention_weights: query " + shape_to_string(query.shape()) +
                         " does not match key width " + std::to_string(key.out_features()));
  }
  const Tensor keys = key(frames);  // [T, d]
  const std::size_t d = key.out_features();
  Tensor scores = matmul(reshape(query, {1, d}), transpose(keys));  // [1, T]
  scores = scale(scores, 1.0f / std::sqrt(static_cast<float>(d)));
  return reshape(softmax(scores, 1), {frames.dim(0)});
}

std::vector<std::size_t> topk_indices(std::span<const float> weights, std::size_t k) {
  if (k < 1 || k > weights.size()) {
    throw ConfigError("top_k=" + std::to_string(k) + " outside [1, " + std::to_string(weights.size()) + "]");
  }
  std::vector<std::size_t> order(weights.size());
  std::iota(order.begin(), order.end(), 0);
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                    [&](std::size_t a, std::size_t b) {
                      if (weights[a] != weights[b]) return weights[a] > weights[b];
                      return a < b;
                    });
  order.resize(k);
  std::sort(order.begin(), order.end());
  return order;
}

namespace {

std::vector<std::size_t> rank_by_weight(const std::vector<std::size_t>& omega, std::span<const float> w) {
  std::vector<std::size_t> pos(omega.size());
  std::iota(pos.begin(), pos.end(), 0);
  std::stable_sort(pos.begin(), pos.end(), [&](std::size_t a, std::size_t b) { return w[omega[a]] > w[omega[b]]; });
  return pos;
}

}  // namespace

TemporalSelection select_topk(const Tensor& weights, const Tensor& audio, const Tensor& frames, std::size_t k) {
  if (weights.rank() != 1 || audio.rank() != 2 || frames.rank() != 2 || audio.dim(0) != weights.dim(0) ||
      frames.dim(0) != weights.dim(0)) {
    throw DimensionError("select_topk: weights " + shape_to_string(weights.shape()) + ", audio " +
                         shape_to_string(audio.shape()) + ", frames " + shape_to_string(frames.shape()) +
                         " disagree on T");
  }
  TemporalSelection sel;
  sel.omega = topk_indices(weights.data(), k);
  sel.weights = weights;
  sel.gate = gather_rows(weights, sel.omega);
  sel.selected_audio = straight_through_gate(gather_rows(audio, sel.omega), sel.gate);
  sel.selected_frames = straight_through_gate(gather_rows(frames, sel.omega), sel.gate);
  sel.by_weight = rank_by_weight(sel.omega, weights.data());
  return sel;
}

TemporalSelection select_fixed(const std::vector<std::size_t>& omega, const Tensor& audio, const Tensor& frames) {
  if (audio.dim(0) != frames.dim(0)) throw DimensionError("select_fixed: audio and frames disagree on T");
  const std::size_t t = audio.dim(0);
  TemporalSelection sel;
  sel.omega = omega;
  std::sort(sel.omega.begin(), sel.omega.end());
  sel.weights = Tensor::full({t}, 1.0f / static_cast<float>(t));
  sel.selected_audio = gather_rows(audio, sel.omega);
  sel.selected_frames = gather_rows(frames, sel.omega);
  sel.by_weight.resize(sel.omega.size());
  std::iota(sel.by_weight.begin(), sel.by_weight.end(), 0);
  return sel;
}

}  // namespace tspm
