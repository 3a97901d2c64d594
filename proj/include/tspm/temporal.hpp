// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>
#include <vector>

#include "tspm/nn.hpp"

namespace tspm {

// Top-k segments picked by prompt-to-frame attention.
struct TemporalSelection {
  // Selected segment indices, ascending (chronological).
  std::vector<std::size_t> omega;
  // Full attention vector over all T segments.
  Tensor weights;
  Tensor selected_audio;   // [k, D_a], row i is audio[omega[i]]
  Tensor selected_frames;  // [k, D_v], row i is frames[omega[i]]
  // weights[omega[i]], the straight-through gate applied to gathered rows.
  // Undefined for fixed selections.
  Tensor gate;
  // Positions into omega ordered by descending weight.
  std::vector<std::size_t> by_weight;
};

// W = softmax_t(⟨query, Key(frames[t])⟩ / √d), d = Key output width. With a
// query projection the prompt is projected first; otherwise its width must
// equal d.
Tensor attention_weights(const Tensor& prompt_feature, const Tensor& frames, const Linear& key,
                         const std::optional<Linear>& query_proj = std::nullopt);

// Indices of the k largest weights, ties to the lower index, returned ascending.
std::vector<std::size_t> topk_indices(std::span<const float> weights, std::size_t k);

// Hard top-k with exact gathers. The selected rows pass through a
// straight-through gate keyed on their weights, so the loss still reaches W
// (and the key projection) while the forward values stay bit-exact.
TemporalSelection select_topk(const Tensor& weights, const Tensor& audio, const Tensor& frames, std::size_t k);

// Selection over explicit indices with uniform weights (ablation without
// temporal perception).
TemporalSelection select_fixed(const std::vector<std::size_t>& omega, const Tensor& audio, const Tensor& frames);

}  // namespace tspm
