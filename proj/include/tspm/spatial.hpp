// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <utility>
#include <vector>

#include "tspm/nn.hpp"

namespace tspm {

// For every current token, the sorted original token indices it absorbed.
using Provenance = std::vector<std::vector<std::size_t>>;

Provenance identity_provenance(std::size_t m);
// True when the sets partition [0, m).
bool is_partition(const Provenance& provenance, std::size_t m);

struct MergeConfig {
  std::size_t blocks = 1;                // L
  std::vector<std::size_t> r_schedule;   // tokens removed per block
  std::size_t target = 0;                // S
  std::size_t heads = 1;
  bool protect_cls = false;

  // Spreads M − S removals over L blocks, earlier blocks taking the remainder.
  static MergeConfig for_target(std::size_t m, std::size_t target, std::size_t blocks, std::size_t heads = 1,
                                bool protect_cls = false);
  // M − Σr == S, and every step is feasible for the running token count.
  void validate(std::size_t m) const;
};

struct MergeStepResult {
  Tensor tokens;           // [m − r, D]
  Provenance provenance;
  // Kept edges as (A position, B position) in input order.
  std::vector<std::pair<std::size_t, std::size_t>> edges;
};

// One round of bipartite soft matching. Even positions form A, odd positions
// B; each A token proposes its most cosine-similar B token; the r most
// similar proposals are merged by size-weighted mean into their B token.
// Survivors keep their original order.
MergeStepResult bipartite_merge_step(const Tensor& x, std::size_t r, const Provenance& provenance,
                                     bool protect_cls = false);

// Pre-norm transformer block with multi-head self-attention and a GELU MLP.
struct TransformerBlock {
  LayerNorm ln1;
  Linear q, k, v, o;
  LayerNorm ln2;
  Linear fc1, fc2;
  std::size_t heads = 1;

  static TransformerBlock create(ParameterStore& store, const std::string& prefix, std::size_t width,
                                 std::size_t heads, std::size_t hidden, Rng& rng);
  // x + Attn(LN(x)), x is [.., m, D].
  Tensor attend(const Tensor& x) const;
  // x + MLP(LN(x)).
  Tensor feed_forward(const Tensor& x) const;
};

struct MergedTokenSet {
  Tensor features;                  // [k, S, D], one row block per selected segment
  std::vector<Provenance> provenance;  // per segment

  std::size_t segments() const { return provenance.size(); }
  std::size_t tokens() const { return features.dim(1); }
  std::vector<std::size_t> sizes(std::size_t segment) const;
};

// Snapshots around every merge step, for inspection and invariant checks.
struct MergeTrace {
  struct Step {
    Tensor before;  // [k, m, D]
    Tensor after;   // [k, m − r, D]
    std::vector<Provenance> provenance_before;
    std::vector<Provenance> provenance_after;
  };
  std::vector<Step> steps;
};

// F_p′: token matrices of the selected segments, in omega order.
Tensor gather_tokens(const Tensor& tokens, const std::vector<std::size_t>& omega);

// Runs every block on every selected segment: attention branch, merge step,
// MLP branch. `tokens` is [k, M, D].
MergedTokenSet merge(const Tensor& tokens, const std::vector<TransformerBlock>& blocks, const MergeConfig& config,
                     MergeTrace* trace = nullptr);

struct CrossModalParams {
  Linear audio_proj;   // D_a → D_v, produces the audio query
  Tensor self_value;   // [D_v, D_v]
  Tensor audio_value;  // [D_v, D_v]

  static CrossModalParams create(ParameterStore& store, const std::string& prefix, std::size_t audio_dim,
                                 std::size_t width, Rng& rng);
};

struct AggregateResult {
  Tensor aggregated;  // [k, S, D]
  // Audio-query attention over the S merged tokens, per segment.
  std::vector<std::vector<float>> audio_attention;
};

// Per segment λ: F̂ + Attn(F̂, F̂, F̂·V_self) + Attn(Proj(a_λ), F̂, F̂·V_audio),
// the audio term broadcast over all S positions.
AggregateResult cross_modal_aggregate(const MergedTokenSet& merged, const Tensor& selected_audio,
                                      const CrossModalParams& params);

// Spreads each merged token's weight evenly over its constituents.
std::vector<float> token_heat(std::span<const float> merged_weights, const Provenance& provenance, std::size_t m);

}  // namespace tspm
