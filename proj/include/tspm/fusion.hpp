// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "tspm/nn.hpp"

namespace tspm {

enum class Pool { Mean, Max };
std::string to_string(Pool p);
Pool parse_pool(std::string_view s);

struct FusionParams {
  Linear fc;          // pooled concat → D_v
  Linear classifier;  // D_v → C
  Pool pool = Pool::Mean;
  bool tanh_after_fc = true;

  std::size_t num_answers() const { return classifier.out_features(); }

  // fc input width is D_a + 2·D_v, or D_a + D_v without the aggregated stream.
  static FusionParams create(ParameterStore& store, const std::string& prefix, std::size_t fc_in,
                             std::size_t width, std::size_t num_answers, Rng& rng);
};

struct Prediction {
  std::vector<float> probs;
  std::size_t answer = 0;
  Tensor loss;  // scalar, defined only when a label was given
};

// Pools the aggregated stream over S, then every stream over Top_k, and maps
// the concatenation through FC (and tanh when enabled). `aggregated` may be
// undefined, in which case only the audio and frame streams are used.
Tensor fuse(const Tensor& selected_audio, const Tensor& selected_frames, const Tensor& aggregated,
            const FusionParams& params);

// e = F_q ⊙ F_av, p = softmax(classifier(e)); label < 0 skips the loss.
Prediction answer(const Tensor& fused, const Tensor& question_feature, const FusionParams& params, long label = -1);

// Index of the largest value, ties to the lower index.
std::size_t argmax(std::span<const float> values);

}  // namespace tspm
