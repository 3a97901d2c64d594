// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "tspm/features.hpp"
#include "tspm/prompt.hpp"

namespace tspm {

// Planted-signal dataset parameters.
//
// Each sample's answer is written only into a few tokens of a few planted
// segments; the planted frames lean towards the sample's prompt embedding and
// the planted audio shares a random source pattern with the planted tokens.
// Everything else is isotropic Gaussian noise.
struct SynthConfig {
  std::size_t segments = 20;       // T
  std::size_t tokens = 16;         // M, CLS included
  std::size_t audio_dim = 16;      // D_a
  std::size_t visual_dim = 32;     // D_v
  std::size_t num_answers = 8;     // C
  std::size_t train = 2000;
  std::size_t val = 200;
  std::size_t test = 400;
  std::size_t planted_segments = 3;
  std::size_t planted_tokens = 4;  // per planted segment, never the CLS position
  double alpha = 2.0;
  // Per-element noise std of visual features. Negative selects 1/√D_v, i.e.
  // noise vectors of unit expected squared norm. Audio noise is scaled so
  // its vectors have the same expected norm.
  double noise_sigma = -1.0;
  // Weight of the direction common to all text embeddings.
  double embedding_shared = 0.7;
  std::vector<std::string> templates;  // empty: every registry template with a slot-free prompt
  std::map<std::string, std::vector<std::string>> slot_values;
  std::vector<std::string> answer_vocab;  // empty: generated names

  double visual_sigma() const;
  double audio_sigma() const;
  void validate() const;

  static SynthConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

Dataset generate_synthetic(const SynthConfig& config, std::uint64_t seed, const TemplateRegistry& registry);

}  // namespace tspm
