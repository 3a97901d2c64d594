// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "tspm/prompt.hpp"
#include "tspm/question_type.hpp"
#include "tspm/tensor.hpp"

namespace tspm {

// One video's features. The leading token of every frame is the CLS
// position, and frames[t] is the frame-level (CLS-pooled) feature.
struct FeatureBundle {
  std::string video_id;
  Tensor audio;   // [T, D_a]
  Tensor frames;  // [T, D_v]
  Tensor tokens;  // [T, M, D_v]

  std::size_t segments() const { return audio.dim(0); }
  std::size_t tokens_per_frame() const { return tokens.dim(1); }
  std::size_t audio_dim() const { return audio.dim(1); }
  std::size_t visual_dim() const { return frames.dim(1); }

  // Shape agreement, T >= 1, M >= 2, finite values.
  void validate() const;
};

struct PlantedTruth {
  std::vector<std::size_t> segments;
  std::map<std::size_t, std::vector<std::size_t>> tokens;
};

struct QASample {
  std::string sample_id;
  std::string video_id;
  std::string question_text;
  std::string template_id;
  std::vector<float> question_feature;  // F_Q
  std::vector<float> prompt_feature;    // F_TPrompt
  std::size_t answer = 0;
  QuestionType question_type;
  std::optional<PlantedTruth> planted;
};

enum class Split { Train, Val, Test };
inline constexpr Split kSplits[] = {Split::Train, Split::Val, Split::Test};
std::string to_string(Split s);
Split parse_split(std::string_view s);

struct DatasetManifest {
  Split split = Split::Train;
  std::size_t num_answers = 0;  // C
  std::vector<std::string> answer_vocab;
  std::vector<QASample> entries;
};

struct Dataset {
  std::map<Split, DatasetManifest> manifests;
  std::map<std::string, FeatureBundle> bundles;
  TemplateRegistry registry;

  const DatasetManifest& split(Split s) const;
  const FeatureBundle& bundle(const std::string& video_id) const;
  // Looks a sample up across all splits.
  const QASample& sample(const std::string& sample_id) const;
  std::size_t num_answers() const;
  // Cross-checks labels, planted indices, bundle references, template ids
  // and split disjointness.
  void validate() const;
};

// AVQF: "AVQF", u32 version, u32 T, M, D_a, D_v, then audio, frames and
// tokens as little-endian f32.
inline constexpr std::uint32_t kBundleVersion = 1;
std::vector<std::uint8_t> encode_bundle(const FeatureBundle& bundle);
FeatureBundle decode_bundle(std::span<const std::uint8_t> bytes, std::string video_id = {});
void write_bundle(const FeatureBundle& bundle, const std::filesystem::path& path);
// The video id is taken from the file stem.
FeatureBundle read_bundle(const std::filesystem::path& path);

// AVQQ: "AVQQ", u32 version, u32 N, u32 D_v, then per sample F_Q and F_TPrompt.
inline constexpr std::uint32_t kEmbeddingVersion = 1;
std::vector<std::uint8_t> encode_embeddings(const std::vector<QASample>& samples);
// Fills question_feature / prompt_feature of `samples` in order.
void decode_embeddings(std::span<const std::uint8_t> bytes, std::vector<QASample>& samples);

nlohmann::json manifest_to_json(const DatasetManifest& manifest);
DatasetManifest manifest_from_json(const nlohmann::json& j);

// Layout: <split>.json, <split>.avqq, bundles/<video_id>.avqf, registry.json.
void save_dataset(const Dataset& dataset, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

// Lookup embedder over the prompts of every manifest sample, keyed by the
// text the prompt constructor produces for the question.
LookupEmbedder prompt_lookup(const Dataset& dataset);

}  // namespace tspm
