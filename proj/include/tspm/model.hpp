// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "tspm/checkpoint.hpp"
#include "tspm/features.hpp"
#include "tspm/fusion.hpp"
#include "tspm/spatial.hpp"
#include "tspm/temporal.hpp"

namespace tspm {

struct Ablation {
  bool no_tpm = false;      // uniform weights, first k segments
  bool no_spm = false;      // fusion sees only the audio and frame streams
  bool no_tpc = false;      // k = T
  bool no_qprompt = false;  // key with F_Q instead of the prompt
  bool no_merge = false;    // S = M, blocks kept

  bool any() const { return no_tpm || no_spm || no_tpc || no_qprompt || no_merge; }
  std::vector<std::string> names() const;
  // "full" or the flags joined by '+'.
  std::string label() const;
  // Accepts flag names; "full" and "" yield no flags.
  static Ablation parse(const std::vector<std::string>& names);
  void validate() const;

  // The six standard runs: full and each single-flag ablation.
  static std::vector<Ablation> standard_runs();

  bool operator==(const Ablation&) const = default;
};

struct ModelConfig {
  std::size_t audio_dim = 0;    // D_a
  std::size_t visual_dim = 0;   // D_v
  std::size_t num_answers = 0;  // C
  std::size_t top_k = 10;
  std::size_t merge_target = 14;  // S
  std::size_t blocks = 1;         // L
  std::size_t heads = 2;
  std::size_t mlp_ratio = 4;
  bool protect_cls = false;
  Pool pool = Pool::Mean;
  bool tanh_after_fc = true;
  Ablation ablation;

  void validate() const;
  nlohmann::json to_json() const;
  // Rank-0 "config/<field>" records for checkpoints.
  std::vector<TensorRecord> records() const;
  static ModelConfig from_records(const std::vector<TensorRecord>& records);
};

struct ForwardResult {
  TemporalSelection selection;
  MergedTokenSet merged;  // empty without the spatial module
  AggregateResult aggregate;
  Prediction prediction;
};

class TspmModel {
 public:
  TspmModel(ModelConfig config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  ParameterStore& store() { return store_; }
  const ParameterStore& store() const { return store_; }
  std::size_t parameter_count() const { return store_.parameter_count(); }

  // Effective k and merge schedule for a bundle of T segments and M tokens.
  std::size_t effective_top_k(std::size_t segments) const;
  MergeConfig merge_config(std::size_t tokens) const;

  // Records onto the active tape when one exists. label < 0 skips the loss.
  ForwardResult forward(const FeatureBundle& bundle, const QASample& sample, long label = -1,
                        MergeTrace* trace = nullptr) const;

  std::vector<TensorRecord> records() const;
  std::vector<std::uint8_t> encode() const;
  void save(const std::filesystem::path& path) const;
  static TspmModel load(const std::filesystem::path& path);
  static TspmModel from_records(const std::vector<TensorRecord>& records);

 private:
  ModelConfig config_;
  ParameterStore store_;
  Linear key_;
  std::vector<TransformerBlock> blocks_;
  CrossModalParams cross_;
  FusionParams fusion_;
};

}  // namespace tspm
