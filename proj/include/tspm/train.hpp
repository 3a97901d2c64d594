// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"
#include "tspm/features.hpp"
#include "tspm/model.hpp"

namespace tspm {

struct TrainConfig {
  double lr = 1e-4;
  double lr_decay = 0.1;
  std::size_t decay_every = 10;
  std::size_t batch_size = 64;
  std::size_t epochs = 30;
  std::size_t top_k = 10;
  std::size_t tokens = 14;  // merge target S
  std::size_t blocks = 1;
  std::size_t heads = 2;
  std::size_t mlp_ratio = 4;
  bool protect_cls = false;
  Pool pool = Pool::Mean;
  bool tanh_after_fc = true;
  double clip_norm = 0.0;  // 0 disables clipping
  std::uint64_t seed = 0;
  std::size_t threads = 1;  // evaluation workers
  Ablation ablation;

  // lr · lr_decay^⌊epoch / decay_every⌋, epochs counted from 0.
  double lr_at(std::size_t epoch) const;
  void validate() const;
  ModelConfig model_config(const Dataset& dataset) const;

  static TrainConfig from_json(const nlohmann::json& j);
  static TrainConfig load(const std::filesystem::path& path);
  nlohmann::json to_json() const;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  std::optional<double> val_acc;
  double seconds = 0.0;

  nlohmann::json to_json() const;
};

struct TrainResult {
  TspmModel model;
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;
  std::vector<std::uint8_t> best_checkpoint;
};

// Writes CKPT, CKPT.best and CKPT.history.jsonl when `out` is non-empty.
// Progress lines go to `log` when given.
TrainResult train(const Dataset& dataset, const TrainConfig& config, const std::filesystem::path& out = {},
                  std::ostream* log = nullptr);

struct AccuracyCell {
  std::size_t correct = 0;
  std::size_t count = 0;
  double accuracy() const { return count ? static_cast<double>(correct) / static_cast<double>(count) : 0.0; }
};

struct SamplePrediction {
  std::string sample_id;
  std::size_t answer = 0;
  std::size_t label = 0;
  std::vector<float> probs;
  std::vector<std::size_t> omega;
  float loss = 0.0f;
};

struct EvalReport {
  Split split = Split::Test;
  AccuracyCell overall;
  std::map<std::string, AccuracyCell> per_type;      // "modality/subtype"
  std::map<std::string, AccuracyCell> per_modality;
  std::map<std::string, AccuracyCell> per_subtype;
  double mean_loss = 0.0;
  // Over samples carrying planted truth.
  std::size_t planted_samples = 0;
  std::optional<double> planted_recall;
  // Audio-attention heat on planted tokens over the uniform share, averaged
  // over selected planted segments.
  std::optional<double> audio_planted_ratio;
  std::size_t parameter_count = 0;
  std::uint64_t forward_macs = 0;  // per sample, averaged
  nlohmann::json config;
  double seconds = 0.0;
  std::vector<SamplePrediction> predictions;

  double accuracy() const { return overall.accuracy(); }
};

// Deterministic for any thread count.
EvalReport evaluate(const TspmModel& model, const Dataset& dataset, Split split, std::size_t threads = 1);

// Wall-clock is left out unless asked for, so reports are reproducible.
nlohmann::json report_to_json(const EvalReport& report, bool include_timing = false);
std::string report_markdown(const EvalReport& report);
// One JSON object per line: sample_id, answer_index, answer_string, p, omega, loss.
std::string predictions_jsonl(const EvalReport& report, const DatasetManifest& manifest);

struct RunRow {
  std::string label;
  EvalReport report;
};

// Trains and evaluates the six standard runs on a shared seed.
std::vector<RunRow> run_ablation(const Dataset& dataset, const TrainConfig& base, Split split = Split::Test,
                                 std::ostream* log = nullptr);
// One run per value of "top_k" or "tokens".
std::vector<RunRow> sweep(const Dataset& dataset, const TrainConfig& base, const std::string& param,
                          const std::vector<std::size_t>& values, Split split = Split::Test,
                          std::ostream* log = nullptr);

nlohmann::json rows_to_json(const std::vector<RunRow>& rows);
std::string rows_markdown(const std::vector<RunRow>& rows);

}  // namespace tspm
