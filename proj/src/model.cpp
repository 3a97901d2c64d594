// SPDX-License-Identifier: Apache-2.0
#include "tspm/model.hpp"

#include <cmath>
#include <map>
#include <numeric>

#include "tspm/error.hpp"

namespace tspm {

namespace {

struct FlagName {
  const char* name;
  bool Ablation::*flag;
};

constexpr FlagName kFlags[] = {{"no_tpm", &Ablation::no_tpm},
                               {"no_spm", &Ablation::no_spm},
                               {"no_tpc", &Ablation::no_tpc},
                               {"no_qprompt", &Ablation::no_qprompt},
                               {"no_merge", &Ablation::no_merge}};

}  // namespace

std::vector<std::string> Ablation::names() const {
  std::vector<std::string> out;
  for (const FlagName& f : kFlags) {
    if (this->*f.flag) out.emplace_back(f.name);
  }
  return out;
}

std::string Ablation::label() const {
  const auto n = names();
  if (n.empty()) return "full";
  std::string out;
  for (const std::string& s : n) out += (out.empty() ? "" : "+") + s;
  return out;
}

Ablation Ablation::parse(const std::vector<std::string>& names) {
  Ablation a;
  for (const std::string& n : names) {
    if (n.empty() || n == "full") continue;
    bool found = false;
    for (const FlagName& f : kFlags) {
      if (n == f.name) {
        a.*f.flag = true;
        found = true;
      }
    }
    if (!found) throw ConfigError("unknown ablation '" + n + "'");
  }
  a.validate();
  return a;
}

void Ablation::validate() const {
  if (no_spm && no_merge) throw ConfigError("no_spm and no_merge are incompatible: merging lives inside the spatial module");
  if (no_tpm && no_qprompt) throw ConfigError("no_tpm and no_qprompt are incompatible: without the key there is no query");
}

std::vector<Ablation> Ablation::standard_runs() {
  std::vector<Ablation> runs(1);
  for (const FlagName& f : kFlags) {
    Ablation a;
    a.*f.flag = true;
    runs.push_back(a);
  }
  return runs;
}

void ModelConfig::validate() const {
  if (audio_dim < 1 || visual_dim < 1) throw ConfigError("feature widths must be positive");
  if (num_answers < 2) throw ConfigError("need at least 2 answers");
  if (top_k < 1) throw ConfigError("top_k must be positive");
  if (merge_target < 2) throw ConfigError("merge target S must be at least 2");
  if (blocks < 1) throw ConfigError("need at least one transformer block");
  if (heads < 1 || visual_dim % heads != 0) {
    throw ConfigError("D_v=" + std::to_string(visual_dim) + " not divisible by heads=" + std::to_string(heads));
  }
  if (mlp_ratio < 1) throw ConfigError("mlp_ratio must be positive");
  ablation.validate();
}

nlohmann::json ModelConfig::to_json() const {
  return {{"audio_dim", audio_dim},         {"visual_dim", visual_dim}, {"num_answers", num_answers},
          {"top_k", top_k},                 {"tokens", merge_target},   {"blocks", blocks},
          {"heads", heads},                 {"mlp_ratio", mlp_ratio},   {"protect_cls", protect_cls},
          {"pool", tspm::to_string(pool)},  {"tanh_after_fc", tanh_after_fc},
          {"ablation", ablation.names()}};
}

std::vector<TensorRecord> ModelConfig::records() const {
  auto rec = [](const std::string& name, double v) { return TensorRecord{"config/" + name, Tensor::scalar(static_cast<float>(v))}; };
  std::vector<TensorRecord> out = {rec("audio_dim", audio_dim),         rec("visual_dim", visual_dim),
                                   rec("num_answers", num_answers),     rec("top_k", top_k),
                                   rec("tokens", merge_target),         rec("blocks", blocks),
                                   rec("heads", heads),                 rec("mlp_ratio", mlp_ratio),
                                   rec("protect_cls", protect_cls),     rec("pool", pool == Pool::Max),
                                   rec("tanh_after_fc", tanh_after_fc)};
  for (const FlagName& f : kFlags) out.push_back(rec(f.name, ablation.*f.flag));
  return out;
}

ModelConfig ModelConfig::from_records(const std::vector<TensorRecord>& records) {
  std::map<std::string, float> values;
  for (const auto& [name, t] : records) {
    if (name.rfind("config/", 0) == 0) {
      if (t.rank() != 0) throw FormatError("checkpoint record '" + name + "' must be a scalar", 0);
      values[name.substr(7)] = t.item();
    }
  }
  auto count = [&](const std::string& key) -> std::size_t {
    auto it = values.find(key);
    if (it == values.end()) throw ContractError("checkpoint lacks config/" + key);
    const float v = it->second;
    if (!(v >= 0.0f && v < 1e7f) || v != std::floor(v)) {
      throw ContractError("checkpoint config/" + key + " is not a count");
    }
    return static_cast<std::size_t>(v);
  };
  auto flag = [&](const std::string& key) { return count(key) != 0; };
  ModelConfig c;
  c.audio_dim = count("audio_dim");
  c.visual_dim = count("visual_dim");
  c.num_answers = count("num_answers");
  c.top_k = count("top_k");
  c.merge_target = count("tokens");
  c.blocks = count("blocks");
  c.heads = count("heads");
  c.mlp_ratio = count("mlp_ratio");
  c.protect_cls = flag("protect_cls");
  c.pool = flag("pool") ? Pool::Max : Pool::Mean;
  c.tanh_after_fc = flag("tanh_after_fc");
  for (const FlagName& f : kFlags) c.ablation.*f.flag = flag(f.name);
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw ContractError(std::string("checkpoint config: ") + e.what());
  }
  return c;
}

TspmModel::TspmModel(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
  config_.validate();
  Rng rng(seed);
  const std::size_t d = config_.visual_dim;
  if (!config_.ablation.no_tpm) {
    Rng r = rng.split("key");
    key_ = make_linear(store_, "tpm/key", d, d, r);
    // Start from the raw prompt-to-frame similarity.
    auto w = key_.weight.mutable_data();
    std::fill(w.begin(), w.end(), 0.0f);
    for (std::size_t i = 0; i < d; ++i) w[i * d + i] = 1.0f;
    auto b = key_.bias.mutable_data();
    std::fill(b.begin(), b.end(), 0.0f);
  }
  std::size_t fc_in = config_.audio_dim + d;
  if (!config_.ablation.no_spm) {
    for (std::size_t b = 0; b < config_.blocks; ++b) {
      Rng r = rng.split("block").split(b);
      blocks_.push_back(TransformerBlock::create(store_, "spm/block" + std::to_string(b), d, config_.heads,
                                                 d * config_.mlp_ratio, r));
    }
    Rng r = rng.split("cross");
    cross_ = CrossModalParams::create(store_, "spm/cross", config_.audio_dim, d, r);
    fc_in += d;
  }
  Rng r = rng.split("fusion");
  fusion_ = FusionParams::create(store_, "fusion", fc_in, d, config_.num_answers, r);
  fusion_.pool = config_.pool;
  fusion_.tanh_after_fc = config_.tanh_after_fc;
}

std::size_t TspmModel::effective_top_k(std::size_t segments) const {
  if (config_.ablation.no_tpc) return segments;
  if (config_.top_k > segments) {
    throw ConfigError("top_k=" + std::to_string(config_.top_k) + " exceeds T=" + std::to_string(segments));
  }
  return config_.top_k;
}

MergeConfig TspmModel::merge_config(std::size_t tokens) const {
  const std::size_t target = config_.ablation.no_merge ? tokens : config_.merge_target;
  return MergeConfig::for_target(tokens, target, config_.blocks, config_.heads, config_.protect_cls);
}

ForwardResult TspmModel::forward(const FeatureBundle& bundle, const QASample& sample, long label,
                                 MergeTrace* trace) const {
  const std::size_t d = config_.visual_dim;
  if (bundle.audio_dim() != config_.audio_dim || bundle.visual_dim() != d) {
    throw DimensionError("bundle " + bundle.video_id + " has D_a=" + std::to_string(bundle.audio_dim()) +
                         ", D_v=" + std::to_string(bundle.visual_dim()) + "; model expects " +
                         std::to_string(config_.audio_dim) + ", " + std::to_string(d));
  }
  if (sample.question_feature.size() != d || sample.prompt_feature.size() != d) {
    throw DimensionError("sample " + sample.sample_id + " embeddings do not have width D_v=" + std::to_string(d));
  }
  ForwardResult out;
  const std::size_t k = effective_top_k(bundle.segments());
  if (config_.ablation.no_tpm) {
    std::vector<std::size_t> first(k);
    std::iota(first.begin(), first.end(), 0);
    out.selection = select_fixed(first, bundle.audio, bundle.frames);
  } else {
    const Tensor query = Tensor::vector(config_.ablation.no_qprompt ? sample.question_feature : sample.prompt_feature);
    const Tensor w = attention_weights(query, bundle.frames, key_);
    out.selection = select_topk(w, bundle.audio, bundle.frames, k);
  }

  Tensor aggregated;
  if (!config_.ablation.no_spm) {
    Tensor tokens = gather_tokens(bundle.tokens, out.selection.omega);
    if (out.selection.gate.defined()) tokens = straight_through_gate(tokens, out.selection.gate);
    out.merged = merge(tokens, blocks_, merge_config(bundle.tokens_per_frame()), trace);
    out.aggregate = cross_modal_aggregate(out.merged, out.selection.selected_audio, cross_);
    aggregated = out.aggregate.aggregated;
  }
  const Tensor fused = fuse(out.selection.selected_audio, out.selection.selected_frames, aggregated, fusion_);
  out.prediction = answer(fused, Tensor::vector(sample.question_feature), fusion_, label);
  return out;
}

std::vector<TensorRecord> TspmModel::records() const {
  std::vector<TensorRecord> out = config_.records();
  for (TensorRecord& r : store_records(store_)) out.push_back(std::move(r));
  return out;
}

std::vector<std::uint8_t> TspmModel::encode() const { return encode_checkpoint(records()); }

void TspmModel::save(const std::filesystem::path& path) const { write_checkpoint(path, records()); }

TspmModel TspmModel::from_records(const std::vector<TensorRecord>& records) {
  TspmModel model(ModelConfig::from_records(records), 0);
  restore_store(records, model.store_);
  return model;
}

TspmModel TspmModel::load(const std::filesystem::path& path) { return from_records(read_checkpoint(path)); }

}  // namespace tspm
