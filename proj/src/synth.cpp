// SPDX-License-Identifier: Apache-2.0
#include "tspm/synth.hpp"

#include <cmath>
#include <cstdio>

#include "tspm/error.hpp"
#include "tspm/rng.hpp"

namespace tspm {

namespace {

const std::map<std::string, std::vector<std::string>>& default_slot_values() {
  static const std::map<std::string, std::vector<std::string>> values = {
      {"ORD", {"first", "last", "second"}},
      {"INSTR", {"piano", "violin", "flute", "guitar", "cello", "drum"}},
      {"INSTR2", {"trumpet", "saxophone", "accordion", "ukulele"}},
      {"SIDE", {"left", "right"}},
  };
  return values;
}

const std::vector<std::string>& default_answers() {
  static const std::vector<std::string> names = {"piano",  "violin", "flute",   "guitar",  "cello",
                                                 "drum",   "trumpet", "zero",   "one",     "two",
                                                 "three",  "left",   "right",   "middle",  "yes",
                                                 "no"};
  return names;
}

std::string numbered(const char* prefix, std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s%05zu", prefix, i);
  return buf;
}

void add_scaled(std::span<float> dst, std::span<const float> src, double factor) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<float>(dst[i] + factor * src[i]);
}

}  // namespace

double SynthConfig::visual_sigma() const {
  return noise_sigma < 0.0 ? 1.0 / std::sqrt(static_cast<double>(visual_dim)) : noise_sigma;
}

double SynthConfig::audio_sigma() const {
  return visual_sigma() * std::sqrt(static_cast<double>(visual_dim) / static_cast<double>(audio_dim));
}

void SynthConfig::validate() const {
  if (segments < 1 || tokens < 2 || audio_dim < 1 || visual_dim < 1 || num_answers < 2) {
    throw ConfigError("synthetic config needs T>=1, M>=2, D_a>=1, D_v>=1, C>=2");
  }
  if (planted_segments > segments) {
    throw ConfigError("planted segment count " + std::to_string(planted_segments) + " exceeds T=" +
                      std::to_string(segments));
  }
  if (planted_tokens > tokens - 1) {
    throw ConfigError("planted token count " + std::to_string(planted_tokens) + " exceeds M-1=" +
                      std::to_string(tokens - 1));
  }
  if (alpha < 0.0) throw ConfigError("signal strength alpha must be non-negative");
  if (!(embedding_shared >= 0.0 && embedding_shared < 1.0)) throw ConfigError("embedding_shared must lie in [0, 1)");
  if (!answer_vocab.empty() && answer_vocab.size() != num_answers) {
    throw ConfigError("answer_vocab length differs from C");
  }
}

SynthConfig SynthConfig::from_json(const nlohmann::json& j) {
  SynthConfig c;
  try {
    c.segments = j.value("T", c.segments);
    c.tokens = j.value("M", c.tokens);
    c.audio_dim = j.value("D_a", c.audio_dim);
    c.visual_dim = j.value("D_v", c.visual_dim);
    c.num_answers = j.value("C", c.num_answers);
    c.train = j.value("train", c.train);
    c.val = j.value("val", c.val);
    c.test = j.value("test", c.test);
    c.planted_segments = j.value("planted_segments", c.planted_segments);
    c.planted_tokens = j.value("planted_tokens", c.planted_tokens);
    c.alpha = j.value("alpha", c.alpha);
    c.noise_sigma = j.value("noise_sigma", c.noise_sigma);
    c.embedding_shared = j.value("embedding_shared", c.embedding_shared);
    c.templates = j.value("templates", c.templates);
    c.slot_values = j.value("slot_values", c.slot_values);
    c.answer_vocab = j.value("answer_vocab", c.answer_vocab);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("synthetic config: ") + e.what());
  }
  c.validate();
  return c;
}

nlohmann::json SynthConfig::to_json() const {
  return {{"T", segments},
          {"M", tokens},
          {"D_a", audio_dim},
          {"D_v", visual_dim},
          {"C", num_answers},
          {"train", train},
          {"val", val},
          {"test", test},
          {"planted_segments", planted_segments},
          {"planted_tokens", planted_tokens},
          {"alpha", alpha},
          {"noise_sigma", noise_sigma},
          {"embedding_shared", embedding_shared},
          {"templates", templates},
          {"slot_values", slot_values},
          {"answer_vocab", answer_vocab}};
}

Dataset generate_synthetic(const SynthConfig& config, std::uint64_t seed, const TemplateRegistry& registry) {
  config.validate();
  const Rng root(seed);
  const std::size_t T = config.segments, M = config.tokens, Da = config.audio_dim, Dv = config.visual_dim;
  const std::size_t C = config.num_answers;

  std::vector<const QuestionTemplate*> templates;
  if (config.templates.empty()) {
    for (const QuestionTemplate& t : registry.templates()) {
      if (pattern_slots(t.declarative_pattern).empty()) templates.push_back(&t);
    }
  } else {
    for (const std::string& id : config.templates) templates.push_back(&registry.get(id));
  }
  if (templates.empty()) throw ConfigError("no templates available for synthetic questions");

  auto slot_values = default_slot_values();
  for (const auto& [k, v] : config.slot_values) slot_values[k] = v;

  std::vector<std::string> vocab = config.answer_vocab;
  for (std::size_t i = vocab.size(); i < C; ++i) {
    vocab.push_back(i < default_answers().size() ? default_answers()[i] : numbered("answer_", i));
  }

  // Dataset-wide structure: one pattern per answer, and a fixed map from the
  // audio source space into the token space.
  std::vector<std::vector<float>> class_patterns;
  {
    Rng rng = root.split("class-patterns");
    for (std::size_t c = 0; c < C; ++c) class_patterns.push_back(rng.unit_vector(Dv));
  }
  std::vector<double> source_map(Dv * Da);
  {
    Rng rng = root.split("source-map");
    for (double& v : source_map) v = rng.normal();
  }
  const SyntheticEmbedder embedder(Dv, root.split("embedder").seed(), config.embedding_shared);
  const double sv = config.visual_sigma(), sa = config.audio_sigma(), alpha = config.alpha;

  Dataset dataset;
  dataset.registry = registry;
  const std::pair<Split, std::size_t> plan[] = {
      {Split::Train, config.train}, {Split::Val, config.val}, {Split::Test, config.test}};
  std::size_t global = 0;
  for (const auto& [split, count] : plan) {
    DatasetManifest manifest;
    manifest.split = split;
    manifest.num_answers = C;
    manifest.answer_vocab = vocab;
    for (std::size_t i = 0; i < count; ++i, ++global) {
      Rng rng = root.split(global);
      const QuestionTemplate& tmpl = *templates[rng.index(templates.size())];
      SlotBindings bindings;
      for (const std::string& slot : pattern_slots(tmpl.question_pattern)) {
        auto it = slot_values.find(slot);
        if (it == slot_values.end() || it->second.empty()) {
          throw ConfigError("no synthetic values for slot <" + slot + ">");
        }
        bindings[slot] = it->second[rng.index(it->second.size())];
      }

      QASample s;
      s.sample_id = to_string(split) + "-" + numbered("", i);
      s.video_id = "vid-" + s.sample_id;
      s.question_text = fill_pattern(tmpl.question_pattern, bindings);
      s.template_id = tmpl.template_id;
      s.question_type = tmpl.question_type;
      s.question_feature = embedder.embed(tmpl.question_pattern);
      s.prompt_feature = embedder.embed(construct_prompt(tmpl.template_id, bindings, registry));
      s.answer = rng.index(C);

      PlantedTruth truth;
      truth.segments = rng.distinct(config.planted_segments, 0, T);
      for (std::size_t t : truth.segments) truth.tokens[t] = rng.distinct(config.planted_tokens, 1, M);

      FeatureBundle b;
      b.video_id = s.video_id;
      std::vector<float> audio(T * Da), frames(T * Dv), tokens(T * M * Dv);
      for (float& v : audio) v = static_cast<float>(sa * rng.normal());
      for (float& v : frames) v = static_cast<float>(sv * rng.normal());
      for (float& v : tokens) v = static_cast<float>(sv * rng.normal());
      for (std::size_t t : truth.segments) {
        add_scaled(std::span(frames).subspan(t * Dv, Dv), s.prompt_feature, alpha);
        const std::vector<float> source = rng.unit_vector(Da);
        add_scaled(std::span(audio).subspan(t * Da, Da), source, alpha);
        std::vector<float> token_source(Dv);
        double norm = 0.0;
        for (std::size_t r = 0; r < Dv; ++r) {
          double acc = 0.0;
          for (std::size_t c = 0; c < Da; ++c) acc += source_map[r * Da + c] * source[c];
          token_source[r] = static_cast<float>(acc);
          norm += acc * acc;
        }
        norm = std::sqrt(norm);
        for (float& v : token_source) v = static_cast<float>(norm > 0.0 ? v / norm : 0.0);
        for (std::size_t j : truth.tokens[t]) {
          auto tok = std::span(tokens).subspan((t * M + j) * Dv, Dv);
          add_scaled(tok, class_patterns[s.answer], alpha);
          add_scaled(tok, token_source, alpha);
        }
      }
      // CLS position carries the frame-level feature.
      for (std::size_t t = 0; t < T; ++t) {
        std::copy_n(frames.begin() + t * Dv, Dv, tokens.begin() + t * M * Dv);
      }
      b.audio = Tensor({T, Da}, std::move(audio));
      b.frames = Tensor({T, Dv}, std::move(frames));
      b.tokens = Tensor({T, M, Dv}, std::move(tokens));
      s.planted = std::move(truth);
      dataset.bundles.emplace(b.video_id, std::move(b));
      manifest.entries.push_back(std::move(s));
    }
    dataset.manifests.emplace(split, std::move(manifest));
  }
  dataset.validate();
  return dataset;
}

}  // namespace tspm
