// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <regex>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "tspm/question_type.hpp"

namespace tspm {

// Slot values keyed by slot name. Slots are written "<NAME>" in patterns,
// NAME being upper-case letters, digits or underscores.
using SlotBindings = std::map<std::string, std::string>;

struct QuestionTemplate {
  std::string template_id;
  std::string question_pattern;
  std::string declarative_pattern;
  QuestionType question_type;
};

// Slot names in order of appearance.
std::vector<std::string> pattern_slots(std::string_view pattern);
// Substitutes every slot; throws BindingError when a slot has no binding.
std::string fill_pattern(std::string_view pattern, const SlotBindings& bindings);

struct TemplateMatch {
  std::string template_id;
  SlotBindings bindings;
};

class TemplateRegistry {
 public:
  TemplateRegistry() = default;
  explicit TemplateRegistry(std::vector<QuestionTemplate> templates);

  static TemplateRegistry from_json(const nlohmann::json& j);
  static TemplateRegistry load(const std::filesystem::path& path);
  // The registry file shipped in data/.
  static TemplateRegistry load_default();
  nlohmann::json to_json() const;

  const std::vector<QuestionTemplate>& templates() const { return templates_; }
  const QuestionTemplate& get(std::string_view template_id) const;
  bool contains(std::string_view template_id) const;
  bool empty() const { return templates_.empty(); }

  // See match_template().
  TemplateMatch match(std::string_view question) const;

 private:
  struct Compiled {
    std::regex matcher;
    std::vector<std::string> slots;
    std::size_t literal_length = 0;
  };
  std::vector<QuestionTemplate> templates_;
  std::vector<std::shared_ptr<const Compiled>> compiled_;
};

// Among templates whose question pattern matches the whole question, picks
// the one with the most literal characters (earlier entry on ties). Throws
// UnmatchedQuestion when nothing matches.
TemplateMatch match_template(std::string_view question, const TemplateRegistry& registry);

std::string construct_prompt(std::string_view template_id, const SlotBindings& bindings,
                             const TemplateRegistry& registry);

// Declarative prompt for a question, or the question itself when no
// template matches.
std::string prompt_for_question(std::string_view question, const TemplateRegistry& registry);

class PromptEmbedder {
 public:
  virtual ~PromptEmbedder() = default;
  // Unit-norm vector; identical strings map to identical vectors.
  virtual std::vector<float> embed(std::string_view prompt) const = 0;
  virtual std::size_t dim() const = 0;
};

// Deterministic stand-in for a text encoder: a seeded Gaussian direction
// keyed by a hash of the string.
// Hash-seeded unit vectors. `shared` mixes in a common direction so that
// distinct sentences have cosine similarity near shared², like real text
// encoders whose embeddings crowd into a narrow cone.
class SyntheticEmbedder : public PromptEmbedder {
 public:
  SyntheticEmbedder(std::size_t dim, std::uint64_t seed, double shared = 0.0);
  std::vector<float> embed(std::string_view prompt) const override;
  std::size_t dim() const override { return dim_; }

 private:
  std::size_t dim_;
  std::uint64_t seed_;
  double shared_;
  std::vector<float> common_;
};

// Precomputed embeddings keyed by prompt text.
class LookupEmbedder : public PromptEmbedder {
 public:
  LookupEmbedder(std::size_t dim, std::map<std::string, std::vector<float>> table)
      : dim_(dim), table_(table.begin(), table.end()) {}
  std::vector<float> embed(std::string_view prompt) const override;
  std::size_t dim() const override { return dim_; }

 private:
  std::size_t dim_;
  std::map<std::string, std::vector<float>, std::less<>> table_;
};

}  // namespace tspm
