// SPDX-License-Identifier: Apache-2.0
#include "tspm/prompt.hpp"

#include <cmath>
#include <fstream>
#include <set>

#include "tspm/error.hpp"
#include "tspm/rng.hpp"

namespace tspm {

std::string to_string(Modality m) {
  switch (m) {
    case Modality::Audio: return "audio";
    case Modality::Visual: return "visual";
    case Modality::AudioVisual: return "audio-visual";
  }
  return "?";
}

std::string to_string(Subtype s) {
  switch (s) {
    case Subtype::Existential: return "existential";
    case Subtype::Counting: return "counting";
    case Subtype::Location: return "location";
    case Subtype::Comparative: return "comparative";
    case Subtype::Temporal: return "temporal";
  }
  return "?";
}

std::string QuestionType::to_string() const { return tspm::to_string(modality) + "/" + tspm::to_string(subtype); }

QuestionType QuestionType::parse(std::string_view text) {
  const auto slash = text.find('/');
  if (slash == std::string_view::npos) throw ConfigError("question type '" + std::string(text) + "' lacks '/'");
  const std::string_view mod = text.substr(0, slash), sub = text.substr(slash + 1);
  QuestionType qt;
  bool found = false;
  for (Modality m : kModalities) {
    if (tspm::to_string(m) == mod) {
      qt.modality = m;
      found = true;
    }
  }
  if (!found) throw ConfigError("unknown modality '" + std::string(mod) + "'");
  found = false;
  for (Subtype s : kSubtypes) {
    if (tspm::to_string(s) == sub) {
      qt.subtype = s;
      found = true;
    }
  }
  if (!found) throw ConfigError("unknown question subtype '" + std::string(sub) + "'");
  return qt;
}

namespace {

const std::regex& slot_regex() {
  static const std::regex re("<([A-Z][A-Z0-9_]*)>");
  return re;
}

std::string escape_regex(std::string_view literal) {
  static const std::string special = R"(\^$.|?*+()[]{})";
  std::string out;
  for (char c : literal) {
    if (special.find(c) != std::string::npos) out.push_back('\\');
    out.push_back(c);
  }
  return out;
}

}  // namespace

std::vector<std::string> pattern_slots(std::string_view pattern) {
  std::vector<std::string> out;
  const std::string p(pattern);
  for (auto it = std::sregex_iterator(p.begin(), p.end(), slot_regex()); it != std::sregex_iterator(); ++it) {
    out.push_back((*it)[1].str());
  }
  return out;
}

std::string fill_pattern(std::string_view pattern, const SlotBindings& bindings) {
  const std::string p(pattern);
  std::string out;
  std::size_t last = 0;
  for (auto it = std::sregex_iterator(p.begin(), p.end(), slot_regex()); it != std::sregex_iterator(); ++it) {
    const std::smatch& m = *it;
    out.append(p, last, static_cast<std::size_t>(m.position(0)) - last);
    auto b = bindings.find(m[1].str());
    if (b == bindings.end()) throw BindingError("no binding for slot <" + m[1].str() + "> in \"" + p + "\"");
    out += b->second;
    last = static_cast<std::size_t>(m.position(0) + m.length(0));
  }
  out.append(p, last);
  return out;
}

TemplateRegistry::TemplateRegistry(std::vector<QuestionTemplate> templates) : templates_(std::move(templates)) {
  std::set<std::string> ids;
  for (const QuestionTemplate& t : templates_) {
    if (!ids.insert(t.template_id).second) throw ConfigError("duplicate template id '" + t.template_id + "'");
    auto compiled = std::make_shared<Compiled>();
    compiled->slots = pattern_slots(t.question_pattern);
    std::set<std::string> unique(compiled->slots.begin(), compiled->slots.end());
    if (unique.size() != compiled->slots.size()) {
      throw ConfigError("template '" + t.template_id + "' repeats a slot name");
    }
    for (const std::string& s : pattern_slots(t.declarative_pattern)) {
      if (!unique.count(s)) {
        throw ConfigError("template '" + t.template_id + "' declarative slot <" + s + "> is not in the question");
      }
    }
    std::string re = "^";
    const std::string& p = t.question_pattern;
    std::size_t last = 0;
    for (auto it = std::sregex_iterator(p.begin(), p.end(), slot_regex()); it != std::sregex_iterator(); ++it) {
      const std::string literal = p.substr(last, static_cast<std::size_t>(it->position(0)) - last);
      compiled->literal_length += literal.size();
      re += escape_regex(literal) + "(.+?)";
      last = static_cast<std::size_t>(it->position(0) + it->length(0));
    }
    compiled->literal_length += p.size() - last;
    re += escape_regex(p.substr(last)) + "$";
    compiled->matcher = std::regex(re);
    compiled_.push_back(std::move(compiled));
  }
}

TemplateRegistry TemplateRegistry::from_json(const nlohmann::json& j) {
  if (!j.is_array()) throw ConfigError("template registry must be a JSON array");
  std::vector<QuestionTemplate> templates;
  for (const auto& e : j) {
    QuestionTemplate t;
    t.template_id = e.at("template_id").get<std::string>();
    t.question_pattern = e.at("question_pattern").get<std::string>();
    t.declarative_pattern = e.at("declarative_pattern").get<std::string>();
    t.question_type = QuestionType::parse(e.at("question_type").get<std::string>());
    templates.push_back(std::move(t));
  }
  return TemplateRegistry(std::move(templates));
}

TemplateRegistry TemplateRegistry::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open template registry " + path.string());
  try {
    return from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("template registry " + path.string() + ": " + e.what());
  }
}

TemplateRegistry TemplateRegistry::load_default() {
  return load(std::filesystem::path(TSPM_DATA_DIR) / "registry.json");
}

nlohmann::json TemplateRegistry::to_json() const {
  nlohmann::json j = nlohmann::json::array();
  for (const QuestionTemplate& t : templates_) {
    j.push_back({{"template_id", t.template_id},
                 {"question_pattern", t.question_pattern},
                 {"declarative_pattern", t.declarative_pattern},
                 {"question_type", t.question_type.to_string()}});
  }
  return j;
}

const QuestionTemplate& TemplateRegistry::get(std::string_view template_id) const {
  for (const QuestionTemplate& t : templates_) {
    if (t.template_id == template_id) return t;
  }
  throw ConfigError("unknown template id '" + std::string(template_id) + "'");
}

bool TemplateRegistry::contains(std::string_view template_id) const {
  for (const QuestionTemplate& t : templates_) {
    if (t.template_id == template_id) return true;
  }
  return false;
}

TemplateMatch TemplateRegistry::match(std::string_view question) const {
  if (templates_.empty()) throw ConfigError("template registry is empty");
  const std::string q(question);
  std::ptrdiff_t best = -1;
  std::smatch best_match;
  for (std::size_t i = 0; i < templates_.size(); ++i) {
    std::smatch m;
    if (!std::regex_match(q, m, compiled_[i]->matcher)) continue;
    if (best < 0 || compiled_[i]->literal_length > compiled_[static_cast<std::size_t>(best)]->literal_length) {
      best = static_cast<std::ptrdiff_t>(i);
      best_match = m;
    }
  }
  if (best < 0) throw UnmatchedQuestion("no template matches \"" + q + "\"");
  const auto& c = *compiled_[static_cast<std::size_t>(best)];
  TemplateMatch out;
  out.template_id = templates_[static_cast<std::size_t>(best)].template_id;
  for (std::size_t s = 0; s < c.slots.size(); ++s) out.bindings[c.slots[s]] = best_match[s + 1].str();
  return out;
}

TemplateMatch match_template(std::string_view question, const TemplateRegistry& registry) {
  return registry.match(question);
}

std::string construct_prompt(std::string_view template_id, const SlotBindings& bindings,
                             const TemplateRegistry& registry) {
  return fill_pattern(registry.get(template_id).declarative_pattern, bindings);
}

std::string prompt_for_question(std::string_view question, const TemplateRegistry& registry) {
  try {
    const TemplateMatch m = registry.match(question);
    return construct_prompt(m.template_id, m.bindings, registry);
  } catch (const UnmatchedQuestion&) {
    return std::string(question);
  }
}

SyntheticEmbedder::SyntheticEmbedder(std::size_t dim, std::uint64_t seed, double shared)
    : dim_(dim), seed_(seed), shared_(shared) {
  if (!(shared >= 0.0 && shared < 1.0)) throw ConfigError("embedding shared weight must lie in [0, 1)");
  if (shared_ > 0.0) common_ = Rng(seed).split("common").unit_vector(dim);
}

std::vector<float> SyntheticEmbedder::embed(std::string_view prompt) const {
  Rng rng(splitmix64(seed_ ^ hash_string(prompt)));
  std::vector<float> v = rng.unit_vector(dim_);
  if (shared_ == 0.0) return v;
  const double own = std::sqrt(1.0 - shared_ * shared_);
  double norm = 0.0;
  for (std::size_t i = 0; i < dim_; ++i) {
    const double x = shared_ * common_[i] + own * v[i];
    v[i] = static_cast<float>(x);
    norm += x * x;
  }
  norm = std::sqrt(norm);
  for (float& x : v) x = static_cast<float>(x / norm);
  return v;
}

std::vector<float> LookupEmbedder::embed(std::string_view prompt) const {
  auto it = table_.find(prompt);
  if (it == table_.end()) throw MissingEmbedding("no stored embedding for prompt \"" + std::string(prompt) + "\"");
  return it->second;
}

}  // namespace tspm
