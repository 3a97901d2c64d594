// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "tspm/error.hpp"
#include "tspm/prompt.hpp"

using namespace tspm;

namespace {

QuestionTemplate make(std::string id, std::string question, std::string declarative) {
  return {std::move(id), std::move(question), std::move(declarative), QuestionType::parse("audio/counting")};
}

double cosine(const std::vector<float>& a, const std::vector<float>& b) {
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += double(a[i]) * b[i];
    aa += double(a[i]) * a[i];
    bb += double(b[i]) * b[i];
  }
  return ab / std::sqrt(aa * bb);
}

}  // namespace

TEST_CASE("matching binds slots") {
  const TemplateRegistry registry = TemplateRegistry::load_default();
  const TemplateMatch m = match_template("Where is the first sounding instrument?", registry);
  CHECK(m.template_id == "loc_first_sound");
  CHECK(m.bindings == SlotBindings{{"ORD", "first"}});
}

TEST_CASE("a slotless template matches with empty bindings") {
  const TemplateRegistry registry = TemplateRegistry::load_default();
  const TemplateMatch m = match_template("How many instruments are sounding?", registry);
  CHECK(m.template_id == "count_sounding");
  CHECK(m.bindings.empty());
}

TEST_CASE("unmatched questions are rejected") {
  const TemplateRegistry registry = TemplateRegistry::load_default();
  CHECK_THROWS_AS(match_template("What color is the car?", registry), UnmatchedQuestion);
  CHECK(prompt_for_question("What color is the car?", registry) == "What color is the car?");
  CHECK_THROWS_AS(match_template("What color is the car?", TemplateRegistry{}), ConfigError);
}

TEST_CASE("declarative prompts") {
  const TemplateRegistry registry = TemplateRegistry::load_default();
  CHECK(construct_prompt("loc_first_sound", {{"ORD", "first"}}, registry) ==
        "The instruments in the video do not sound at the same time.");
  CHECK(construct_prompt("count_sounding", {}, registry) == "Several instruments in the video are sounding.");
  CHECK(construct_prompt("exist_instrument", {{"INSTR", "cello"}}, registry) == "There is a cello in the video.");
  CHECK(prompt_for_question("Is there a guitar in the entire video?", registry) == "There is a guitar in the video.");
  CHECK_THROWS_AS(construct_prompt("exist_instrument", {}, registry), BindingError);
  CHECK_THROWS_AS(construct_prompt("no_such_template", {}, registry), ConfigError);
}

TEST_CASE("an identity template returns the question") {
  const TemplateRegistry registry({make("same", "Is the <X> loud?", "Is the <X> loud?")});
  const std::string q = "Is the drum loud?";
  const TemplateMatch m = match_template(q, registry);
  CHECK(construct_prompt(m.template_id, m.bindings, registry) == q);
}

TEST_CASE("pattern helpers") {
  CHECK(pattern_slots("a <X> b <Y_2> c") == std::vector<std::string>{"X", "Y_2"});
  CHECK(fill_pattern("<A> and <B>", {{"A", "x"}, {"B", "y"}}) == "x and y");
  CHECK_THROWS_AS(fill_pattern("<A> and <B>", {{"A", "x"}}), BindingError);
}

TEST_CASE("the template with more literal text wins") {
  const TemplateRegistry registry({make("loose", "Is the <X> playing now?", "loose"),
                                   make("tight", "Is the violin playing <Y>?", "tight"),
                                   make("tight_twin", "Is the violin playing <Z>?", "twin")});
  CHECK(match_template("Is the violin playing now?", registry).template_id == "tight");
  CHECK(match_template("Is the cello playing now?", registry).template_id == "loose");
}

TEST_CASE("regex metacharacters in patterns are literal") {
  const TemplateRegistry registry({make("q", "Is (this) [a] <X>?", "p")});
  CHECK(match_template("Is (this) [a] test?", registry).bindings.at("X") == "test");
  CHECK_THROWS_AS(match_template("Is this a test?", registry), UnmatchedQuestion);
}

TEST_CASE("registry validation") {
  CHECK_THROWS_AS(TemplateRegistry({make("a", "x", "y"), make("a", "z", "w")}), ConfigError);
  CHECK_THROWS_AS(TemplateRegistry({make("a", "x <S> <S>", "y")}), ConfigError);
  CHECK_THROWS_AS(TemplateRegistry({make("a", "x", "y <S>")}), ConfigError);
  CHECK_THROWS_AS(TemplateRegistry::from_json(nlohmann::json::object()), ConfigError);
  CHECK_THROWS_AS(QuestionType::parse("audio"), ConfigError);
  CHECK_THROWS_AS(QuestionType::parse("smell/counting"), ConfigError);
  const TemplateRegistry registry = TemplateRegistry::load_default();
  CHECK(TemplateRegistry::from_json(registry.to_json()).to_json() == registry.to_json());
}

TEST_CASE("synthetic embedder is deterministic and unit norm") {
  const SyntheticEmbedder e(64, 3);
  const auto a = e.embed("The sound is loud.");
  CHECK(a == e.embed("The sound is loud."));
  CHECK(a.size() == 64);
  CHECK(cosine(a, a) == doctest::Approx(1.0));
  double norm = 0.0;
  for (float v : a) norm += double(v) * v;
  CHECK(norm == doctest::Approx(1.0).epsilon(1e-5));
  CHECK(a != SyntheticEmbedder(64, 4).embed("The sound is loud."));
  CHECK_THROWS_AS(SyntheticEmbedder(8, 1, 1.0), ConfigError);
}

TEST_CASE("distinct templates embed far apart") {
  const TemplateRegistry registry = TemplateRegistry::load_default();
  const std::string a = construct_prompt("count_sounding", {}, registry);
  const std::string b = construct_prompt("loc_first_sound", {{"ORD", "first"}}, registry);
  for (double shared : {0.0, 0.7}) {
    double total = 0.0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
      const SyntheticEmbedder e(512, seed, shared);
      total += cosine(e.embed(a), e.embed(b));
    }
    CHECK(total / 100.0 < 0.5);
  }
}

TEST_CASE("lookup embedder") {
  const LookupEmbedder e(2, {{"hello", {0.6f, 0.8f}}});
  CHECK(e.embed("hello") == std::vector<float>{0.6f, 0.8f});
  CHECK_THROWS_AS(e.embed("bye"), MissingEmbedding);
}
