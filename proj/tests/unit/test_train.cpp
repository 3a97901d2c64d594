// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <fstream>
#include <limits>

#include "test_util.hpp"
#include "tspm/binary_io.hpp"
#include "tspm/error.hpp"
#include "tspm/synth.hpp"
#include "tspm/train.hpp"

using namespace tspm;
using namespace tspm::testing;

namespace {

SynthConfig tiny_synth() {
  SynthConfig c;
  c.segments = 6;
  c.tokens = 5;
  c.audio_dim = 4;
  c.visual_dim = 8;
  c.num_answers = 4;
  c.train = 16;
  c.val = 8;
  c.test = 8;
  c.planted_segments = 2;
  c.planted_tokens = 2;
  return c;
}

TrainConfig tiny_train() {
  TrainConfig c;
  c.lr = 1e-3;
  c.batch_size = 8;
  c.epochs = 2;
  c.top_k = 2;
  c.tokens = 3;
  c.heads = 2;
  c.mlp_ratio = 2;
  return c;
}

const Dataset& tiny_dataset() {
  static const Dataset d = generate_synthetic(tiny_synth(), 21, TemplateRegistry::load_default());
  return d;
}

std::vector<std::vector<float>> snapshot(const TspmModel& model) {
  std::vector<std::vector<float>> out;
  for (const auto& [name, t] : model.store().params()) out.push_back(t.to_vector());
  return out;
}

double train_loss(const TspmModel& model, const Dataset& d) { return evaluate(model, d, Split::Train).mean_loss; }

}  // namespace

TEST_CASE("learning rate schedule") {
  TrainConfig c;
  CHECK(c.lr_at(0) == doctest::Approx(1e-4));
  CHECK(c.lr_at(9) == doctest::Approx(1e-4));
  CHECK(c.lr_at(10) == doctest::Approx(1e-5));
  CHECK(c.lr_at(25) == doctest::Approx(1e-6));
}

TEST_CASE("train config JSON") {
  TrainConfig c = tiny_train();
  c.ablation = Ablation::parse({"no_tpc"});
  c.pool = Pool::Max;
  CHECK(TrainConfig::from_json(c.to_json()).to_json() == c.to_json());
  CHECK(TrainConfig::from_json(nlohmann::json::object()).to_json() == TrainConfig().to_json());
  CHECK_THROWS_AS(TrainConfig::from_json({{"lr", "fast"}}), ConfigError);
  CHECK_THROWS_AS(TrainConfig::from_json({{"epochs", 0}}), ConfigError);
  CHECK_THROWS_AS(TrainConfig::from_json({{"ablation", {"no_sound"}}}), ConfigError);
  CHECK_THROWS_AS(TrainConfig::load("/nonexistent/train.json"), ConfigError);
}

TEST_CASE("ablation flags") {
  CHECK(Ablation::parse({"full"}).label() == "full");
  const Ablation a = Ablation::parse({"no_tpm", "no_merge"});
  CHECK(a.no_tpm);
  CHECK(a.no_merge);
  CHECK(a.label() == "no_tpm+no_merge");
  CHECK(Ablation::parse(a.names()) == a);
  CHECK_THROWS_AS(Ablation::parse({"no_spm", "no_merge"}), ConfigError);
  CHECK_THROWS_AS(Ablation::parse({"no_tpm", "no_qprompt"}), ConfigError);
  const auto runs = Ablation::standard_runs();
  CHECK(runs.size() == 6);
  CHECK_FALSE(runs.front().any());
}

TEST_CASE("model geometry follows the ablation") {
  const Dataset& d = tiny_dataset();
  TrainConfig c = tiny_train();
  const TspmModel full(c.model_config(d), 1);
  CHECK(full.effective_top_k(6) == 2);
  CHECK(full.merge_config(5).target == 3);
  CHECK(full.store().contains("tpm/key/weight"));
  c.ablation = Ablation::parse({"no_tpc"});
  CHECK(TspmModel(c.model_config(d), 1).effective_top_k(6) == 6);
  c.ablation = Ablation::parse({"no_merge"});
  CHECK(TspmModel(c.model_config(d), 1).merge_config(5).target == 5);
  c.ablation = Ablation::parse({"no_spm"});
  const TspmModel no_spm(c.model_config(d), 1);
  CHECK(no_spm.parameter_count() < full.parameter_count());
  const QASample& s = d.split(Split::Test).entries.front();
  CHECK(no_spm.forward(d.bundle(s.video_id), s).merged.segments() == 0);
}

TEST_CASE("checkpoints reproduce the model") {
  const Dataset& d = tiny_dataset();
  const TspmModel model(tiny_train().model_config(d), 5);
  TempDir dir("ckpt");
  model.save(dir.path / "m.ckpt");
  const TspmModel back = TspmModel::load(dir.path / "m.ckpt");
  CHECK(back.encode() == model.encode());
  CHECK(back.config().to_json() == model.config().to_json());
  for (const QASample& s : d.split(Split::Test).entries) {
    const auto a = model.forward(d.bundle(s.video_id), s).prediction.probs;
    const auto b = back.forward(d.bundle(s.video_id), s).prediction.probs;
    CHECK(a == b);
  }
  auto records = model.records();
  std::erase_if(records, [](const TensorRecord& r) { return r.first == "config/num_answers"; });
  CHECK_THROWS_AS(TspmModel::from_records(records), ContractError);
}

TEST_CASE("evaluation rejects a model with a different answer count") {
  const Dataset& d = tiny_dataset();
  ModelConfig mc = tiny_train().model_config(d);
  mc.num_answers += 1;
  CHECK_THROWS_AS(evaluate(TspmModel(mc, 1), d, Split::Test), ContractError);
}

TEST_CASE("zero learning rate leaves parameters untouched") {
  const Dataset& d = tiny_dataset();
  TrainConfig c = tiny_train();
  c.lr = 0.0;
  const TspmModel init(c.model_config(d), Rng(c.seed).split("model").seed());
  const TrainResult r = train(d, c);
  CHECK(snapshot(r.model) == snapshot(init));
  CHECK(r.history[0].val_acc == r.history[1].val_acc);
}

TEST_CASE("training is deterministic and writes its artifacts") {
  const Dataset& d = tiny_dataset();
  TempDir dir("train");
  const TrainConfig c = tiny_train();
  const TrainResult a = train(d, c, dir.path / "a.ckpt");
  const TrainResult b = train(d, c, dir.path / "b.ckpt");
  CHECK(read_file_bytes(dir.path / "a.ckpt") == read_file_bytes(dir.path / "b.ckpt"));
  CHECK(read_file_bytes(dir.path / "a.ckpt.best") == a.best_checkpoint);
  CHECK(a.best_checkpoint == b.best_checkpoint);
  std::ifstream history(dir.path / "a.ckpt.history.jsonl");
  std::string line;
  std::size_t epoch = 0;
  while (std::getline(history, line)) {
    const auto j = nlohmann::json::parse(line);
    CHECK(j.at("epoch") == epoch);
    CHECK(j.at("lr").get<double>() == doctest::Approx(c.lr_at(epoch)));
    CHECK(j.contains("train_loss"));
    CHECK(j.contains("val_acc"));
    CHECK(j.contains("seconds"));
    ++epoch;
  }
  CHECK(epoch == c.epochs);
}

TEST_CASE("one optimizer step lowers the batch loss") {
  std::size_t improved = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    SynthConfig sc = tiny_synth();
    sc.train = 8;
    sc.val = 0;
    sc.test = 0;
    const Dataset d = generate_synthetic(sc, 100 + seed, TemplateRegistry::load_default());
    TrainConfig c = tiny_train();
    c.epochs = 1;
    c.seed = seed;
    c.lr = 1e-3;
    const TspmModel init(c.model_config(d), Rng(c.seed).split("model").seed());
    const double before = train_loss(init, d);
    const double after = train_loss(train(d, c).model, d);
    improved += after < before ? 1 : 0;
  }
  CHECK(improved >= 95);
}

TEST_CASE("evaluation is deterministic across thread counts") {
  const Dataset& d = tiny_dataset();
  const TspmModel model(tiny_train().model_config(d), 3);
  const auto one = report_to_json(evaluate(model, d, Split::Test, 1));
  CHECK(report_to_json(evaluate(model, d, Split::Test, 1)) == one);
  CHECK(report_to_json(evaluate(model, d, Split::Test, 3)) == one);
  CHECK(predictions_jsonl(evaluate(model, d, Split::Test, 1), d.split(Split::Test)) ==
        predictions_jsonl(evaluate(model, d, Split::Test, 2), d.split(Split::Test)));
}

TEST_CASE("report accounting") {
  const Dataset& d = tiny_dataset();
  const EvalReport r = evaluate(TspmModel(tiny_train().model_config(d), 4), d, Split::Test);
  CHECK(r.overall.count == d.split(Split::Test).entries.size());
  std::size_t count = 0, correct = 0;
  for (const auto& [name, cell] : r.per_type) {
    count += cell.count;
    correct += cell.correct;
  }
  CHECK(count == r.overall.count);
  CHECK(correct == r.overall.correct);
  for (const auto& map : {r.per_modality, r.per_subtype}) {
    count = 0;
    for (const auto& [name, cell] : map) count += cell.count;
    CHECK(count == r.overall.count);
  }
  for (const SamplePrediction& p : r.predictions) {
    double total = 0.0;
    for (float v : p.probs) total += v;
    CHECK(total == doctest::Approx(1.0).epsilon(1e-6));
  }
  CHECK(r.planted_samples == r.overall.count);
  CHECK(r.parameter_count > 0);
  CHECK(r.forward_macs > 0);
  CHECK_FALSE(report_to_json(r).contains("seconds"));
  CHECK(report_to_json(r, true).contains("seconds"));
  CHECK(report_markdown(r).find("overall") != std::string::npos);
}

TEST_CASE("selecting every segment recalls every planted segment") {
  const Dataset& d = tiny_dataset();
  TrainConfig c = tiny_train();
  c.ablation = Ablation::parse({"no_tpc"});
  const EvalReport r = evaluate(TspmModel(c.model_config(d), 2), d, Split::Test);
  REQUIRE(r.planted_recall);
  CHECK(*r.planted_recall == 1.0);
  for (const SamplePrediction& p : r.predictions) CHECK(p.omega.size() == 6);
}

TEST_CASE("a zero classifier scores chance") {
  SynthConfig sc = tiny_synth();
  sc.num_answers = 8;
  sc.train = 8;
  sc.val = 0;
  sc.test = 400;
  const Dataset d = generate_synthetic(sc, 30, TemplateRegistry::load_default());
  TspmModel model(tiny_train().model_config(d), 6);
  for (const char* name : {"fusion/classifier/weight", "fusion/classifier/bias"}) {
    Tensor t = model.store().get(name);
    for (float& v : t.mutable_data()) v = 0.0f;
  }
  const EvalReport r = evaluate(model, d, Split::Test);
  const double sigma = std::sqrt(0.125 * 0.875 / 400.0);
  CHECK(std::abs(r.accuracy() - 0.125) <= 3.0 * sigma);
  CHECK(r.mean_loss == doctest::Approx(std::log(8.0)).epsilon(1e-5));
}

TEST_CASE("without signal a trained model stays at chance") {
  SynthConfig sc = tiny_synth();
  sc.num_answers = 8;
  sc.alpha = 0.0;
  sc.train = 200;
  sc.val = 0;
  sc.test = 400;
  const Dataset d = generate_synthetic(sc, 31, TemplateRegistry::load_default());
  TrainConfig c = tiny_train();
  c.epochs = 3;
  const EvalReport r = evaluate(train(d, c).model, d, Split::Test);
  const double sigma = std::sqrt(0.125 * 0.875 / 400.0);
  CHECK(std::abs(r.accuracy() - 0.125) <= 3.0 * sigma);
}

TEST_CASE("a non-finite loss stops training") {
  Dataset d = generate_synthetic(tiny_synth(), 22, TemplateRegistry::load_default());
  const QASample& s = d.split(Split::Train).entries.front();
  Tensor audio = d.bundles.at(s.video_id).audio;
  audio.mutable_data()[0] = std::numeric_limits<float>::quiet_NaN();
  TempDir dir("nan");
  CHECK_THROWS_AS(train(d, tiny_train(), dir.path / "m.ckpt"), NumericError);
  CHECK(std::filesystem::exists(dir.path / "m.ckpt.nan.json"));
}

TEST_CASE("ablation table and sweep") {
  const Dataset& d = tiny_dataset();
  TrainConfig c = tiny_train();
  c.epochs = 1;
  const auto rows = run_ablation(d, c);
  REQUIRE(rows.size() == 6);
  CHECK(rows[0].label == "full");
  CHECK(rows_to_json(rows).size() == 6);
  CHECK(rows_markdown(rows).find("no_tpc") != std::string::npos);
  const auto swept = sweep(d, c, "top_k", {1, 3});
  REQUIRE(swept.size() == 2);
  CHECK(swept[1].report.predictions.front().omega.size() == 3);
  CHECK_THROWS_AS(sweep(d, c, "width", {1}), ConfigError);
}
