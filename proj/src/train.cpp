// SPDX-License-Identifier: Apache-2.0
#include "tspm/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>
#include <thread>

#include "tspm/binary_io.hpp"
#include "tspm/error.hpp"

namespace tspm {

double TrainConfig::lr_at(std::size_t epoch) const {
  return lr * std::pow(lr_decay, static_cast<double>(epoch / decay_every));
}

void TrainConfig::validate() const {
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("lr must be a non-negative number");
  if (!(lr_decay > 0.0)) throw ConfigError("lr_decay must be positive");
  if (decay_every < 1 || batch_size < 1 || epochs < 1) {
    throw ConfigError("decay_every, batch_size and epochs must be positive");
  }
  if (top_k < 1 || tokens < 2 || blocks < 1 || heads < 1 || mlp_ratio < 1) {
    throw ConfigError("top_k, blocks, heads, mlp_ratio must be positive and tokens at least 2");
  }
  if (clip_norm < 0.0) throw ConfigError("clip_norm must be non-negative");
  if (threads < 1) throw ConfigError("threads must be positive");
  ablation.validate();
}

ModelConfig TrainConfig::model_config(const Dataset& dataset) const {
  const DatasetManifest& train_split = dataset.split(Split::Train);
  if (train_split.entries.empty()) throw ConfigError("train split is empty");
  const FeatureBundle& b = dataset.bundle(train_split.entries.front().video_id);
  ModelConfig m;
  m.audio_dim = b.audio_dim();
  m.visual_dim = b.visual_dim();
  m.num_answers = dataset.num_answers();
  m.top_k = top_k;
  m.merge_target = tokens;
  m.blocks = blocks;
  m.heads = heads;
  m.mlp_ratio = mlp_ratio;
  m.protect_cls = protect_cls;
  m.pool = pool;
  m.tanh_after_fc = tanh_after_fc;
  m.ablation = ablation;
  return m;
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  try {
    c.lr = j.value("lr", c.lr);
    c.lr_decay = j.value("lr_decay", c.lr_decay);
    c.decay_every = j.value("decay_every", c.decay_every);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.epochs = j.value("epochs", c.epochs);
    c.top_k = j.value("top_k", c.top_k);
    c.tokens = j.value("tokens", c.tokens);
    c.blocks = j.value("blocks", c.blocks);
    c.heads = j.value("heads", c.heads);
    c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
    c.protect_cls = j.value("protect_cls", c.protect_cls);
    c.pool = parse_pool(j.value("pool", std::string("mean")));
    c.tanh_after_fc = j.value("tanh_after_fc", c.tanh_after_fc);
    c.clip_norm = j.value("clip_norm", c.clip_norm);
    c.seed = j.value("seed", c.seed);
    c.threads = j.value("threads", c.threads);
    c.ablation = Ablation::parse(j.value("ablation", std::vector<std::string>{}));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  c.validate();
  return c;
}

TrainConfig TrainConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open train config " + path.string());
  try {
    return from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("train config " + path.string() + ": " + e.what());
  }
}

nlohmann::json TrainConfig::to_json() const {
  return {{"lr", lr},
          {"lr_decay", lr_decay},
          {"decay_every", decay_every},
          {"batch_size", batch_size},
          {"epochs", epochs},
          {"top_k", top_k},
          {"tokens", tokens},
          {"blocks", blocks},
          {"heads", heads},
          {"mlp_ratio", mlp_ratio},
          {"protect_cls", protect_cls},
          {"pool", to_string(pool)},
          {"tanh_after_fc", tanh_after_fc},
          {"clip_norm", clip_norm},
          {"seed", seed},
          {"threads", threads},
          {"ablation", ablation.names()}};
}

nlohmann::json EpochRecord::to_json() const {
  nlohmann::json j = {{"epoch", epoch}, {"lr", lr}, {"train_loss", train_loss}, {"seconds", seconds}};
  j["val_acc"] = val_acc ? nlohmann::json(*val_acc) : nlohmann::json(nullptr);
  return j;
}

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::filesystem::path with_suffix(const std::filesystem::path& p, const std::string& suffix) {
  return std::filesystem::path(p.string() + suffix);
}

void dump_nan(const std::filesystem::path& out, std::size_t epoch, std::size_t step,
              const std::vector<const QASample*>& batch, const QASample& offender, double loss) {
  nlohmann::json j = {{"epoch", epoch}, {"step", step}, {"sample_id", offender.sample_id},
                      {"loss", std::isnan(loss) ? "nan" : "inf"}};
  for (const QASample* s : batch) j["batch"].push_back(s->sample_id);
  if (!out.empty()) {
    std::ofstream f(with_suffix(out, ".nan.json"));
    f << j.dump(2) << "\n";
  }
  throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + ", step " + std::to_string(step) +
                     ", sample " + offender.sample_id + ": " + j.dump());
}

}  // namespace

TrainResult train(const Dataset& dataset, const TrainConfig& config, const std::filesystem::path& out,
                  std::ostream* log) {
  config.validate();
  const DatasetManifest& train_split = dataset.split(Split::Train);
  if (train_split.entries.empty()) throw ConfigError("train split is empty");
  const bool has_val =
      dataset.manifests.count(Split::Val) != 0 && !dataset.split(Split::Val).entries.empty();

  const Rng root(config.seed);
  TrainResult result{TspmModel(config.model_config(dataset), root.split("model").seed()), {}, 0, {}};
  TspmModel& model = result.model;
  std::optional<double> best_val;
  std::ofstream history;
  if (!out.empty()) {
    if (out.has_parent_path()) std::filesystem::create_directories(out.parent_path());
    history.open(with_suffix(out, ".history.jsonl"));
    if (!history) throw ConfigError("cannot write history next to " + out.string());
  }

  const std::size_t n = train_split.entries.size();
  std::vector<std::size_t> order(n);
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const auto start = Clock::now();
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle = root.split("shuffle").split(epoch);
    std::shuffle(order.begin(), order.end(), shuffle.engine());

    AdamOptions adam;
    adam.lr = config.lr_at(epoch);
    double loss_sum = 0.0;
    for (std::size_t first = 0; first < n; first += config.batch_size, ++step) {
      const std::size_t last = std::min(n, first + config.batch_size);
      const float inv = 1.0f / static_cast<float>(last - first);
      std::vector<const QASample*> batch;
      for (std::size_t i = first; i < last; ++i) batch.push_back(&train_split.entries[order[i]]);
      for (const QASample* s : batch) {
        GradTape tape;
        TapeScope scope(tape);
        const ForwardResult r =
            model.forward(dataset.bundle(s->video_id), *s, static_cast<long>(s->answer));
        const double loss = r.prediction.loss.item();
        if (!std::isfinite(loss)) dump_nan(out, epoch, step, batch, *s, loss);
        loss_sum += loss;
        backward(scale(r.prediction.loss, inv));
      }
      if (config.clip_norm > 0.0) clip_grad_norm(model.store(), config.clip_norm);
      adam_step(model.store(), adam);
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = adam.lr;
    rec.train_loss = loss_sum / static_cast<double>(n);
    if (has_val) rec.val_acc = evaluate(model, dataset, Split::Val, config.threads).accuracy();
    rec.seconds = seconds_since(start);

    // Best by validation accuracy, ties to the earlier epoch; without a
    // validation split the latest epoch wins.
    const bool better = !has_val || !best_val || *rec.val_acc > *best_val;
    if (better) {
      best_val = rec.val_acc;
      result.best_epoch = epoch;
      result.best_checkpoint = model.encode();
    }
    if (history) history << rec.to_json().dump() << "\n" << std::flush;
    if (log) {
      char line[160];
      std::snprintf(line, sizeof line, "epoch %3zu  lr %.3g  loss %.4f  val %s  %.1fs", epoch, rec.lr,
                    rec.train_loss, rec.val_acc ? std::to_string(*rec.val_acc).c_str() : "-", rec.seconds);
      *log << line << "\n" << std::flush;
    }
    result.history.push_back(rec);
  }

  if (!out.empty()) {
    write_file_bytes(out, model.encode());
    write_file_bytes(with_suffix(out, ".best"), result.best_checkpoint);
  }
  return result;
}

namespace {

struct SampleOutcome {
  SamplePrediction prediction;
  double recall = 0.0;
  bool planted = false;
  double ratio_sum = 0.0;
  std::size_t ratio_count = 0;
  std::uint64_t macs = 0;
};

SampleOutcome evaluate_one(const TspmModel& model, const Dataset& dataset, const QASample& s) {
  SampleOutcome o;
  const FeatureBundle& bundle = dataset.bundle(s.video_id);
  const std::uint64_t before = matmul_macs();
  const ForwardResult r = model.forward(bundle, s, static_cast<long>(s.answer));
  o.macs = matmul_macs() - before;
  o.prediction.sample_id = s.sample_id;
  o.prediction.answer = r.prediction.answer;
  o.prediction.label = s.answer;
  o.prediction.probs = r.prediction.probs;
  o.prediction.omega = r.selection.omega;
  o.prediction.loss = r.prediction.loss.item();
  if (s.planted && !s.planted->segments.empty()) {
    o.planted = true;
    const auto& truth = *s.planted;
    std::size_t hit = 0;
    for (std::size_t t : truth.segments) {
      hit += std::binary_search(r.selection.omega.begin(), r.selection.omega.end(), t) ? 1 : 0;
    }
    o.recall = static_cast<double>(hit) / static_cast<double>(truth.segments.size());
    if (!r.aggregate.audio_attention.empty()) {
      const std::size_t m = bundle.tokens_per_frame();
      for (std::size_t i = 0; i < r.selection.omega.size(); ++i) {
        auto it = truth.tokens.find(r.selection.omega[i]);
        if (it == truth.tokens.end() || it->second.empty()) continue;
        const std::vector<float> heat = token_heat(r.aggregate.audio_attention[i], r.merged.provenance[i], m);
        double mass = 0.0;
        for (std::size_t j : it->second) mass += heat[j];
        o.ratio_sum += mass / (static_cast<double>(it->second.size()) / static_cast<double>(m));
        ++o.ratio_count;
      }
    }
  }
  return o;
}

nlohmann::json cells_to_json(const std::map<std::string, AccuracyCell>& cells) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [name, c] : cells) j[name] = {{"accuracy", c.accuracy()}, {"correct", c.correct}, {"count", c.count}};
  return j;
}

}  // namespace

EvalReport evaluate(const TspmModel& model, const Dataset& dataset, Split split, std::size_t threads) {
  const auto start = Clock::now();
  const DatasetManifest& manifest = dataset.split(split);
  if (model.config().num_answers != manifest.num_answers) {
    throw ContractError("checkpoint predicts " + std::to_string(model.config().num_answers) +
                        " answers, manifest has C=" + std::to_string(manifest.num_answers));
  }
  const std::size_t n = manifest.entries.size();
  std::vector<SampleOutcome> outcomes(n);
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) outcomes[i] = evaluate_one(model, dataset, manifest.entries[i]);
  } else {
    std::vector<std::thread> workers;
    std::vector<std::exception_ptr> errors(threads);
    for (std::size_t w = 0; w < threads; ++w) {
      workers.emplace_back([&, w] {
        try {
          for (std::size_t i = w; i < n; i += threads) outcomes[i] = evaluate_one(model, dataset, manifest.entries[i]);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
    for (std::thread& t : workers) t.join();
    for (const auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  }

  EvalReport report;
  report.split = split;
  report.parameter_count = model.parameter_count();
  report.config = model.config().to_json();
  double loss_sum = 0.0, recall_sum = 0.0, ratio_sum = 0.0;
  std::size_t ratio_count = 0;
  std::uint64_t macs = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const QASample& s = manifest.entries[i];
    SampleOutcome& o = outcomes[i];
    const std::size_t correct = o.prediction.answer == s.answer ? 1 : 0;
    for (AccuracyCell* cell : {&report.overall, &report.per_type[s.question_type.to_string()],
                               &report.per_modality[to_string(s.question_type.modality)],
                               &report.per_subtype[to_string(s.question_type.subtype)]}) {
      cell->correct += correct;
      ++cell->count;
    }
    loss_sum += o.prediction.loss;
    macs += o.macs;
    if (o.planted) {
      ++report.planted_samples;
      recall_sum += o.recall;
    }
    ratio_sum += o.ratio_sum;
    ratio_count += o.ratio_count;
    report.predictions.push_back(std::move(o.prediction));
  }
  if (n) {
    report.mean_loss = loss_sum / static_cast<double>(n);
    report.forward_macs = macs / n;
  }
  if (report.planted_samples) report.planted_recall = recall_sum / static_cast<double>(report.planted_samples);
  if (ratio_count) report.audio_planted_ratio = ratio_sum / static_cast<double>(ratio_count);
  report.seconds = seconds_since(start);
  return report;
}

nlohmann::json report_to_json(const EvalReport& report, bool include_timing) {
  nlohmann::json j = {{"split", to_string(report.split)},
                      {"samples", report.overall.count},
                      {"accuracy", report.accuracy()},
                      {"correct", report.overall.correct},
                      {"mean_loss", report.mean_loss},
                      {"per_type", cells_to_json(report.per_type)},
                      {"per_modality", cells_to_json(report.per_modality)},
                      {"per_subtype", cells_to_json(report.per_subtype)},
                      {"planted_samples", report.planted_samples},
                      {"parameter_count", report.parameter_count},
                      {"forward_macs", report.forward_macs},
                      {"config", report.config}};
  j["planted_recall"] = report.planted_recall ? nlohmann::json(*report.planted_recall) : nlohmann::json(nullptr);
  j["audio_planted_ratio"] =
      report.audio_planted_ratio ? nlohmann::json(*report.audio_planted_ratio) : nlohmann::json(nullptr);
  if (include_timing) j["seconds"] = report.seconds;
  return j;
}

namespace {

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::string optional_fmt(const std::optional<double>& v) { return v ? fmt("%.4f", *v) : "-"; }

}  // namespace

std::string report_markdown(const EvalReport& report) {
  std::ostringstream out;
  out << "| question type | accuracy | count |\n|---|---|---|\n";
  for (const auto& [name, c] : report.per_type) out << "| " << name << " | " << fmt("%.4f", c.accuracy()) << " | " << c.count << " |\n";
  out << "| **overall** | " << fmt("%.4f", report.accuracy()) << " | " << report.overall.count << " |\n";
  out << "\nplanted recall: " << optional_fmt(report.planted_recall)
      << ", audio planted ratio: " << optional_fmt(report.audio_planted_ratio) << "\n";
  out << "parameters: " << report.parameter_count << ", forward MACs per sample: " << report.forward_macs << "\n";
  return out.str();
}

std::string predictions_jsonl(const EvalReport& report, const DatasetManifest& manifest) {
  std::string out;
  for (const SamplePrediction& p : report.predictions) {
    nlohmann::json j = {{"sample_id", p.sample_id},
                        {"answer_index", p.answer},
                        {"answer_string", p.answer < manifest.answer_vocab.size() ? manifest.answer_vocab[p.answer] : ""},
                        {"p", p.probs},
                        {"omega", p.omega},
                        {"loss", p.loss}};
    out += j.dump() + "\n";
  }
  return out;
}

namespace {

RunRow train_and_evaluate(const Dataset& dataset, const TrainConfig& config, const std::string& label, Split split,
                          std::ostream* log) {
  if (log) *log << "== " << label << "\n";
  const TrainResult trained = train(dataset, config, {}, log);
  const TspmModel best = TspmModel::from_records(decode_checkpoint(trained.best_checkpoint));
  RunRow row{label, evaluate(best, dataset, split, config.threads)};
  row.report.predictions.clear();
  if (log) *log << label << ": accuracy " << fmt("%.4f", row.report.accuracy()) << "\n";
  return row;
}

}  // namespace

std::vector<RunRow> run_ablation(const Dataset& dataset, const TrainConfig& base, Split split, std::ostream* log) {
  std::vector<RunRow> rows;
  for (const Ablation& a : Ablation::standard_runs()) {
    TrainConfig c = base;
    c.ablation = a;
    rows.push_back(train_and_evaluate(dataset, c, a.label(), split, log));
  }
  return rows;
}

std::vector<RunRow> sweep(const Dataset& dataset, const TrainConfig& base, const std::string& param,
                          const std::vector<std::size_t>& values, Split split, std::ostream* log) {
  if (param != "top_k" && param != "tokens") throw ConfigError("sweep parameter must be top_k or tokens, got '" + param + "'");
  if (values.empty()) throw ConfigError("sweep needs at least one value");
  std::vector<RunRow> rows;
  for (std::size_t v : values) {
    TrainConfig c = base;
    (param == "top_k" ? c.top_k : c.tokens) = v;
    c.validate();
    rows.push_back(train_and_evaluate(dataset, c, param + "=" + std::to_string(v), split, log));
  }
  return rows;
}

nlohmann::json rows_to_json(const std::vector<RunRow>& rows) {
  nlohmann::json j = nlohmann::json::array();
  for (const RunRow& r : rows) j.push_back({{"run", r.label}, {"report", report_to_json(r.report)}});
  return j;
}

std::string rows_markdown(const std::vector<RunRow>& rows) {
  std::ostringstream out;
  out << "| run | accuracy | planted recall | audio planted ratio | parameters |\n|---|---|---|---|---|\n";
  for (const RunRow& r : rows) {
    out << "| " << r.label << " | " << fmt("%.4f", r.report.accuracy()) << " | "
        << optional_fmt(r.report.planted_recall) << " | " << optional_fmt(r.report.audio_planted_ratio) << " | "
        << r.report.parameter_count << " |\n";
  }
  return out.str();
}

}  // namespace tspm
