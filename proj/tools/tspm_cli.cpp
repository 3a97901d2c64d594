// SPDX-License-Identifier: Apache-2.0
// Command-line front end: data generation, training, evaluation, ablations,
// sweeps and inspection dumps.
#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "tspm/binary_io.hpp"
#include "tspm/error.hpp"
#include "tspm/synth.hpp"
#include "tspm/train.hpp"

namespace fs = std::filesystem;
using namespace tspm;

namespace {

nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  const std::vector<std::uint8_t> bytes(text.begin(), text.end());
  write_file_bytes(path, bytes);
}

void emit(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text;
  } else {
    write_text(path, text);
  }
}

std::vector<std::size_t> parse_values(const std::string& text) {
  std::vector<std::size_t> out;
  std::stringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    try {
      std::size_t used = 0;
      const unsigned long v = std::stoul(item, &used);
      if (used != item.size()) throw std::invalid_argument(item);
      out.push_back(v);
    } catch (const std::exception&) {
      throw ConfigError("bad sweep value '" + item + "'");
    }
  }
  return out;
}

TrainConfig load_train_config(const std::string& path, const std::optional<std::uint64_t>& seed) {
  TrainConfig c = path.empty() ? TrainConfig{} : TrainConfig::load(path);
  if (seed) c.seed = *seed;
  return c;
}

std::string pgm(const std::vector<std::vector<float>>& rows) {
  const std::size_t h = rows.size(), w = rows.empty() ? 0 : rows.front().size();
  float peak = 0.0f;
  for (const auto& r : rows) peak = std::max(peak, *std::max_element(r.begin(), r.end()));
  std::string out = "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  for (const auto& r : rows) {
    for (float v : r) out.push_back(static_cast<char>(peak > 0.0f ? static_cast<int>(std::lround(255.0f * v / peak)) : 0));
  }
  return out;
}

std::string csv_number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

int inspect(const std::string& what, const std::string& ckpt, const std::string& data, const std::string& sample_id,
            const std::string& out) {
  const Dataset dataset = load_dataset(data);
  const TspmModel model = TspmModel::load(ckpt);
  const QASample& s = dataset.sample(sample_id);
  const FeatureBundle& bundle = dataset.bundle(s.video_id);
  const ForwardResult r = model.forward(bundle, s);

  if (what == "temporal") {
    std::string csv = "t,weight,selected\n";
    const auto w = r.selection.weights.data();
    for (std::size_t t = 0; t < w.size(); ++t) {
      const bool sel = std::binary_search(r.selection.omega.begin(), r.selection.omega.end(), t);
      csv += std::to_string(t) + "," + csv_number(w[t]) + "," + (sel ? "1" : "0") + "\n";
    }
    emit(out.empty() ? "" : out + ".csv", csv);
    return 0;
  }
  if (r.merged.segments() == 0) throw ConfigError("checkpoint has no spatial module (no_spm)");
  const std::size_t m = bundle.tokens_per_frame();
  std::string merged = "segment,token,weight,constituents\n";
  std::string heat_csv = "segment,token,heat\n";
  std::vector<std::vector<float>> heat_rows;
  for (std::size_t i = 0; i < r.selection.omega.size(); ++i) {
    const std::size_t t = r.selection.omega[i];
    const auto& weights = r.aggregate.audio_attention[i];
    const Provenance& prov = r.merged.provenance[i];
    for (std::size_t j = 0; j < weights.size(); ++j) {
      std::string members;
      for (std::size_t c : prov[j]) members += (members.empty() ? "" : " ") + std::to_string(c);
      merged += std::to_string(t) + "," + std::to_string(j) + "," + csv_number(weights[j]) + "," + members + "\n";
    }
    heat_rows.push_back(token_heat(weights, prov, m));
    for (std::size_t j = 0; j < m; ++j) {
      heat_csv += std::to_string(t) + "," + std::to_string(j) + "," + csv_number(heat_rows.back()[j]) + "\n";
    }
  }
  if (out.empty()) {
    std::cout << merged << "\n" << heat_csv;
  } else {
    write_text(out + ".merged.csv", merged);
    write_text(out + ".heat.csv", heat_csv);
    write_text(out + ".heat.pgm", pgm(heat_rows));
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Temporal-spatial perception model for audio-visual question answering"};
  app.require_subcommand(1);

  std::string config_path, data_dir, out_path, ckpt_path, split_name = "test", report_path, predictions_path;
  std::string param, values_text, sample_id, registry_path;
  std::optional<std::uint64_t> seed;
  std::uint64_t gen_seed = 0;
  std::size_t threads = 1;
  bool quiet = false, timing = false;

  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset with planted signal");
  gen->add_option("--config", config_path, "Synthetic data config (JSON)");
  gen->add_option("--seed", gen_seed, "Generator seed");
  gen->add_option("--out", out_path, "Output dataset directory")->required();
  gen->add_option("--registry", registry_path, "Template registry (JSON)");

  auto* tr = app.add_subcommand("train", "Train a model");
  tr->add_option("--config", config_path, "Train config (JSON)");
  tr->add_option("--data", data_dir, "Dataset directory")->required();
  tr->add_option("--out", out_path, "Checkpoint path")->required();
  tr->add_option("--seed", seed, "Override the config seed");
  tr->add_flag("--quiet", quiet, "No per-epoch progress");

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint");
  ev->add_option("--ckpt", ckpt_path, "Checkpoint path")->required();
  ev->add_option("--data", data_dir, "Dataset directory")->required();
  ev->add_option("--split", split_name, "train, val or test");
  ev->add_option("--report", report_path, "Report JSON path (stdout when omitted)");
  ev->add_option("--predictions", predictions_path, "Per-sample predictions (JSON lines)");
  ev->add_option("--threads", threads, "Evaluation workers");
  ev->add_flag("--timing", timing, "Include wall-clock seconds in the report");

  auto* ab = app.add_subcommand("ablate", "Train and evaluate the six ablation runs");
  ab->add_option("--config", config_path, "Base train config (JSON)");
  ab->add_option("--data", data_dir, "Dataset directory")->required();
  ab->add_option("--split", split_name, "Evaluation split");
  ab->add_option("--seed", seed, "Override the config seed");
  ab->add_option("--out", out_path, "Table JSON path");

  auto* sw = app.add_subcommand("sweep", "Train and evaluate one run per parameter value");
  sw->add_option("--param", param, "top_k or tokens")->required();
  sw->add_option("--values", values_text, "Comma-separated values")->required();
  sw->add_option("--config", config_path, "Base train config (JSON)");
  sw->add_option("--data", data_dir, "Dataset directory")->required();
  sw->add_option("--split", split_name, "Evaluation split");
  sw->add_option("--seed", seed, "Override the config seed");
  sw->add_option("--out", out_path, "Table JSON path");

  std::string what;
  auto* in = app.add_subcommand("inspect", "Dump temporal weights or the spatial sound-aware map for one sample");
  in->add_option("what", what, "temporal or spatial")->required()->check(CLI::IsMember({"temporal", "spatial"}));
  in->add_option("--ckpt", ckpt_path, "Checkpoint path")->required();
  in->add_option("--data", data_dir, "Dataset directory")->required();
  in->add_option("--sample", sample_id, "Sample id")->required();
  in->add_option("--out", out_path, "Output path prefix (stdout when omitted)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      const SynthConfig config = config_path.empty() ? SynthConfig{} : SynthConfig::from_json(read_json(config_path));
      const TemplateRegistry registry =
          registry_path.empty() ? TemplateRegistry::load_default() : TemplateRegistry::load(registry_path);
      const Dataset dataset = generate_synthetic(config, gen_seed, registry);
      save_dataset(dataset, out_path);
      std::cout << "wrote " << dataset.bundles.size() << " bundles to " << out_path << "\n";
    } else if (tr->parsed()) {
      const TrainConfig config = load_train_config(config_path, seed);
      const Dataset dataset = load_dataset(data_dir);
      const TrainResult r = train(dataset, config, out_path, quiet ? nullptr : &std::cout);
      std::cout << "best epoch " << r.best_epoch << ", parameters " << r.model.parameter_count() << "\n";
    } else if (ev->parsed()) {
      const Dataset dataset = load_dataset(data_dir);
      const TspmModel model = TspmModel::load(ckpt_path);
      const Split split = parse_split(split_name);
      const EvalReport report = evaluate(model, dataset, split, threads);
      emit(report_path, report_to_json(report, timing).dump(2) + "\n");
      if (!predictions_path.empty()) write_text(predictions_path, predictions_jsonl(report, dataset.split(split)));
      if (!report_path.empty()) std::cout << report_markdown(report);
    } else if (ab->parsed() || sw->parsed()) {
      const TrainConfig config = load_train_config(config_path, seed);
      const Dataset dataset = load_dataset(data_dir);
      const Split split = parse_split(split_name);
      const auto rows = ab->parsed() ? run_ablation(dataset, config, split, &std::cerr)
                                     : sweep(dataset, config, param, parse_values(values_text), split, &std::cerr);
      std::cout << rows_markdown(rows);
      if (!out_path.empty()) write_text(out_path, rows_to_json(rows).dump(2) + "\n");
    } else if (in->parsed()) {
      return inspect(what, ckpt_path, data_dir, sample_id, out_path);
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
