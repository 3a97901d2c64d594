// SPDX-License-Identifier: Apache-2.0
#include "tspm/features.hpp"

#include <cmath>
#include <fstream>
#include <set>

#include "tspm/binary_io.hpp"
#include "tspm/error.hpp"

namespace tspm {

namespace {

constexpr std::string_view kBundleMagic = "AVQF";
constexpr std::string_view kEmbeddingMagic = "AVQQ";

// a*b, or nullopt on overflow past `limit`.
std::optional<std::uint64_t> checked_mul(std::uint64_t a, std::uint64_t b, std::uint64_t limit) {
  if (a != 0 && b > limit / a) return std::nullopt;
  return a * b;
}

void require_finite(const Tensor& t, const char* what) {
  for (float v : t.data()) {
    if (!std::isfinite(v)) throw ContractError(std::string(what) + " holds a non-finite value");
  }
}

}  // namespace

std::string to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "?";
}

Split parse_split(std::string_view s) {
  for (Split sp : kSplits) {
    if (to_string(sp) == s) return sp;
  }
  throw ConfigError("unknown split '" + std::string(s) + "'");
}

void FeatureBundle::validate() const {
  if (!audio.defined() || !frames.defined() || !tokens.defined()) {
    throw ContractError("bundle '" + video_id + "' is missing arrays");
  }
  if (audio.rank() != 2 || frames.rank() != 2 || tokens.rank() != 3) {
    throw DimensionError("bundle '" + video_id + "' has arrays of the wrong rank");
  }
  const std::size_t t = audio.dim(0);
  if (frames.dim(0) != t || tokens.dim(0) != t || tokens.dim(2) != frames.dim(1)) {
    throw DimensionError("bundle '" + video_id + "': audio " + shape_to_string(audio.shape()) + ", frames " +
                         shape_to_string(frames.shape()) + ", tokens " + shape_to_string(tokens.shape()) +
                         " disagree");
  }
  if (tokens.dim(1) < 2) throw DimensionError("bundle '" + video_id + "' needs M >= 2 tokens per frame");
  require_finite(audio, "audio");
  require_finite(frames, "frames");
  require_finite(tokens, "tokens");
}

const DatasetManifest& Dataset::split(Split s) const {
  auto it = manifests.find(s);
  if (it == manifests.end()) throw ConfigError("dataset has no '" + to_string(s) + "' split");
  return it->second;
}

const FeatureBundle& Dataset::bundle(const std::string& video_id) const {
  auto it = bundles.find(video_id);
  if (it == bundles.end()) throw ContractError("dataset has no bundle for video '" + video_id + "'");
  return it->second;
}

const QASample& Dataset::sample(const std::string& sample_id) const {
  for (const auto& [split, manifest] : manifests) {
    for (const QASample& s : manifest.entries) {
      if (s.sample_id == sample_id) return s;
    }
  }
  throw ConfigError("no sample '" + sample_id + "' in any split");
}

std::size_t Dataset::num_answers() const {
  if (manifests.empty()) throw ConfigError("dataset has no manifests");
  return manifests.begin()->second.num_answers;
}

void Dataset::validate() const {
  std::set<std::string> ids;
  std::size_t c = 0;
  for (const auto& [split, m] : manifests) {
    if (c == 0) c = m.num_answers;
    if (m.num_answers != c) throw ContractError("splits disagree on the answer vocabulary size");
    if (m.answer_vocab.size() != m.num_answers) {
      throw ContractError("answer_vocab of split '" + to_string(split) + "' has the wrong length");
    }
    for (const QASample& s : m.entries) {
      if (!ids.insert(s.sample_id).second) throw ContractError("sample id '" + s.sample_id + "' repeats");
      if (s.answer >= m.num_answers) throw ContractError("sample '" + s.sample_id + "' answer out of range");
      if (!registry.empty() && !registry.contains(s.template_id)) {
        throw ContractError("sample '" + s.sample_id + "' uses unknown template '" + s.template_id + "'");
      }
      const FeatureBundle& b = bundle(s.video_id);
      if (s.question_feature.size() != b.visual_dim() || s.prompt_feature.size() != b.visual_dim()) {
        throw DimensionError("sample '" + s.sample_id + "' embeddings do not match D_v");
      }
      if (!s.planted) continue;
      for (std::size_t t : s.planted->segments) {
        if (t >= b.segments()) throw ContractError("sample '" + s.sample_id + "' planted segment out of range");
      }
      for (const auto& [t, toks] : s.planted->tokens) {
        if (t >= b.segments()) throw ContractError("sample '" + s.sample_id + "' planted segment out of range");
        for (std::size_t j : toks) {
          if (j >= b.tokens_per_frame()) throw ContractError("sample '" + s.sample_id + "' planted token out of range");
        }
      }
    }
  }
}

std::vector<std::uint8_t> encode_bundle(const FeatureBundle& bundle) {
  bundle.validate();
  ByteWriter w;
  w.bytes(kBundleMagic);
  w.u32(kBundleVersion);
  w.u32(static_cast<std::uint32_t>(bundle.segments()));
  w.u32(static_cast<std::uint32_t>(bundle.tokens_per_frame()));
  w.u32(static_cast<std::uint32_t>(bundle.audio_dim()));
  w.u32(static_cast<std::uint32_t>(bundle.visual_dim()));
  w.f32s(bundle.audio.data());
  w.f32s(bundle.frames.data());
  w.f32s(bundle.tokens.data());
  return w.buffer();
}

FeatureBundle decode_bundle(std::span<const std::uint8_t> bytes, std::string video_id) {
  ByteReader r(bytes);
  r.expect_magic(kBundleMagic, "AVQF bundle");
  const std::uint64_t version_at = r.offset();
  if (const std::uint32_t v = r.u32(); v != kBundleVersion) {
    throw FormatError("unsupported AVQF version " + std::to_string(v), version_at);
  }
  const std::uint64_t dims_at = r.offset();
  const std::uint64_t t = r.u32(), m = r.u32(), da = r.u32(), dv = r.u32();
  if (t < 1 || m < 2 || da < 1 || dv < 1) {
    throw FormatError("AVQF dimensions T=" + std::to_string(t) + " M=" + std::to_string(m) + " D_a=" +
                          std::to_string(da) + " D_v=" + std::to_string(dv) + " are invalid",
                      dims_at);
  }
  // Sizes are bounded by the bytes actually present before anything is allocated.
  const std::uint64_t limit = r.remaining() / 4;
  const auto n_audio = checked_mul(t, da, limit);
  const auto n_frames = checked_mul(t, dv, limit);
  const auto n_tm = checked_mul(t, m, limit);
  const auto n_tokens = n_tm ? checked_mul(*n_tm, dv, limit) : std::nullopt;
  if (!n_audio || !n_frames || !n_tokens || *n_audio + *n_frames + *n_tokens > limit) {
    throw FormatError("AVQF header claims more data than the file holds (" + std::to_string(r.remaining()) +
                          " bytes left)",
                      dims_at);
  }
  FeatureBundle b;
  b.video_id = std::move(video_id);
  b.audio = Tensor({t, da}, r.f32s(*n_audio));
  b.frames = Tensor({t, dv}, r.f32s(*n_frames));
  b.tokens = Tensor({t, m, dv}, r.f32s(*n_tokens));
  if (!r.at_end()) throw FormatError("trailing bytes after AVQF payload", r.offset());
  return b;
}

void write_bundle(const FeatureBundle& bundle, const std::filesystem::path& path) {
  write_file_bytes(path, encode_bundle(bundle));
}

FeatureBundle read_bundle(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  return decode_bundle(bytes, path.stem().string());
}

std::vector<std::uint8_t> encode_embeddings(const std::vector<QASample>& samples) {
  const std::size_t dv = samples.empty() ? 0 : samples.front().question_feature.size();
  ByteWriter w;
  w.bytes(kEmbeddingMagic);
  w.u32(kEmbeddingVersion);
  w.u32(static_cast<std::uint32_t>(samples.size()));
  w.u32(static_cast<std::uint32_t>(dv));
  for (const QASample& s : samples) {
    if (s.question_feature.size() != dv || s.prompt_feature.size() != dv) {
      throw DimensionError("sample '" + s.sample_id + "' embedding width differs from " + std::to_string(dv));
    }
    w.f32s(s.question_feature);
    w.f32s(s.prompt_feature);
  }
  return w.buffer();
}

void decode_embeddings(std::span<const std::uint8_t> bytes, std::vector<QASample>& samples) {
  ByteReader r(bytes);
  r.expect_magic(kEmbeddingMagic, "AVQQ embeddings");
  const std::uint64_t version_at = r.offset();
  if (const std::uint32_t v = r.u32(); v != kEmbeddingVersion) {
    throw FormatError("unsupported AVQQ version " + std::to_string(v), version_at);
  }
  const std::uint64_t count_at = r.offset();
  const std::uint64_t n = r.u32(), dv = r.u32();
  if (n != samples.size()) {
    throw FormatError("AVQQ holds " + std::to_string(n) + " samples, manifest has " + std::to_string(samples.size()),
                      count_at);
  }
  const auto total = checked_mul(n, 2 * dv, r.remaining() / 4);
  if (!total || *total * 4 != r.remaining()) throw FormatError("AVQQ payload size does not match header", count_at);
  for (QASample& s : samples) {
    s.question_feature = r.f32s(dv);
    s.prompt_feature = r.f32s(dv);
  }
}

nlohmann::json manifest_to_json(const DatasetManifest& manifest) {
  nlohmann::json entries = nlohmann::json::array();
  for (const QASample& s : manifest.entries) {
    nlohmann::json e = {{"sample_id", s.sample_id},
                        {"video_id", s.video_id},
                        {"question_text", s.question_text},
                        {"template_id", s.template_id},
                        {"answer", s.answer},
                        {"question_type", s.question_type.to_string()}};
    if (s.planted) {
      nlohmann::json toks = nlohmann::json::object();
      for (const auto& [t, idx] : s.planted->tokens) toks[std::to_string(t)] = idx;
      e["planted"] = {{"segment_indices", s.planted->segments}, {"token_indices", toks}};
    }
    entries.push_back(std::move(e));
  }
  return {{"split", to_string(manifest.split)},
          {"C", manifest.num_answers},
          {"answer_vocab", manifest.answer_vocab},
          {"entries", std::move(entries)}};
}

DatasetManifest manifest_from_json(const nlohmann::json& j) {
  DatasetManifest m;
  try {
    m.split = parse_split(j.at("split").get<std::string>());
    m.num_answers = j.at("C").get<std::size_t>();
    m.answer_vocab = j.at("answer_vocab").get<std::vector<std::string>>();
    for (const auto& e : j.at("entries")) {
      QASample s;
      s.sample_id = e.at("sample_id").get<std::string>();
      s.video_id = e.at("video_id").get<std::string>();
      s.question_text = e.at("question_text").get<std::string>();
      s.template_id = e.at("template_id").get<std::string>();
      s.answer = e.at("answer").get<std::size_t>();
      s.question_type = QuestionType::parse(e.at("question_type").get<std::string>());
      if (e.contains("planted")) {
        PlantedTruth p;
        p.segments = e["planted"].at("segment_indices").get<std::vector<std::size_t>>();
        for (const auto& [k, v] : e["planted"].at("token_indices").items()) {
          p.tokens[std::stoul(k)] = v.get<std::vector<std::size_t>>();
        }
        s.planted = std::move(p);
      }
      m.entries.push_back(std::move(s));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed manifest: ") + e.what());
  }
  return m;
}

void save_dataset(const Dataset& dataset, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "bundles");
  for (const auto& [split, manifest] : dataset.manifests) {
    std::ofstream out(dir / (to_string(split) + ".json"));
    out << manifest_to_json(manifest).dump(2) << '\n';
    write_file_bytes(dir / (to_string(split) + ".avqq"), encode_embeddings(manifest.entries));
  }
  for (const auto& [id, bundle] : dataset.bundles) write_bundle(bundle, dir / "bundles" / (id + ".avqf"));
  std::ofstream reg(dir / "registry.json");
  reg << dataset.registry.to_json().dump(2) << '\n';
}

Dataset load_dataset(const std::filesystem::path& dir) {
  Dataset d;
  const auto registry_path = dir / "registry.json";
  d.registry = std::filesystem::exists(registry_path) ? TemplateRegistry::load(registry_path)
                                                      : TemplateRegistry::load_default();
  for (Split split : kSplits) {
    const auto path = dir / (to_string(split) + ".json");
    if (!std::filesystem::exists(path)) continue;
    std::ifstream in(path);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("manifest " + path.string() + ": " + e.what());
    }
    DatasetManifest m = manifest_from_json(j);
    const auto bytes = read_file_bytes(dir / (to_string(split) + ".avqq"));
    decode_embeddings(bytes, m.entries);
    for (const QASample& s : m.entries) {
      if (!d.bundles.count(s.video_id)) {
        d.bundles.emplace(s.video_id, read_bundle(dir / "bundles" / (s.video_id + ".avqf")));
      }
    }
    d.manifests.emplace(split, std::move(m));
  }
  if (d.manifests.empty()) throw ConfigError("no manifests found in " + dir.string());
  d.validate();
  return d;
}

LookupEmbedder prompt_lookup(const Dataset& dataset) {
  std::map<std::string, std::vector<float>> table;
  std::size_t dim = 0;
  for (const auto& [split, m] : dataset.manifests) {
    for (const QASample& s : m.entries) {
      table.emplace(prompt_for_question(s.question_text, dataset.registry), s.prompt_feature);
      dim = s.prompt_feature.size();
    }
  }
  return LookupEmbedder(dim, std::move(table));
}

}  // namespace tspm
