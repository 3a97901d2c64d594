// SPDX-License-Identifier: Apache-2.0
#include "tspm/spatial.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "tspm/error.hpp"

namespace tspm {

Provenance identity_provenance(std::size_t m) {
  Provenance p(m);
  for (std::size_t i = 0; i < m; ++i) p[i] = {i};
  return p;
}

bool is_partition(const Provenance& provenance, std::size_t m) {
  std::vector<char> seen(m, 0);
  std::size_t count = 0;
  for (const auto& set : provenance) {
    if (set.empty()) return false;
    for (std::size_t j : set) {
      if (j >= m || seen[j]) return false;
      seen[j] = 1;
      ++count;
    }
  }
  return count == m;
}

MergeConfig MergeConfig::for_target(std::size_t m, std::size_t target, std::size_t blocks, std::size_t heads,
                                    bool protect_cls) {
  if (blocks < 1) throw ConfigError("merge needs at least one block");
  if (target > m || target < 2) {
    throw ConfigError("merge target S=" + std::to_string(target) + " outside [2, M=" + std::to_string(m) + "]");
  }
  MergeConfig c;
  c.blocks = blocks;
  c.target = target;
  c.heads = heads;
  c.protect_cls = protect_cls;
  const std::size_t total = m - target;
  for (std::size_t b = 0; b < blocks; ++b) c.r_schedule.push_back(total / blocks + (b < total % blocks ? 1 : 0));
  c.validate(m);
  return c;
}

namespace {

std::size_t max_removable(std::size_t m, bool protect_cls) {
  const std::size_t a = (m + 1) / 2 - (protect_cls ? 1 : 0);
  return std::min(a, m / 2);
}

}  // namespace

void MergeConfig::validate(std::size_t m) const {
  if (blocks < 1 || r_schedule.size() != blocks) {
    throw ConfigError("r_schedule has " + std::to_string(r_schedule.size()) + " entries for " +
                      std::to_string(blocks) + " blocks");
  }
  if (heads < 1) throw ConfigError("attention needs at least one head");
  std::size_t count = m;
  for (std::size_t r : r_schedule) {
    if (r > max_removable(count, protect_cls)) {
      throw ConfigError("cannot remove " + std::to_string(r) + " of " + std::to_string(count) + " tokens in one step");
    }
    count -= r;
    if (count < 2) throw ConfigError("merge schedule drops below 2 tokens");
  }
  if (count != target) {
    throw ConfigError("r_schedule leaves " + std::to_string(count) + " tokens, target S=" + std::to_string(target));
  }
}

std::vector<std::size_t> MergedTokenSet::sizes(std::size_t segment) const {
  std::vector<std::size_t> out;
  for (const auto& set : provenance.at(segment)) out.push_back(set.size());
  return out;
}

namespace {

struct MergePlan {
  std::vector<float> matrix;  // [m − r, m]
  Provenance provenance;
  std::vector<std::pair<std::size_t, std::size_t>> edges;
};

MergePlan plan_merge(std::span<const float> x, std::size_t m, std::size_t d, std::size_t r, const Provenance& prov,
                     bool protect_cls) {
  if (m < 2) throw ConfigError("merge step needs at least 2 tokens");
  if (prov.size() != m) throw ContractError("provenance size differs from token count");
  if (r > max_removable(m, protect_cls)) {
    throw ConfigError("merge step r=" + std::to_string(r) + " exceeds min(|A|,|B|) for m=" + std::to_string(m));
  }
  std::vector<double> norms(m);
  for (std::size_t i = 0; i < m; ++i) {
    double s = 0.0;
    for (std::size_t c = 0; c < d; ++c) s += static_cast<double>(x[i * d + c]) * x[i * d + c];
    norms[i] = std::sqrt(s);
  }
  auto cosine = [&](std::size_t i, std::size_t j) {
    double s = 0.0;
    for (std::size_t c = 0; c < d; ++c) s += static_cast<double>(x[i * d + c]) * x[j * d + c];
    const double denom = norms[i] * norms[j];
    return denom > 0.0 ? s / denom : 0.0;
  };

  struct Proposal {
    std::size_t a, b;
    double sim;
  };
  std::vector<Proposal> proposals;
  for (std::size_t a = protect_cls ? 2 : 0; a < m; a += 2) {
    std::size_t best = 1;
    double best_sim = cosine(a, 1);
    for (std::size_t b = 3; b < m; b += 2) {
      const double s = cosine(a, b);
      if (s > best_sim) {
        best_sim = s;
        best = b;
      }
    }
    proposals.push_back({a, best, best_sim});
  }
  std::stable_sort(proposals.begin(), proposals.end(),
                   [](const Proposal& p, const Proposal& q) { return p.sim > q.sim; });
  proposals.resize(r);

  std::vector<std::vector<std::size_t>> absorbed(m);
  std::vector<char> removed(m, 0);
  MergePlan plan;
  for (const Proposal& p : proposals) {
    absorbed[p.b].push_back(p.a);
    removed[p.a] = 1;
  }
  std::sort(proposals.begin(), proposals.end(), [](const Proposal& p, const Proposal& q) { return p.a < q.a; });
  for (const Proposal& p : proposals) plan.edges.emplace_back(p.a, p.b);

  const std::size_t out = m - r;
  plan.matrix.assign(out * m, 0.0f);
  std::size_t row = 0;
  for (std::size_t i = 0; i < m; ++i) {
    if (removed[i]) continue;
    std::vector<std::size_t> members = {i};
    members.insert(members.end(), absorbed[i].begin(), absorbed[i].end());
    double total = 0.0;
    for (std::size_t j : members) total += static_cast<double>(prov[j].size());
    std::vector<std::size_t> merged;
    for (std::size_t j : members) {
      plan.matrix[row * m + j] = static_cast<float>(static_cast<double>(prov[j].size()) / total);
      merged.insert(merged.end(), prov[j].begin(), prov[j].end());
    }
    std::sort(merged.begin(), merged.end());
    plan.provenance.push_back(std::move(merged));
    ++row;
  }
  return plan;
}

Tensor split_heads_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads) {
  if (heads == 1) return scaled_dot_attention(q, k, v);
  const std::size_t axis = q.rank() - 1;
  const std::size_t width = q.dim(axis);
  if (width % heads != 0) {
    throw ConfigError("width " + std::to_string(width) + " not divisible by " + std::to_string(heads) + " heads");
  }
  const std::size_t dh = width / heads;
  std::vector<Tensor> outs;
  for (std::size_t h = 0; h < heads; ++h) {
    outs.push_back(scaled_dot_attention(slice(q, axis, h * dh, dh), slice(k, axis, h * dh, dh),
                                        slice(v, axis, h * dh, dh)));
  }
  return concat(outs, axis);
}

}  // namespace

MergeStepResult bipartite_merge_step(const Tensor& x, std::size_t r, const Provenance& provenance, bool protect_cls) {
  if (x.rank() != 2) throw DimensionError("bipartite_merge_step: x must be [m, D], got " + shape_to_string(x.shape()));
  if (r < 1) throw ConfigError("bipartite_merge_step: r must be at least 1");
  const std::size_t m = x.dim(0), d = x.dim(1);
  MergePlan plan = plan_merge(x.data(), m, d, r, provenance, protect_cls);
  MergeStepResult result;
  result.tokens = matmul(Tensor({m - r, m}, std::move(plan.matrix)), x);
  result.provenance = std::move(plan.provenance);
  result.edges = std::move(plan.edges);
  return result;
}

TransformerBlock TransformerBlock::create(ParameterStore& store, const std::string& prefix, std::size_t width,
                                          std::size_t heads, std::size_t hidden, Rng& rng) {
  if (heads < 1 || width % heads != 0) {
    throw ConfigError("block width " + std::to_string(width) + " not divisible by " + std::to_string(heads) +
                      " heads");
  }
  TransformerBlock b;
  b.heads = heads;
  b.ln1 = make_layer_norm(store, prefix + "/ln1", width);
  b.q = make_linear(store, prefix + "/q", width, width, rng);
  b.k = make_linear(store, prefix + "/k", width, width, rng);
  b.v = make_linear(store, prefix + "/v", width, width, rng);
  b.o = make_linear(store, prefix + "/o", width, width, rng);
  b.ln2 = make_layer_norm(store, prefix + "/ln2", width);
  b.fc1 = make_linear(store, prefix + "/fc1", width, hidden, rng);
  b.fc2 = make_linear(store, prefix + "/fc2", hidden, width, rng);
  // Residual branches start closed so a fresh block passes tokens through.
  for (Tensor t : {b.o.weight, b.o.bias, b.fc2.weight, b.fc2.bias}) {
    auto v = t.mutable_data();
    std::fill(v.begin(), v.end(), 0.0f);
  }
  return b;
}

Tensor TransformerBlock::attend(const Tensor& x) const {
  const Tensor h = ln1(x);
  return add(x, o(split_heads_attention(q(h), k(h), v(h), heads)));
}

Tensor TransformerBlock::feed_forward(const Tensor& x) const { return add(x, fc2(gelu(fc1(ln2(x))))); }

Tensor gather_tokens(const Tensor& tokens, const std::vector<std::size_t>& omega) {
  if (tokens.rank() != 3) throw DimensionError("gather_tokens: tokens must be [T, M, D], got " + shape_to_string(tokens.shape()));
  return gather_rows(tokens, omega);
}

MergedTokenSet merge(const Tensor& tokens, const std::vector<TransformerBlock>& blocks, const MergeConfig& config,
                     MergeTrace* trace) {
  if (tokens.rank() != 3) throw DimensionError("merge: tokens must be [k, M, D], got " + shape_to_string(tokens.shape()));
  if (blocks.size() != config.blocks) {
    throw ConfigError("merge: " + std::to_string(blocks.size()) + " blocks for config with L=" +
                      std::to_string(config.blocks));
  }
  const std::size_t k = tokens.dim(0), m0 = tokens.dim(1), d = tokens.dim(2);
  config.validate(m0);

  MergedTokenSet out;
  out.provenance.assign(k, identity_provenance(m0));
  Tensor x = tokens;
  std::size_t m = m0;
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    x = blocks[b].attend(x);
    const std::size_t r = config.r_schedule[b];
    if (r > 0) {
      std::vector<float> matrix;
      matrix.reserve(k * (m - r) * m);
      std::vector<Provenance> next(k);
      for (std::size_t s = 0; s < k; ++s) {
        MergePlan plan =
            plan_merge(x.data().subspan(s * m * d, m * d), m, d, r, out.provenance[s], config.protect_cls);
        matrix.insert(matrix.end(), plan.matrix.begin(), plan.matrix.end());
        next[s] = std::move(plan.provenance);
      }
      Tensor merged = matmul(Tensor({k, m - r, m}, std::move(matrix)), x);
      if (trace) trace->steps.push_back({x, merged, out.provenance, next});
      out.provenance = std::move(next);
      x = merged;
      m -= r;
    }
    x = blocks[b].feed_forward(x);
  }
  out.features = x;
  return out;
}

CrossModalParams CrossModalParams::create(ParameterStore& store, const std::string& prefix, std::size_t audio_dim,
                                          std::size_t width, Rng& rng) {
  CrossModalParams p;
  p.audio_proj = make_linear(store, prefix + "/audio_proj", audio_dim, width, rng);
  // Value maps start at identity, the unprojected attention form.
  std::vector<float> eye(width * width, 0.0f);
  for (std::size_t i = 0; i < width; ++i) eye[i * width + i] = 1.0f;
  p.self_value = store.add(prefix + "/self_value", Tensor({width, width}, eye));
  p.audio_value = store.add(prefix + "/audio_value", Tensor({width, width}, eye));
  return p;
}

AggregateResult cross_modal_aggregate(const MergedTokenSet& merged, const Tensor& selected_audio,
                                      const CrossModalParams& params) {
  const Tensor& f = merged.features;
  if (f.rank() != 3) throw DimensionError("cross_modal_aggregate: merged features must be [k, S, D]");
  if (selected_audio.rank() != 2 || selected_audio.dim(0) != f.dim(0) || merged.segments() != f.dim(0)) {
    throw ContractError("cross_modal_aggregate: " + std::to_string(f.dim(0)) + " merged segments vs audio " +
                        shape_to_string(selected_audio.shape()));
  }
  const std::size_t k = f.dim(0), s = f.dim(1), d = f.dim(2);
  if (params.audio_proj.out_features() != d) {
    throw DimensionError("cross_modal_aggregate: audio projection width differs from token width");
  }
  const Tensor self = scaled_dot_attention(f, f, matmul(f, params.self_value));
  const Tensor query = reshape(params.audio_proj(selected_audio), {k, 1, d});
  const Tensor probs = attention_probs(query, f);                             // [k, 1, S]
  const Tensor heard = matmul(probs, matmul(f, params.audio_value));          // [k, 1, D]
  const Tensor broadcast = matmul(Tensor::full({s, 1}, 1.0f), heard);         // [k, S, D]

  AggregateResult result;
  result.aggregated = add(add(f, self), broadcast);
  for (std::size_t i = 0; i < k; ++i) {
    const auto row = probs.data().subspan(i * s, s);
    result.audio_attention.emplace_back(row.begin(), row.end());
  }
  return result;
}

std::vector<float> token_heat(std::span<const float> merged_weights, const Provenance& provenance, std::size_t m) {
  if (merged_weights.size() != provenance.size()) {
    throw DimensionError("token_heat: " + std::to_string(merged_weights.size()) + " weights for " +
                         std::to_string(provenance.size()) + " merged tokens");
  }
  std::vector<float> heat(m, 0.0f);
  for (std::size_t i = 0; i < provenance.size(); ++i) {
    const float share = merged_weights[i] / static_cast<float>(provenance[i].size());
    for (std::size_t j : provenance[i]) {
      if (j >= m) throw IndexError("token_heat: provenance index " + std::to_string(j) + " >= " + std::to_string(m));
      heat[j] += share;
    }
  }
  return heat;
}

}  // namespace tspm
