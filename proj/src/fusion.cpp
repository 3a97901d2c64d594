// SPDX-License-Identifier: Apache-2.0
#include "tspm/fusion.hpp"

#include <cmath>

#include "tspm/error.hpp"

namespace tspm {

std::string to_string(Pool p) { return p == Pool::Mean ? "mean" : "max"; }

Pool parse_pool(std::string_view s) {
  if (s == "mean") return Pool::Mean;
  if (s == "max") return Pool::Max;
  throw ConfigError("pool must be mean or max, got '" + std::string(s) + "'");
}

FusionParams FusionParams::create(ParameterStore& store, const std::string& prefix, std::size_t fc_in,
                                  std::size_t width, std::size_t num_answers, Rng& rng) {
  FusionParams p;
  p.fc = make_linear(store, prefix + "/fc", fc_in, width, rng);
  p.classifier = make_linear(store, prefix + "/classifier", width, num_answers, rng);
  return p;
}

namespace {

Tensor pool_axis(const Tensor& x, std::size_t axis, Pool pool) {
  return pool == Pool::Mean ? mean(x, axis) : max(x, axis);
}

}  // namespace

Tensor fuse(const Tensor& selected_audio, const Tensor& selected_frames, const Tensor& aggregated,
            const FusionParams& params) {
  if (selected_audio.rank() != 2 || selected_frames.rank() != 2 ||
      selected_audio.dim(0) != selected_frames.dim(0)) {
    throw DimensionError("fuse: audio " + shape_to_string(selected_audio.shape()) + " and frames " +
                         shape_to_string(selected_frames.shape()) + " disagree on Top_k");
  }
  std::vector<Tensor> parts = {pool_axis(selected_audio, 0, params.pool), pool_axis(selected_frames, 0, params.pool)};
  if (aggregated.defined()) {
    if (aggregated.rank() != 3 || aggregated.dim(0) != selected_audio.dim(0)) {
      throw DimensionError("fuse: aggregated " + shape_to_string(aggregated.shape()) + " disagrees on Top_k");
    }
    parts.push_back(pool_axis(pool_axis(aggregated, 1, params.pool), 0, params.pool));
  }
  const Tensor joined = concat(parts, 0);
  if (joined.dim(0) != params.fc.in_features()) {
    throw DimensionError("fuse: concatenated width " + std::to_string(joined.dim(0)) + " vs FC input " +
                         std::to_string(params.fc.in_features()));
  }
  const Tensor f = params.fc(joined);
  return params.tanh_after_fc ? tspm::tanh(f) : f;
}

std::size_t argmax(std::span<const float> values) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[best]) best = i;
  }
  return best;
}

Prediction answer(const Tensor& fused, const Tensor& question_feature, const FusionParams& params, long label) {
  if (fused.rank() != 1 || question_feature.rank() != 1 || fused.dim(0) != question_feature.dim(0)) {
    throw DimensionError("answer: F_av " + shape_to_string(fused.shape()) + " vs F_q " +
                         shape_to_string(question_feature.shape()));
  }
  const Tensor logits = params.classifier(elementwise_mul(question_feature, fused));
  const std::size_t c = logits.dim(0);
  if (label >= static_cast<long>(c)) {
    throw IndexError("answer: label " + std::to_string(label) + " outside [0, " + std::to_string(c) + ")");
  }
  Prediction p;
  const auto z = logits.data();
  double peak = z[0];
  for (float v : z) peak = std::max(peak, static_cast<double>(v));
  std::vector<double> e(c);
  double total = 0.0;
  for (std::size_t i = 0; i < c; ++i) total += e[i] = std::exp(z[i] - peak);
  p.probs.resize(c);
  for (std::size_t i = 0; i < c; ++i) p.probs[i] = static_cast<float>(e[i] / total);
  p.answer = argmax(p.probs);
  if (label >= 0) p.loss = cross_entropy(logits, static_cast<std::size_t>(label));
  return p;
}

}  // namespace tspm
