#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "bissl/losses.hpp"
#include "bissl/models.hpp"
#include "bissl/params.hpp"
#include "bissl/rng.hpp"

namespace testutil {

using namespace bissl;

inline double rel_err(const ParamVector& a, const ParamVector& b) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (a[i] - b[i]) * (a[i] - b[i]);
    den += b[i] * b[i];
  }
  return std::sqrt(num) / std::max(std::sqrt(den), 1e-300);
}

inline double max_abs_diff(const ParamVector& a, const ParamVector& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline ParamVector random_vector(const std::shared_ptr<const ParamLayout>& layout, Rng& rng, double sd = 1.0) {
  ParamVector v(layout);
  for (auto& x : v.values()) x = rng.normal(0.0, sd);
  return v;
}

inline Tensor random_matrix(std::size_t r, std::size_t c, Rng& rng, double sd = 1.0) {
  Tensor t(Shape{r, c});
  for (auto& x : t.vec()) x = rng.normal(0.0, sd);
  return t;
}

/// Small model for finite-difference suites: few pre-activations keep kink rejection cheap.
inline ModelSpec small_spec() {
  ModelSpec s;
  s.input_dim = 5;
  s.hidden = {6};
  s.feature_dim = 4;
  s.pretext_head = {4, 3};
  s.output_dim = 3;
  return s;
}

/// Smallest |pre-activation| over every ReLU applied to x by the layer stack.
inline double min_abs_preactivation(const ParamVector& params, const Tensor& x) {
  double best = std::numeric_limits<double>::infinity();
  Tensor h = x;
  const std::size_t layers = params.layout().num_segments() / 2;
  for (std::size_t i = 0; i < layers; ++i) {
    Tensor w = params.segment_tensor(2 * i), b = params.segment_tensor(2 * i + 1);
    Tensor z = kernels::matmul(h, w, false, false);
    for (std::size_t r = 0; r < z.rows(); ++r)
      for (std::size_t c = 0; c < z.cols(); ++c) z(r, c) += b[c];
    if (i + 1 == layers) return best;
    for (double v : z.vec()) best = std::min(best, std::abs(v));
    h = kernels::map(z, [](double v) { return v > 0 ? v : 0.0; });
  }
  return best;
}

inline Tensor features_of(const ParamVector& theta, const Tensor& x, const ModelSpec& spec) {
  return forward_backbone(theta, x, spec);
}

/// Parameters with non-zero biases so that kinks are not aligned at the origin.
inline FlatModel random_model(const ModelSpec& spec, Rng& rng) {
  auto f = flatten(init_model(spec, rng.next_u64()), spec);
  for (auto* v : {&f.theta, &f.phi_pretext, &f.phi_downstream}) {
    for (auto& x : v->values()) x += rng.normal(0.0, 0.1);
  }
  return f;
}

inline ViewBatch random_views(std::size_t b, std::size_t n, Rng& rng) {
  return {random_matrix(b, n, rng), random_matrix(b, n, rng)};
}

inline LabeledBatch random_labeled(std::size_t b, std::size_t n, std::size_t classes, Rng& rng) {
  LabeledBatch batch{random_matrix(b, n, rng), {}};
  for (std::size_t i = 0; i < b; ++i) batch.labels.push_back(rng.below(classes));
  return batch;
}

/// True when neither backbone nor pretext head sees a pre-activation within `margin` of a kink.
inline bool away_from_kinks(const ModelSpec& spec, const FlatModel& m, const Tensor& x, double margin = 1e-3) {
  if (min_abs_preactivation(m.theta, x) < margin) return false;
  auto feats = features_of(m.theta, x, spec);
  return min_abs_preactivation(m.phi_pretext, feats) >= margin;
}

}  // namespace testutil
