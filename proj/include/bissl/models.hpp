#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "bissl/autodiff.hpp"
#include "bissl/errors.hpp"
#include "bissl/objective.hpp"
#include "bissl/params.hpp"
#include "bissl/rng.hpp"

namespace bissl {

enum class Activation { relu };
enum class Norm { none, batch };
enum class Head { pretext, downstream };

/// Layer widths of the backbone and both heads. The backbone maps input_dim to
/// feature_dim through `hidden`; the pretext head maps feature_dim through
/// `pretext_head` (last entry is the projection size); the downstream head is
/// a single linear layer to `output_dim` logits.
struct ModelSpec {
  std::size_t input_dim = 20;
  std::vector<std::size_t> hidden = {64, 64};
  std::size_t feature_dim = 32;
  std::vector<std::size_t> pretext_head = {32, 16};
  std::size_t output_dim = 8;
  Activation activation = Activation::relu;
  Norm norm = Norm::none;

  void validate() const {
    auto positive = [](std::size_t d, const char* what) {
      if (d < 1) throw ConfigError(std::string("model: ") + what + " must be >= 1");
    };
    positive(input_dim, "input_dim");
    positive(feature_dim, "feature_dim");
    positive(output_dim, "output_dim");
    for (auto h : hidden) positive(h, "hidden width");
    if (pretext_head.empty()) throw ConfigError("model: pretext head needs at least one layer");
    for (auto h : pretext_head) positive(h, "pretext head width");
  }

  /// (fan_in, fan_out) per linear layer.
  std::vector<std::pair<std::size_t, std::size_t>> backbone_dims() const {
    std::vector<std::pair<std::size_t, std::size_t>> out;
    std::size_t in = input_dim;
    for (auto h : hidden) {
      out.emplace_back(in, h);
      in = h;
    }
    out.emplace_back(in, feature_dim);
    return out;
  }
  std::vector<std::pair<std::size_t, std::size_t>> head_dims(Head head) const {
    std::vector<std::pair<std::size_t, std::size_t>> out;
    if (head == Head::downstream) return {{feature_dim, output_dim}};
    std::size_t in = feature_dim;
    for (auto h : pretext_head) {
      out.emplace_back(in, h);
      in = h;
    }
    return out;
  }
};

/// y = x W + b with W stored (fan_in x fan_out).
struct Linear {
  Tensor weight;
  Tensor bias;
  friend bool operator==(const Linear&, const Linear&) = default;
};

struct ModelParams {
  std::vector<Linear> backbone;
  std::vector<Linear> pretext_head;
  std::vector<Linear> downstream_head;
  friend bool operator==(const ModelParams&, const ModelParams&) = default;
};

namespace detail {
inline ParamLayout linear_layout(const std::string& prefix, const std::vector<std::pair<std::size_t, std::size_t>>& dims,
                                 bool indexed) {
  std::vector<std::pair<std::string, Shape>> blocks;
  for (std::size_t i = 0; i < dims.size(); ++i) {
    const std::string stem = indexed ? prefix + "." + std::to_string(i) : prefix;
    blocks.push_back({stem + ".weight", Shape{dims[i].first, dims[i].second}});
    blocks.push_back({stem + ".bias", Shape{dims[i].second}});
  }
  return ParamLayout::packed(blocks);
}

inline std::vector<Linear> init_layers(const std::vector<std::pair<std::size_t, std::size_t>>& dims, Rng rng) {
  std::vector<Linear> layers;
  for (auto [fan_in, fan_out] : dims) {
    const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    Tensor w(Shape{fan_in, fan_out});
    for (auto& v : w.vec()) v = rng.uniform(-a, a);
    layers.push_back({std::move(w), Tensor(Shape{fan_out})});
  }
  return layers;
}
}  // namespace detail

inline std::shared_ptr<const ParamLayout> backbone_layout(const ModelSpec& spec) {
  return make_layout(detail::linear_layout("backbone", spec.backbone_dims(), true));
}

inline std::shared_ptr<const ParamLayout> head_layout(const ModelSpec& spec, Head head) {
  if (head == Head::pretext) return make_layout(detail::linear_layout("pretext_head", spec.head_dims(head), true));
  return make_layout(detail::linear_layout("downstream_head", spec.head_dims(head), false));
}

/// Glorot-uniform weights, zero biases. Each part draws from its own named
/// stream, so a head can be re-initialized without touching the backbone.
inline ModelParams init_model(const ModelSpec& spec, std::uint64_t seed) {
  spec.validate();
  ModelParams p;
  p.backbone = detail::init_layers(spec.backbone_dims(), Rng::derive(seed, "init.backbone"));
  p.pretext_head = detail::init_layers(spec.head_dims(Head::pretext), Rng::derive(seed, "init.pretext_head"));
  p.downstream_head = detail::init_layers(spec.head_dims(Head::downstream), Rng::derive(seed, "init.downstream_head"));
  return p;
}

inline ParamVector flatten(const std::vector<Linear>& layers, std::shared_ptr<const ParamLayout> layout) {
  if (layout->num_segments() != 2 * layers.size()) throw LayoutError("flatten: layer count does not match layout");
  std::vector<double> values;
  values.reserve(layout->total());
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const Tensor* parts[2] = {&layers[i].weight, &layers[i].bias};
    for (int k = 0; k < 2; ++k) {
      if (parts[k]->shape() != layout->segment(2 * i + k).shape) {
        throw LayoutError("flatten: shape mismatch for segment '" + layout->segment(2 * i + k).name + "'");
      }
      values.insert(values.end(), parts[k]->vec().begin(), parts[k]->vec().end());
    }
  }
  return ParamVector(std::move(layout), std::move(values));
}

inline std::vector<Linear> unflatten(const ParamVector& v, const ParamLayout& expected) {
  if (v.layout() != expected) throw LayoutError("unflatten: vector layout does not match the model spec");
  std::vector<Linear> layers;
  for (std::size_t i = 0; i + 1 < expected.num_segments(); i += 2) {
    layers.push_back({v.segment_tensor(i), v.segment_tensor(i + 1)});
  }
  return layers;
}

struct FlatModel {
  ParamVector theta;
  ParamVector phi_pretext;
  ParamVector phi_downstream;
};

inline FlatModel flatten(const ModelParams& p, const ModelSpec& spec) {
  return {flatten(p.backbone, backbone_layout(spec)), flatten(p.pretext_head, head_layout(spec, Head::pretext)),
          flatten(p.downstream_head, head_layout(spec, Head::downstream))};
}

inline ModelParams unflatten(const FlatModel& f, const ModelSpec& spec) {
  return {unflatten(f.theta, *backbone_layout(spec)), unflatten(f.phi_pretext, *head_layout(spec, Head::pretext)),
          unflatten(f.phi_downstream, *head_layout(spec, Head::downstream))};
}

inline std::size_t parameter_count(const std::vector<std::pair<std::size_t, std::size_t>>& dims) {
  std::size_t n = 0;
  for (auto [i, o] : dims) n += i * o + o;
  return n;
}

namespace detail {
/// Per-feature standardization with batch statistics (no affine, no running averages).
inline ad::Var batch_normalize(const ad::Var& h) {
  constexpr double eps = 1e-5;
  const std::size_t m = h.value().rows();
  const double inv_m = 1.0 / static_cast<double>(m);
  auto mu = ad::scale(ad::sum_rows(h), inv_m);
  auto centered = ad::sub(h, ad::broadcast_rows(mu, m));
  auto var = ad::scale(ad::sum_rows(ad::square(centered)), inv_m);
  auto inv_sd = ad::recip(ad::sqrt(ad::add_scalar(var, eps)));
  return ad::mul(centered, ad::broadcast_rows(inv_sd, m));
}
}  // namespace detail

/// Applies a stack of linear layers given as alternating (weight, bias) leaves.
/// The activation (and optional normalization) follows every layer but the last.
inline ad::Var mlp_forward(std::span<const ad::Var> params, const ad::Var& x, Norm norm = Norm::none) {
  if (params.size() % 2 != 0 || params.empty()) throw LayoutError("mlp_forward: expected (weight, bias) pairs");
  const auto& xs = x.value();
  if (xs.rank() != 2) throw LayoutError("mlp_forward: input must be a (batch, dim) matrix");
  if (xs.cols() != params[0].value().rows()) {
    throw LayoutError("mlp_forward: input dim " + std::to_string(xs.cols()) + " does not match layer fan-in " +
                      std::to_string(params[0].value().rows()));
  }
  ad::Var h = x;
  const std::size_t layers = params.size() / 2;
  for (std::size_t i = 0; i < layers; ++i) {
    h = ad::add_row(ad::matmul(h, params[2 * i]), params[2 * i + 1]);
    if (i + 1 < layers) {
      if (norm == Norm::batch) h = detail::batch_normalize(h);
      h = ad::relu(h);
    }
  }
  return h;
}

inline Tensor forward_backbone(const ParamVector& theta, const Tensor& x, const ModelSpec& spec) {
  if (theta.layout() != *backbone_layout(spec)) throw LayoutError("forward_backbone: layout does not match spec");
  ad::GradModeGuard off(false);
  return mlp_forward(as_vars(theta, false), ad::constant(x), spec.norm).value();
}

inline Tensor forward_head(const ParamVector& phi, const Tensor& features, Head head, const ModelSpec& spec) {
  if (phi.layout() != *head_layout(spec, head)) throw LayoutError("forward_head: layout does not match spec");
  ad::GradModeGuard off(false);
  return mlp_forward(as_vars(phi, false), ad::constant(features), spec.norm).value();
}

}  // namespace bissl
