#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "bissl/checkpoint.hpp"
#include "bissl/errors.hpp"
#include "bissl/losses.hpp"
#include "bissl/rng.hpp"
#include "bissl/tensor.hpp"

namespace bissl {

struct AugmentConfig {
  double noise_sigma = 0.1;
  double scale_lo = 0.8;
  double scale_hi = 1.2;
  double mask_fraction = 0.1;

  void validate() const {
    if (noise_sigma < 0.0) throw ConfigError("augment: noise_sigma must be non-negative");
    if (!(scale_lo <= scale_hi)) throw ConfigError("augment: scale range must satisfy lo <= hi");
    if (mask_fraction < 0.0 || mask_fraction > 1.0) throw ConfigError("augment: mask_fraction must lie in [0, 1]");
  }
};

/// Gaussian clusters for the unlabeled set; the same clusters, translated along
/// one random unit direction, for the labeled set.
struct SynthConfig {
  std::size_t input_dim = 20;
  std::size_t num_classes = 8;
  std::size_t pretext_samples = 8192;
  std::size_t downstream_samples = 1024;
  double shift_magnitude = 2.0;
  double cluster_spread = 1.0;  // sd of cluster means around the origin
  double noise_scale = 1.0;     // within-cluster sd
  AugmentConfig augment;
  double val_fraction = 0.2;
  double test_fraction = 0.2;
  std::uint64_t seed = 0;

  void validate() const {
    if (input_dim < 1 || num_classes < 2) throw ConfigError("data: need input_dim >= 1 and num_classes >= 2");
    if (shift_magnitude < 0.0) throw ConfigError("data: shift_magnitude must be non-negative");
    if (cluster_spread < 0.0 || noise_scale < 0.0) throw ConfigError("data: spreads must be non-negative");
    if (val_fraction < 0.0 || test_fraction < 0.0 || val_fraction + test_fraction >= 1.0) {
      throw ConfigError("data: split fractions must be non-negative and sum below 1");
    }
    if (pretext_samples < 1) throw ConfigError("data: pretext set is empty");
    augment.validate();
  }
};

struct LabeledSet {
  Tensor x;
  std::vector<std::size_t> labels;
  std::vector<std::size_t> ids;
  std::size_t size() const { return labels.size(); }
};

struct UnlabeledSet {
  Tensor x;
  std::vector<std::size_t> ids;
  std::size_t size() const { return ids.size(); }
};

struct Datasets {
  UnlabeledSet pretext;
  LabeledSet train, val, test;
  Tensor pretext_means;     // (K, N)
  Tensor downstream_means;  // (K, N)
  std::vector<double> shift_direction;
};

inline Tensor gather_rows(const Tensor& x, const std::vector<std::size_t>& idx) {
  const std::size_t n = x.cols();
  std::vector<double> data;
  data.reserve(idx.size() * n);
  for (auto i : idx) {
    if (i >= x.rows()) throw LayoutError("gather_rows: index out of range");
    auto first = x.vec().begin() + static_cast<std::ptrdiff_t>(i * n);
    data.insert(data.end(), first, first + static_cast<std::ptrdiff_t>(n));
  }
  return Tensor(Shape{idx.size(), n}, std::move(data));
}

inline LabeledBatch labeled_batch(const LabeledSet& set, const std::vector<std::size_t>& idx) {
  LabeledBatch b{gather_rows(set.x, idx), {}};
  for (auto i : idx) b.labels.push_back(set.labels[i]);
  return b;
}

inline LabeledBatch whole_set(const LabeledSet& set) { return {set.x, set.labels}; }

namespace detail {
inline std::vector<std::size_t> balanced_counts(std::size_t total, std::size_t k) {
  std::vector<std::size_t> c(k, total / k);
  for (std::size_t i = 0; i < total % k; ++i) ++c[i];
  return c;
}

inline void draw_around(Tensor& x, std::size_t row, const Tensor& means, std::size_t k, double sd, Rng& rng) {
  for (std::size_t j = 0; j < x.cols(); ++j) x(row, j) = means(k, j) + sd * rng.normal();
}
}  // namespace detail

inline Datasets make_datasets(const SynthConfig& cfg) {
  cfg.validate();
  const std::size_t n = cfg.input_dim, k = cfg.num_classes;
  const auto per_class = detail::balanced_counts(cfg.downstream_samples, k);
  for (std::size_t c = 0; c < k; ++c) {
    if (per_class[c] < 5) {
      throw ConfigError("data: class " + std::to_string(c) + " would have " + std::to_string(per_class[c]) +
                        " samples (need at least 5)");
    }
  }

  Datasets d;
  Rng mean_rng = Rng::derive(cfg.seed, "data.means");
  d.pretext_means = Tensor(Shape{k, n});
  for (auto& v : d.pretext_means.vec()) v = cfg.cluster_spread * mean_rng.normal();
  d.shift_direction.resize(n);
  double len = 0.0;
  while (len == 0.0) {
    len = 0.0;
    for (auto& v : d.shift_direction) {
      v = mean_rng.normal();
      len += v * v;
    }
    len = std::sqrt(len);
  }
  for (auto& v : d.shift_direction) v /= len;
  d.downstream_means = d.pretext_means;
  if (cfg.shift_magnitude != 0.0) {
    for (std::size_t c = 0; c < k; ++c)
      for (std::size_t j = 0; j < n; ++j) d.downstream_means(c, j) += cfg.shift_magnitude * d.shift_direction[j];
  }

  Rng pre_rng = Rng::derive(cfg.seed, "data.pretext");
  const auto pre_counts = detail::balanced_counts(cfg.pretext_samples, k);
  d.pretext.x = Tensor(Shape{cfg.pretext_samples, n});
  {
    std::size_t row = 0;
    for (std::size_t c = 0; c < k; ++c)
      for (std::size_t i = 0; i < pre_counts[c]; ++i, ++row)
        detail::draw_around(d.pretext.x, row, d.pretext_means, c, cfg.noise_scale, pre_rng);
    // interleave classes so the stored order carries no label information
    auto perm = pre_rng.permutation(cfg.pretext_samples);
    d.pretext.x = gather_rows(d.pretext.x, perm);
  }
  for (std::size_t i = 0; i < cfg.pretext_samples; ++i) d.pretext.ids.push_back(i);

  // Stratified split: per class, shuffle, then cut val / test / train.
  std::size_t next_id = cfg.pretext_samples;
  std::vector<std::pair<std::vector<double>, std::pair<std::size_t, std::size_t>>> train, val, test;
  for (std::size_t c = 0; c < k; ++c) {
    Rng class_rng = Rng::derive(cfg.seed, "data.downstream." + std::to_string(c));
    Tensor block(Shape{per_class[c], n});
    for (std::size_t i = 0; i < per_class[c]; ++i) detail::draw_around(block, i, d.downstream_means, c, cfg.noise_scale, class_rng);
    auto order = class_rng.permutation(per_class[c]);
    const auto nc = static_cast<double>(per_class[c]);
    const auto n_val = static_cast<std::size_t>(std::llround(cfg.val_fraction * nc));
    const auto n_test = static_cast<std::size_t>(std::llround(cfg.test_fraction * nc));
    for (std::size_t r = 0; r < per_class[c]; ++r) {
      const std::size_t i = order[r];
      std::vector<double> row(block.vec().begin() + static_cast<std::ptrdiff_t>(i * n),
                              block.vec().begin() + static_cast<std::ptrdiff_t>((i + 1) * n));
      auto& dest = r < n_val ? val : (r < n_val + n_test ? test : train);
      dest.push_back({std::move(row), {c, next_id + i}});
    }
    next_id += per_class[c];
  }
  Rng mix_rng = Rng::derive(cfg.seed, "data.split");
  auto assemble = [&](auto& rows, LabeledSet& out) {
    auto perm = mix_rng.permutation(rows.size());
    std::vector<double> data;
    for (auto p : perm) {
      data.insert(data.end(), rows[p].first.begin(), rows[p].first.end());
      out.labels.push_back(rows[p].second.first);
      out.ids.push_back(rows[p].second.second);
    }
    out.x = Tensor(Shape{rows.size(), n}, std::move(data));
  };
  assemble(train, d.train);
  assemble(val, d.val);
  assemble(test, d.test);
  return d;
}

/// Two independent views of each row: global scale from the scale range,
/// additive Gaussian noise, then exactly round(mask_fraction * N) coordinates
/// set to zero. View A is drawn for all rows before view B.
inline ViewBatch augment_views(const Tensor& x, const AugmentConfig& cfg, Rng& rng) {
  const std::size_t m = x.rows(), n = x.cols();
  const auto masked = static_cast<std::size_t>(std::llround(cfg.mask_fraction * static_cast<double>(n)));
  auto one_view = [&]() {
    Tensor v = x;
    for (std::size_t i = 0; i < m; ++i) {
      const double s = cfg.scale_lo == cfg.scale_hi ? cfg.scale_lo : rng.uniform(cfg.scale_lo, cfg.scale_hi);
      for (std::size_t j = 0; j < n; ++j) {
        v(i, j) = s * v(i, j);
        if (cfg.noise_sigma > 0.0) v(i, j) += cfg.noise_sigma * rng.normal();
      }
      if (masked > 0) {
        auto perm = rng.permutation(n);
        for (std::size_t j = 0; j < masked; ++j) v(i, perm[j]) = 0.0;
      }
    }
    return v;
  };
  ViewBatch b;
  b.view_a = one_view();
  b.view_b = one_view();
  return b;
}

inline std::string to_csv(const Tensor& x, const std::vector<std::size_t>* labels) {
  std::ostringstream os;
  os << std::setprecision(17);
  for (std::size_t j = 0; j < x.cols(); ++j) os << (j ? "," : "") << "x_" << j;
  if (labels) os << ",label";
  os << '\n';
  for (std::size_t i = 0; i < x.rows(); ++i) {
    for (std::size_t j = 0; j < x.cols(); ++j) os << (j ? "," : "") << x(i, j);
    if (labels) os << ',' << (*labels)[i];
    os << '\n';
  }
  return os.str();
}

inline void export_datasets(const Datasets& d, const std::filesystem::path& dir) {
  write_file(dir / "pretext.csv", to_csv(d.pretext.x, nullptr));
  write_file(dir / "train.csv", to_csv(d.train.x, &d.train.labels));
  write_file(dir / "val.csv", to_csv(d.val.x, &d.val.labels));
  write_file(dir / "test.csv", to_csv(d.test.x, &d.test.labels));
}

/// Content hash of every generated array, for manifests.
inline std::string dataset_hash(const Datasets& d) {
  std::ostringstream os;
  for (const Tensor* t : {&d.pretext.x, &d.train.x, &d.val.x, &d.test.x}) {
    for (double v : t->vec()) os << hexfloat(v) << ' ';
    os << '\n';
  }
  for (const auto* l : {&d.train.labels, &d.val.labels, &d.test.labels}) {
    for (auto v : *l) os << v << ' ';
    os << '\n';
  }
  return git_blob_hash(os.str());
}

}  // namespace bissl
