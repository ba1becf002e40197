#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <map>
#include <memory>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <tuple>
#include <vector>

#include "bissl/batch_stack.hpp"
#include "bissl/checkpoint.hpp"
#include "bissl/config.hpp"
#include "bissl/datagen.hpp"
#include "bissl/losses.hpp"
#include "bissl/models.hpp"
#include "bissl/optim.hpp"
#include "bissl/train.hpp"

namespace bissl {

namespace fs = std::filesystem;

inline std::uint64_t stream_seed(std::uint64_t root, const std::string& name) { return Rng::derive(root, name).next_u64(); }

inline std::uint64_t replicate_seed(std::uint64_t root, int replicate) {
  return stream_seed(root, "replicate." + std::to_string(replicate));
}

// ---------------------------------------------------------------- manifest

/// Append-only `key=value` record, flushed per line so a crash still leaves a
/// parsable file.
class Manifest {
 public:
  Manifest() = default;
  explicit Manifest(const fs::path& path) : path_(path) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw ConfigError("cannot write manifest '" + path.string() + "'");
    out << "manifest_version=1\n";
  }

  void put(const std::string& key, const std::string& value) {
    if (path_.empty()) return;
    std::lock_guard lock(*mu_);
    std::ofstream out(path_, std::ios::app);
    out << key << '=' << value << '\n';
  }

  void put_block(const std::string& lines) {
    if (path_.empty()) return;
    std::lock_guard lock(*mu_);
    std::ofstream out(path_, std::ios::app);
    out << lines;
  }

  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
  std::unique_ptr<std::mutex> mu_ = std::make_unique<std::mutex>();
};

inline std::map<std::string, std::string> parse_manifest(const std::string& text) {
  std::map<std::string, std::string> out;
  std::istringstream is(text);
  for (std::string line; std::getline(is, line);) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("manifest: malformed line '" + line + "'");
    out[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return out;
}

// ---------------------------------------------------------------- threads

/// Worker count: BISSL_THREADS if set to a positive integer, else the hardware
/// concurrency, never more than `jobs`.
inline std::size_t worker_count(std::size_t jobs) {
  std::size_t n = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("BISSL_THREADS")) {
    try {
      const long v = std::stol(env);
      if (v > 0) n = static_cast<std::size_t>(v);
    } catch (const std::exception&) {
      throw ConfigError(std::string("BISSL_THREADS must be a positive integer, got '") + env + "'");
    }
  }
  return std::max<std::size_t>(1, std::min(n, jobs));
}

/// Runs fn(0..n-1) on a small pool. The exception of the lowest failing index
/// is rethrown once all workers stop.
inline void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn) {
  const std::size_t workers = worker_count(n);
  std::vector<std::exception_ptr> errors(n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
        break;
      }
    }
  } else {
    std::atomic<std::size_t> next{0};
    std::atomic<bool> failed{false};
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t i; !failed && (i = next++) < n;) {
          try {
            fn(i);
          } catch (...) {
            errors[i] = std::current_exception();
            failed = true;
          }
        }
      });
    }
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

// ---------------------------------------------------------------- evaluation

struct EvalMetrics {
  double loss = 0.0;
  double accuracy = 0.0;  // fraction in [0, 1]
};

inline EvalMetrics evaluate(const ModelSpec& spec, const ParamVector& theta, const ParamVector& phi_d,
                            const LabeledSet& set) {
  if (set.size() == 0) return {};
  const Tensor logits = forward_head(phi_d, forward_backbone(theta, set.x, spec), Head::downstream, spec);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < logits.cols(); ++c)
      if (logits(i, c) > logits(i, best)) best = c;
    correct += best == set.labels[i];
  }
  return {cross_entropy(logits, set.labels), static_cast<double>(correct) / static_cast<double>(set.size())};
}

// ---------------------------------------------------------------- pretraining

struct PretrainEpoch {
  int epoch = 0;
  double loss = 0.0;       // mean over the epoch's batches
  double grad_norm = 0.0;  // ||grad_theta L^P|| on a fixed diagnostic batch, after the epoch
  double lr = 0.0;         // at the epoch's last step
};

inline constexpr const char* kPretrainHeader = "epoch,loss,grad_norm,lr";

inline std::string format_pretrain(const PretrainEpoch& e) {
  std::ostringstream os;
  os << std::setprecision(17) << e.epoch << ',' << e.loss << ',' << e.grad_norm << ',' << e.lr;
  return os.str();
}

struct PretrainResult {
  ParamVector theta, phi_p;
  std::vector<PretrainEpoch> history;
};

/// Contrastive pretraining of (backbone, pretext head) on the unlabeled set.
inline PretrainResult run_pretext_pretrain(const ModelSpec& spec, const Tensor& x, const PretrainConfig& cfg,
                                           const AugmentConfig& augment, ParamVector theta, ParamVector phi_p,
                                           std::uint64_t seed,
                                           const std::function<void(const PretrainEpoch&)>& on_epoch = {}) {
  PretrainResult res{std::move(theta), std::move(phi_p), {}};
  if (cfg.epochs == 0) return res;
  BatchStack stack(x.rows(), cfg.batch, stream_seed(seed, "pretrain.batches"));
  Rng aug_rng = Rng::derive(seed, "pretrain.augment");
  const long per_epoch = static_cast<long>(stack.batches_per_pass());
  const long total = per_epoch * cfg.epochs;
  OptimizerConfig opt = cfg.opt;
  opt.warmup_steps = per_epoch * cfg.warmup_epochs;

  std::vector<std::size_t> diag_rows(std::min<std::size_t>(x.rows(), 256));
  for (std::size_t i = 0; i < diag_rows.size(); ++i) diag_rows[i] = i;
  Rng diag_rng = Rng::derive(seed, "pretrain.diagnostic");
  const Objective diagnostic =
      pretext_objective(spec, augment_views(gather_rows(x, diag_rows), augment, diag_rng), cfg.temperature);

  auto m_theta = ParamVector::zeros_like(res.theta), m_phi = ParamVector::zeros_like(res.phi_p);
  long step = 0;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    PretrainEpoch rec;
    rec.epoch = epoch;
    for (long s = 0; s < per_epoch; ++s, ++step) {
      const auto idx = stack.next(1).front();
      const auto obj = pretext_objective(spec, augment_views(gather_rows(x, idx), augment, aug_rng), cfg.temperature);
      auto g = grad_pair(obj, res.theta, res.phi_p);
      rec.loss += g.loss;
      rec.lr = scheduled_lr(opt, step, total);
      optimizer_step(opt, res.theta, g.params, m_theta, rec.lr);
      optimizer_step(opt, res.phi_p, g.aux, m_phi, rec.lr);
    }
    rec.loss /= static_cast<double>(per_epoch);
    rec.grad_norm = norm(grad(diagnostic, res.theta, &res.phi_p));
    if (!res.theta.all_finite() || !res.phi_p.all_finite()) throw NumericalError("pretraining diverged");
    res.history.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  return res;
}

// ---------------------------------------------------------------- head warm-up

struct HeadEpoch {
  int epoch = 0;
  double loss = 0.0;
  double train_accuracy = 0.0;
};

/// Fits the downstream head on frozen backbone features with a constant rate.
inline ParamVector run_head_warmup(const ModelSpec& spec, const ParamVector& theta, ParamVector phi_d,
                                   const LabeledSet& train, const HeadWarmupConfig& cfg, std::uint64_t seed,
                                   std::vector<HeadEpoch>* history = nullptr) {
  if (cfg.epochs == 0) return phi_d;
  const Tensor features = forward_backbone(theta, train.x, spec);
  const auto layout = head_layout(spec, Head::downstream);
  BatchStack stack(train.size(), std::min(cfg.batch, train.size()), stream_seed(seed, "warmup.batches"));
  auto m = ParamVector::zeros_like(phi_d);
  const Norm norm_kind = spec.norm;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    HeadEpoch rec;
    rec.epoch = epoch;
    const auto per_epoch = stack.batches_per_pass();
    for (std::size_t s = 0; s < per_epoch; ++s) {
      const auto idx = stack.next(1).front();
      auto x = ad::constant(gather_rows(features, idx));
      std::vector<std::size_t> labels;
      for (auto i : idx) labels.push_back(train.labels[i]);
      Objective head(layout, [x, labels, norm_kind](std::span<const ad::Var> phi, std::span<const ad::Var>) {
        return cross_entropy(mlp_forward(phi, x, norm_kind), labels);
      });
      rec.loss += eval_loss(head, phi_d);
      sgd_momentum_step(phi_d, grad(head, phi_d), m, cfg.lr, cfg.momentum, cfg.weight_decay);
    }
    rec.loss /= static_cast<double>(per_epoch);
    if (history) {
      const Tensor logits = forward_head(phi_d, features, Head::downstream, spec);
      std::size_t correct = 0;
      for (std::size_t i = 0; i < logits.rows(); ++i) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < logits.cols(); ++c)
          if (logits(i, c) > logits(i, best)) best = c;
        correct += best == train.labels[i];
      }
      rec.train_accuracy = static_cast<double>(correct) / static_cast<double>(train.size());
      history->push_back(rec);
    }
  }
  return phi_d;
}

// ---------------------------------------------------------------- fine-tuning

struct FinetuneEpoch {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_accuracy = 0.0;
};

inline constexpr const char* kFinetuneHeader = "epoch,train_loss,val_loss,val_accuracy";

inline std::string format_finetune(const FinetuneEpoch& e) {
  std::ostringstream os;
  os << std::setprecision(17) << e.epoch << ',' << e.train_loss << ',' << e.val_loss << ',' << e.val_accuracy;
  return os.str();
}

struct FinetuneResult {
  ParamVector theta, phi_d;  // best-validation checkpoint
  int best_epoch = 0;        // 0: the initialization
  EvalMetrics best_val, final_val, test;
  std::vector<FinetuneEpoch> history;
};

/// Full-model SGD with momentum and cosine decay. The model is kept after any
/// epoch whose validation accuracy strictly beats the best so far; test
/// metrics are those of the kept model.
inline FinetuneResult run_finetune(const ModelSpec& spec, ParamVector theta, ParamVector phi_d, const Datasets& data,
                                   const FinetuneConfig& cfg, std::uint64_t seed) {
  FinetuneResult res;
  res.theta = theta;
  res.phi_d = phi_d;
  res.best_val = res.final_val = evaluate(spec, theta, phi_d, data.val);
  if (cfg.epochs > 0) {
    BatchStack stack(data.train.size(), std::min(cfg.batch, data.train.size()), stream_seed(seed, "finetune.batches"));
    const OptimizerConfig opt{OptimizerKind::sgd, cfg.lr, cfg.momentum, cfg.weight_decay, 0.0, ScheduleKind::cosine, 0};
    const long per_epoch = static_cast<long>(stack.batches_per_pass());
    const long total = per_epoch * cfg.epochs;
    auto m_theta = ParamVector::zeros_like(theta), m_phi = ParamVector::zeros_like(phi_d);
    double best_acc = -1.0;
    long step = 0;
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
      FinetuneEpoch rec;
      rec.epoch = epoch;
      for (long s = 0; s < per_epoch; ++s, ++step) {
        const auto obj = downstream_objective(spec, labeled_batch(data.train, stack.next(1).front()));
        auto g = grad_pair(obj, theta, phi_d);
        rec.train_loss += g.loss;
        const double lr = scheduled_lr(opt, step, total);
        optimizer_step(opt, theta, g.params, m_theta, lr);
        optimizer_step(opt, phi_d, g.aux, m_phi, lr);
      }
      rec.train_loss /= static_cast<double>(per_epoch);
      const auto val = evaluate(spec, theta, phi_d, data.val);
      if (!std::isfinite(val.loss)) throw NumericalError("fine-tuning diverged at epoch " + std::to_string(epoch));
      rec.val_loss = val.loss;
      rec.val_accuracy = val.accuracy;
      res.history.push_back(rec);
      res.final_val = val;
      if (val.accuracy > best_acc) {
        best_acc = val.accuracy;
        res.best_epoch = epoch;
        res.best_val = val;
        res.theta = theta;
        res.phi_d = phi_d;
      }
    }
  }
  res.test = evaluate(spec, res.theta, res.phi_d, data.test);
  return res;
}

// ---------------------------------------------------------------- bilevel stage

inline BilevelProblem make_problem(const ModelSpec& spec, const Datasets& data, const AugmentConfig& augment,
                                   double temperature) {
  BilevelProblem p;
  p.pretext = [&spec, &data, augment, temperature](const std::vector<std::size_t>& idx, Rng& rng) {
    return pretext_objective(spec, augment_views(gather_rows(data.pretext.x, idx), augment, rng), temperature);
  };
  p.downstream = [&spec, &data](const std::vector<std::size_t>& idx) {
    return downstream_objective(spec, labeled_batch(data.train, idx));
  };
  return p;
}

inline TrainState initial_bissl_state(const BiSSLConfig& cfg, const Datasets& data, const ParamVector& theta,
                                      const ParamVector& phi_p, const ParamVector& phi_d, std::uint64_t seed) {
  return TrainState::start(theta, phi_p, phi_d,
                           BatchStack(data.pretext.size(), cfg.pretext_batch, stream_seed(seed, "bissl.lower")),
                           BatchStack(data.train.size(), cfg.downstream_batch, stream_seed(seed, "bissl.upper")),
                           Rng::derive(seed, "bissl.augment"));
}

// ---------------------------------------------------------------- weighted sum

/// Single-level training of (1 - w) L^P + w L^D over (theta, phi_P, phi_D), each
/// step on one pretext and one distinct downstream batch, with the lower-level
/// optimizer settings of the bilevel stage.
inline ParamVector run_weighted_sum(const ModelSpec& spec, const Datasets& data, const RunConfig& cfg, ParamVector theta,
                                    const ParamVector& phi_p, const ParamVector& phi_d, std::uint64_t seed,
                                    const std::function<void(const MetricRecord&)>& on_metric = {}) {
  const auto& b = cfg.bissl;
  const long steps = cfg.weighted_sum.steps > 0 ? cfg.weighted_sum.steps : b.upper_total();
  if (steps == 0) return theta;
  const auto opt = b.lower_schedule();
  BatchStack pre(data.pretext.size(), b.pretext_batch, stream_seed(seed, "weighted.pretext"));
  BatchStack down(data.train.size(), b.downstream_batch, stream_seed(seed, "weighted.downstream"));
  Rng aug = Rng::derive(seed, "weighted.augment");
  ParamVector heads = concat(phi_p, phi_d);
  auto m_theta = ParamVector::zeros_like(theta), m_heads = ParamVector::zeros_like(heads);
  for (long step = 0; step < steps; ++step) {
    const auto pobj = pretext_objective(spec, augment_views(gather_rows(data.pretext.x, pre.next(1).front()),
                                                            cfg.data.augment, aug),
                                        b.temperature);
    const auto dobj = downstream_objective(spec, labeled_batch(data.train, down.next(1).front()));
    auto g = grad_pair(weighted_sum_objective(pobj, dobj, cfg.weighted_sum.w), theta, heads);
    MetricRecord r;
    r.step = step + 1;
    r.alternation = 0;
    r.phase = "weighted";
    r.loss = g.loss;
    r.grad_norm_pre_clip = detail::joint_norm(g.params, g.aux);
    r.lr = scheduled_lr(opt, step, steps);
    optimizer_step(opt, theta, clip_by_norm(std::move(g.params), b.clip_threshold), m_theta, r.lr);
    optimizer_step(opt, heads, clip_by_norm(std::move(g.aux), b.clip_threshold), m_heads, r.lr);
    if (on_metric) on_metric(r);
  }
  return theta;
}

// ---------------------------------------------------------------- artifacts

/// Single-vector artifact; its file hash identifies that vector.
inline std::string vector_artifact(const std::string& name, const ParamVector& v) {
  Checkpoint ck;
  ck.vectors = {{name, v}};
  return ck.serialize();
}

/// Writes the artifact and returns its content hash.
inline std::string save_vector(const fs::path& path, const std::string& name, const ParamVector& v) {
  const auto text = vector_artifact(name, v);
  write_file(path, text);
  return git_blob_hash(text);
}

inline ParamVector load_vector(const fs::path& path, const std::string& name, const ParamLayout& expected) {
  ParamVector v = Checkpoint::load(path).vector(name);
  if (v.layout() != expected) throw LayoutError("'" + path.string() + "': " + name + " does not match the model");
  return v;
}

// ---------------------------------------------------------------- search

struct Trial {
  int index = 0;
  double lr = 0.0, weight_decay = 0.0;
  double val_accuracy = 0.0, val_loss = 0.0;
  bool diverged = false;  // never selected
};

struct SearchResult {
  Trial best;
  std::vector<Trial> trials;  // by index
};

/// Best first: finite trials, then higher validation accuracy, then lower
/// validation loss, then lower index.
inline bool better_trial(const Trial& a, const Trial& b) {
  if (a.diverged != b.diverged) return b.diverged;
  if (a.val_accuracy != b.val_accuracy) return a.val_accuracy > b.val_accuracy;
  if (a.val_loss != b.val_loss) return a.val_loss < b.val_loss;
  return a.index < b.index;
}

inline std::vector<Trial> sample_trials(const SearchConfig& space, std::uint64_t seed) {
  Rng rng = Rng::derive(seed, "search");
  std::vector<Trial> out(static_cast<std::size_t>(space.trials));
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i].index = static_cast<int>(i);
    out[i].lr = rng.log_uniform(space.lr_min, space.lr_max);
    out[i].weight_decay = rng.log_uniform(space.wd_min, space.wd_max);
  }
  return out;
}

/// Log-uniform (lr, wd) samples, one model per trial via `train`, which
/// returns validation metrics. A trial that raises NumericalError is kept as
/// diverged; the search fails only if every trial does.
inline SearchResult random_search(const SearchConfig& space, std::uint64_t seed,
                                  const std::function<EvalMetrics(const Trial&)>& train) {
  if (space.trials < 1) throw ConfigError("search: need at least one trial");
  SearchResult res;
  res.trials = sample_trials(space, seed);
  parallel_for(res.trials.size(), [&](std::size_t i) {
    try {
      const auto m = train(res.trials[i]);
      res.trials[i].val_accuracy = m.accuracy;
      res.trials[i].val_loss = m.loss;
    } catch (const NumericalError&) {
      res.trials[i].diverged = true;
      res.trials[i].val_loss = std::numeric_limits<double>::infinity();
    }
  });
  res.best = *std::min_element(res.trials.begin(), res.trials.end(), better_trial);
  if (res.best.diverged) throw NumericalError("search: every trial diverged");
  return res;
}

inline std::string trials_csv(const SearchResult& r) {
  std::ostringstream os;
  os << std::setprecision(17) << "trial,lr,weight_decay,val_accuracy,val_loss,diverged\n";
  for (const auto& t : r.trials)
    os << t.index << ',' << t.lr << ',' << t.weight_decay << ',' << t.val_accuracy << ',' << t.val_loss << ','
       << t.diverged << '\n';
  return os.str();
}

// ---------------------------------------------------------------- arms

struct ArmSpec {
  enum class Kind { ft_only, bissl, weighted_sum };
  std::string name;
  Kind kind = Kind::ft_only;
  BiSSLConfig bissl;
};

/// Pipeline arms plus the ablation arms; all share the pretrained backbone.
inline ArmSpec make_arm(const std::string& name, const BiSSLConfig& base) {
  ArmSpec a{name, ArmSpec::Kind::bissl, base};
  if (name == "ft_only") a.kind = ArmSpec::Kind::ft_only;
  else if (name == "weighted_sum") a.kind = ArmSpec::Kind::weighted_sum;
  else if (name == "bissl" || name == "default") {
  } else if (name == "bissl_discard_ij" || name == "discard_ij") {
    a.bissl.discard_ij = true;
  } else if (name == "bissl_nu1" || name == "nu1_same_T") {
    a.bissl.upper_steps = 1;
  } else if (name == "nu1_matched") {
    // same total upper updates as the base schedule
    a.bissl.alternations = base.alternations * base.upper_steps;
    a.bissl.upper_steps = 1;
  } else {
    throw ConfigError("unknown arm '" + name +
                      "' (expected ft_only, bissl, weighted_sum, bissl_discard_ij, bissl_nu1, default, nu1_same_T, "
                      "nu1_matched, discard_ij)");
  }
  return a;
}

inline const std::vector<std::string>& ablation_arms() {
  static const std::vector<std::string> arms{"default", "nu1_same_T", "nu1_matched", "discard_ij"};
  return arms;
}

struct ArmResult {
  std::string arm;
  int replicate = 0;
  std::uint64_t seed = 0;
  FinetuneConfig ft_config;  // settings the fine-tuning ran with
  FinetuneResult finetune;
  std::string consumed_theta_hash;  // pretrained backbone this arm started from
  std::string final_hash;           // content hash of the kept fine-tuned model
};

inline Checkpoint model_checkpoint(const ParamVector& theta, const ParamVector& phi_d) {
  Checkpoint ck;
  ck.vectors = {{"theta", theta}, {"phi_d", phi_d}};
  return ck;
}

inline void write_lines(const fs::path& path, const std::string& header, const std::vector<std::string>& rows) {
  std::string text = header + "\n";
  for (const auto& r : rows) text += r + "\n";
  write_file(path, text);
}

/// Backbone an arm hands to fine-tuning, plus the replicate's fresh head.
struct ArmStart {
  ParamVector theta, head;
};

/// One (arm, replicate) up to fine-tuning: head warm-up and the bilevel or
/// weighted-sum stage where the arm asks for them. Artifacts go to `dir` when
/// it is non-empty.
inline ArmStart prepare_arm(const ArmSpec& arm, int replicate, const RunConfig& cfg, const ModelSpec& spec,
                            const Datasets& data, const PretrainResult& pre, const fs::path& dir) {
  const std::uint64_t seed = replicate_seed(cfg.seed, replicate);
  const bool save = !dir.empty();
  if (save) fs::create_directories(dir);
  ArmStart out{pre.theta, flatten(init_model(spec, stream_seed(seed, "head")), spec).phi_downstream};
  if (arm.kind == ArmSpec::Kind::ft_only) return out;

  std::vector<HeadEpoch> warm_hist;
  const ParamVector warm = run_head_warmup(spec, pre.theta, out.head, data.train, cfg.warmup, seed, &warm_hist);
  if (save) {
    std::vector<std::string> rows;
    for (const auto& e : warm_hist) {
      std::ostringstream os;
      os << std::setprecision(17) << e.epoch << ',' << e.loss << ',' << e.train_accuracy;
      rows.push_back(os.str());
    }
    write_lines(dir / "warmup.csv", "epoch,loss,train_accuracy", rows);
  }
  std::unique_ptr<MetricsWriter> metrics;
  if (save) metrics = std::make_unique<MetricsWriter>(dir / "train_metrics.csv");
  auto on_metric = [&](const MetricRecord& r) {
    if (metrics) (*metrics)(r);
  };
  if (arm.kind == ArmSpec::Kind::bissl) {
    TrainState state = initial_bissl_state(arm.bissl, data, pre.theta, pre.phi_p, warm, seed);
    BiSSLCallbacks cb;
    cb.on_metric = on_metric;
    if (save) {
      cb.on_alternation = [&](const TrainState& s) { s.to_checkpoint().save(dir / "bissl_state.ckpt"); };
      cb.on_abort = cb.on_alternation;
    }
    out.theta = bissl_run(arm.bissl, state, make_problem(spec, data, cfg.data.augment, arm.bissl.temperature), cb);
  } else {
    RunConfig ws = cfg;
    ws.bissl = arm.bissl;
    out.theta = run_weighted_sum(spec, data, ws, pre.theta, pre.phi_p, warm, seed, on_metric);
  }
  return out;
}

/// Fine-tunes a prepared arm and records its result.
inline ArmResult finish_arm(const ArmSpec& arm, int replicate, const RunConfig& cfg, const ModelSpec& spec,
                            const Datasets& data, const PretrainResult& pre, const ArmStart& start,
                            const FinetuneConfig& ft, const fs::path& dir) {
  ArmResult out;
  out.arm = arm.name;
  out.replicate = replicate;
  out.seed = replicate_seed(cfg.seed, replicate);
  out.ft_config = ft;
  out.consumed_theta_hash = git_blob_hash(vector_artifact("theta", pre.theta));
  out.finetune = run_finetune(spec, start.theta, start.head, data, ft, out.seed);
  const auto ck = model_checkpoint(out.finetune.theta, out.finetune.phi_d).serialize();
  out.final_hash = git_blob_hash(ck);
  if (!dir.empty()) {
    fs::create_directories(dir);
    std::vector<std::string> rows;
    for (const auto& e : out.finetune.history) rows.push_back(format_finetune(e));
    write_lines(dir / "finetune.csv", kFinetuneHeader, rows);
    write_file(dir / "final.ckpt", ck);
  }
  return out;
}

/// prepare_arm then finish_arm with the configured fine-tuning settings.
inline ArmResult run_arm(const ArmSpec& arm, int replicate, const RunConfig& cfg, const ModelSpec& spec,
                         const Datasets& data, const PretrainResult& pre, const fs::path& dir) {
  return finish_arm(arm, replicate, cfg, spec, data, pre, prepare_arm(arm, replicate, cfg, spec, data, pre, dir),
                    cfg.finetune, dir);
}

/// Fine-tuning lr and weight decay search on one prepared backbone. Every
/// caller with the same root seed sees the same candidate list.
inline SearchResult search_finetune(const RunConfig& cfg, const ModelSpec& spec, const Datasets& data,
                                    const ArmStart& start, std::uint64_t seed) {
  return random_search(cfg.search, stream_seed(cfg.seed, "search"), [&](const Trial& t) {
    FinetuneConfig ft = cfg.finetune;
    ft.lr = t.lr;
    ft.weight_decay = t.weight_decay;
    return run_finetune(spec, start.theta, start.head, data, ft, seed).best_val;
  });
}

// ---------------------------------------------------------------- report

struct ArmSummary {
  std::string arm;
  std::size_t n = 0;
  double mean_acc = 0.0, std_acc = 0.0;  // test accuracy in percent
  double mean_loss = 0.0;
};

inline std::pair<double, double> mean_std(const std::vector<double>& v) {
  if (v.empty()) return {0.0, 0.0};
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return {mean, v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0};
}

inline std::vector<ArmSummary> summarize(const std::vector<std::string>& arms, const std::vector<ArmResult>& results) {
  std::vector<ArmSummary> out;
  for (const auto& arm : arms) {
    std::vector<double> acc, loss;
    for (const auto& r : results) {
      if (r.arm != arm) continue;
      acc.push_back(100.0 * r.finetune.test.accuracy);
      loss.push_back(r.finetune.test.loss);
    }
    ArmSummary s;
    s.arm = arm;
    s.n = acc.size();
    std::tie(s.mean_acc, s.std_acc) = mean_std(acc);
    s.mean_loss = mean_std(loss).first;
    out.push_back(s);
  }
  return out;
}

inline std::string comparison_csv(const std::vector<ArmSummary>& rows) {
  std::ostringstream os;
  os << std::setprecision(17) << "arm,seeds,mean_test_accuracy,std_test_accuracy,mean_test_loss\n";
  for (const auto& r : rows) os << r.arm << ',' << r.n << ',' << r.mean_acc << ',' << r.std_acc << ',' << r.mean_loss << '\n';
  return os.str();
}

inline std::string comparison_text(const std::vector<ArmSummary>& rows) {
  std::ostringstream os;
  std::size_t w = 4;
  for (const auto& r : rows) w = std::max(w, r.arm.size());
  const ArmSummary* base = nullptr;
  for (const auto& r : rows)
    if (r.arm == "ft_only") base = &r;
  os << std::left << std::setw(static_cast<int>(w)) << "arm" << "  seeds  test acc (%)      test loss";
  if (base) os << "   vs ft_only";
  os << '\n' << std::fixed;
  for (const auto& r : rows) {
    os << std::left << std::setw(static_cast<int>(w)) << r.arm << "  " << std::right << std::setw(5) << r.n << "  "
       << std::setprecision(2) << std::setw(6) << r.mean_acc << " +- " << std::setw(5) << r.std_acc << "  "
       << std::setprecision(4) << std::setw(11) << r.mean_loss;
    if (base) os << "   " << std::showpos << std::setprecision(2) << r.mean_acc - base->mean_acc << std::noshowpos;
    os << '\n';
  }
  return os.str();
}

struct PipelineReport {
  std::string data_hash;
  std::string pretrain_hash;  // of the shared pretrained backbone artifact
  std::vector<ArmResult> results;  // arm-major, then replicate
  std::vector<ArmSummary> summary;
  std::string table;
};

inline Datasets pipeline_data(const RunConfig& cfg) {
  SynthConfig d = cfg.data;
  d.seed = stream_seed(cfg.seed, "data");
  return make_datasets(d);
}

inline ModelParams pipeline_init(const RunConfig& cfg) { return init_model(cfg.model_spec(), stream_seed(cfg.seed, "init")); }


/// Data and one shared pretraining; then every (arm, replicate) backbone, a
/// per-arm fine-tuning search on replicate 0 when enabled, and fine-tuning of
/// every replicate. Jobs fan out over worker threads. Writes the manifest
/// before any work.
inline PipelineReport run_pipeline(const RunConfig& cfg, const std::string& command = "pipeline",
                                   std::ostream* log = nullptr) {
  cfg.validate();
  std::vector<ArmSpec> arms;
  for (const auto& name : cfg.arms) arms.push_back(make_arm(name, cfg.bissl));
  const fs::path out = cfg.out_dir;
  fs::create_directories(out);
  Manifest manifest(out / (command + ".manifest.txt"));
  manifest.put("command", command);
  manifest.put_block(dump_config(cfg));
  manifest.put("note.upper_pretext_batch", "most recent lower-level batch");
  manifest.put("note.upper_downstream_batch", "one fresh batch per upper step for both downstream terms");
  manifest.put("note.finetune_head", "fresh head, same initialization in every arm of a replicate");

  PipelineReport rep;
  const auto spec = cfg.model_spec();
  const Datasets data = pipeline_data(cfg);
  rep.data_hash = dataset_hash(data);
  manifest.put("data.hash", rep.data_hash);

  const auto init = flatten(pipeline_init(cfg), spec);
  std::vector<std::string> pre_rows;
  if (log) *log << "pretraining " << cfg.pretrain.epochs << " epochs\n" << std::flush;
  const PretrainResult pre = run_pretext_pretrain(spec, data.pretext.x, cfg.pretrain, cfg.data.augment, init.theta,
                                                  init.phi_pretext, stream_seed(cfg.seed, "pretrain"),
                                                  [&](const PretrainEpoch& e) { pre_rows.push_back(format_pretrain(e)); });
  write_lines(out / "pretrain.csv", kPretrainHeader, pre_rows);
  rep.pretrain_hash = save_vector(out / "theta.ckpt", "theta", pre.theta);
  manifest.put("pretrain.theta_hash", rep.pretrain_hash);
  manifest.put("pretrain.phi_p_hash", save_vector(out / "phi_p.ckpt", "phi_p", pre.phi_p));

  const std::size_t seeds = static_cast<std::size_t>(cfg.seeds);
  const std::size_t jobs = arms.size() * seeds;
  auto job_dir = [&](std::size_t j) { return out / arms[j / seeds].name / ("seed_" + std::to_string(j % seeds)); };
  std::vector<ArmStart> starts(jobs);
  parallel_for(jobs, [&](std::size_t j) {
    starts[j] = prepare_arm(arms[j / seeds], static_cast<int>(j % seeds), cfg, spec, data, pre, job_dir(j));
  });

  std::vector<FinetuneConfig> ft(arms.size(), cfg.finetune);
  if (cfg.search.per_arm) {
    for (std::size_t a = 0; a < arms.size(); ++a) {
      const auto res = search_finetune(cfg, spec, data, starts[a * seeds], replicate_seed(cfg.seed, 0));
      write_file(out / arms[a].name / "trials.csv", trials_csv(res));
      ft[a].lr = res.best.lr;
      ft[a].weight_decay = res.best.weight_decay;
      std::ostringstream os;
      os << std::setprecision(17) << ft[a].lr << ',' << ft[a].weight_decay;
      manifest.put(arms[a].name + ".finetune_lr_wd", os.str());
      if (log) *log << arms[a].name << ": fine-tuning lr " << ft[a].lr << ", weight decay " << ft[a].weight_decay << "\n";
    }
  }

  rep.results.resize(jobs);
  std::mutex log_mu;
  parallel_for(jobs, [&](std::size_t j) {
    const auto& arm = arms[j / seeds];
    const int r = static_cast<int>(j % seeds);
    rep.results[j] = finish_arm(arm, r, cfg, spec, data, pre, starts[j], ft[j / seeds], job_dir(j));
    manifest.put(arm.name + ".seed_" + std::to_string(r) + ".consumed_theta_hash", rep.results[j].consumed_theta_hash);
    manifest.put(arm.name + ".seed_" + std::to_string(r) + ".final_hash", rep.results[j].final_hash);
    if (log) {
      std::lock_guard lock(log_mu);
      *log << arm.name << " seed " << r << ": test accuracy " << std::fixed << std::setprecision(2)
           << 100.0 * rep.results[j].finetune.test.accuracy << "%\n"
           << std::defaultfloat << std::flush;
    }
  });

  std::vector<std::string> names;
  for (const auto& a : arms) names.push_back(a.name);
  rep.summary = summarize(names, rep.results);
  rep.table = comparison_text(rep.summary);
  write_file(out / "comparison.csv", comparison_csv(rep.summary));
  write_file(out / "comparison.txt", rep.table);
  manifest.put("status", "complete");
  return rep;
}

}  // namespace bissl
