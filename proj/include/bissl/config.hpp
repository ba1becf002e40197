#pragma once

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "bissl/checkpoint.hpp"
#include "bissl/datagen.hpp"
#include "bissl/errors.hpp"
#include "bissl/models.hpp"
#include "bissl/optim.hpp"
#include "bissl/train.hpp"

namespace bissl {

struct PretrainConfig {
  int epochs = 200;
  std::size_t batch = 64;
  OptimizerConfig opt{OptimizerKind::lars, 1.0, 0.9, 1e-6, 0.001, ScheduleKind::cosine, 0};
  int warmup_epochs = 10;
  double temperature = 0.5;
};

struct HeadWarmupConfig {
  int epochs = 20;
  std::size_t batch = 64;
  double lr = 0.001;
  double momentum = 0.9;
  double weight_decay = 1e-4;
};

struct FinetuneConfig {
  int epochs = 100;
  std::size_t batch = 64;
  double lr = 0.003;
  double momentum = 0.9;
  double weight_decay = 1e-4;
};

struct WeightedSumConfig {
  double w = 0.25;
  long steps = 0;  // 0: match the BiSSL upper-step count T * N_U
};

struct SearchConfig {
  int trials = 25;
  double lr_min = 1e-4, lr_max = 1.0;
  double wd_min = 1e-5, wd_max = 1e-2;
  bool per_arm = true;  // pipeline: pick fine-tuning lr and wd per arm on validation
};

/// Every knob of a run. Input and output widths of the model follow the data.
struct RunConfig {
  std::uint64_t seed = 0;
  int seeds = 5;
  std::string out_dir = "runs/default";
  std::vector<std::string> arms = {"ft_only", "bissl", "weighted_sum", "bissl_discard_ij", "bissl_nu1"};
  SynthConfig data;
  ModelSpec model;
  PretrainConfig pretrain;
  HeadWarmupConfig warmup;
  BiSSLConfig bissl;
  FinetuneConfig finetune;
  WeightedSumConfig weighted_sum;
  SearchConfig search;

  RunConfig() {
    data.noise_scale = 2.5;
    bissl.wall_clock = false;
    bissl.alternations = 500;
  }

  ModelSpec model_spec() const {
    ModelSpec s = model;
    s.input_dim = data.input_dim;
    s.output_dim = data.num_classes;
    return s;
  }

  void validate() const {
    if (seeds < 1) throw ConfigError("run.seeds must be >= 1");
    if (arms.empty()) throw ConfigError("run.arms must name at least one arm");
    data.validate();
    model_spec().validate();
    if (pretrain.epochs < 0 || warmup.epochs < 0 || finetune.epochs < 0) throw ConfigError("epochs must be >= 0");
    if (pretrain.batch < 2 || warmup.batch < 1 || finetune.batch < 1) throw ConfigError("batch sizes must be positive");
    if (!(pretrain.temperature > 0.0)) throw ConfigError("pretrain.temperature must be positive");
    pretrain.opt.validate("pretrain");
    if (warmup.lr < 0.0 || warmup.weight_decay < 0.0) throw ConfigError("warmup: lr and weight decay must be >= 0");
    if (finetune.lr < 0.0 || finetune.weight_decay < 0.0) throw ConfigError("finetune: lr and weight decay must be >= 0");
    bissl.validate();
    if (weighted_sum.w < 0.0 || weighted_sum.w > 1.0) throw ConfigError("weighted_sum.w must lie in [0, 1]");
    if (weighted_sum.steps < 0) throw ConfigError("weighted_sum.steps must be >= 0");
    if (search.trials < 1) throw ConfigError("search.trials must be >= 1");
    if (!(search.lr_min > 0.0 && search.lr_min <= search.lr_max && search.wd_min > 0.0 &&
          search.wd_min <= search.wd_max)) {
      throw ConfigError("search ranges must be positive with min <= max");
    }
    const std::size_t train_rows = data.downstream_samples;
    if (data.pretext_samples < 2 * std::max(pretrain.batch, bissl.pretext_batch) ||
        train_rows < 2 * bissl.downstream_batch) {
      throw ConfigError("data: sample counts must be at least twice the batch sizes");
    }
  }
};

namespace config_detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

/// Shortest text that reads back to the same double.
inline std::string fmt(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

template <class T>
T parse_number(const std::string& key, const std::string& text) {
  std::istringstream is(text);
  T v{};
  is >> v;
  if (is.fail() || !is.eof()) throw ConfigError("config: '" + key + "' expects a number, got '" + text + "'");
  return v;
}

inline bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1") return true;
  if (text == "false" || text == "0") return false;
  throw ConfigError("config: '" + key + "' expects true or false, got '" + text + "'");
}

inline std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  for (std::string item; std::getline(ss, item, ',');) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

}  // namespace config_detail

/// Binds `section.key` names to the fields of one RunConfig.
class ConfigRegistry {
 public:
  struct Entry {
    std::function<std::string()> get;
    std::function<void(const std::string&)> set;
  };

  explicit ConfigRegistry(RunConfig& c) {
    using namespace config_detail;
    auto num = [this](const std::string& key, auto& field) {
      using T = std::remove_reference_t<decltype(field)>;
      entries_[key] = {[&field] {
                         if constexpr (std::is_floating_point_v<T>) return fmt(field);
                         else return std::to_string(field);
                       },
                       [&field, key](const std::string& v) { field = parse_number<T>(key, v); }};
    };
    auto boolean = [this](const std::string& key, bool& field) {
      entries_[key] = {[&field] { return std::string(field ? "true" : "false"); },
                       [&field, key](const std::string& v) { field = parse_bool(key, v); }};
    };
    auto text = [this](const std::string& key, std::string& field) {
      entries_[key] = {[&field] { return field; }, [&field](const std::string& v) { field = v; }};
    };
    auto dims = [this](const std::string& key, std::vector<std::size_t>& field) {
      entries_[key] = {[&field] {
                         std::string s;
                         for (std::size_t i = 0; i < field.size(); ++i) s += (i ? "," : "") + std::to_string(field[i]);
                         return s;
                       },
                       [&field, key](const std::string& v) {
                         field.clear();
                         for (const auto& item : split_list(v)) field.push_back(parse_number<std::size_t>(key, item));
                       }};
    };
    auto optimizer = [this](const std::string& key, OptimizerKind& field) {
      entries_[key] = {[&field] { return to_string(field); }, [&field](const std::string& v) { field = parse_optimizer(v); }};
    };

    num("run.seed", c.seed);
    num("run.seeds", c.seeds);
    text("run.out_dir", c.out_dir);
    entries_["run.arms"] = {[&c] {
                              std::string s;
                              for (std::size_t i = 0; i < c.arms.size(); ++i) s += (i ? "," : "") + c.arms[i];
                              return s;
                            },
                            [&c](const std::string& v) { c.arms = split_list(v); }};

    num("data.input_dim", c.data.input_dim);
    num("data.num_classes", c.data.num_classes);
    num("data.pretext_samples", c.data.pretext_samples);
    num("data.downstream_samples", c.data.downstream_samples);
    num("data.shift_magnitude", c.data.shift_magnitude);
    num("data.cluster_spread", c.data.cluster_spread);
    num("data.noise_scale", c.data.noise_scale);
    num("data.noise_sigma", c.data.augment.noise_sigma);
    num("data.scale_lo", c.data.augment.scale_lo);
    num("data.scale_hi", c.data.augment.scale_hi);
    num("data.mask_fraction", c.data.augment.mask_fraction);
    num("data.val_fraction", c.data.val_fraction);
    num("data.test_fraction", c.data.test_fraction);

    dims("model.hidden", c.model.hidden);
    num("model.feature_dim", c.model.feature_dim);
    dims("model.pretext_head", c.model.pretext_head);
    entries_["model.norm"] = {[&c] { return std::string(c.model.norm == Norm::batch ? "batch" : "none"); },
                              [&c](const std::string& v) {
                                if (v == "batch") c.model.norm = Norm::batch;
                                else if (v == "none") c.model.norm = Norm::none;
                                else throw ConfigError("config: model.norm must be none or batch, got '" + v + "'");
                              }};

    num("pretrain.epochs", c.pretrain.epochs);
    num("pretrain.batch", c.pretrain.batch);
    optimizer("pretrain.optimizer", c.pretrain.opt.kind);
    num("pretrain.lr", c.pretrain.opt.base_lr);
    num("pretrain.momentum", c.pretrain.opt.momentum);
    num("pretrain.weight_decay", c.pretrain.opt.weight_decay);
    num("pretrain.trust", c.pretrain.opt.trust_coefficient);
    num("pretrain.warmup_epochs", c.pretrain.warmup_epochs);
    num("pretrain.temperature", c.pretrain.temperature);

    num("warmup.epochs", c.warmup.epochs);
    num("warmup.batch", c.warmup.batch);
    num("warmup.lr", c.warmup.lr);
    num("warmup.momentum", c.warmup.momentum);
    num("warmup.weight_decay", c.warmup.weight_decay);

    num("bissl.lambda", c.bissl.lambda);
    num("bissl.N_L", c.bissl.lower_steps);
    num("bissl.N_U", c.bissl.upper_steps);
    num("bissl.T", c.bissl.alternations);
    num("bissl.cg_iterations", c.bissl.cg.iterations);
    num("bissl.cg_damping", c.bissl.cg.damping);
    num("bissl.cg_tol", c.bissl.cg.residual_tol);
    entries_["bissl.cg_fallback"] = {
        [&c] { return std::string(c.bissl.cg.fallback == CGFallback::identity ? "identity" : "none"); },
        [&c](const std::string& v) {
          if (v == "identity") c.bissl.cg.fallback = CGFallback::identity;
          else if (v == "none") c.bissl.cg.fallback = CGFallback::none;
          else throw ConfigError("config: bissl.cg_fallback must be identity or none, got '" + v + "'");
        }};
    num("bissl.clip", c.bissl.clip_threshold);
    optimizer("bissl.lower_optimizer", c.bissl.lower.kind);
    num("bissl.lower_lr", c.bissl.lower.base_lr);
    num("bissl.lower_momentum", c.bissl.lower.momentum);
    num("bissl.lower_weight_decay", c.bissl.lower.weight_decay);
    num("bissl.lower_trust", c.bissl.lower.trust_coefficient);
    num("bissl.lower_warmup", c.bissl.lower_warmup_alternations);
    optimizer("bissl.upper_optimizer", c.bissl.upper.kind);
    num("bissl.upper_lr", c.bissl.upper.base_lr);
    num("bissl.upper_momentum", c.bissl.upper.momentum);
    num("bissl.upper_weight_decay", c.bissl.upper.weight_decay);
    boolean("bissl.discard_ij", c.bissl.discard_ij);
    num("bissl.pretext_batch", c.bissl.pretext_batch);
    num("bissl.downstream_batch", c.bissl.downstream_batch);
    num("bissl.temperature", c.bissl.temperature);
    boolean("bissl.wall_clock", c.bissl.wall_clock);

    num("finetune.epochs", c.finetune.epochs);
    num("finetune.batch", c.finetune.batch);
    num("finetune.lr", c.finetune.lr);
    num("finetune.momentum", c.finetune.momentum);
    num("finetune.weight_decay", c.finetune.weight_decay);

    num("weighted_sum.w", c.weighted_sum.w);
    num("weighted_sum.steps", c.weighted_sum.steps);

    num("search.trials", c.search.trials);
    num("search.lr_min", c.search.lr_min);
    num("search.lr_max", c.search.lr_max);
    num("search.wd_min", c.search.wd_min);
    num("search.wd_max", c.search.wd_max);
    boolean("search.per_arm", c.search.per_arm);
  }

  ConfigRegistry(const ConfigRegistry&) = delete;
  ConfigRegistry& operator=(const ConfigRegistry&) = delete;

  /// Qualified names pass through; an unqualified name resolves when exactly
  /// one section defines it.
  std::string resolve(const std::string& name) const {
    if (entries_.count(name)) return name;
    if (name.find('.') == std::string::npos) {
      std::vector<std::string> hits;
      for (const auto& [key, _] : entries_)
        if (key.substr(key.find('.') + 1) == name) hits.push_back(key);
      if (hits.size() == 1) return hits[0];
      if (hits.size() > 1) {
        std::string list;
        for (const auto& h : hits) list += (list.empty() ? "" : ", ") + h;
        throw ConfigError("config: key '" + name + "' is ambiguous (" + list + ")");
      }
    }
    throw ConfigError("config: unknown key '" + name + "'");
  }

  void set(const std::string& name, const std::string& value) { entries_.at(resolve(name)).set(value); }
  std::string get(const std::string& name) const { return entries_.at(resolve(name)).get(); }

  /// Applies a `key=value` override.
  void apply_assignment(const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) throw ConfigError("config: expected key=value, got '" + assignment + "'");
    set(config_detail::trim(assignment.substr(0, eq)), config_detail::trim(assignment.substr(eq + 1)));
  }

  /// Lines of `section.key = value`; `#` starts a comment.
  void apply_text(const std::string& text, const std::string& origin) {
    std::istringstream is(text);
    int line_no = 0;
    for (std::string line; std::getline(is, line);) {
      ++line_no;
      line = config_detail::trim(line.substr(0, line.find('#')));
      if (line.empty()) continue;
      try {
        apply_assignment(line);
      } catch (const ConfigError& e) {
        throw ConfigError(origin + ":" + std::to_string(line_no) + ": " + e.what());
      }
    }
  }

  std::vector<std::string> keys() const {
    std::vector<std::string> out;
    for (const auto& [k, _] : entries_) out.push_back(k);
    return out;
  }

  /// One `key=value` line per setting, sorted by key.
  std::string dump() const {
    std::string out;
    for (const auto& [k, e] : entries_) out += k + "=" + e.get() + "\n";
    return out;
  }

 private:
  std::map<std::string, Entry> entries_;
};

/// Built-in defaults, then the config file (unless "default"), then overrides
/// in order. Later sources win.
inline RunConfig load_config(const std::string& config_path, const std::vector<std::string>& overrides) {
  RunConfig cfg;
  ConfigRegistry reg(cfg);
  if (!config_path.empty() && config_path != "default") reg.apply_text(read_file(config_path), config_path);
  for (const auto& o : overrides) reg.apply_assignment(o);
  cfg.validate();
  return cfg;
}

inline std::string dump_config(RunConfig cfg) { return ConfigRegistry(cfg).dump(); }

}  // namespace bissl
