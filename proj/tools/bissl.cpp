// Command-line driver: data generation, the four training stages, the full
// comparison pipeline, search, ablations, and the oracle suite.
//
// Exit codes: 0 success, 1 configuration or usage error, 2 numerical abort
// (including a failing oracle suite).

#include <CLI11.hpp>

#include <filesystem>
#include <iomanip>
#include <iostream>
#include <string>
#include <vector>

#include "bissl/bissl.hpp"

namespace {

using namespace bissl;
namespace fs = std::filesystem;

struct Common {
  std::string config = "default";
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::optional<int> seeds;
  std::optional<std::string> out;
  int replicate = 0;
  std::string theta, phi_p, head;
  bool resume = false;
  int stop_after = -1;
};

/// Precedence: built-in default < config file < --set (in order) < dedicated flags.
RunConfig resolve(const Common& c) {
  auto overrides = c.sets;
  if (c.seed) overrides.push_back("run.seed=" + std::to_string(*c.seed));
  if (c.seeds) overrides.push_back("run.seeds=" + std::to_string(*c.seeds));
  if (c.out) overrides.push_back("run.out_dir=" + *c.out);
  return load_config(c.config, overrides);
}

fs::path input_path(const std::string& flag, const RunConfig& cfg, const char* fallback) {
  return flag.empty() ? fs::path(cfg.out_dir) / fallback : fs::path(flag);
}

/// Every stage command starts by recording its configuration.
Manifest start_manifest(const std::string& command, const RunConfig& cfg) {
  fs::create_directories(cfg.out_dir);
  Manifest m(fs::path(cfg.out_dir) / (command + ".manifest.txt"));
  m.put("command", command);
  m.put_block(dump_config(cfg));
  return m;
}

void record_data(Manifest& m, const Datasets& d) {
  m.put("data.hash", dataset_hash(d));
  m.put("data.sizes", std::to_string(d.pretext.size()) + "/" + std::to_string(d.train.size()) + "/" +
                          std::to_string(d.val.size()) + "/" + std::to_string(d.test.size()));
}

ParamVector load_input(Manifest& m, const fs::path& path, const std::string& name, const ParamLayout& layout) {
  m.put("input." + name, path.string());
  m.put("input." + name + "_hash", file_hash(path));
  return load_vector(path, name, layout);
}

int cmd_gen_data(const Common& c) {
  const auto cfg = resolve(c);
  auto m = start_manifest("gen-data", cfg);
  const auto data = pipeline_data(cfg);
  record_data(m, data);
  export_datasets(data, fs::path(cfg.out_dir) / "data");
  m.put("status", "complete");
  std::cout << "wrote " << (fs::path(cfg.out_dir) / "data").string() << " (hash " << dataset_hash(data) << ")\n";
  return 0;
}

int cmd_pretrain(const Common& c) {
  const auto cfg = resolve(c);
  auto m = start_manifest("pretrain", cfg);
  const auto spec = cfg.model_spec();
  const auto data = pipeline_data(cfg);
  record_data(m, data);
  const auto init = flatten(pipeline_init(cfg), spec);
  std::vector<std::string> rows;
  const auto res = run_pretext_pretrain(spec, data.pretext.x, cfg.pretrain, cfg.data.augment, init.theta,
                                        init.phi_pretext, stream_seed(cfg.seed, "pretrain"),
                                        [&](const PretrainEpoch& e) { rows.push_back(format_pretrain(e)); });
  const fs::path out = cfg.out_dir;
  write_lines(out / "pretrain.csv", kPretrainHeader, rows);
  m.put("output.theta_hash", save_vector(out / "theta.ckpt", "theta", res.theta));
  m.put("output.phi_p_hash", save_vector(out / "phi_p.ckpt", "phi_p", res.phi_p));
  m.put("status", "complete");
  if (!res.history.empty()) std::cout << "final pretext loss " << res.history.back().loss << "\n";
  return 0;
}

ParamVector fresh_head(const RunConfig& cfg, int replicate) {
  return flatten(init_model(cfg.model_spec(), stream_seed(replicate_seed(cfg.seed, replicate), "head")), cfg.model_spec())
      .phi_downstream;
}

int cmd_warmup(const Common& c) {
  const auto cfg = resolve(c);
  auto m = start_manifest("warmup", cfg);
  m.put("replicate", std::to_string(c.replicate));
  const auto spec = cfg.model_spec();
  const auto data = pipeline_data(cfg);
  record_data(m, data);
  const auto theta = load_input(m, input_path(c.theta, cfg, "theta.ckpt"), "theta", *backbone_layout(spec));
  std::vector<HeadEpoch> hist;
  const auto head = run_head_warmup(spec, theta, fresh_head(cfg, c.replicate), data.train, cfg.warmup,
                                    replicate_seed(cfg.seed, c.replicate), &hist);
  m.put("output.phi_d_hash", save_vector(fs::path(cfg.out_dir) / "warmup_head.ckpt", "phi_d", head));
  m.put("status", "complete");
  if (!hist.empty()) std::cout << "warm-up train accuracy " << 100.0 * hist.back().train_accuracy << "%\n";
  return 0;
}

int cmd_bissl(const Common& c) {
  const auto cfg = resolve(c);
  auto m = start_manifest("bissl", cfg);
  m.put("replicate", std::to_string(c.replicate));
  m.put("note.upper_pretext_batch", "most recent lower-level batch");
  m.put("note.upper_downstream_batch", "one fresh batch per upper step for both downstream terms");
  const auto spec = cfg.model_spec();
  const auto data = pipeline_data(cfg);
  record_data(m, data);
  const fs::path out = cfg.out_dir;
  const fs::path state_path = out / "bissl_state.ckpt";
  TrainState state;
  if (c.resume) {
    m.put("input.state_hash", file_hash(state_path));
    state = TrainState::from_checkpoint(Checkpoint::load(state_path));
  } else {
    const auto theta = load_input(m, input_path(c.theta, cfg, "theta.ckpt"), "theta", *backbone_layout(spec));
    const auto phi_p = load_input(m, input_path(c.phi_p, cfg, "phi_p.ckpt"), "phi_p", *head_layout(spec, Head::pretext));
    const auto phi_d =
        load_input(m, input_path(c.head, cfg, "warmup_head.ckpt"), "phi_d", *head_layout(spec, Head::downstream));
    state = initial_bissl_state(cfg.bissl, data, theta, phi_p, phi_d, replicate_seed(cfg.seed, c.replicate));
  }
  MetricsWriter metrics(out / (c.resume ? "train_metrics.resumed.csv" : "train_metrics.csv"));
  BiSSLCallbacks cb;
  cb.on_metric = [&](const MetricRecord& r) { metrics(r); };
  cb.on_alternation = [&](const TrainState& s) { s.to_checkpoint().save(state_path); };
  cb.on_abort = cb.on_alternation;
  const auto theta_p = bissl_run(cfg.bissl, state, make_problem(spec, data, cfg.data.augment, cfg.bissl.temperature), cb,
                                   c.stop_after);
  m.put("output.theta_hash", save_vector(out / "bissl_theta.ckpt", "theta", theta_p));
  m.put("status", "complete");
  std::cout << "completed " << state.alternation << " alternations (" << state.lower_steps << " lower, "
            << state.upper_steps << " upper steps)\n";
  return 0;
}

int cmd_finetune(const Common& c) {
  const auto cfg = resolve(c);
  auto m = start_manifest("finetune", cfg);
  m.put("replicate", std::to_string(c.replicate));
  const auto spec = cfg.model_spec();
  const auto data = pipeline_data(cfg);
  record_data(m, data);
  const auto theta = load_input(m, input_path(c.theta, cfg, "theta.ckpt"), "theta", *backbone_layout(spec));
  const auto res =
      run_finetune(spec, theta, fresh_head(cfg, c.replicate), data, cfg.finetune, replicate_seed(cfg.seed, c.replicate));
  const fs::path out = cfg.out_dir;
  std::vector<std::string> rows;
  for (const auto& e : res.history) rows.push_back(format_finetune(e));
  write_lines(out / "finetune.csv", kFinetuneHeader, rows);
  const auto ck = model_checkpoint(res.theta, res.phi_d).serialize();
  write_file(out / "final.ckpt", ck);
  m.put("output.final_hash", git_blob_hash(ck));
  m.put("result.best_epoch", std::to_string(res.best_epoch));
  m.put("result.test_accuracy", std::to_string(res.test.accuracy));
  m.put("status", "complete");
  std::cout << std::fixed << std::setprecision(2) << "best epoch " << res.best_epoch << ", val accuracy "
            << 100.0 * res.best_val.accuracy << "%, test accuracy " << 100.0 * res.test.accuracy << "%\n";
  return 0;
}

int cmd_pipeline(const Common& c, const std::string& command, bool ablate) {
  auto cfg = resolve(c);
  if (ablate) cfg.arms = ablation_arms();
  const auto rep = run_pipeline(cfg, command, &std::cerr);
  std::cout << rep.table;
  return 0;
}

int cmd_sweep(const Common& c) {
  const auto cfg = resolve(c);
  auto m = start_manifest("sweep", cfg);
  const auto spec = cfg.model_spec();
  const auto data = pipeline_data(cfg);
  record_data(m, data);
  const auto theta = load_input(m, input_path(c.theta, cfg, "theta.ckpt"), "theta", *backbone_layout(spec));
  const auto res =
      search_finetune(cfg, spec, data, ArmStart{theta, fresh_head(cfg, c.replicate)}, replicate_seed(cfg.seed, c.replicate));
  write_file(fs::path(cfg.out_dir) / "trials.csv", trials_csv(res));
  std::ostringstream best;
  best << std::setprecision(17) << "finetune.lr = " << res.best.lr << "\nfinetune.weight_decay = " << res.best.weight_decay
       << "\n";
  write_file(fs::path(cfg.out_dir) / "best.cfg", best.str());
  m.put("result.best_trial", std::to_string(res.best.index));
  m.put("status", "complete");
  std::cout << "best trial " << res.best.index << ": " << best.str();
  return 0;
}

int cmd_verify(const Common& c) {
  const auto results = verify::run_all(c.seed.value_or(2024));
  std::cout << verify::format_table(results);
  return verify::all_passed(results) ? 0 : 2;
}

int cmd_export_features(const Common& c) {
  const auto cfg = resolve(c);
  auto m = start_manifest("export-features", cfg);
  const auto spec = cfg.model_spec();
  const auto data = pipeline_data(cfg);
  record_data(m, data);
  const auto theta = load_input(m, input_path(c.theta, cfg, "theta.ckpt"), "theta", *backbone_layout(spec));
  const fs::path out = cfg.out_dir;
  for (const auto& [name, set] : {std::pair<const char*, const LabeledSet*>{"train", &data.train},
                                  {"val", &data.val},
                                  {"test", &data.test}}) {
    const Tensor f = forward_backbone(theta, set->x, spec);
    std::string text = to_csv(f, &set->labels);
    // feature columns are named f_j
    std::string header;
    for (std::size_t j = 0; j < f.cols(); ++j) header += (j ? ",f_" : "f_") + std::to_string(j);
    text = header + ",label" + text.substr(text.find('\n'));
    write_file(out / (std::string("features_") + name + ".csv"), text);
  }
  m.put("status", "complete");
  std::cout << "wrote features for " << data.train.size() + data.val.size() + data.test.size() << " samples\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Bilevel self-supervised training: stages, pipelines, and verification"};
  app.require_subcommand(1);
  Common c;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", c.config, "config file, or 'default' for the built-in settings");
    sub->add_option("--set", c.sets, "override, key=value (repeatable)")->allow_extra_args(false);
    sub->add_option("--seed", c.seed, "root seed");
    sub->add_option("--seeds", c.seeds, "number of replicate seeds");
    sub->add_option("--out", c.out, "output directory");
  };
  auto add_theta = [&](CLI::App* sub) {
    sub->add_option("--theta", c.theta, "backbone checkpoint (default <out>/theta.ckpt)");
    sub->add_option("--replicate", c.replicate, "replicate index for seeded streams")->check(CLI::NonNegativeNumber);
  };

  std::vector<std::pair<CLI::App*, std::function<int()>>> commands;
  auto reg = [&](const char* name, const char* help, std::function<int()> fn) {
    auto* sub = app.add_subcommand(name, help);
    add_common(sub);
    commands.emplace_back(sub, std::move(fn));
    return sub;
  };
  reg("gen-data", "generate the synthetic datasets and export them as CSV", [&] { return cmd_gen_data(c); });
  reg("pretrain", "contrastive pretraining of backbone and pretext head", [&] { return cmd_pretrain(c); });
  add_theta(reg("warmup", "fit the downstream head on the frozen backbone", [&] { return cmd_warmup(c); }));
  auto* bissl_cmd = reg("bissl", "bilevel training stage", [&] { return cmd_bissl(c); });
  add_theta(bissl_cmd);
  bissl_cmd->add_option("--phi-p", c.phi_p, "pretext head checkpoint (default <out>/phi_p.ckpt)");
  bissl_cmd->add_option("--head", c.head, "downstream head checkpoint (default <out>/warmup_head.ckpt)");
  bissl_cmd->add_flag("--resume", c.resume, "continue from <out>/bissl_state.ckpt");
  bissl_cmd->add_option("--stop-after", c.stop_after, "stop once this many alternations are complete")
      ->check(CLI::NonNegativeNumber);
  add_theta(reg("finetune", "fine-tune backbone and a fresh head", [&] { return cmd_finetune(c); }));
  reg("pipeline", "pretrain once, then run every arm over all seeds", [&] { return cmd_pipeline(c, "pipeline", false); });
  add_theta(reg("sweep", "random search over fine-tuning lr and weight decay", [&] { return cmd_sweep(c); }));
  reg("ablate", "run the ablation arms", [&] { return cmd_pipeline(c, "ablate", true); });
  reg("verify", "run the oracle suite", [&] { return cmd_verify(c); });
  add_theta(reg("export-features", "write backbone features of the labeled splits", [&] { return cmd_export_features(c); }));

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return 1;
  }

  try {
    for (auto& [sub, fn] : commands)
      if (sub->parsed()) return fn();
  } catch (const NumericalError& e) {
    std::cerr << "numerical abort: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
