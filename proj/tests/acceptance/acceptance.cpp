// Acceptance gate: one PASS/FAIL line per criterion, exit 0 only if all pass.
// Usage: acceptance [criterion numbers...]   (default: all twelve)

#include <sys/wait.h>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <iostream>
#include <set>
#include <sstream>

#include "bissl/bissl.hpp"

using namespace bissl;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(double v, int precision = 3) {
  std::ostringstream os;
  os << std::setprecision(precision) << v;
  return os.str();
}

/// Folds oracle checks into one outcome under a wall-clock limit.
Outcome from_checks(const std::vector<verify::CheckResult>& rs, double limit_s) {
  Outcome o{true, ""};
  double total = 0.0;
  for (const auto& r : rs) {
    o.pass = o.pass && r.pass;
    total += r.seconds;
    if (!o.detail.empty()) o.detail += "; ";
    o.detail += r.name + " " + fmt(r.value) + " <= " + fmt(r.tolerance) + (r.pass ? "" : " (FAIL)");
  }
  if (limit_s > 0.0) {
    o.pass = o.pass && total < limit_s;
    o.detail += "; runtime " + fmt(total) + " s (limit " + fmt(limit_s) + " s)";
  }
  return o;
}

std::string config_path(const char* name) { return std::string(BISSL_SOURCE_DIR) + "/configs/" + name; }

int run_cli(const std::string& args) {
  const int status = std::system((std::string(BISSL_CLI_PATH) + " " + args + " > /dev/null 2>&1").c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

/// Every CSV and checkpoint under `dir`, keyed by relative path, with content hashes.
std::map<std::string, std::string> artifact_hashes(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    const auto ext = e.path().extension().string();
    if (ext == ".csv" || ext == ".ckpt") out[fs::relative(e.path(), dir).string()] = file_hash(e.path());
  }
  return out;
}

Outcome determinism() {
  const auto root = fs::temp_directory_path() / "bissl_acceptance_determinism";
  fs::remove_all(root);
  std::map<std::string, std::string> runs[2];
  for (int i = 0; i < 2; ++i) {
    const auto dir = root / ("run_" + std::to_string(i));
    if (const int code = run_cli("pipeline --config " + config_path("smoke.cfg") + " --out " + dir.string()); code != 0)
      return {false, "pipeline exited " + std::to_string(code)};
    runs[i] = artifact_hashes(dir);
  }
  std::size_t finals = 0;
  for (const auto& [path, _] : runs[0]) finals += path.ends_with("final.ckpt");
  Outcome o{runs[0] == runs[1] && finals > 0, ""};
  o.detail = std::to_string(runs[0].size()) + " CSV/checkpoint files compared, " + std::to_string(finals) +
             " final checkpoints, " + (runs[0] == runs[1] ? "all bit-identical" : "MISMATCH");
  fs::remove_all(root);
  return o;
}

const ArmSummary& find_arm(const PipelineReport& rep, const std::string& name) {
  for (const auto& s : rep.summary)
    if (s.arm == name) return s;
  throw ConfigError("arm '" + name + "' missing from report");
}

Outcome end_to_end() {
  const auto t0 = std::chrono::steady_clock::now();
  auto cfg = load_config(config_path("default.cfg"), {});
  cfg.arms = {"ft_only", "bissl"};
  cfg.seeds = 5;
  cfg.out_dir = (fs::temp_directory_path() / "bissl_acceptance_end_to_end").string();
  fs::remove_all(cfg.out_dir);
  const auto rep = run_pipeline(cfg, "pipeline", &std::cerr);
  const double secs = seconds_since(t0);
  std::cerr << rep.table;
  const auto& ft = find_arm(rep, "ft_only");
  const auto& bi = find_arm(rep, "bissl");
  const double gain = bi.mean_acc - ft.mean_acc;
  Outcome o{gain >= 0.0 && secs <= 1800.0, ""};
  o.detail = "bissl " + fmt(bi.mean_acc, 4) + "% vs ft_only " + fmt(ft.mean_acc, 4) + "% over 5 seeds, gain " +
             fmt(gain, 3) + " points (gate >= 0; 1-point target " + (gain >= 1.0 ? "met" : "not met") +
             "), runtime " + fmt(secs / 60.0, 3) + " min (limit 30)";
  return o;
}

Outcome ablation() {
  const auto dir = fs::temp_directory_path() / "bissl_acceptance_ablate";
  fs::remove_all(dir);
  auto cfg = load_config(config_path("ablate.cfg"), {"run.out_dir=" + dir.string()});
  cfg.arms = ablation_arms();
  const auto rep = run_pipeline(cfg, "ablate", &std::cerr);
  std::cerr << rep.table;
  const bool table = fs::exists(dir / "comparison.txt") && rep.summary.size() == 4;
  bool complete = table;
  for (const auto& s : rep.summary) complete = complete && s.n == static_cast<std::size_t>(cfg.seeds);
  const auto& def = find_arm(rep, "default");
  const auto& dis = find_arm(rep, "discard_ij");
  Outcome o{complete, ""};
  o.detail = "4 arms x " + std::to_string(cfg.seeds) + " seeds complete; default " + fmt(def.mean_acc, 4) +
             "% vs discard_ij " + fmt(dis.mean_acc, 4) + "% (default >= discard_ij " +
             (def.mean_acc >= dis.mean_acc ? "holds" : "does not hold") + ", reported only); nu1_same_T " +
             fmt(find_arm(rep, "nu1_same_T").mean_acc, 4) + "%, nu1_matched " +
             fmt(find_arm(rep, "nu1_matched").mean_acc, 4) + "%";
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  constexpr std::uint64_t seed = 2024;
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"gradient/HVP oracle suite", [] { return from_checks(verify::check_derivatives(seed), 60.0); }},
      {"CG exactness", [] { return from_checks({verify::check_cg_exactness(seed + 1)}, 10.0); }},
      {"implicit-Jacobian equivalence", [] { return from_checks({verify::check_ij_equivalence(seed + 2)}, 30.0); }},
      {"upper-gradient equivalence", [] { return from_checks({verify::check_upper_equivalence(seed + 3)}, 30.0); }},
      {"lambda-limit behavior", [] { return from_checks(verify::check_lambda_limits(seed + 4), 0.0); }},
      {"stationarity construction", [] { return from_checks(verify::check_stationary_pair(seed + 5), 0.0); }},
      {"hand-unrolled alternation", [] { return from_checks({verify::check_hand_unroll()}, 0.0); }},
      {"pipeline determinism", determinism},
      {"directional end-to-end", end_to_end},
      {"ablation structure", ablation},
      {"batch-stack arithmetic", [] { return from_checks({verify::check_batch_stack()}, 0.0); }},
      {"clipping contract", [] { return from_checks(verify::check_clipping(seed + 6), 0.0); }},
  };

  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));

  bool all = true;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && !only.count(id)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    all = all && o.pass;
    std::cout << "criterion " << std::setw(2) << id << " " << (o.pass ? "PASS" : "FAIL") << "  " << criteria[i].first
              << ": " << o.detail << std::endl;
  }
  return all ? 0 : 1;
}
