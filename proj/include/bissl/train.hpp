#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <fstream>
#include <functional>
#include <iomanip>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "bissl/batch_stack.hpp"
#include "bissl/checkpoint.hpp"
#include "bissl/errors.hpp"
#include "bissl/hypergrad.hpp"
#include "bissl/objective.hpp"
#include "bissl/optim.hpp"
#include "bissl/rng.hpp"

namespace bissl {

struct BiSSLConfig {
  double lambda = 0.001;
  int lower_steps = 20;  // per alternation
  int upper_steps = 8;   // per alternation
  int alternations = 500;
  CGConfig cg;
  double clip_threshold = 10.0;
  OptimizerConfig lower{OptimizerKind::lars, 0.1, 0.9, 1e-6, 0.001, ScheduleKind::cosine, 0};
  OptimizerConfig upper{OptimizerKind::sgd, 0.01, 0.9, 1e-4, 0.001, ScheduleKind::cosine, 0};
  int lower_warmup_alternations = 10;  // lower warm-up spans this many alternations' worth of steps
  bool discard_ij = false;
  std::size_t pretext_batch = 64;
  std::size_t downstream_batch = 64;
  double temperature = 0.5;
  bool wall_clock = true;  // false writes wall_ms = 0 so metrics files are byte-reproducible

  void validate() const {
    if (!(lambda > 0.0)) throw ConfigError("bissl: lambda must be positive");
    if (lower_steps < 1 || upper_steps < 1) throw ConfigError("bissl: N_L and N_U must be >= 1");
    if (alternations < 0) throw ConfigError("bissl: T must be >= 0");
    if (!(clip_threshold > 0.0)) throw ConfigError("bissl: clip threshold must be positive");
    if (lower_warmup_alternations < 0) throw ConfigError("bissl: warm-up alternations must be >= 0");
    if (!(temperature > 0.0)) throw ConfigError("bissl: temperature must be positive");
    cg.validate();
    lower.validate("bissl.lower");
    upper.validate("bissl.upper");
  }

  long lower_total() const { return static_cast<long>(alternations) * lower_steps; }
  long upper_total() const { return static_cast<long>(alternations) * upper_steps; }
  OptimizerConfig lower_schedule() const {
    OptimizerConfig c = lower;
    c.warmup_steps = static_cast<long>(lower_warmup_alternations) * lower_steps;
    return c;
  }
};

/// Everything needed to resume training bit-exactly.
struct TrainState {
  ParamVector theta_p, theta_d, phi_p, phi_d;
  ParamVector m_theta_p, m_theta_d, m_phi_p, m_phi_d;
  long lower_steps = 0;
  long upper_steps = 0;
  long alternation = 0;
  std::string stage = "bissl";
  Rng augment_rng;
  BatchStack lower_stack;
  BatchStack upper_stack;

  /// theta_P = theta_D = theta; zero momentum.
  static TrainState start(const ParamVector& theta, const ParamVector& phi_p, const ParamVector& phi_d,
                          BatchStack lower_stack, BatchStack upper_stack, Rng augment_rng) {
    TrainState s;
    s.theta_p = theta;
    s.theta_d = theta;
    s.phi_p = phi_p;
    s.phi_d = phi_d;
    s.m_theta_p = ParamVector::zeros_like(theta);
    s.m_theta_d = ParamVector::zeros_like(theta);
    s.m_phi_p = ParamVector::zeros_like(phi_p);
    s.m_phi_d = ParamVector::zeros_like(phi_d);
    s.lower_stack = std::move(lower_stack);
    s.upper_stack = std::move(upper_stack);
    s.augment_rng = std::move(augment_rng);
    return s;
  }

  Checkpoint to_checkpoint() const {
    Checkpoint ck;
    ck.vectors = {{"theta_p", theta_p}, {"theta_d", theta_d},     {"phi_p", phi_p},     {"phi_d", phi_d},
                  {"m_theta_p", m_theta_p}, {"m_theta_d", m_theta_d}, {"m_phi_p", m_phi_p}, {"m_phi_d", m_phi_d}};
    ck.ints = {{"lower_steps", lower_steps}, {"upper_steps", upper_steps}, {"alternation", alternation}};
    ck.strings = {{"stage", stage},
                  {"augment_rng", augment_rng.state()},
                  {"lower_stack", lower_stack.state()},
                  {"upper_stack", upper_stack.state()}};
    return ck;
  }

  static TrainState from_checkpoint(const Checkpoint& ck) {
    TrainState s;
    s.theta_p = ck.vector("theta_p");
    s.theta_d = ck.vector("theta_d");
    s.phi_p = ck.vector("phi_p");
    s.phi_d = ck.vector("phi_d");
    s.m_theta_p = ck.vector("m_theta_p");
    s.m_theta_d = ck.vector("m_theta_d");
    s.m_phi_p = ck.vector("m_phi_p");
    s.m_phi_d = ck.vector("m_phi_d");
    s.lower_steps = ck.integer("lower_steps");
    s.upper_steps = ck.integer("upper_steps");
    s.alternation = ck.integer("alternation");
    s.stage = ck.string("stage");
    s.augment_rng.set_state(ck.string("augment_rng"));
    s.lower_stack = BatchStack::from_state(ck.string("lower_stack"));
    s.upper_stack = BatchStack::from_state(ck.string("upper_stack"));
    return s;
  }
};

/// Batch-bound objectives for one bilevel problem. The pretext factory may draw
/// augmentations from the supplied generator.
struct BilevelProblem {
  std::function<Objective(const std::vector<std::size_t>& indices, Rng& augment)> pretext;
  std::function<Objective(const std::vector<std::size_t>& indices)> downstream;
};

struct MetricRecord {
  long step = 0;  // 1-based across both phases
  long alternation = 0;
  std::string phase;
  double loss = 0.0;
  double grad_norm_pre_clip = 0.0;
  double lr = 0.0;
  double cg_initial_residual = 0.0;
  double cg_final_residual = 0.0;
  bool cg_fell_back = false;
  double coupling_term = 0.0;
  double wall_ms = 0.0;
};

inline constexpr const char* kMetricsHeader =
    "step,alternation,phase,loss,grad_norm_pre_clip,lr,cg_initial_residual,cg_final_residual,cg_fell_back,"
    "coupling_term,wall_ms";

inline std::string format_metric(const MetricRecord& r) {
  std::ostringstream os;
  os << std::setprecision(17) << r.step << ',' << r.alternation << ',' << r.phase << ',' << r.loss << ','
     << r.grad_norm_pre_clip << ',' << r.lr << ',' << r.cg_initial_residual << ',' << r.cg_final_residual << ','
     << (r.cg_fell_back ? 1 : 0) << ',' << r.coupling_term << ',' << std::setprecision(6) << r.wall_ms;
  return os.str();
}

/// Appends CSV rows, flushing each one.
class MetricsWriter {
 public:
  explicit MetricsWriter(const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    out_.open(path, std::ios::trunc);
    if (!out_) throw ConfigError("cannot write metrics to '" + path.string() + "'");
    out_ << kMetricsHeader << '\n' << std::flush;
  }
  void operator()(const MetricRecord& r) { out_ << format_metric(r) << '\n' << std::flush; }

 private:
  std::ofstream out_;
};

struct BiSSLCallbacks {
  std::function<void(const MetricRecord&)> on_metric;
  std::function<void(const TrainState&)> on_alternation;  // after each completed alternation
  std::function<void(const TrainState&)> on_abort;        // before a numerical error propagates
};

namespace detail {
inline double joint_norm(const ParamVector& a, const ParamVector& b) {
  const double na = norm(a), nb = norm(b);
  return std::sqrt(na * na + nb * nb);
}
}  // namespace detail

/// Alternating bilevel training. Each alternation takes N_L lower steps on
/// (theta_P, phi_P) followed by N_U upper steps on (theta_D, phi_D). Upper steps
/// reuse the alternation's last pretext batch for Hessian products and draw a
/// fresh downstream batch per step. All four gradients are clipped before the
/// optimizer sees them. Returns theta_P.
///
/// `stop_after` (if non-negative) halts once that many alternations are done,
/// without changing the schedules, so a run can be split across checkpoints.
inline ParamVector bissl_run(const BiSSLConfig& cfg, TrainState& state, const BilevelProblem& problem,
                             const BiSSLCallbacks& cb = {}, long stop_after = -1) {
  cfg.validate();
  const auto lower_opt = cfg.lower_schedule();
  const auto& upper_opt = cfg.upper;
  using clock = std::chrono::steady_clock;

  auto emit = [&](MetricRecord r, clock::time_point t0) {
    r.step = state.lower_steps + state.upper_steps;
    r.alternation = state.alternation + 1;
    r.wall_ms = cfg.wall_clock ? std::chrono::duration<double, std::milli>(clock::now() - t0).count() : 0.0;
    if (cb.on_metric) cb.on_metric(r);
  };

  try {
    const long end = stop_after < 0 ? cfg.alternations : std::min<long>(stop_after, cfg.alternations);
    while (state.alternation < end) {
      std::optional<Objective> last_pretext;
      for (const auto& idx : state.lower_stack.next(static_cast<std::size_t>(cfg.lower_steps))) {
        const auto t0 = clock::now();
        last_pretext.emplace(problem.pretext(idx, state.augment_rng));
        auto g = lower_gradients(*last_pretext, state.theta_p, state.phi_p, state.theta_d, cfg.lambda);
        MetricRecord r;
        r.phase = "lower";
        r.loss = g.loss;
        r.coupling_term = g.coupling;
        r.grad_norm_pre_clip = detail::joint_norm(g.theta, g.phi);
        r.lr = scheduled_lr(lower_opt, state.lower_steps, cfg.lower_total());
        optimizer_step(lower_opt, state.theta_p, clip_by_norm(std::move(g.theta), cfg.clip_threshold), state.m_theta_p,
                       r.lr);
        optimizer_step(lower_opt, state.phi_p, clip_by_norm(std::move(g.phi), cfg.clip_threshold), state.m_phi_p,
                       r.lr);
        ++state.lower_steps;
        emit(r, t0);
      }

      for (const auto& idx : state.upper_stack.next(static_cast<std::size_t>(cfg.upper_steps))) {
        const auto t0 = clock::now();
        auto down = problem.downstream(idx);
        auto g = upper_gradients(*last_pretext, down, state.theta_p, state.theta_d, state.phi_p, state.phi_d,
                                 cfg.lambda, cfg.cg, cfg.discard_ij);
        MetricRecord r;
        r.phase = "upper";
        r.loss = g.loss;
        r.coupling_term = cfg.lambda * l2_coupling(state.theta_p, state.theta_d);
        r.grad_norm_pre_clip = detail::joint_norm(g.theta, g.phi);
        r.lr = scheduled_lr(upper_opt, state.upper_steps, cfg.upper_total());
        r.cg_initial_residual = g.report.cg_initial_residual;
        r.cg_final_residual = g.report.cg_final_residual;
        r.cg_fell_back = g.report.fell_back;
        optimizer_step(upper_opt, state.theta_d, clip_by_norm(std::move(g.theta), cfg.clip_threshold), state.m_theta_d,
                       r.lr);
        optimizer_step(upper_opt, state.phi_d, clip_by_norm(std::move(g.phi), cfg.clip_threshold), state.m_phi_d,
                       r.lr);
        ++state.upper_steps;
        emit(r, t0);
      }

      ++state.alternation;
      if (cb.on_alternation) cb.on_alternation(state);
    }
  } catch (const NumericalError&) {
    if (cb.on_abort) cb.on_abort(state);
    throw;
  }
  return state.theta_p;
}

}  // namespace bissl
