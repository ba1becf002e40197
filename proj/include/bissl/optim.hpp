#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "bissl/errors.hpp"
#include "bissl/params.hpp"

namespace bissl {

enum class OptimizerKind { sgd, lars };
enum class ScheduleKind { cosine, constant };

inline OptimizerKind parse_optimizer(const std::string& s) {
  if (s == "sgd") return OptimizerKind::sgd;
  if (s == "lars") return OptimizerKind::lars;
  throw ConfigError("unknown optimizer '" + s + "' (expected sgd or lars)");
}
inline std::string to_string(OptimizerKind k) { return k == OptimizerKind::sgd ? "sgd" : "lars"; }

inline ScheduleKind parse_schedule(const std::string& s) {
  if (s == "cosine") return ScheduleKind::cosine;
  if (s == "constant") return ScheduleKind::constant;
  throw ConfigError("unknown schedule '" + s + "' (expected cosine or constant)");
}
inline std::string to_string(ScheduleKind k) { return k == ScheduleKind::cosine ? "cosine" : "constant"; }

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::sgd;
  double base_lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 0.0;
  double trust_coefficient = 0.001;  // LARS only
  ScheduleKind schedule = ScheduleKind::cosine;
  long warmup_steps = 0;

  void validate(const std::string& who) const {
    if (!(base_lr >= 0.0)) throw ConfigError(who + ": base_lr must be non-negative");
    if (momentum < 0.0 || momentum >= 1.0) throw ConfigError(who + ": momentum must lie in [0, 1)");
    if (weight_decay < 0.0) throw ConfigError(who + ": weight_decay must be non-negative");
    if (!(trust_coefficient > 0.0)) throw ConfigError(who + ": trust_coefficient must be positive");
    if (warmup_steps < 0) throw ConfigError(who + ": warmup_steps must be non-negative");
  }
};

/// Linear ramp from 0 to base_lr over `warmup_steps`, then half-cosine decay to
/// 0 at `total_steps`. Steps past the end stay at 0.
inline double cosine_schedule(long step, long total_steps, double base_lr, long warmup_steps) {
  if (step < 0) throw ConfigError("cosine_schedule: negative step");
  if (warmup_steps > 0 && step < warmup_steps) {
    return base_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
  }
  const long span = total_steps - warmup_steps;
  if (span <= 0) return step >= total_steps ? 0.0 : base_lr;
  const double progress = std::min(1.0, static_cast<double>(step - warmup_steps) / static_cast<double>(span));
  return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

inline double scheduled_lr(const OptimizerConfig& cfg, long step, long total_steps) {
  if (cfg.schedule == ScheduleKind::constant) return cfg.base_lr;
  return cosine_schedule(step, total_steps, cfg.base_lr, cfg.warmup_steps);
}

/// m <- mu m + (g + wd p);  p <- p - lr m
inline void sgd_momentum_step(ParamVector& p, const ParamVector& g, ParamVector& m, double lr, double momentum,
                              double weight_decay) {
  p.require_same_layout(g, "sgd_momentum_step");
  p.require_same_layout(m, "sgd_momentum_step");
  auto& pv = p.values();
  auto& mv = m.values();
  const auto& gv = g.values();
  for (std::size_t i = 0; i < pv.size(); ++i) {
    mv[i] = momentum * mv[i] + (gv[i] + weight_decay * pv[i]);
    pv[i] -= lr * mv[i];
  }
}

/// Per-segment trust ratio: trust * ||p_s|| / ||g_s + wd p_s|| when both norms
/// are positive, otherwise 1.
inline double lars_local_lr(std::span<const double> p, std::span<const double> g, double weight_decay,
                            double trust_coefficient) {
  double pn = 0.0, dn = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double d = g[i] + weight_decay * p[i];
    pn += p[i] * p[i];
    dn += d * d;
  }
  if (pn > 0.0 && dn > 0.0) return trust_coefficient * std::sqrt(pn) / std::sqrt(dn);
  return 1.0;
}

/// LARS: each segment's decayed gradient is scaled by its trust ratio, then
/// m <- mu m + local * (g + wd p);  p <- p - lr m.
inline void lars_step(ParamVector& p, const ParamVector& g, ParamVector& m, double lr, double momentum,
                      double weight_decay, double trust_coefficient) {
  p.require_same_layout(g, "lars_step");
  p.require_same_layout(m, "lars_step");
  for (std::size_t s = 0; s < p.layout().num_segments(); ++s) {
    auto ps = p.segment(s);
    auto gs = g.segment(s);
    auto ms = m.segment(s);
    const double local = lars_local_lr(ps, gs, weight_decay, trust_coefficient);
    for (std::size_t i = 0; i < ps.size(); ++i) {
      ms[i] = momentum * ms[i] + local * (gs[i] + weight_decay * ps[i]);
      ps[i] -= lr * ms[i];
    }
  }
}

inline void optimizer_step(const OptimizerConfig& cfg, ParamVector& p, const ParamVector& g, ParamVector& m,
                           double lr) {
  if (cfg.kind == OptimizerKind::lars) lars_step(p, g, m, lr, cfg.momentum, cfg.weight_decay, cfg.trust_coefficient);
  else sgd_momentum_step(p, g, m, lr, cfg.momentum, cfg.weight_decay);
}

}  // namespace bissl
