#pragma once

// SFT negative log-likelihood, the DPO preference loss against a frozen
// reference, their weighted combination, and a central-difference gradient
// checker. All gradients are with respect to the policy logit table only.

#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "kaft/detail/rng.hpp"
#include "kaft/lm_core.hpp"

namespace kaft {

struct LossConfig {
  double dpo_beta = 0.1;
  double sft_weight = 0.2;  // gamma

  void validate() const {
    if (!(dpo_beta > 0.0)) throw ConfigError("dpo_beta must be > 0");
    if (!(sft_weight >= 0.0)) throw ConfigError("sft_weight must be >= 0");
  }
};

struct SftExample {
  TokenSequence prompt;
  TokenSequence target;
};

struct PreferenceExample {
  TokenSequence prompt;
  TokenSequence chosen;    // a_w
  TokenSequence rejected;  // a_l
};

struct LossResult {
  double value = 0.0;
  LogitTable gradient;
};

struct DpoResult {
  double value = 0.0;
  LogitTable gradient;
  // Per-pair (policy - reference) log-ratio of the chosen answer minus that of
  // the rejected answer.
  std::vector<double> margins;

  double mean_margin() const {
    double s = 0.0;
    for (double m : margins) s += m;
    return margins.empty() ? 0.0 : s / static_cast<double>(margins.size());
  }
};

// log(1 + e^x) without overflow.
inline double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// -log sigmoid(x)
inline double neg_log_sigmoid(double x) { return softplus(-x); }

// Mean over the batch of the summed token NLL of each target.
inline LossResult sft_loss(const LMParameters& params, std::span<const SftExample> batch) {
  if (batch.empty()) throw Error("sft_loss needs a non-empty batch");
  LossResult r{0.0, LogitTable::zeros_like(params.table)};
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  for (const auto& ex : batch) {
    r.value -= inv_b * accumulate_cond_logprob(params, ex.prompt, ex.target, -inv_b, &r.gradient);
  }
  return r;
}

// Per-pair margin Delta = [log pi(w) - log ref(w)] - [log pi(l) - log ref(l)];
// value = mean of -log sigmoid(beta * Delta).
inline DpoResult dpo_loss(const LMParameters& policy, const FrozenModel& reference,
                          std::span<const PreferenceExample> batch, const LossConfig& cfg) {
  cfg.validate();
  if (batch.empty()) throw Error("dpo_loss needs a non-empty batch");
  const auto& ref = reference.params();
  if (!(ref.vocab == policy.vocab) || ref.order() != policy.order()) {
    throw Error("policy and reference must share vocabulary and context order");
  }
  DpoResult r{0.0, LogitTable::zeros_like(policy.table), {}};
  r.margins.reserve(batch.size());
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  for (const auto& ex : batch) {
    const double pw = cond_logprob(policy, ex.prompt, ex.chosen);
    const double pl = cond_logprob(policy, ex.prompt, ex.rejected);
    const double rw = cond_logprob(ref, ex.prompt, ex.chosen);
    const double rl = cond_logprob(ref, ex.prompt, ex.rejected);
    const double margin = (pw - rw) - (pl - rl);
    r.margins.push_back(margin);
    const double z = cfg.dpo_beta * margin;
    r.value += inv_b * neg_log_sigmoid(z);
    // d/dmargin of -log sigmoid(beta * margin) = -beta * sigmoid(-beta * margin)
    const double coef = -inv_b * cfg.dpo_beta * sigmoid(-z);
    // Loss gradient = coef * (grad log pi(w) - grad log pi(l)).
    accumulate_cond_logprob(policy, ex.prompt, ex.chosen, coef, &r.gradient);
    accumulate_cond_logprob(policy, ex.prompt, ex.rejected, -coef, &r.gradient);
  }
  return r;
}

inline void add_scaled(LogitTable& into, const LogitTable& from, double scale) {
  for (std::size_t v = 0; v < into.fallback.size(); ++v) into.fallback[v] += scale * from.fallback[v];
  for (const auto& [key, row] : from.rows) {
    auto& dst = into.mutable_row(key);
    for (std::size_t v = 0; v < row.size(); ++v) dst[v] += scale * row[v];
  }
}

// DPO loss plus sft_weight times the SFT loss on the chosen answers.
inline DpoResult combined_kc_loss(const LMParameters& policy, const FrozenModel& reference,
                                  std::span<const PreferenceExample> batch, const LossConfig& cfg) {
  DpoResult r = dpo_loss(policy, reference, batch, cfg);
  if (cfg.sft_weight == 0.0) return r;
  std::vector<SftExample> winners;
  winners.reserve(batch.size());
  for (const auto& ex : batch) winners.push_back({ex.prompt, ex.chosen});
  const LossResult sft = sft_loss(policy, winners);
  r.value += cfg.sft_weight * sft.value;
  add_scaled(r.gradient, sft.gradient, cfg.sft_weight);
  return r;
}

// ---------------------------------------------------------------------------
// Finite-difference gradient check

struct Coordinate {
  std::optional<ContextKey> context;  // nullopt: the fallback row
  std::size_t index = 0;

  bool operator==(const Coordinate&) const = default;

  std::string describe() const {
    return (context ? "row " + std::to_string(*context) : std::string("fallback")) + "[" +
           std::to_string(index) + "]";
  }
};

struct FdOptions {
  double step = 1e-5;
  double tolerance = 1e-5;  // on the relative error
  // Below this magnitude the relative error is taken against abs_floor instead
  // of the gradient itself.
  double abs_floor = 1e-3;
  std::size_t max_coordinates = 100;  // 0: every candidate
  std::uint64_t seed = 0;
};

struct FdReport {
  std::size_t checked = 0;
  double max_abs_error = 0.0;
  double max_rel_error = 0.0;
  Coordinate worst;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
  bool passed = true;
};

using LossFn = std::function<LossResult(const LMParameters&)>;

inline double& coordinate_ref(LogitTable& t, const Coordinate& c) {
  return c.context ? t.rows.at(*c.context).at(c.index) : t.fallback.at(c.index);
}

inline double coordinate_value(const LogitTable& t, const Coordinate& c) {
  if (!c.context) return t.fallback.at(c.index);
  auto it = t.rows.find(*c.context);
  return it == t.rows.end() ? 0.0 : it->second.at(c.index);
}

// Candidate coordinates: every entry of each parameter row the analytic
// gradient touches. Rows the loss never reads have an exactly-zero central
// difference and carry no information.
inline std::vector<Coordinate> touched_coordinates(const LMParameters& params, const LogitTable& grad) {
  std::vector<Coordinate> out;
  const std::size_t v = params.vocab_size();
  const bool fallback_used =
      std::any_of(grad.fallback.begin(), grad.fallback.end(), [](double x) { return x != 0.0; });
  if (fallback_used) {
    for (std::size_t i = 0; i < v; ++i) out.push_back({std::nullopt, i});
  }
  for (const auto& [key, _] : grad.rows) {
    if (!params.table.has_row(key)) continue;
    for (std::size_t i = 0; i < v; ++i) out.push_back({key, i});
  }
  return out;
}

// Compares the analytic gradient of `loss` at `params` with central
// differences. A tolerance miss is reported, not thrown.
inline FdReport finite_diff_check(const LossFn& loss, const LMParameters& params, const FdOptions& opt = {},
                                  std::optional<std::vector<Coordinate>> coordinates = std::nullopt) {
  if (!(opt.step > 0.0)) throw Error("finite-difference step must be > 0");
  const LossResult analytic = loss(params);
  std::vector<Coordinate> coords = coordinates ? *coordinates : touched_coordinates(params, analytic.gradient);
  if (!coordinates && opt.max_coordinates && coords.size() > opt.max_coordinates) {
    detail::Rng rng(opt.seed, "fd-sample");
    rng.shuffle(coords);
    coords.resize(opt.max_coordinates);
  }
  FdReport rep;
  LMParameters probe = params;
  for (const auto& c : coords) {
    double& x = coordinate_ref(probe.table, c);
    const double saved = x;
    x = saved + opt.step;
    const double plus = loss(probe).value;
    x = saved - opt.step;
    const double minus = loss(probe).value;
    x = saved;
    const double numeric = (plus - minus) / (2.0 * opt.step);
    const double a = coordinate_value(analytic.gradient, c);
    const double abs_err = std::abs(a - numeric);
    const double rel_err = abs_err / std::max({std::abs(a), std::abs(numeric), opt.abs_floor});
    ++rep.checked;
    rep.max_abs_error = std::max(rep.max_abs_error, abs_err);
    if (rel_err > rep.max_rel_error || rep.checked == 1) {
      rep.max_rel_error = std::max(rep.max_rel_error, rel_err);
      rep.worst = c;
      rep.analytic_at_worst = a;
      rep.numeric_at_worst = numeric;
    }
  }
  rep.passed = rep.max_rel_error <= opt.tolerance;
  return rep;
}

}  // namespace kaft
