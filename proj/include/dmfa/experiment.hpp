#pragma once

// Deep-versus-shallow comparison runs on a train/valid/test split.
//
// Arms:
//   MFA-1     first-layer MFA fit by EM
//   MFA-2     MFA-1 with a greedily stacked second layer
//   MFA-3     MFA-2 with a third layer (optional)
//   Shallow1  MFA-1 with a freshly initialised second layer (children near
//             the N(0, I) prior), collapsed, then trained further by EM with
//             early stopping on validation LL
//   Shallow2  MFA with as many components as the collapsed MFA-2 and d1
//             factors, fit from random initialisation; best of R restarts
//             by validation LL

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "dmfa/dataset.hpp"
#include "dmfa/deep.hpp"
#include "dmfa/em.hpp"
#include "dmfa/evaluation.hpp"
#include "dmfa/matrix_io.hpp"
#include "dmfa/model.hpp"

namespace dmfa {

struct ExperimentConfig {
  int components = 4;  // C
  int factors = 8;     // d1
  int children = 5;    // K per first-layer component
  int child_factors = 2;
  bool third_layer = false;
  int grandchildren = 3;
  int grandchild_factors = 1;
  bool run_shallow1 = true;
  bool run_shallow2 = true;
  int restarts = 5;
  int early_stop_patience = 3;
  int shallow_max_iters = 100;
  EmConfig em;  // max_iters, rel_tol, floor; components/factors/seed set per arm
  std::uint64_t seed = 0;
  unsigned threads = 1;
};

struct ArmResult {
  std::string name;
  bool ok = false;
  std::string error;
  EvalReport test;
  double valid_ll = 0.0;
  double train_ll = 0.0;
  std::int64_t parameters = 0;
  TrainingTrace trace;  // EM trace where the arm has a single one
};

struct PairedDiff {
  bool available = false;
  double mean = 0.0;
  double std_error = 0.0;
};

/// Mean and standard error of per-row differences a - b.
inline PairedDiff paired_difference(const Vector& a, const Vector& b) {
  if (a.size() != b.size() || a.size() == 0) return {};
  const Vector diff = a - b;
  return {true, diff.mean(), standard_error(diff)};
}

struct ComparisonReport {
  std::vector<ArmResult> arms;
  PairedDiff diff2;  // MFA-2 minus MFA-1 on test rows
  PairedDiff diff3;  // MFA-3 minus MFA-2
  DmfaNodePtr mfa1;
  DmfaNodePtr mfa2;
  DmfaNodePtr mfa3;

  const ArmResult* arm(const std::string& name) const {
    for (const auto& a : arms)
      if (a.name == name) return &a;
    return nullptr;
  }
  bool all_ok() const {
    for (const auto& a : arms)
      if (!a.ok) return false;
    return true;
  }
  bool any_ok() const {
    for (const auto& a : arms)
      if (a.ok) return true;
    return false;
  }
};

namespace detail {

template <class Model>
void score_arm(ArmResult& arm, const Model& model, const Split& split, unsigned threads) {
  EvalOptions opts;
  opts.threads = threads;
  arm.test = evaluate(model, split.test, opts);
  arm.valid_ll = evaluate(model, split.valid, opts).avg_log_likelihood;
  arm.train_ll = evaluate(model, split.train, opts).avg_log_likelihood;
  arm.parameters = arm.test.parameters;
  arm.ok = true;
}

template <class Fn>
void run_arm(ComparisonReport& report, const std::string& name, Fn&& body) {
  ArmResult arm;
  arm.name = name;
  try {
    body(arm);
  } catch (const std::exception& e) {
    arm.ok = false;
    arm.error = e.what();
  }
  report.arms.push_back(std::move(arm));
}

}  // namespace detail

inline StackConfig stack_config_for(const ExperimentConfig& cfg, int k, int factors,
                                    std::uint64_t seed, bool fit) {
  StackConfig sc;
  sc.factors = factors;
  sc.allocation = AllocationPolicy::fixed(k);
  sc.em = cfg.em;
  sc.extract = ExtractMode::sample;
  sc.fit_children = fit;
  sc.seed = seed;
  sc.threads = cfg.threads;
  return sc;
}

inline ComparisonReport run_overfit_experiment(const Split& split, const ExperimentConfig& cfg) {
  ComparisonReport report;
  const std::uint64_t seed = cfg.seed;

  detail::run_arm(report, "MFA-1", [&](ArmResult& arm) {
    EmConfig em = cfg.em;
    em.components = cfg.components;
    em.factors = cfg.factors;
    em.seed = derive_seed(seed, "mfa1");
    em.threads = cfg.threads;
    FitResult fit = fit_mfa(split.train, em, {&split.valid, 0});
    arm.trace = fit.trace;
    report.mfa1 = std::make_shared<const DmfaNode>(std::move(fit.model));
    detail::score_arm(arm, *report.mfa1, split, cfg.threads);
  });
  if (!report.mfa1) return report;

  detail::run_arm(report, "MFA-2", [&](ArmResult& arm) {
    const StackResult st = stack_layer(
        *report.mfa1, split.train,
        stack_config_for(cfg, cfg.children, cfg.child_factors, derive_seed(seed, "mfa2"), true));
    report.mfa2 = st.node;
    detail::score_arm(arm, *report.mfa2, split, cfg.threads);
  });

  if (cfg.third_layer && report.mfa2) {
    detail::run_arm(report, "MFA-3", [&](ArmResult& arm) {
      const StackResult st = stack_layer(
          *report.mfa2, split.train,
          stack_config_for(cfg, cfg.grandchildren, cfg.grandchild_factors,
                           derive_seed(seed, "mfa3"), true));
      report.mfa3 = st.node;
      detail::score_arm(arm, *report.mfa3, split, cfg.threads);
    });
  }

  if (cfg.run_shallow1) {
    detail::run_arm(report, "Shallow1", [&](ArmResult& arm) {
      StackConfig sc =
          stack_config_for(cfg, cfg.children, cfg.child_factors, derive_seed(seed, "shallow1"), false);
      sc.child_init = ChildInit::near_prior;
      const StackResult st = stack_layer(*report.mfa1, split.train, sc);
      MfaModel start = collapse(*st.node);
      EmConfig em = cfg.em;
      em.components = static_cast<int>(start.size());
      em.factors = static_cast<int>(start.factors());
      em.max_iters = cfg.shallow_max_iters;
      em.seed = derive_seed(seed, "shallow1-em");
      em.threads = cfg.threads;
      FitResult fit = continue_em(std::move(start), split.train, em,
                                  {&split.valid, cfg.early_stop_patience});
      arm.trace = fit.trace;
      detail::score_arm(arm, fit.model, split, cfg.threads);
    });
  }

  if (cfg.run_shallow2) {
    detail::run_arm(report, "Shallow2", [&](ArmResult& arm) {
      const std::size_t flat =
          report.mfa2 ? FlatIndexMap(*report.mfa2).size()
                      : static_cast<std::size_t>(cfg.components * cfg.children);
      std::optional<FitResult> best;
      double best_valid = -std::numeric_limits<double>::infinity();
      std::string last_error;
      for (int r = 0; r < cfg.restarts; ++r) {
        EmConfig em = cfg.em;
        em.components = static_cast<int>(flat);
        em.factors = cfg.factors;
        em.max_iters = cfg.shallow_max_iters;
        em.seed = derive_seed(seed, "shallow2", static_cast<std::uint64_t>(r));
        em.threads = cfg.threads;
        try {
          FitResult fit = fit_mfa(split.train, em, {&split.valid, 0});
          const double v = per_row_log_likelihood(fit.model, split.valid.rows(), cfg.threads).mean();
          if (!best || v > best_valid) {
            best_valid = v;
            best = std::move(fit);
          }
        } catch (const std::exception& e) {
          last_error = e.what();
        }
      }
      if (!best) throw std::runtime_error("all Shallow2 restarts failed: " + last_error);
      arm.trace = best->trace;
      detail::score_arm(arm, best->model, split, cfg.threads);
    });
  }

  const ArmResult* a1 = report.arm("MFA-1");
  const ArmResult* a2 = report.arm("MFA-2");
  const ArmResult* a3 = report.arm("MFA-3");
  if (a1 && a2 && a1->ok && a2->ok) report.diff2 = paired_difference(a2->test.per_row, a1->test.per_row);
  if (a2 && a3 && a2->ok && a3->ok) report.diff3 = paired_difference(a3->test.per_row, a2->test.per_row);
  return report;
}

/// True when the validation curve rises to an interior maximum and ends
/// strictly below it.
inline bool peaks_then_declines(const std::vector<double>& curve) {
  if (curve.size() < 3) return false;
  std::size_t peak = 0;
  for (std::size_t i = 1; i < curve.size(); ++i)
    if (curve[i] > curve[peak]) peak = i;
  return peak > 0 && peak + 1 < curve.size() && curve.back() < curve[peak];
}

/// One row per arm: status, LLs (nats/example), standard error, N, params.
inline void write_comparison_csv(const ComparisonReport& report, const std::string& path) {
  std::string out = "arm,ok,test_ll,test_se,valid_ll,train_ll,n_test,parameters,iterations\n";
  for (const ArmResult& a : report.arms) {
    out += a.name + ',' + (a.ok ? "1" : "0") + ',';
    if (a.ok) {
      out += format_double(a.test.avg_log_likelihood) + ',' + format_double(a.test.std_error) + ',' +
             format_double(a.valid_ll) + ',' + format_double(a.train_ll) + ',' +
             std::to_string(a.test.n) + ',' + std::to_string(a.parameters) + ',' +
             std::to_string(a.trace.iterations());
    } else {
      out += ",,,,,,";
    }
    out += '\n';
  }
  auto diff_row = [&](const char* name, const PairedDiff& d) {
    if (!d.available) return;
    out += std::string(name) + ",1," + format_double(d.mean) + ',' + format_double(d.std_error) +
           ",,,,,\n";
  };
  diff_row("Diff-2", report.diff2);
  diff_row("Diff-3", report.diff3);
  write_file_bytes(path, Bytes(out.begin(), out.end()));
}

}  // namespace dmfa
