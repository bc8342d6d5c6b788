// dmfa: train, stack, collapse, evaluate and sample (deep) mixtures of
// factor analysers from the command line.
//
// Exit codes: 0 success, 1 runtime error, 2 usage error, 3 experiment with
// some (not all) arms failed.

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "dmfa/dmfa.hpp"

namespace {

using namespace dmfa;
using nlohmann::json;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Globals {
  std::uint64_t seed = 0;
  unsigned threads = 0;
  bool deterministic = false;

  unsigned workers() const {
    if (deterministic) return 1;
    return threads > 0 ? threads : default_thread_count();
  }
};

PreprocessKind parse_preprocess(const std::string& s) {
  if (s == "none") return PreprocessKind::none;
  if (s == "dc") return PreprocessKind::dc_removed;
  if (s == "standardize") return PreprocessKind::standardized;
  throw UsageError("unknown preprocessing '" + s + "' (none, dc, standardize)");
}

Dataset preprocess(const Dataset& raw, PreprocessKind kind) {
  switch (kind) {
    case PreprocessKind::none: return raw;
    case PreprocessKind::dc_removed: return preprocess_dc_remove(raw);
    case PreprocessKind::standardized: return preprocess_standardize(raw);
  }
  return raw;
}

json trace_summary(const TrainingTrace& t) {
  return {{"iterations", t.iterations()},
          {"termination", std::string(to_string(t.reason))},
          {"final_train_ll", t.train_ll.empty() ? 0.0 : t.train_ll.back()},
          {"reseeds", t.reseed_iterations.size()},
          {"regularized", t.regularized}};
}

std::string describe(const ModelFile& f) {
  std::ostringstream out;
  out << (f.kind == ModelKind::mfa ? "mfa" : "dmfa") << ", depth " << f.tree->depth() << ", "
      << FlatIndexMap(*f.tree).size() << " flat components, D=" << f.tree->dim();
  return out.str();
}

// ---------------------------------------------------------------- synth

struct SynthArgs {
  std::string kind = "curved";
  Index n = 1000;
  double noise = 0.1;
  HierRecipe recipe;
  std::string out;
  std::string truth;
};

int cmd_synth(const SynthArgs& a, const Globals& g) {
  if (a.n < 1) throw UsageError("--n must be >= 1");
  if (a.kind == "curved") {
    save_matrix(a.out, synth_curved(a.n, g.seed, a.noise).rows());
  } else if (a.kind == "hier") {
    const HierSample s = synth_hier(a.recipe, a.n, g.seed);
    save_matrix(a.out, s.data.rows());
    if (!a.truth.empty())
      save_model(make_model_file(s.truth, {}, {{"command", "synth"}, {"seed", g.seed}}), a.truth);
  } else {
    throw UsageError("unknown --kind '" + a.kind + "' (curved, hier)");
  }
  std::cout << "wrote " << a.n << " rows to " << a.out << '\n';
  return 0;
}

// ---------------------------------------------------------------- train

struct TrainArgs {
  std::string data;
  std::string out;
  std::string trace;
  std::string preprocess = "none";
  int components = 1;
  int factors = 1;
  double tol = 1e-4;
  int max_iters = 200;
  std::optional<double> min_count;
  double variance_floor = kDefaultVarianceFloor;
};

int cmd_train(const TrainArgs& a, const Globals& g) {
  const PreprocessKind kind = parse_preprocess(a.preprocess);
  if (a.components < 1 || a.factors < 1 || a.max_iters < 1 || !(a.tol > 0.0))
    throw UsageError("--components, --factors, --max-iters must be >= 1 and --tol > 0");
  const Dataset data = preprocess(load_matrix(a.data), kind);
  if (a.factors > data.dim())
    throw UsageError("--factors " + std::to_string(a.factors) + " exceeds data dimension " +
                     std::to_string(data.dim()));
  if (a.components > data.size()) throw UsageError("--components exceeds the number of rows");
  EmConfig em;
  em.components = a.components;
  em.factors = a.factors;
  em.rel_tol = a.tol;
  em.max_iters = a.max_iters;
  em.seed = g.seed;
  em.min_effective_count = a.min_count;
  em.variance_floor = a.variance_floor;
  em.threads = g.workers();
  const FitResult fit = fit_mfa(data, em);
  json meta = {{"command", "train"},
               {"components", a.components},
               {"factors", a.factors},
               {"rel_tol", a.tol},
               {"max_iters", a.max_iters},
               {"seed", g.seed},
               {"preprocess", std::string(to_string(kind))},
               {"trace", trace_summary(fit.trace)}};
  save_model(make_model_file(fit.model, data.preprocessing(), meta), a.out);
  const std::string trace = a.trace.empty() ? a.out + ".trace.csv" : a.trace;
  emit_trace_csv(fit.trace, trace);
  std::cout << "trained " << a.components << "-component MFA (d=" << a.factors << ") in "
            << fit.trace.iterations() << " iterations, " << to_string(fit.trace.reason) << '\n'
            << "train log-likelihood: " << format_double(fit.trace.train_ll.back())
            << " nats/example\n"
            << "model: " << a.out << "\ntrace: " << trace << '\n';
  return 0;
}

// ---------------------------------------------------------------- stack

struct StackArgs {
  std::string model;
  std::string data;
  std::string out;
  int factors = 1;
  std::optional<int> k_per;
  bool proportional = false;
  std::optional<int> k_total;
  int k_min = 2;
  std::string extract = "sample";
  double tol = 1e-4;
  int max_iters = 200;
};

int cmd_stack(const StackArgs& a, const Globals& g) {
  const ModelFile parent = load_model(a.model);
  const Dataset data = align_preprocessing(parent.preprocessing, load_matrix(a.data));
  if (data.dim() != parent.tree->dim())
    throw UsageError("data has " + std::to_string(data.dim()) + " columns, model expects " +
                     std::to_string(parent.tree->dim()));
  // Every leaf receives the new layer; its factor space bounds the new d.
  Index leaf_factors = std::numeric_limits<Index>::max();
  std::function<void(const DmfaNode&)> scan = [&](const DmfaNode& n) {
    if (n.is_leaf()) leaf_factors = std::min(leaf_factors, n.layer().factors());
    for (const auto& ch : n.children())
      if (ch) scan(*ch);
  };
  scan(*parent.tree);
  if (a.factors < 1 || a.factors > leaf_factors)
    throw UsageError("--factors " + std::to_string(a.factors) + " must be in [1, " +
                     std::to_string(leaf_factors) + "] (parent factor dimension)");
  StackConfig cfg;
  cfg.factors = a.factors;
  if (a.proportional) {
    if (a.k_per) throw UsageError("--k-per and --proportional are exclusive");
    if (!a.k_total) throw UsageError("--proportional needs --k-total");
    cfg.allocation = AllocationPolicy::proportional(*a.k_total, a.k_min);
  } else {
    const int k = a.k_per.value_or(5);
    if (k < 1) throw UsageError("--k-per must be >= 1");
    cfg.allocation = AllocationPolicy::fixed(k);
  }
  if (a.extract == "sample") {
    cfg.extract = ExtractMode::sample;
  } else if (a.extract == "mean") {
    cfg.extract = ExtractMode::posterior_mean;
  } else {
    throw UsageError("unknown --extract '" + a.extract + "' (sample, mean)");
  }
  cfg.em.rel_tol = a.tol;
  cfg.em.max_iters = a.max_iters;
  cfg.seed = g.seed;
  cfg.threads = g.workers();
  StackResult st;
  try {
    st = stack_layer(*parent.tree, data, cfg);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  json failed = json::array();
  for (std::size_t i = 0; i < st.failed.size(); ++i)
    failed.push_back({{"path", st.failed[i]}, {"error", st.errors[i]}});
  json meta = {{"command", "stack"},
               {"factors", a.factors},
               {"allocation", a.proportional ? "proportional" : "fixed"},
               {"k_per", a.k_per.value_or(a.proportional ? 0 : 5)},
               {"k_total", a.k_total.value_or(0)},
               {"k_min", a.k_min},
               {"extract", a.extract},
               {"seed", g.seed},
               {"parent", parent.metadata},
               {"children_fit", st.traces.size()},
               {"skipped", st.skipped},
               {"failed", failed}};
  save_model(make_model_file(st.node, parent.preprocessing, meta), a.out);
  std::cout << "stacked layer with d=" << a.factors << ": " << st.traces.size() << " children fit, "
            << st.skipped.size() << " skipped (too few rows), " << st.failed.size() << " failed\n";
  for (std::size_t i = 0; i < st.failed.size(); ++i) {
    std::cerr << "child fit failed at component path";
    for (auto c : st.failed[i]) std::cerr << ' ' << c;
    std::cerr << ": " << st.errors[i] << '\n';
  }
  std::cout << "model: " << a.out << " (" << describe(make_model_file(st.node)) << ")\n";
  return 0;
}

// ---------------------------------------------------------------- collapse

struct CollapseArgs {
  std::string model;
  std::string out;
};

int cmd_collapse(const CollapseArgs& a, const Globals&) {
  const ModelFile f = load_model(a.model);
  const MfaModel flat = collapse(*f.tree);
  const std::int64_t deep = count_parameters_deep(*f.tree);
  const std::int64_t shallow = count_parameters(flat);
  json meta = {{"command", "collapse"},
               {"source", f.metadata},
               {"deep_parameters", deep},
               {"parameters", shallow}};
  save_model(make_model_file(flat, f.preprocessing, meta), a.out);
  std::cout << "collapsed " << describe(f) << " to " << flat.size() << " components with "
            << flat.factors() << " factors\n"
            << "parameters: " << shallow << '\n'
            << "deep parameters: " << deep << '\n'
            << "model: " << a.out << '\n';
  return 0;
}

// ---------------------------------------------------------------- eval

struct EvalArgs {
  std::string model;
  std::string data;
  std::string csv;
  std::string preprocess;  // when set, must match the model's record
};

int cmd_eval(const EvalArgs& a, const Globals& g) {
  const ModelFile f = load_model(a.model);
  if (!a.preprocess.empty() && parse_preprocess(a.preprocess) != f.preprocessing.kind)
    throw std::runtime_error(std::string("preprocessing mismatch: data declared ") + a.preprocess +
                             ", model was trained on " +
                             std::string(to_string(f.preprocessing.kind)));
  const Dataset raw = load_matrix(a.data);
  if (raw.dim() != f.tree->dim())
    throw std::runtime_error("data has " + std::to_string(raw.dim()) + " columns, model expects " +
                             std::to_string(f.tree->dim()));
  EvalOptions opts;
  opts.model_preprocessing = &f.preprocessing;
  opts.threads = g.workers();
  const EvalReport r = evaluate(*f.tree, raw, opts);
  const std::string ll = format_double(r.avg_log_likelihood);
  const std::string se = format_double(r.std_error);
  std::cout << "model: " << a.model << " (" << describe(f) << ")\n"
            << "avg_log_likelihood: " << ll << " nats/example\n"
            << "std_error: " << se << '\n'
            << "n: " << r.n << '\n'
            << "parameters: " << r.parameters << '\n'
            << "preprocessing: " << to_string(r.preprocessing) << '\n'
            << "seconds: " << r.seconds << '\n';
  if (!a.csv.empty()) {
    const std::string text = "avg_log_likelihood,std_error,n,parameters,preprocessing\n" + ll +
                             ',' + se + ',' + std::to_string(r.n) + ',' +
                             std::to_string(r.parameters) + ',' +
                             std::string(to_string(r.preprocessing)) + '\n';
    write_file_bytes(a.csv, Bytes(text.begin(), text.end()));
  }
  return 0;
}

// ---------------------------------------------------------------- sample

struct SampleArgs {
  std::string model;
  std::string out;
  Index n = 1000;
  bool raw_scale = false;
};

int cmd_sample(const SampleArgs& a, const Globals& g) {
  if (a.n < 1) throw UsageError("--n must be >= 1");
  const ModelFile f = load_model(a.model);
  Dataset x = sample(*f.tree, a.n, g.seed);
  if (a.raw_scale) x = invert_preprocessing(Dataset(x.rows(), f.preprocessing));
  save_matrix(a.out, x.rows());
  std::cout << "wrote " << a.n << " samples to " << a.out
            << (a.raw_scale ? " (raw scale)" : " (model scale)") << '\n';
  return 0;
}

// ---------------------------------------------------------------- experiment

struct ExperimentArgs {
  std::string name;
  std::string data;  // optional; otherwise synthetic
  std::string out_dir = ".";
  Index n_train = 5000;
  Index n_valid = 2000;
  Index n_test = 2000;
  HierRecipe truth;
  ExperimentConfig cfg;
  std::vector<int> components{2, 5, 10, 20};
};

Split experiment_split(const ExperimentArgs& a, std::uint64_t seed) {
  if (!a.data.empty()) return split(load_matrix(a.data), {0.6, 0.2, 0.2}, seed);
  const DmfaNodePtr truth = make_ground_truth(a.truth, derive_seed(seed, "truth"));
  return {synth_hier(truth, a.n_train, derive_seed(seed, "train")).data,
          synth_hier(truth, a.n_valid, derive_seed(seed, "valid")).data,
          synth_hier(truth, a.n_test, derive_seed(seed, "test")).data};
}

std::string fmt_ll(const ArmResult& arm) {
  return arm.ok ? format_double(arm.test.avg_log_likelihood) + " +- " + format_double(arm.test.std_error)
                : "FAILED (" + arm.error + ")";
}

int arm_exit_code(int ok, int total) {
  if (ok == total) return 0;
  return ok == 0 ? 1 : 3;
}

int cmd_experiment(ExperimentArgs a, const Globals& g) {
  if (a.n_train < 2 || a.n_valid < 1 || a.n_test < 2) throw UsageError("split sizes too small");
  a.cfg.seed = g.seed;
  a.cfg.threads = g.workers();
  std::filesystem::create_directories(a.out_dir);
  const auto path = [&](const std::string& name) { return (std::filesystem::path(a.out_dir) / name).string(); };
  const Split sp = experiment_split(a, g.seed);
  std::cout << "data: train " << sp.train.size() << ", valid " << sp.valid.size() << ", test "
            << sp.test.size() << ", D=" << sp.train.dim() << " (log-likelihoods in nats/example)\n";

  if (a.name == "overfit") {
    if (a.cfg.factors > sp.train.dim()) throw UsageError("--factors exceeds data dimension");
    if (a.cfg.child_factors > a.cfg.factors) throw UsageError("--child-factors exceeds --factors");
    const ComparisonReport r = run_overfit_experiment(sp, a.cfg);
    write_comparison_csv(r, path("overfit_summary.csv"));
    int ok = 0;
    for (const ArmResult& arm : r.arms) {
      std::cout << arm.name << ": test " << fmt_ll(arm);
      if (arm.ok) std::cout << ", valid " << format_double(arm.valid_ll) << ", params " << arm.parameters;
      std::cout << '\n';
      if (arm.ok) ++ok;
      if (arm.ok && arm.trace.iterations() > 0) {
        std::string file = arm.name;
        for (char& ch : file) ch = static_cast<char>(std::tolower(ch == '-' ? '_' : ch));
        emit_trace_csv(arm.trace, path("trace_" + file + ".csv"));
      }
    }
    if (r.diff2.available)
      std::cout << "Diff-2: " << format_double(r.diff2.mean) << " +- " << format_double(r.diff2.std_error) << '\n';
    if (r.diff3.available)
      std::cout << "Diff-3: " << format_double(r.diff3.mean) << " +- " << format_double(r.diff3.std_error) << '\n';
    std::cout << "summary: " << path("overfit_summary.csv") << '\n';
    return arm_exit_code(ok, static_cast<int>(r.arms.size()));
  }

  if (a.name == "gain-vs-C") {
    std::string csv = "components,mfa1_test_ll,mfa1_se,mfa2_test_ll,mfa2_se,diff2,diff2_se,mfa1_parameters,mfa2_parameters\n";
    int ok = 0;
    for (int c : a.components) {
      if (c < 1) throw UsageError("--components entries must be >= 1");
      ExperimentConfig cfg = a.cfg;
      cfg.components = c;
      cfg.run_shallow1 = false;
      cfg.run_shallow2 = false;
      cfg.third_layer = false;
      const ComparisonReport r = run_overfit_experiment(sp, cfg);
      const ArmResult* m1 = r.arm("MFA-1");
      const ArmResult* m2 = r.arm("MFA-2");
      csv += std::to_string(c) + ',';
      if (m1 && m2 && m1->ok && m2->ok && r.diff2.available) {
        ++ok;
        csv += format_double(m1->test.avg_log_likelihood) + ',' + format_double(m1->test.std_error) + ',' +
               format_double(m2->test.avg_log_likelihood) + ',' + format_double(m2->test.std_error) + ',' +
               format_double(r.diff2.mean) + ',' + format_double(r.diff2.std_error) + ',' +
               std::to_string(m1->parameters) + ',' + std::to_string(m2->parameters) + '\n';
        std::cout << "C=" << c << ": MFA-1 " << fmt_ll(*m1) << ", MFA-2 " << fmt_ll(*m2) << ", Diff-2 "
                  << format_double(r.diff2.mean) << " +- " << format_double(r.diff2.std_error) << '\n';
      } else {
        csv += ",,,,,,,\n";
        std::cout << "C=" << c << ": FAILED";
        for (const ArmResult& arm : r.arms)
          if (!arm.ok) std::cout << " [" << arm.name << ": " << arm.error << ']';
        std::cout << '\n';
      }
    }
    write_file_bytes(path("gain_vs_c.csv"), Bytes(csv.begin(), csv.end()));
    std::cout << "summary: " << path("gain_vs_c.csv") << '\n';
    return arm_exit_code(ok, static_cast<int>(a.components.size()));
  }
  throw UsageError("unknown experiment '" + a.name + "' (overfit, gain-vs-C)");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Deep mixtures of factor analysers: train, stack, collapse, evaluate, sample"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--seed", g.seed, "Seed for every random stream")->capture_default_str();
  app.add_option("--threads", g.threads, "Worker threads (0 = all cores)")->capture_default_str();
  app.add_flag("--deterministic", g.deterministic, "Single-threaded, bitwise reproducible run");
  // Global options may also follow the subcommand name.
  app.fallthrough();

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "Generate a synthetic dataset");
  s->add_option("--kind", synth.kind, "curved or hier")->capture_default_str();
  s->add_option("--n", synth.n, "Number of rows")->capture_default_str();
  s->add_option("--noise", synth.noise, "curved: noise std on y")->capture_default_str();
  s->add_option("--dim", synth.recipe.dim, "hier: data dimension")->capture_default_str();
  s->add_option("--components", synth.recipe.components, "hier: first-layer components")->capture_default_str();
  s->add_option("--factors", synth.recipe.factors, "hier: first-layer factors")->capture_default_str();
  s->add_option("--children", synth.recipe.children, "hier: components per child (0 = plain MFA)")
      ->capture_default_str();
  s->add_option("--child-factors", synth.recipe.child_factors, "hier: child factors")->capture_default_str();
  s->add_option("--truth", synth.truth, "hier: also save the generating model here");
  s->add_option("--out", synth.out, "Output matrix (.csv or .dmf)")->required();

  TrainArgs train;
  auto* t = app.add_subcommand("train", "Fit an MFA by EM");
  t->add_option("--data", train.data, "Training matrix")->required();
  t->add_option("--components", train.components, "Mixture components C")->required();
  t->add_option("--factors", train.factors, "Factors per component d")->required();
  t->add_option("--tol", train.tol, "Relative log-likelihood tolerance")->capture_default_str();
  t->add_option("--max-iters", train.max_iters, "EM iteration cap")->capture_default_str();
  t->add_option("--min-count", train.min_count, "Reseed components below this mass (default d+2)");
  t->add_option("--variance-floor", train.variance_floor, "Lower bound on noise variances")
      ->capture_default_str();
  t->add_option("--preprocess", train.preprocess, "none, dc or standardize")->capture_default_str();
  t->add_option("--out", train.out, "Output model file")->required();
  t->add_option("--trace", train.trace, "Trace CSV (default <out>.trace.csv)");

  StackArgs stack;
  auto* st = app.add_subcommand("stack", "Train one more layer below every leaf");
  st->add_option("--model", stack.model, "Parent model file")->required();
  st->add_option("--data", stack.data, "Training matrix (raw scale)")->required();
  st->add_option("--factors", stack.factors, "Factors of the new layer")->required();
  st->add_option("--k-per", stack.k_per, "Components per child (default 5)");
  st->add_flag("--proportional", stack.proportional, "Allocate K_c in proportion to the parent weights");
  st->add_option("--k-total", stack.k_total, "proportional: total components per stacked node");
  st->add_option("--k-min", stack.k_min, "proportional: minimum per child")->capture_default_str();
  st->add_option("--extract", stack.extract, "sample or mean factors for the child data")->capture_default_str();
  st->add_option("--tol", stack.tol, "Relative tolerance for child EM")->capture_default_str();
  st->add_option("--max-iters", stack.max_iters, "Child EM iteration cap")->capture_default_str();
  st->add_option("--out", stack.out, "Output model file")->required();

  CollapseArgs coll;
  auto* c = app.add_subcommand("collapse", "Write the exact shallow MFA of a deep model");
  c->add_option("--model", coll.model, "Model file")->required();
  c->add_option("--out", coll.out, "Output model file")->required();

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Average held-out log-likelihood in nats/example");
  e->add_option("--model", ev.model, "Model file")->required();
  e->add_option("--data", ev.data, "Data matrix (raw scale)")->required();
  e->add_option("--csv", ev.csv, "Also write the report as CSV");
  e->add_option("--preprocess", ev.preprocess, "Expected preprocessing; error if the model differs");

  SampleArgs smp;
  auto* sa = app.add_subcommand("sample", "Ancestral samples from a model");
  sa->add_option("--model", smp.model, "Model file")->required();
  sa->add_option("--n", smp.n, "Number of samples")->capture_default_str();
  sa->add_flag("--raw-scale", smp.raw_scale, "Undo the model's preprocessing");
  sa->add_option("--out", smp.out, "Output matrix")->required();

  ExperimentArgs ex;
  ex.truth.dim = 16;
  ex.truth.components = 4;
  ex.truth.factors = 4;
  ex.truth.children = 3;
  ex.truth.child_factors = 1;
  ex.truth.mean_spread = 10.0;
  ex.cfg.components = 4;
  ex.cfg.factors = 4;
  ex.cfg.children = 3;
  ex.cfg.child_factors = 1;
  std::string components_list;
  auto* x = app.add_subcommand("experiment", "Packaged deep-vs-shallow experiments");
  x->add_option("name", ex.name, "overfit or gain-vs-C")->required();
  x->add_option("--data", ex.data, "Use this matrix (60/20/20 split) instead of synthetic data");
  x->add_option("--out-dir", ex.out_dir, "Directory for CSV outputs")->capture_default_str();
  x->add_option("--n-train", ex.n_train, "Synthetic training rows")->capture_default_str();
  x->add_option("--n-valid", ex.n_valid, "Synthetic validation rows")->capture_default_str();
  x->add_option("--n-test", ex.n_test, "Synthetic test rows")->capture_default_str();
  x->add_option("--dim", ex.truth.dim, "Synthetic data dimension")->capture_default_str();
  x->add_option("--truth-components", ex.truth.components, "Synthetic generator components")->capture_default_str();
  x->add_option("--truth-factors", ex.truth.factors, "Synthetic generator factors")->capture_default_str();
  x->add_option("--truth-children", ex.truth.children, "Synthetic generator children per component")
      ->capture_default_str();
  x->add_option("--mean-spread", ex.truth.mean_spread, "Synthetic std of first-layer means")->capture_default_str();
  x->add_option("--child-spread", ex.truth.child_spread, "Synthetic std of child means in factor space")
      ->capture_default_str();
  x->add_option("--components", components_list,
                "overfit: C; gain-vs-C: comma-separated list (default 2,5,10,20)");
  x->add_option("--factors", ex.cfg.factors, "First-layer factors d1")->capture_default_str();
  x->add_option("--k-per", ex.cfg.children, "Second-layer components per first-layer component")
      ->capture_default_str();
  x->add_option("--child-factors", ex.cfg.child_factors, "Second-layer factors d2")->capture_default_str();
  x->add_flag("--third-layer", ex.cfg.third_layer, "Also stack MFA-3");
  x->add_option("--restarts", ex.cfg.restarts, "Shallow2 restarts")->capture_default_str();
  x->add_option("--patience", ex.cfg.early_stop_patience, "Shallow1 early-stopping patience")
      ->capture_default_str();
  x->add_option("--max-iters", ex.cfg.em.max_iters, "EM iteration cap")->capture_default_str();
  x->add_option("--shallow-max-iters", ex.cfg.shallow_max_iters, "EM cap for the shallow arms")
      ->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& err) {
    return app.exit(err);
  } catch (const CLI::CallForAllHelp& err) {
    return app.exit(err);
  } catch (const CLI::ParseError& err) {
    app.exit(err);
    return 2;
  }

  try {
    if (*s) return cmd_synth(synth, g);
    if (*t) return cmd_train(train, g);
    if (*st) return cmd_stack(stack, g);
    if (*c) return cmd_collapse(coll, g);
    if (*e) return cmd_eval(ev, g);
    if (*sa) return cmd_sample(smp, g);
    if (*x) {
      if (!components_list.empty()) {
        ex.components.clear();
        std::stringstream in(components_list);
        std::string item;
        while (std::getline(in, item, ',')) {
          try {
            ex.components.push_back(std::stoi(item));
          } catch (const std::exception&) {
            throw UsageError("bad --components entry '" + item + "'");
          }
        }
        if (ex.components.empty()) throw UsageError("--components is empty");
        ex.cfg.components = ex.components.front();
        if (ex.name == "overfit" && ex.components.size() != 1)
          throw UsageError("overfit takes a single --components value");
      }
      return cmd_experiment(ex, g);
    }
  } catch (const UsageError& err) {
    std::cerr << "usage error: " << err.what() << '\n';
    return 2;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << '\n';
    return 1;
  }
  return 2;
}
