// Command-line front end: fit, effects, simulate, replicate, plot-data.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "drm/drm.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace drm;

namespace {

int exit_code(ErrorCode c) {
  switch (c) {
    case ErrorCode::invalid_input: return 2;
    case ErrorCode::parse_error: return 3;
    case ErrorCode::support_domain: return 4;
    case ErrorCode::infeasible_state: return 5;
    case ErrorCode::solver_failure: return 6;
    case ErrorCode::rank_deficient: return 7;
    case ErrorCode::separation: return 8;
    case ErrorCode::unsupported: return 9;
  }
  return 1;
}

struct Globals {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out_dir = ".";
  std::optional<int> workers;
};

struct DataOptions {
  std::string path;
  std::string outcome;
  std::string treatment;
  std::vector<std::string> covariates;
  std::vector<std::string> levels;
};

struct ModelOptions {
  std::vector<std::string> basis;
  std::vector<std::string> features;
  std::string algorithm;
  bool freeze_theta = false;
};

json load_config(const Globals& g) {
  if (g.config_path.empty()) return json::object();
  std::ifstream in(g.config_path);
  if (!in) fail(ErrorCode::invalid_input, "cannot open config " + g.config_path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    fail(ErrorCode::parse_error, g.config_path + ": " + e.what());
  }
}

void write_json(const fs::path& path, const json& j) {
  fs::create_directories(path.parent_path().empty() ? fs::path(".") : path.parent_path());
  std::ofstream out(path);
  if (!out) fail(ErrorCode::invalid_input, "cannot write " + path.string());
  out << j.dump(2) << "\n";
}

IngestResult load_data(const json& cfg, const DataOptions& o) {
  ColumnMapping m = cfg.contains("data") ? mapping_from_json(cfg["data"]) : ColumnMapping{};
  std::string path = cfg.contains("data") ? cfg["data"].value("path", std::string()) : std::string();
  if (!o.path.empty()) path = o.path;
  if (!o.outcome.empty()) m.outcome = o.outcome;
  if (!o.treatment.empty()) m.treatment = o.treatment;
  if (!o.covariates.empty()) m.covariates = o.covariates;
  if (!o.levels.empty()) m.levels = o.levels;
  if (path.empty()) fail(ErrorCode::invalid_input, "no dataset given (use --data or the config's data.path)");
  return ingest_csv(path, m);
}

ModelSpec load_model(const json& cfg, const ModelOptions& o, const Dataset& data) {
  json mj = cfg.value("model", json::object());
  if (!o.basis.empty()) mj["basis"] = o.basis;
  if (!o.features.empty()) mj["features"] = o.features;
  if (!mj.contains("basis")) fail(ErrorCode::invalid_input, "no basis given (use --basis or the config's model.basis)");
  if (!mj.contains("features")) mj["features"] = json::array({"intercept"});
  ModelSpec spec = model_from_json(mj);
  if (!mj.contains("treatment_levels")) {
    spec.levels = data.levels();
    spec.level_labels = data.level_labels();
  }
  require(spec.levels == data.levels(), "the model declares " + std::to_string(spec.levels) +
                                            " treatment levels but the data has " + std::to_string(data.levels()));
  return spec;
}

SolverConfig load_solver(const json& cfg, const ModelOptions& o) {
  SolverConfig s = cfg.contains("solver") ? solver_from_json(cfg["solver"]) : SolverConfig{};
  if (!o.algorithm.empty()) s.algorithm = parse_algorithm(o.algorithm);
  if (o.freeze_theta) s.freeze_theta = true;
  s.validate();
  return s;
}

/// A label, or failing that a 1-based level index.
int resolve_level(const Dataset& data, const std::string& s) {
  const int by_label = data.level_of(s);
  if (by_label > 0) return by_label;
  try {
    std::size_t used = 0;
    const int k = std::stoi(s, &used);
    if (used == s.size() && k >= 1 && k <= data.levels()) return k;
  } catch (const std::exception&) {
  }
  fail(ErrorCode::invalid_input, "unknown treatment level '" + s + "'");
}

std::pair<int, int> resolve_pair(const json& cfg, const Dataset& data, std::string treated, std::string control) {
  if (treated.empty()) treated = cfg.value("treated", std::string());
  if (control.empty()) control = cfg.value("control", std::string());
  if (treated.empty() || control.empty())
    require(data.levels() == 2, "--treated and --control are required with more than two levels");
  const int t = treated.empty() ? 2 : resolve_level(data, treated);
  const int c = control.empty() ? (t == 1 ? 2 : 1) : resolve_level(data, control);
  return {t, c};
}

std::vector<double> load_probs(const json& cfg, const std::vector<double>& flag) {
  if (!flag.empty()) return flag;
  if (cfg.contains("probs")) return cfg["probs"].get<std::vector<double>>();
  return {kQtetLevels.begin(), kQtetLevels.end()};
}

FeatureMap comparator_features(const json& cfg, const std::vector<std::string>& flag, const ModelSpec& spec) {
  std::vector<FeatureTerm> terms;
  json src = flag.empty() ? cfg.value("comparator_features", json()) : json(flag);
  if (src.is_array() && !src.empty()) {
    for (const auto& f : src) terms.push_back(feature_from_json(f));
    return FeatureMap(std::move(terms));
  }
  terms = spec.features.without_intercept();
  if (terms.empty()) fail(ErrorCode::invalid_input, "comparators need covariate features (--comparator-features)");
  return FeatureMap(std::move(terms));
}

DrmFit run_fit(const Dataset& data, const ModelSpec& spec, const SolverConfig& solver, const fs::path& out_dir) {
  try {
    return fit_mele(data, spec, solver);
  } catch (const SolverFailure& e) {
    write_json(out_dir / "fit_error.json", {{"error", to_string(e.code())},
                                            {"message", e.what()},
                                            {"iterations", e.iterations()},
                                            {"residual", e.residual()}});
    throw;
  }
}

ReplicationConfig load_replication(const json& cfg, const Globals& g, const std::string& family, int n, int reps,
                                   const std::vector<std::string>& estimators) {
  const json r = cfg.value("replication", json::object());
  ReplicationConfig rc;
  rc.family = parse_family(family.empty() ? r.value("family", std::string("gaussian")) : family);
  rc.n = n > 0 ? n : r.value("n", rc.n);
  rc.repetitions = reps > 0 ? reps : r.value("repetitions", rc.repetitions);
  rc.base_seed = g.seed ? *g.seed : r.value("base_seed", rc.base_seed);
  rc.workers = g.workers ? *g.workers : r.value("workers", rc.workers);
  rc.probs = load_probs(cfg, {});
  if (cfg.contains("solver")) rc.solver = solver_from_json(cfg["solver"]);
  std::vector<std::string> tags = estimators;
  if (tags.empty() && r.contains("estimators")) tags = r["estimators"].get<std::vector<std::string>>();
  if (tags.empty() || (tags.size() == 1 && tags[0] == "all")) {
    rc.estimators = all_estimators(rc.family);
  } else {
    for (const auto& t : tags) rc.estimators.push_back(EstimatorTag::parse(t));
  }
  return rc;
}

void write_replication(const SimStudyResult& res, const fs::path& dir) {
  fs::create_directories(dir);
  std::ofstream agg(dir / "aggregate.csv"), raw(dir / "raw.csv"), failures(dir / "failures.csv");
  if (!agg || !raw || !failures) fail(ErrorCode::invalid_input, "cannot write to " + dir.string());
  write_aggregate_csv(agg, res);
  write_raw_csv(raw, res);
  write_failures_csv(failures, res);
  write_json(dir / "summary.json", summary_json(res));
}

void print_aggregates(const SimStudyResult& res) {
  std::printf("%-18s %-5s %6s %12s %12s %12s %12s %5s %5s\n", "estimator", "est", "level", "bias", "abs_bias", "se",
              "rmse", "reps", "fail");
  for (const auto& a : res.aggregates) {
    std::printf("%-18s %-5s %6s %12.5f %12.5f %12s %12.5f %5d %5d\n", a.estimator.c_str(),
                to_string(a.estimand).c_str(), a.estimand == Estimand::qtet ? std::to_string(a.level).substr(0, 4).c_str() : "",
                a.bias, a.abs_bias, a.se ? std::to_string(*a.se).c_str() : "-", a.rmse, a.reps, a.failures);
  }
}

void add_data_options(CLI::App* cmd, DataOptions& d) {
  cmd->add_option("--data", d.path, "Input CSV");
  cmd->add_option("--outcome", d.outcome, "Outcome column");
  cmd->add_option("--treatment", d.treatment, "Treatment column");
  cmd->add_option("--covariates", d.covariates, "Covariate columns, in order")->delimiter(',');
  cmd->add_option("--levels", d.levels, "Treatment labels in level order")->delimiter(',');
}

void add_model_options(CLI::App* cmd, ModelOptions& m) {
  cmd->add_option("--basis", m.basis, "Basis terms, e.g. y,y^2")->delimiter(',');
  cmd->add_option("--features", m.features, "Feature terms, e.g. intercept,x1,x1^2,x2")->delimiter(',');
  cmd->add_option("--algorithm", m.algorithm, "iterative or marginal-approx");
  cmd->add_flag("--freeze-theta", m.freeze_theta, "Keep theta at zero (debugging)");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Counterfactual distributions under a density ratio model fitted by empirical likelihood"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--config", g.config_path, "JSON configuration file");
  app.add_option("--seed", g.seed, "Seed (simulate) or base seed (replicate)");
  app.add_option("--out-dir", g.out_dir, "Output directory")->capture_default_str();
  app.add_option("--workers", g.workers, "Worker threads for replicate")->check(CLI::PositiveNumber);

  DataOptions data_opts;
  ModelOptions model_opts;
  std::vector<std::string> queries;
  std::string treated, control, family, kind;
  std::vector<double> probs;
  std::vector<std::string> estimators, comp_features;
  int n = 0, reps = 0, grid_steps = 20;

  auto* fit_cmd = app.add_subcommand("fit", "Fit the DRM and write fit_report.json");
  add_data_options(fit_cmd, data_opts);
  add_model_options(fit_cmd, model_opts);
  fit_cmd->add_option("--query", queries, "Write the conditional CDF at LEVEL:x1,x2,... (repeatable)");

  auto* eff_cmd = app.add_subcommand("effects", "Estimate ATE and QTET and write effects.json");
  add_data_options(eff_cmd, data_opts);
  add_model_options(eff_cmd, model_opts);
  eff_cmd->add_option("--treated", treated, "Treated level (label or 1-based index)");
  eff_cmd->add_option("--control", control, "Control level (label or 1-based index)");
  eff_cmd->add_option("--probs", probs, "QTET probability levels")->delimiter(',');
  eff_cmd->add_option("--estimators", estimators, "Subset of DRM,G-formula,IPW,AIPW")->delimiter(',');
  eff_cmd->add_option("--comparator-features", comp_features, "Features for the comparators")->delimiter(',');

  auto* sim_cmd = app.add_subcommand("simulate", "Draw a synthetic dataset and write data.csv and truth.json");
  sim_cmd->add_option("--family", family, "gaussian, gamma, poisson or exponential")->required();
  sim_cmd->add_option("--n", n, "Sample size")->required();

  auto* rep_cmd = app.add_subcommand("replicate", "Run a seeded simulation study");
  rep_cmd->add_option("--family", family, "gaussian, gamma, poisson or exponential");
  rep_cmd->add_option("--n", n, "Sample size per repetition");
  rep_cmd->add_option("--reps", reps, "Number of repetitions");
  rep_cmd->add_option("--estimators", estimators, "Estimator tags such as DRM(full), or 'all'")->delimiter(',');

  auto* plot_cmd = app.add_subcommand("plot-data", "Write tidy CSV for plots");
  plot_cmd->add_option("--kind", kind, "cdf-overlay, cate-grid or boxplot-raw")
      ->required()
      ->check(CLI::IsMember({"cdf-overlay", "cate-grid", "boxplot-raw"}));
  add_data_options(plot_cmd, data_opts);
  add_model_options(plot_cmd, model_opts);
  plot_cmd->add_option("--treated", treated, "Treated level for cate-grid");
  plot_cmd->add_option("--control", control, "Control level for cate-grid");
  plot_cmd->add_option("--grid", grid_steps, "Grid steps per axis for cate-grid")->capture_default_str();
  plot_cmd->add_option("--family", family, "Design for boxplot-raw");
  plot_cmd->add_option("--n", n, "Sample size for boxplot-raw");
  plot_cmd->add_option("--reps", reps, "Repetitions for boxplot-raw");
  plot_cmd->add_option("--estimators", estimators, "Estimator tags for boxplot-raw")->delimiter(',');

  CLI11_PARSE(app, argc, argv);

  try {
    const json cfg = load_config(g);
    const fs::path out_dir(g.out_dir);
    fs::create_directories(out_dir);

    if (fit_cmd->parsed()) {
      const auto in = load_data(cfg, data_opts);
      const ModelSpec spec = load_model(cfg, model_opts, in.data);
      const DrmFit fit = run_fit(in.data, spec, load_solver(cfg, model_opts), out_dir);
      json report = fit_report(fit);
      report["covariates"] = in.covariates;
      std::vector<std::string> qs = queries;
      if (qs.empty() && cfg.contains("queries"))
        for (const auto& q : cfg["queries"]) {
          std::string s = q.value("level", std::string("1")) + ":";
          for (std::size_t c = 0; c < q["x"].size(); ++c) s += (c ? "," : "") + q["x"][c].dump();
          qs.push_back(s);
        }
      json written = json::array();
      for (std::size_t i = 0; i < qs.size(); ++i) {
        const auto colon = qs[i].find(':');
        if (colon == std::string::npos) fail(ErrorCode::invalid_input, "query must look like LEVEL:x1,x2,...");
        const int level = resolve_level(in.data, qs[i].substr(0, colon));
        std::vector<double> xs;
        std::stringstream ss(qs[i].substr(colon + 1));
        for (std::string tok; std::getline(ss, tok, ',');) {
          const auto v = detail::parse_real(detail::trim(tok));
          if (!v) fail(ErrorCode::invalid_input, "bad covariate value '" + tok + "' in query");
          xs.push_back(*v);
        }
        require(static_cast<int>(xs.size()) == in.data.p(), "query needs one value per covariate");
        const Eigen::VectorXd x = Eigen::Map<Eigen::VectorXd>(xs.data(), static_cast<Eigen::Index>(xs.size()));
        const auto path = out_dir / ("cdf_query_" + std::to_string(i + 1) + ".csv");
        write_cdf_csv(path.string(), conditional_cdf(fit, x, level),
                      json{{"level_label", in.data.level_labels()[static_cast<std::size_t>(level - 1)]}});
        written.push_back(path.string());
      }
      report["cdf_files"] = written;
      write_json(out_dir / "fit_report.json", report);
      std::printf("converged in %d iterations; |score| = %.3g; max constraint residual = %.3g\n",
                  fit.diagnostics.outer_iterations, fit.diagnostics.gradient_norm, fit.diagnostics.residuals.max());
      return 0;
    }

    if (eff_cmd->parsed()) {
      const auto in = load_data(cfg, data_opts);
      const Dataset& data = in.data;
      const ModelSpec spec = load_model(cfg, model_opts, data);
      const auto [t, c] = resolve_pair(cfg, data, treated, control);
      const auto ps = load_probs(cfg, probs);
      std::vector<std::string> methods = estimators;
      if (methods.empty()) methods = cfg.value("estimators", std::vector<std::string>{"DRM", "G-formula", "IPW", "AIPW"});
      json reports = json::array();
      std::string text;
      auto add = [&](const EffectReport& r) {
        reports.push_back(to_json(r));
        text += to_text(r);
      };
      std::optional<PropensityModel> prop;
      auto propensity = [&]() -> const PropensityModel& {
        if (!prop) prop = fit_propensity(data, comparator_features(cfg, comp_features, spec), t, c);
        return *prop;
      };
      json diagnostics;
      for (const auto& m : methods) {
        if (m == "DRM") {
          const DrmFit fit = run_fit(data, spec, load_solver(cfg, model_opts), out_dir);
          diagnostics = to_json(fit.diagnostics);
          add(scalar_report(Estimand::ate, "DRM", data, t, c, drm_ate(fit, data, t, c)));
          add(drm_qtet(fit, data, t, c, ps));
        } else if (m == "G-formula") {
          add(scalar_report(Estimand::ate, "G-formula", data, t, c,
                            gformula_ate(data, comparator_features(cfg, comp_features, spec), t, c)));
        } else if (m == "IPW") {
          add(scalar_report(Estimand::ate, "IPW(Hajek)", data, t, c, ipw_ate(data, propensity(), t, c)));
          add(ipw_qtet(data, propensity(), t, c, ps));
        } else if (m == "AIPW") {
          add(scalar_report(Estimand::ate, "AIPW", data, t, c,
                            aipw_ate(data, propensity(), comparator_features(cfg, comp_features, spec), t, c)));
        } else {
          fail(ErrorCode::invalid_input, "unknown estimator '" + m + "' (DRM, G-formula, IPW or AIPW)");
        }
      }
      json out{{"effects", reports}, {"level_labels", data.level_labels()}};
      if (!diagnostics.is_null()) out["drm_diagnostics"] = diagnostics;
      write_json(out_dir / "effects.json", out);
      std::fputs(text.c_str(), stdout);
      return 0;
    }

    if (sim_cmd->parsed()) {
      const DgpSpec spec{parse_family(family), n, g.seed.value_or(1)};
      const Dataset data = generate(spec);
      write_dataset_csv((out_dir / "data.csv").string(), data);
      json truth = to_json(true_effects(spec.family));
      truth["seed"] = spec.seed;
      truth["n"] = spec.n;
      truth["levels"] = data.level_labels();
      write_json(out_dir / "truth.json", truth);
      std::printf("wrote %s (n=%d)\n", (out_dir / "data.csv").string().c_str(), n);
      return 0;
    }

    if (rep_cmd->parsed()) {
      const ReplicationConfig rc = load_replication(cfg, g, family, n, reps, estimators);
      const SimStudyResult res = run_replication(rc);
      write_replication(res, out_dir);
      print_aggregates(res);
      return 0;
    }

    if (plot_cmd->parsed()) {
      if (kind == "boxplot-raw") {
        if (!data_opts.path.empty()) fail(ErrorCode::invalid_input, "boxplot-raw is built from a replication, not a dataset");
        const ReplicationConfig rc = load_replication(cfg, g, family, n, reps, estimators);
        const SimStudyResult res = run_replication(rc);
        std::ofstream out(out_dir / "boxplot_raw.csv");
        write_raw_csv(out, res);
        std::printf("wrote %zu rows\n", res.records.size());
        return 0;
      }
      if (!family.empty() || reps > 0) fail(ErrorCode::invalid_input, kind + " is built from a fitted dataset, not a replication");
      const auto in = load_data(cfg, data_opts);
      const ModelSpec spec = load_model(cfg, model_opts, in.data);
      const DrmFit fit = run_fit(in.data, spec, load_solver(cfg, model_opts), out_dir);
      if (kind == "cdf-overlay") {
        for (const auto& p : write_cdf_overlay(out_dir, fit, in.data)) std::printf("wrote %s\n", p.c_str());
      } else {
        const auto [t, c] = resolve_pair(cfg, in.data, treated, control);
        std::ofstream out(out_dir / "cate_grid.csv");
        write_cate_grid(out, fit, in.data, t, c, grid_steps, in.covariates);
        std::printf("wrote %s\n", (out_dir / "cate_grid.csv").string().c_str());
      }
      return 0;
    }
  } catch (const Error& e) {
    std::fprintf(stderr, "error [%s]: %s\n", to_string(e.code()), e.what());
    return exit_code(e.code());
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
