// Command-line front end: subcommands map onto io::run modes, and every
// run writes a manifest that reproduces it via --config.

#include <CLI11.hpp>
#include <cstdio>
#include <exception>

#include "tsps/core.hpp"
#include "tsps/io.hpp"

namespace {

void add_common(CLI::App* cmd, tsps::RunConfig& config) {
  cmd->add_option("--out", config.output_dir, "output directory");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"propensity scores for error-prone group-average measurements"};
  app.require_subcommand(0, 1);

  tsps::RunConfig config;
  std::string config_path;
  app.add_option("--config", config_path,
                 "run from a config/manifest file (overrides subcommands)");

  auto* simulate = app.add_subcommand("simulate", "run the Monte Carlo study");
  add_common(simulate, config);
  simulate->add_option("--design", config.sim.design, "large | mixed");
  simulate->add_option("--reps", config.sim.n_replications, "replications");
  simulate->add_option("--seed", config.sim.master_seed, "master seed");
  simulate->add_option("--threads", config.sim.n_threads, "0 = all cores");
  simulate->add_option("--calipers", config.sim.calipers, "caliper widths (logits)");
  simulate->add_option("--estimation-caliper", config.sim.estimation_caliper,
                       "caliper whose matches feed estimates and balance");
  simulate->add_option("--max-controls", config.sim.max_controls_per_treated,
                       "max controls per treated in a set");
  simulate->add_option("--max-treated", config.sim.max_treated_per_control,
                       "max treated per control (0 = number of treated)");
  simulate->add_option("--amplitude", config.sim.effect_amplitude,
                       "effect amplitude (default: calibrate to the target ETT)");
  simulate->add_option("--target-ett", config.sim.target_ett, "target ETT");
  simulate->add_option("--schools", config.sim.n_schools, "schools per replication");

  auto* fit_ps = app.add_subcommand("fit-ps", "fit propensity score models");
  add_common(fit_ps, config);
  fit_ps->add_option("--input", config.input_path, "dataset CSV")->required();
  fit_ps->add_option("--kind", config.ps_kinds, "naive | rc | ml | all");
  fit_ps->add_option_function<std::vector<std::string>>(
      "--csem-table",
      [&config](const std::vector<std::string>& specs) {
        for (const auto& spec : specs) {
          const auto eq = spec.find('=');
          if (eq == std::string::npos) {
            throw CLI::ValidationError("--csem-table needs assessment=path");
          }
          config.csem_tables[spec.substr(0, eq)] = spec.substr(eq + 1);
        }
      },
      "CSEM table per assessment, as assessment=path");
  fit_ps->add_flag("--two-pass", config.two_pass,
                   "refit with CSEMs at the first-pass EB predictions");

  auto* match = app.add_subcommand("match", "optimal full matching within calipers");
  add_common(match, config);
  match->add_option("--input", config.input_path, "dataset CSV")->required();
  match->add_option("--scores", config.scores_path, "ps_scores.csv from fit-ps")
      ->required();
  match->add_option("--kind", config.ps_kinds, "which PS kind to match on")
      ->required();
  match->add_option("--caliper", config.match_spec.caliper_logits,
                    "caliper width in logits");
  match->add_option("--max-controls", config.match_spec.max_controls_per_treated,
                    "max controls per treated");
  match->add_option("--max-treated", config.match_spec.max_treated_per_control,
                    "max treated per control (0 = number of treated)");

  auto* balance = app.add_subcommand("balance", "standardized differences");
  add_common(balance, config);
  balance->add_option("--input", config.input_path, "dataset CSV")->required();
  balance->add_option("--sets", config.sets_path, "matched_sets.csv")->required();

  auto* estimate = app.add_subcommand("estimate", "treatment-effect estimates");
  add_common(estimate, config);
  estimate->add_option("--input", config.input_path, "dataset CSV")->required();
  estimate->add_option("--scores", config.scores_path, "ps_scores.csv")->required();
  estimate->add_option("--sets", config.sets_path,
                       "matched_sets.csv (for the matching estimator)");
  estimate->add_option("--kind", config.ps_kinds, "naive | rc | ml | all");
  estimate->add_option("--outcome", config.outcome,
                       "outcome cell as <subgroup>_<assessment>, or all");
  estimate->add_option("--estimator", config.estimators,
                       "matching | weighting | pencomp | all");
  estimate->add_flag("--unnormalized", config.unnormalized,
                     "divide the weighted control sum by the treated count");

  auto* approx = app.add_subcommand(
      "approx-check", "mixture approximation vs the quadrature oracle");
  add_common(approx, config);

  CLI11_PARSE(app, argc, argv);

  try {
    if (!config_path.empty()) {
      tsps::RunConfig from_file = tsps::RunConfig::from_file(config_path);
      return tsps::run(from_file);
    }
    if (simulate->parsed()) {
      config.mode = "simulate";
    } else if (fit_ps->parsed()) {
      config.mode = "fit-ps";
    } else if (match->parsed()) {
      config.mode = "match";
    } else if (balance->parsed()) {
      config.mode = "balance";
    } else if (estimate->parsed()) {
      config.mode = "estimate";
    } else if (approx->parsed()) {
      config.mode = "approx-check";
    } else {
      std::fputs(app.help().c_str(), stdout);
      return 1;
    }
    return tsps::run(config);
  } catch (const tsps::DataError& ex) {
    std::fprintf(stderr, "data error: %s\n", ex.what());
    return 2;
  } catch (const tsps::NumericError& ex) {
    std::fprintf(stderr, "numerical failure: %s\n", ex.what());
    return 3;
  } catch (const std::exception& ex) {
    std::fprintf(stderr, "error: %s\n", ex.what());
    return 1;
  }
}
