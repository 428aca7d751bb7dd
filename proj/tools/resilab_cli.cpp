/// \file resilab_cli.cpp
/// Command-line front end. `run` executes one experiment configuration and
/// writes a JSON or CSV report; `compare` combines four reports into the
/// standalone-vs-combined overhead estimate.
///
/// Exit codes: 0 all repetitions converged (or compare succeeded), 1 usage
/// error, 2 runs that aborted or failed to converge.

#include <fstream>
#include <iostream>
#include <string>

#include "CLI11.hpp"

#include "resilab/harness.hpp"

namespace {

int write_out(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text;
    return 0;
  }
  std::ofstream out(path);
  if (!out) {
    std::cerr << "error: cannot write '" << path << "'\n";
    return 1;
  }
  out << text;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  using resilab::harness::ExperimentConfig;

  CLI::App app{"resilab: fault-tolerant GMRES experiment driver"};
  app.require_subcommand(1);

  // -- run ----------------------------------------------------------------
  CLI::App* run = app.add_subcommand("run", "run one experiment configuration");
  std::string cfg_file, problem = "poisson3d", matrix_path;
  std::string detector = "none", sdc_interval = "none", sdc_model = "bitflip";
  std::string failures = "none", out_path, format = "json";
  long long nx = 8, ny = 8, nz = 8, ranks = 4, spares = 0, inner = 25, outer = 20;
  long long seed = 1, reps = 5, mono_interval = 5;
  double tol = 1e-8, watchdog = 10.0;
  bool checkpoint_basis = true;

  run->add_option("--config", cfg_file, "flat key=value config file (flags override)");
  run->add_option("--problem", problem, "poisson3d|mm");
  run->add_option("--nx", nx);
  run->add_option("--ny", ny);
  run->add_option("--nz", nz);
  run->add_option("--matrix", matrix_path, "MatrixMarket file for --problem mm");
  run->add_option("--ranks", ranks);
  run->add_option("--spares", spares);
  run->add_option("--inner", inner, "inner GMRES steps per outer iteration");
  run->add_option("--outer", outer, "outer iteration budget");
  run->add_option("--tol", tol, "relative residual tolerance");
  run->add_option("--detector", detector, "none|bounded|monotonicity");
  run->add_option("--mono-interval", mono_interval, "steps between monotonicity checks");
  run->add_option("--sdc-interval", sdc_interval, "none|N (inner spmvs between injections)");
  run->add_option("--sdc-model", sdc_model, "bitflip|bitflip:B|scale:F");
  run->add_option("--failures", failures, "none|auto:MEAN:COUNT|list:r@k,...");
  run->add_option("--seed", seed);
  run->add_option("--reps", reps);
  run->add_option("--checkpoint-basis", checkpoint_basis,
                  "checkpoint the outer basis (false: solution only)");
  run->add_option("--watchdog", watchdog, "deadlock watchdog seconds");
  run->add_option("--out", out_path, "output path ('-' or empty: stdout)");
  run->add_option("--format", format, "json|csv");

  // -- compare -------------------------------------------------------------
  CLI::App* compare = app.add_subcommand("compare", "combine four run reports");
  std::string base_path, se_path, pf_path, multi_path, cmp_out;
  compare->add_option("--baseline", base_path)->required();
  compare->add_option("--se", se_path)->required();
  compare->add_option("--pf", pf_path)->required();
  compare->add_option("--multi", multi_path)->required();
  compare->add_option("--out", cmp_out, "output path ('-' or empty: stdout)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (run->parsed()) {
      ExperimentConfig cfg;
      if (!cfg_file.empty()) cfg = resilab::harness::load_config_file(cfg_file);

      // Flags override the config file; only flags the user actually passed.
      const auto touched = [&](const std::string& flag) { return run->count(flag) > 0; };
      if (cfg_file.empty() || touched("--problem")) resilab::harness::apply_kv(cfg, "problem", problem);
      if (cfg_file.empty() || touched("--nx")) resilab::harness::apply_kv(cfg, "nx", std::to_string(nx));
      if (cfg_file.empty() || touched("--ny")) resilab::harness::apply_kv(cfg, "ny", std::to_string(ny));
      if (cfg_file.empty() || touched("--nz")) resilab::harness::apply_kv(cfg, "nz", std::to_string(nz));
      if (touched("--matrix")) resilab::harness::apply_kv(cfg, "matrix", matrix_path);
      if (cfg_file.empty() || touched("--ranks")) resilab::harness::apply_kv(cfg, "ranks", std::to_string(ranks));
      if (cfg_file.empty() || touched("--spares")) resilab::harness::apply_kv(cfg, "spares", std::to_string(spares));
      if (cfg_file.empty() || touched("--inner")) resilab::harness::apply_kv(cfg, "inner", std::to_string(inner));
      if (cfg_file.empty() || touched("--outer")) resilab::harness::apply_kv(cfg, "outer", std::to_string(outer));
      if (cfg_file.empty() || touched("--tol")) cfg.solver.tol = tol;
      if (cfg_file.empty() || touched("--detector")) resilab::harness::apply_kv(cfg, "detector", detector);
      if (cfg_file.empty() || touched("--mono-interval"))
        resilab::harness::apply_kv(cfg, "mono-interval", std::to_string(mono_interval));
      if (cfg_file.empty() || touched("--sdc-interval"))
        resilab::harness::apply_kv(cfg, "sdc-interval", sdc_interval);
      if (cfg_file.empty() || touched("--sdc-model")) resilab::harness::apply_kv(cfg, "sdc-model", sdc_model);
      if (cfg_file.empty() || touched("--failures")) resilab::harness::apply_kv(cfg, "failures", failures);
      if (cfg_file.empty() || touched("--seed")) resilab::harness::apply_kv(cfg, "seed", std::to_string(seed));
      if (cfg_file.empty() || touched("--reps")) resilab::harness::apply_kv(cfg, "reps", std::to_string(reps));
      if (cfg_file.empty() || touched("--checkpoint-basis"))
        resilab::harness::apply_kv(cfg, "checkpoint-basis", checkpoint_basis ? "true" : "false");
      if (cfg_file.empty() || touched("--watchdog")) cfg.watchdog_seconds = watchdog;

      const resilab::harness::RunReport report = resilab::harness::run_experiment(cfg);

      std::string text;
      if (format == "json")
        text = resilab::harness::to_json(report);
      else if (format == "csv")
        text = resilab::harness::to_csv(report);
      else {
        std::cerr << "error: unknown format '" << format << "' (json|csv)\n";
        return 1;
      }
      const int io = write_out(out_path, text);
      if (io != 0) return io;

      bool all_converged = !report.reps.empty();
      for (const auto& rep : report.reps) all_converged &= rep.converged && !rep.aborted;
      return all_converged ? 0 : 2;
    }

    // compare
    const auto base = resilab::harness::load_report(base_path);
    const auto se = resilab::harness::load_report(se_path);
    const auto pf = resilab::harness::load_report(pf_path);
    const auto multi = resilab::harness::load_report(multi_path);
    const resilab::harness::CompareReport cr =
        resilab::harness::compare_runs(base, se, pf, multi);
    return write_out(cmp_out, resilab::harness::to_json(cr));
  } catch (const resilab::harness::UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const resilab::harness::ConfigMismatch& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "fatal: " << e.what() << "\n";
    return 2;
  }
}
