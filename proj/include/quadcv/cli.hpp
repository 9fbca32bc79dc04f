#ifndef QUADCV_CLI_HPP
#define QUADCV_CLI_HPP

// Command-line front end. Exit codes: 0 success, 1 runtime failure (bad
// config, I/O, failed gradient check), 2 command-line usage error.

#include "quadcv/config.hpp"
#include "quadcv/gradcheck.hpp"
#include "quadcv/trace.hpp"
#include "quadcv/trainer.hpp"

#include <CLI11.hpp>

#include <cstdint>
#include <exception>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

namespace quadcv {

namespace detail {

struct CliOverrides {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<int> threads;
};

inline void add_common_flags(CLI::App* sub, CliOverrides& o, bool config_required) {
  auto* cfg = sub->add_option("--config", o.config, "run configuration (key=value per line)");
  if (config_required) cfg->required()->check(CLI::ExistingFile);
  sub->add_option("--seed", o.seed, "random seed, overrides the config");
  sub->add_option("--out", o.out, "output path, overrides the config");
  sub->add_option("--threads", o.threads, "worker threads for per-sample gradients")->check(CLI::PositiveNumber);
}

inline RunConfig load_with_overrides(const CliOverrides& o) {
  RunConfig cfg = parse_config(o.config);
  if (o.seed) cfg.seed = *o.seed;
  if (o.out) cfg.output = *o.out;
  if (o.threads) cfg.threads = *o.threads;
  cfg.validate();
  return cfg;
}

}  // namespace detail

inline int cli_main(int argc, char** argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Reparameterization-gradient variational inference with quadratic control variates"};
  app.require_subcommand(1);
  detail::CliOverrides o;
  auto* run_cmd = app.add_subcommand("run", "optimize the ELBO and write a trace CSV");
  auto* sigma_cmd = app.add_subcommand("sweep-sigma", "gradient variance vs sigma at fixed w");
  auto* step_cmd = app.add_subcommand("sweep-stepsize", "one run per step size in step_grid");
  auto* check_cmd = app.add_subcommand("check-grads", "finite-difference checks of all analytic gradients");
  for (auto* sub : {run_cmd, sigma_cmd, step_cmd}) detail::add_common_flags(sub, o, true);
  detail::add_common_flags(check_cmd, o, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return 2;
  }

  try {
    if (run_cmd->parsed()) {
      const RunConfig cfg = detail::load_with_overrides(o);
      const auto result = run(cfg);
      out << "wrote " << cfg.output << " (" << result.trace.size() << " rows)\n";
    } else if (sigma_cmd->parsed()) {
      const RunConfig cfg = detail::load_with_overrides(o);
      const auto model = make_model(cfg);
      const auto rows = sigma_sweep(cfg, *model);
      std::ofstream file(cfg.output);
      if (!file) throw std::runtime_error("cannot write '" + cfg.output + "'");
      write_sweep(file, rows);
      out << "wrote " << cfg.output << " (" << rows.size() << " rows)\n";
    } else if (step_cmd->parsed()) {
      const RunConfig cfg = detail::load_with_overrides(o);
      for (const auto& path : stepsize_sweep(cfg)) out << "wrote " << path << '\n';
    } else if (check_cmd->parsed()) {
      std::uint64_t seed = o.seed.value_or(0);
      if (!o.config.empty() && !o.seed) seed = parse_config(o.config).seed;
      const bool ok = print_grad_checks(run_grad_checks(seed), out);
      out << (ok ? "all gradient checks passed" : "gradient checks FAILED") << '\n';
      return ok ? 0 : 1;
    }
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

}  // namespace quadcv

#endif  // QUADCV_CLI_HPP
