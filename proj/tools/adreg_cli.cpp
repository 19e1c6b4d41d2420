#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>

#include "adreg/experiment.hpp"

using namespace adreg;

namespace {

// Flag name -> config key. Flags override the config file.
const std::vector<std::pair<std::string, std::string>> run_flags = {
    {"--M", "M"},
    {"--tau", "tau"},
    {"--model", "model"},
    {"--design", "design"},
    {"--n", "n"},
    {"--seed", "seed"},
    {"--kernel", "kernel"},
    {"--bandwidth-exponent", "bandwidth_exponent"},
    {"--bandwidth-clock", "bandwidth_clock"},
    {"--C1", "C1"},
    {"--C2", "C2"},
    {"--step-rule", "step_rule"},
    {"--snapshot-every", "snapshot_every"},
    {"--snapshot-ms", "snapshot_ms"},
    {"--mode", "mode"},
    {"--B1", "B1"},
    {"--clamp-gain", "clamp_gain"},
    {"--grid-source", "grid_source"},
    {"--grid-file", "grid_file"},
    {"--grid-cap", "grid_cap"},
    {"--test-fraction", "test_fraction"},
};

struct Overrides {
  std::string config_file;
  std::map<std::string, std::optional<std::string>> values;

  void attach(CLI::App* app, const std::vector<std::pair<std::string, std::string>>& flags) {
    app->add_option("--config", config_file, "key=value configuration file");
    for (const auto& [flag, key] : flags) app->add_option(flag, values[key], "overrides " + key);
  }

  RunConfig resolve() const {
    RunConfig c;
    if (!config_file.empty()) {
      std::ifstream in(config_file);
      if (!in) throw ConfigError("config", "cannot open '" + config_file + "'");
      c = parse_config(in);
    }
    for (const auto& [key, v] : values) {
      if (v) apply_setting(c, key, *v);
    }
    return c;
  }
};

template <class T>
std::vector<T> split_list(const std::string& text, const std::string& field, T (*parse)(const std::string&)) {
  std::vector<T> out;
  std::stringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    if (item.empty()) throw ConfigError(field, "empty list entry");
    out.push_back(parse(item));
  }
  return out;
}

std::size_t parse_m(const std::string& s) { return detail::parse_number<std::size_t>("M", s); }
TauSpec parse_tau(const std::string& s) { return TauSpec::parse(s); }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Asynchronous distributed online kernel regression"};
  app.require_subcommand(1);

  auto* run = app.add_subcommand("run", "generate data, run the distributed estimator, write series and trace");
  Overrides run_ov;
  std::string run_out = "adreg_out";
  run_ov.attach(run, run_flags);
  run->add_option("--out", run_out, "output directory");

  auto* verify = app.add_subcommand("verify", "replay a deterministic trace through the linear model");
  std::string trace_file, verify_config;
  verify->add_option("--trace", trace_file, "trace file written by run")->required();
  verify->add_option("--config", verify_config, "config.txt written by the same run")->required();

  auto* sweep_cmd = app.add_subcommand("sweep", "scaling and relative gain over M and tau");
  Overrides sweep_ov;
  std::string sweep_out = "adreg_sweep", m_list = "1,2,4,8", tau_list = "2";
  std::size_t jobs = 1;
  std::vector<std::pair<std::string, std::string>> sweep_flags;
  for (const auto& f : run_flags) {
    if (f.second != "M" && f.second != "tau") sweep_flags.push_back(f);
  }
  sweep_ov.attach(sweep_cmd, sweep_flags);
  sweep_cmd->add_option("--Ms", m_list, "comma-separated worker counts");
  sweep_cmd->add_option("--taus", tau_list, "comma-separated metronome periods, M2 for M^2");
  sweep_cmd->add_option("--jobs", jobs, "cells run in parallel");
  sweep_cmd->add_option("--out", sweep_out, "output directory");

  auto* validate = app.add_subcommand("validate", "report the convergence conditions of a schedule");
  Overrides val_ov;
  std::optional<std::size_t> dim;
  val_ov.attach(validate, {{"--model", "model"},
                           {"--M", "M"},
                           {"--design", "design"},
                           {"--seed", "seed"},
                           {"--kernel", "kernel"},
                           {"--bandwidth-exponent", "bandwidth_exponent"},
    {"--bandwidth-clock", "bandwidth_clock"},
                           {"--C1", "C1"},
                           {"--C2", "C2"},
                           {"--step-rule", "step_rule"}});
  validate->add_option("--dim", dim, "dimension, instead of a model's");

  auto* gen = app.add_subcommand("gen-data", "write the generated train/test/shard CSVs");
  Overrides gen_ov;
  std::string gen_out = "adreg_data";
  gen_ov.attach(gen, run_flags);
  gen->add_option("--out", gen_out, "output directory");

  CLI11_PARSE(app, argc, argv);

  try {
    if (run->parsed()) return cmd_run(run_ov.resolve(), run_out, std::cout);
    if (verify->parsed()) {
      std::ifstream in(verify_config);
      if (!in) throw ConfigError("config", "cannot open '" + verify_config + "'");
      return cmd_verify(trace_file, parse_config(in), std::cout);
    }
    if (sweep_cmd->parsed()) {
      return cmd_sweep(sweep_ov.resolve(), split_list(m_list, "M", parse_m), split_list(tau_list, "tau", parse_tau), jobs,
                       sweep_out, std::cout);
    }
    if (validate->parsed()) {
      const RunConfig c = val_ov.resolve();
      auto e = estimator_config(c);
      std::optional<DesignSpec> design;
      if (dim) {
        if (*dim < 1) throw ConfigError("dim", "must be at least 1");
        e.kernel.dim = *dim;
        const double d = static_cast<double>(*dim);
        e.bandwidth = BandwidthSchedule::power_law(c.bandwidth_exponent.value_or(-d / (d + 4.0)));
        design = DesignSpec(c.design, *dim);
      } else {
        design = DesignSpec(c.design, c.dim());
      }
      return cmd_validate(e, design, c.seed, std::cout);
    }
    if (gen->parsed()) return cmd_gen_data(gen_ov.resolve(), gen_out, std::cout);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return exit_validation;
  } catch (const InputError& e) {
    std::cerr << "input error: " << e.what() << '\n';
    return exit_validation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_failure;
  }
  return exit_ok;
}
