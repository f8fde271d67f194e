// Command line front end: run, baseline, sweep and report.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "ddsa/error.hpp"
#include "ddsa/pipeline.hpp"

namespace {

using namespace ddsa;

pipeline::ExperimentConfig prepare(const std::string& path, const std::optional<std::uint64_t>& seed,
                                   const std::optional<std::string>& out) {
  auto cfg = pipeline::load_config(path);
  if (seed) cfg.seed = *seed;
  if (out) cfg.output_dir = *out;
  cfg.resolve();
  return cfg;
}

void print_summary(const pipeline::RunReport& r) {
  std::printf("method            %s%s\n", r.method.c_str(), r.oracle_labels ? "  (oracle labels)" : "");
  std::printf("seed              %llu\n", static_cast<unsigned long long>(r.seed));
  for (const auto& [phase, e] : r.phases) {
    std::printf("%-17s accuracy %.4f  macro precision %.4f  macro recall %.4f\n", phase.c_str(), e.accuracy,
                e.macro_precision(), e.macro_recall());
  }
  if (r.method == "ddsa_fssl") {
    std::printf("pseudo-label acc  %.4f (selected %.4f)\n", r.pseudo_label_accuracy, r.selected_label_accuracy);
    for (const auto& c : r.clients)
      std::printf("client %-10zu labeled %zu  unlabeled %zu  selected %zu  synthetic %zu  alpha %.3f -> %.3f\n",
                  c.client_id, c.n_labeled, c.n_unlabeled, c.n_selected, c.n_synthetic, c.alpha_requested,
                  c.alpha_realized);
  }
  std::uint64_t up = 0, down = 0;
  for (const auto& [phase, t] : r.traffic) {
    up += t.bytes_up;
    down += t.bytes_down;
  }
  std::printf("traffic           %llu bytes up, %llu bytes down\n", static_cast<unsigned long long>(up),
              static_cast<unsigned long long>(down));
}

void write_per_class_csv(const pipeline::RunReport& r, std::ostream& os) {
  os << "phase,class,precision,recall\n";
  for (const auto& [phase, e] : r.phases)
    for (std::size_t c = 0; c < e.precision.size(); ++c)
      os << phase << ',' << c << ',' << e.precision[c] << ',' << e.recall[c] << '\n';
}

std::vector<double> parse_values(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  for (std::string item; std::getline(ss, item, ',');) {
    std::size_t used = 0;
    const double v = std::stod(item, &used);
    if (used != item.size()) throw std::invalid_argument("bad sweep value '" + item + "'");
    out.push_back(v);
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated semi-supervised learning with diffusion-based data augmentation"};
  app.require_subcommand(1);

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out_dir;

  auto* run = app.add_subcommand("run", "Run the full pipeline");
  run->add_option("--config", config_path, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
  run->add_option("--seed", seed, "Override the master seed");
  run->add_option("--out", out_dir, "Output directory");

  std::string mode;
  auto* baseline = app.add_subcommand("baseline", "Run a FedAvg baseline");
  baseline->add_option("--mode", mode, "fedavg_labeled or fedavg_sl")
      ->required()
      ->check(CLI::IsMember({"fedavg_labeled", "fedavg_sl"}));
  baseline->add_option("--config", config_path, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
  baseline->add_option("--seed", seed, "Override the master seed");
  baseline->add_option("--out", out_dir, "Output directory");

  std::string axis, values;
  auto* sweep = app.add_subcommand("sweep", "Run one experiment per value of an axis");
  sweep->add_option("--axis", axis, "alpha, lambda, gamma or selection")
      ->required()
      ->check(CLI::IsMember({"alpha", "lambda", "gamma", "selection"}));
  sweep->add_option("--values", values, "Comma-separated values")->required();
  sweep->add_option("--config", config_path, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
  sweep->add_option("--seed", seed, "Override the master seed");
  sweep->add_option("--out", out_dir, "Output directory");

  std::string run_dir;
  auto* report = app.add_subcommand("report", "Summarise a finished run");
  report->add_option("--run", run_dir, "Run directory")->required()->check(CLI::ExistingDirectory);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) {
      const auto cfg = prepare(config_path, seed, out_dir);
      print_summary(pipeline::run(cfg));
    } else if (*baseline) {
      auto cfg = prepare(config_path, seed, out_dir);
      cfg.baseline_mode = pipeline::baseline_mode_from_string(mode);
      print_summary(pipeline::run_baseline(cfg));
    } else if (*sweep) {
      const auto cfg = prepare(config_path, seed, out_dir);
      const auto a = pipeline::sweep_axis_from_string(axis);
      const auto points = pipeline::run_sweep(cfg, a, parse_values(values));
      pipeline::write_sweep_csv("/dev/stdout", a, points);
    } else if (*report) {
      const auto r = pipeline::load_report(run_dir);
      print_summary(r);
      const auto csv_path = std::filesystem::path(run_dir) / "per_class.csv";
      std::ofstream csv(csv_path);
      if (!csv) throw FormatError("cannot write " + csv_path.string());
      csv.precision(17);
      write_per_class_csv(r, csv);
      std::cout << "per-class metrics written to " << csv_path.string() << '\n';
    }
  } catch (const PhaseError& e) {
    std::cerr << "ddsa: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "ddsa: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
