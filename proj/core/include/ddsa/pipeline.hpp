#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "ddsa/data.hpp"
#include "ddsa/diffusion.hpp"
#include "ddsa/fed.hpp"
#include "ddsa/nn.hpp"
#include "ddsa/pseudo.hpp"
#include "ddsa/select.hpp"
#include "ddsa/synth.hpp"

namespace ddsa::pipeline {

/// Class-conditional Gaussian mixture the experiment draws from. Class means
/// sit on a circle of `radius` in the first two coordinates.
struct WorldConfig {
  int num_classes = 4;
  std::size_t dim = 2;
  std::size_t per_class_n = 500;
  double radius = 2.0;
  double sigma = 1.0;
  /// Share of every class held out as the common global test set.
  double test_fraction = 0.2;

  void validate() const;
};

struct ScheduleConfig {
  std::size_t T = 200;
  double beta_1 = 5e-4;
  double beta_T = 0.1;
};

enum class BaselineMode { none, fedavg_labeled, fedavg_sl };

std::string_view to_string(BaselineMode m);
BaselineMode baseline_mode_from_string(std::string_view s);

struct ExperimentConfig {
  WorldConfig world;
  /// partition.test_fraction is the per-client local test share of the
  /// labeled data; partition.seed is ignored in favour of `seed`.
  data::PartitionConfig partition;

  fed::RoundConfig classifier_rounds;
  fed::RoundConfig vae_rounds;
  fed::RoundConfig cdm_rounds;
  fed::RoundConfig retrain_rounds;

  /// Hidden layers and activation; widths of input and output follow the world.
  nn::MlpSpec classifier;
  nn::VaeSpec vae;
  double kl_weight = 1e-3;
  diffusion::DenoiserSpec denoiser;
  ScheduleConfig schedule;

  select::SelectionConfig selection;
  synth::SynthesisConfig synthesis;

  std::uint64_t seed = 0;
  std::filesystem::path output_dir;
  bool use_selection = true;
  BaselineMode baseline_mode = BaselineMode::none;
  /// Client worker threads; 0 reads DDSA_THREADS.
  std::size_t threads = 0;

  /// Copies world sizes into the model specs and checks every sub-config.
  void resolve();
  void validate() const;
};

/// Field-by-field JSON. Missing keys keep their defaults; unknown keys are
/// rejected.
ExperimentConfig config_from_json(std::string_view text);
std::string config_to_json(const ExperimentConfig& config);
ExperimentConfig load_config(const std::filesystem::path& path);

struct Evaluation {
  double accuracy = 0.0;
  std::vector<double> precision;
  std::vector<double> recall;
  pseudo::ConfusionMatrix confusion;

  double macro_precision() const;
  double macro_recall() const;
  friend bool operator==(const Evaluation&, const Evaluation&) = default;
};

/// Metrics of a confusion matrix. A class that is never predicted has
/// precision 0; a class absent from the test set has recall 0.
Evaluation evaluate_confusion(const pseudo::ConfusionMatrix& confusion);
Evaluation evaluate(const nn::ParamVector& params, const nn::MlpSpec& spec, const data::Dataset& test);

struct PhaseTraffic {
  std::uint64_t bytes_up = 0;
  std::uint64_t bytes_down = 0;
  friend bool operator==(const PhaseTraffic&, const PhaseTraffic&) = default;
};

struct ClientReport {
  std::size_t client_id = 0;
  std::size_t n_labeled = 0;    // training part
  std::size_t n_local_test = 0;
  std::size_t n_unlabeled = 0;
  std::size_t n_selected = 0;
  std::size_t n_synthetic = 0;
  std::vector<double> rho;
  double alpha_requested = 0.0;
  double alpha_realized = 0.0;
  friend bool operator==(const ClientReport&, const ClientReport&) = default;
};

struct RunReport {
  std::string method;  // ddsa_fssl, fedavg_labeled or fedavg_sl
  std::uint64_t seed = 0;
  bool oracle_labels = false;
  /// Ordered (phase, evaluation on the global test set).
  std::vector<std::pair<std::string, Evaluation>> phases;
  std::vector<ClientReport> clients;
  std::map<std::string, PhaseTraffic> traffic;
  /// Pseudo-label accuracy against the hidden labels, for diagnostics.
  double pseudo_label_accuracy = 0.0;
  double selected_label_accuracy = 0.0;
  std::map<std::string, double> wall_ms;

  const Evaluation& final_eval() const { return phases.back().second; }
  const Evaluation* phase(std::string_view name) const;
  double accuracy() const { return final_eval().accuracy; }

  /// Equality of everything except wall time.
  bool same_outcome(const RunReport& other) const;
};

std::string report_to_json(const RunReport& report);
RunReport report_from_json(std::string_view text);
/// Rebuilds the report from a run directory.
RunReport load_report(const std::filesystem::path& run_dir);

/// Labeled, unlabeled and test data as every method sees it.
struct World {
  data::Dataset global_test;
  std::vector<data::Dataset> labeled;     // per client, local test removed
  std::vector<data::Dataset> local_test;  // per client
  std::vector<data::Dataset> unlabeled;   // per client
};

World build_world(const ExperimentConfig& config);

RunReport run_ddsa_fssl(const ExperimentConfig& config);
RunReport run_baseline(const ExperimentConfig& config);
/// Dispatches on config.baseline_mode.
RunReport run(const ExperimentConfig& config);

enum class SweepAxis { alpha, lambda, gamma, selection };

std::string_view to_string(SweepAxis a);
SweepAxis sweep_axis_from_string(std::string_view s);

/// Copy of `base` with `axis` set to `value` (selection: value != 0).
ExperimentConfig with_axis(const ExperimentConfig& base, SweepAxis axis, double value);

struct SweepPoint {
  double value = 0.0;
  RunReport report;
};

/// One run per value with the base seed. Run artifacts go to
/// <output_dir>/<axis>_<value>/ and the table to <output_dir>/sweep.csv.
std::vector<SweepPoint> run_sweep(const ExperimentConfig& base, SweepAxis axis, const std::vector<double>& values);

void write_sweep_csv(const std::filesystem::path& path, SweepAxis axis, const std::vector<SweepPoint>& points);

}  // namespace ddsa::pipeline
