#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string_view>
#include <vector>

#include "ddsa/data.hpp"
#include "ddsa/pseudo.hpp"

namespace ddsa::select {

using pseudo::ConfusionMatrix;

/// rho[c] in [0, 1]: kept proportion of the samples pseudo-labeled c.
using SelectionVector = std::vector<double>;

enum class SolverKind { projected_gradient, grid_oracle };

std::string_view to_string(SolverKind k);
SolverKind solver_kind_from_string(std::string_view s);

struct SelectionConfig {
  double w_l1 = 0.01;
  double w_p = 0.1;
  double tau = 0.9;
  SolverKind solver = SolverKind::projected_gradient;
  std::size_t restarts = 4;      // random starts on top of {0, tau, 1}
  std::size_t max_iters = 200;   // per start
  double step_size = 0.5;        // initial and maximum ascent step
  double tolerance = 1e-9;
  double fd_step = 1e-4;
  double grid_step = 0.05;       // grid_oracle only
  std::uint64_t seed = 0;

  void validate() const;
};

/// M_l + M_p diag(rho).
ConfusionMatrix mixed_confusion(const ConfusionMatrix& labeled, const ConfusionMatrix& pseudo,
                                std::span<const double> rho);

/// Mean of M[j][j] / sum_i M[i][j] over the columns with a positive sum.
/// Throws NumericError when every column is empty.
double average_precision(const ConfusionMatrix& m);

/// Average precision of the mixed matrix minus w_l1 * sum|rho| and
/// w_p * (mean(rho) - tau)^2.
double selection_objective(std::span<const double> rho, const ConfusionMatrix& labeled,
                           const ConfusionMatrix& pseudo, const SelectionConfig& config);

struct TraceRow {
  std::size_t iter = 0;
  double objective = 0.0;
  double step_size = 0.0;
  double projected_norm = 0.0;
};

struct SelectionResult {
  SelectionVector rho;
  double objective = 0.0;
  /// False when some start hit max_iters before its step collapsed.
  bool converged = true;
  std::size_t iterations = 0;
  /// Iterates of the start that produced the result.
  std::vector<TraceRow> trace;
};

/// Box-constrained maximiser of selection_objective. Deterministic given
/// (inputs, config.seed).
SelectionResult solve_selection(const ConfusionMatrix& labeled, const ConfusionMatrix& pseudo,
                                const SelectionConfig& config);

/// Keeps round(rho[c] * n_c) uniformly chosen samples of each class, in input
/// order.
data::Dataset apply_selection(const data::Dataset& pseudo_set, std::span<const double> rho, std::uint64_t seed);

void write_trace_csv(const std::filesystem::path& path, std::span<const TraceRow> trace);

}  // namespace ddsa::select
