#include "ddsa/select.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "ddsa/apportion.hpp"
#include "ddsa/rng.hpp"

namespace ddsa::select {

namespace {

double norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

void project(std::vector<double>& x) {
  for (auto& v : x) v = std::clamp(v, 0.0, 1.0);
}

// The solver treats an all-empty mixture (no labeled data, nothing kept) as
// zero precision rather than an error, so a client with no labeled samples
// still gets a selection.
double objective_or_zero(std::span<const double> rho, const ConfusionMatrix& l, const ConfusionMatrix& p,
                         const SelectionConfig& cfg) {
  try {
    return selection_objective(rho, l, p, cfg);
  } catch (const NumericError&) {
    double penalty = 0.0, mean = 0.0;
    for (double r : rho) {
      penalty += std::fabs(r);
      mean += r;
    }
    mean /= static_cast<double>(rho.size());
    return -cfg.w_l1 * penalty - cfg.w_p * (mean - cfg.tau) * (mean - cfg.tau);
  }
}

struct StartResult {
  std::vector<double> x;
  double f = 0.0;
  bool converged = false;
  std::size_t iterations = 0;
  std::vector<TraceRow> trace;
};

StartResult ascend(std::vector<double> x, const ConfusionMatrix& l, const ConfusionMatrix& p,
                   const SelectionConfig& cfg) {
  const auto f = [&](std::span<const double> r) { return objective_or_zero(r, l, p, cfg); };
  project(x);
  StartResult res;
  double fx = f(x);
  double step = cfg.step_size;
  const std::size_t C = x.size();
  std::vector<double> g(C), probe(C), xn(C);
  for (std::size_t it = 0; it < cfg.max_iters; ++it) {
    res.iterations = it + 1;
    for (std::size_t c = 0; c < C; ++c) {
      probe = x;
      const double hi = std::min(x[c] + cfg.fd_step, 1.0);
      const double lo = std::max(x[c] - cfg.fd_step, 0.0);
      probe[c] = hi;
      const double f_hi = f(probe);
      probe[c] = lo;
      const double f_lo = f(probe);
      g[c] = (f_hi - f_lo) / (hi - lo);
    }
    for (std::size_t c = 0; c < C; ++c) probe[c] = std::clamp(x[c] + g[c], 0.0, 1.0) - x[c];
    const double pn = norm(probe);
    res.trace.push_back({it, fx, step, pn});
    if (pn < cfg.tolerance) {
      res.converged = true;
      break;
    }
    bool accepted = false;
    while (step >= 1e-10) {
      for (std::size_t c = 0; c < C; ++c) xn[c] = std::clamp(x[c] + step * g[c], 0.0, 1.0);
      double dir = 0.0, moved = 0.0;
      for (std::size_t c = 0; c < C; ++c) {
        dir += g[c] * (xn[c] - x[c]);
        moved += (xn[c] - x[c]) * (xn[c] - x[c]);
      }
      if (std::sqrt(moved) < cfg.tolerance) break;
      const double fn = f(xn);
      if (fn >= fx + 1e-4 * dir) {
        const double gain = fn - fx;
        x = xn;
        fx = fn;
        step = std::min(2.0 * step, cfg.step_size);
        accepted = true;
        if (gain < cfg.tolerance) res.converged = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) res.converged = true;
    if (res.converged) break;
  }
  res.x = std::move(x);
  res.f = fx;
  return res;
}

SelectionResult grid_search(const ConfusionMatrix& l, const ConfusionMatrix& p, const SelectionConfig& cfg) {
  const std::size_t C = static_cast<std::size_t>(l.num_classes());
  const auto steps = static_cast<std::size_t>(std::llround(1.0 / cfg.grid_step));
  std::vector<std::size_t> idx(C, 0);
  std::vector<double> rho(C, 0.0);
  SelectionResult best;
  bool have = false;
  for (;;) {
    for (std::size_t c = 0; c < C; ++c) rho[c] = std::min(1.0, static_cast<double>(idx[c]) * cfg.grid_step);
    const double v = objective_or_zero(rho, l, p, cfg);
    ++best.iterations;
    if (!have || v > best.objective) {
      best.objective = v;
      best.rho = rho;
      have = true;
    }
    std::size_t c = 0;
    while (c < C && ++idx[c] > steps) idx[c++] = 0;
    if (c == C) break;
  }
  return best;
}

}  // namespace

std::string_view to_string(SolverKind k) {
  return k == SolverKind::projected_gradient ? "projected_gradient" : "grid_oracle";
}

SolverKind solver_kind_from_string(std::string_view s) {
  if (s == "projected_gradient") return SolverKind::projected_gradient;
  if (s == "grid_oracle") return SolverKind::grid_oracle;
  throw std::invalid_argument("unknown selection solver '" + std::string(s) + "'");
}

void SelectionConfig::validate() const {
  if (w_l1 < 0.0 || w_p < 0.0) throw std::invalid_argument("selection: weights must be >= 0");
  if (!(tau >= 0.0 && tau <= 1.0)) throw std::invalid_argument("selection: tau must lie in [0, 1]");
  if (!(step_size > 0.0) || !(fd_step > 0.0)) throw std::invalid_argument("selection: steps must be positive");
  if (!(grid_step > 0.0 && grid_step <= 1.0)) throw std::invalid_argument("selection: grid step must lie in (0, 1]");
}

ConfusionMatrix mixed_confusion(const ConfusionMatrix& labeled, const ConfusionMatrix& pseudo,
                                std::span<const double> rho) {
  const int C = labeled.num_classes();
  if (pseudo.num_classes() != C || rho.size() != static_cast<std::size_t>(C))
    throw DimensionError("mixed_confusion: dimension mismatch");
  ConfusionMatrix m(C);
  for (int i = 0; i < C; ++i)
    for (int j = 0; j < C; ++j) m(i, j) = labeled(i, j) + rho[static_cast<std::size_t>(j)] * pseudo(i, j);
  return m;
}

double average_precision(const ConfusionMatrix& m) {
  double sum = 0.0;
  int used = 0;
  for (int j = 0; j < m.num_classes(); ++j) {
    const double col = m.column_sum(j);
    if (col == 0.0) continue;
    sum += m(j, j) / col;
    ++used;
  }
  if (used == 0) throw NumericError("average_precision: every column is empty");
  return sum / used;
}

double selection_objective(std::span<const double> rho, const ConfusionMatrix& labeled, const ConfusionMatrix& pseudo,
                           const SelectionConfig& config) {
  const double precision = average_precision(mixed_confusion(labeled, pseudo, rho));
  double l1 = 0.0, mean = 0.0;
  for (double r : rho) {
    l1 += std::fabs(r);
    mean += r;
  }
  mean /= static_cast<double>(rho.size());
  return precision - config.w_l1 * l1 - config.w_p * (mean - config.tau) * (mean - config.tau);
}

SelectionResult solve_selection(const ConfusionMatrix& labeled, const ConfusionMatrix& pseudo,
                                const SelectionConfig& config) {
  config.validate();
  const int C = labeled.num_classes();
  if (pseudo.num_classes() != C) throw DimensionError("solve_selection: dimension mismatch");
  labeled.validate();
  pseudo.validate();
  if (config.solver == SolverKind::grid_oracle) return grid_search(labeled, pseudo, config);

  const std::size_t n = static_cast<std::size_t>(C);
  std::vector<std::vector<double>> starts{std::vector<double>(n, 0.0), std::vector<double>(n, config.tau),
                                          std::vector<double>(n, 1.0)};
  Rng rng(derive_seed(config.seed, {0x5E1EC7}));
  for (std::size_t r = 0; r < config.restarts; ++r) {
    std::vector<double> x(n);
    for (auto& v : x) v = rng.uniform();
    starts.push_back(std::move(x));
  }

  SelectionResult best;
  bool have = false;
  bool all_converged = true;
  std::size_t total_iters = 0;
  for (const auto& s : starts) {
    StartResult r = ascend(s, labeled, pseudo, config);
    all_converged = all_converged && r.converged;
    total_iters += r.iterations;
    if (!have || r.f > best.objective) {
      best.rho = std::move(r.x);
      best.objective = r.f;
      best.trace = std::move(r.trace);
      have = true;
    }
  }

  // Column precision is flat in rho_j once a column holds only pseudo data,
  // and drops out of the average at rho_j = 0. Gradient steps cannot see that
  // jump, so try the box corners coordinate by coordinate.
  for (bool improved = true; improved;) {
    improved = false;
    for (std::size_t c = 0; c < n; ++c) {
      for (double corner : {0.0, 1.0}) {
        if (best.rho[c] == corner) continue;
        auto trial = best.rho;
        trial[c] = corner;
        const double v = objective_or_zero(trial, labeled, pseudo, config);
        if (v > best.objective + config.tolerance) {
          best.rho = std::move(trial);
          best.objective = v;
          improved = true;
        }
      }
    }
  }
  best.converged = all_converged;
  best.iterations = total_iters;
  return best;
}

data::Dataset apply_selection(const data::Dataset& pseudo_set, std::span<const double> rho, std::uint64_t seed) {
  if (rho.size() != static_cast<std::size_t>(pseudo_set.num_classes))
    throw DimensionError("apply_selection: one proportion per class required");
  std::vector<std::vector<std::size_t>> by_class(rho.size());
  for (std::size_t i = 0; i < pseudo_set.size(); ++i) {
    const auto& s = pseudo_set.samples[i];
    if (!s.label) throw std::invalid_argument("apply_selection: sample without a pseudo label");
    by_class[static_cast<std::size_t>(*s.label)].push_back(i);
  }
  Rng rng(seed);
  std::vector<bool> keep(pseudo_set.size(), false);
  for (std::size_t c = 0; c < rho.size(); ++c) {
    if (!(rho[c] >= 0.0 && rho[c] <= 1.0)) throw std::invalid_argument("apply_selection: rho outside [0, 1]");
    auto& idx = by_class[c];
    for (std::size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
    const auto k = static_cast<std::size_t>(
        std::min<std::int64_t>(round_half_up(rho[c] * static_cast<double>(idx.size())),
                               static_cast<std::int64_t>(idx.size())));
    for (std::size_t i = 0; i < k; ++i) keep[idx[i]] = true;
  }
  data::Dataset out = data::empty_like(pseudo_set);
  for (std::size_t i = 0; i < pseudo_set.size(); ++i)
    if (keep[i]) out.samples.push_back(pseudo_set.samples[i]);
  return out;
}

void write_trace_csv(const std::filesystem::path& path, std::span<const TraceRow> trace) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path.string());
  out.precision(12);
  out << "iter,objective,step_size,projected_norm\n";
  for (const auto& r : trace) out << r.iter << ',' << r.objective << ',' << r.step_size << ',' << r.projected_norm << '\n';
}

}  // namespace ddsa::select
