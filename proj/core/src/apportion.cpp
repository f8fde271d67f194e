#include "ddsa/apportion.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace ddsa {

std::vector<std::int64_t> largest_remainder(std::int64_t total,
                                            std::span<const double> weights) {
  if (total < 0) throw std::invalid_argument("largest_remainder: negative total");
  if (weights.empty()) throw std::invalid_argument("largest_remainder: no weights");
  double sum = 0.0;
  for (double w : weights) {
    if (!(w >= 0.0) || !std::isfinite(w))
      throw std::invalid_argument("largest_remainder: weights must be finite and >= 0");
    sum += w;
  }
  if (!(sum > 0.0)) throw std::invalid_argument("largest_remainder: weights sum to zero");

  const std::size_t n = weights.size();
  std::vector<std::int64_t> parts(n);
  std::vector<double> remainder(n);
  std::int64_t assigned = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double exact = static_cast<double>(total) * (weights[i] / sum);
    parts[i] = static_cast<std::int64_t>(std::floor(exact));
    remainder[i] = exact - static_cast<double>(parts[i]);
    assigned += parts[i];
  }
  // Floating error can overshoot by a unit when the shares are near-integral.
  while (assigned > total) {
    auto it = std::max_element(parts.begin(), parts.end());
    --*it;
    --assigned;
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return remainder[a] > remainder[b];
  });
  for (std::size_t k = 0; assigned < total; k = (k + 1) % n) {
    ++parts[order[k]];
    ++assigned;
  }
  return parts;
}

std::int64_t round_half_up(double x) {
  return static_cast<std::int64_t>(std::floor(x + 0.5));
}

}  // namespace ddsa
