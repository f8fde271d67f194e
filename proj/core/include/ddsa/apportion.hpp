#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace ddsa {

/// Splits `total` into integer parts proportional to `weights` using the
/// largest-remainder method. Leftover units go to the largest fractional
/// parts; ties break toward the lower index. The parts always sum to `total`.
/// Weights must be nonnegative with a positive sum.
std::vector<std::int64_t> largest_remainder(std::int64_t total,
                                            std::span<const double> weights);

/// Round half up for nonnegative values.
std::int64_t round_half_up(double x);

}  // namespace ddsa
