#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace ddsa::data {

enum class Provenance { labeled, unlabeled, pseudo, synthetic };

std::string_view to_string(Provenance p);
Provenance provenance_from_string(std::string_view s);

/// One feature vector with its (possibly absent) label.
///
/// Unlabeled and pseudo-labeled samples may carry the ground-truth label of
/// the world they were drawn from. That label is only for evaluating pseudo
/// label quality; reading it inside a TrainingScope throws LabelLeakError.
class Sample {
 public:
  std::vector<float> features;
  std::optional<int> label;
  Provenance provenance = Provenance::labeled;

  bool has_hidden_label() const { return hidden_label_.has_value(); }
  /// Ground truth for evaluation. Throws LabelLeakError inside a TrainingScope.
  int hidden_label() const;
  void set_hidden_label(std::optional<int> y) { hidden_label_ = y; }

  friend bool operator==(const Sample&, const Sample&) = default;

 private:
  std::optional<int> hidden_label_;
};

/// RAII marker for code that must not see hidden labels. Nestable and
/// process-wide, so worker threads spawned under it are covered too.
class TrainingScope {
 public:
  TrainingScope();
  ~TrainingScope();
  TrainingScope(const TrainingScope&) = delete;
  TrainingScope& operator=(const TrainingScope&) = delete;

  static bool active();
};

/// Number of successful hidden-label reads since process start.
std::uint64_t hidden_label_reads();

struct Dataset {
  std::string name;
  int num_classes = 0;
  std::size_t dim = 0;
  std::vector<Sample> samples;

  std::size_t size() const { return samples.size(); }
  bool empty() const { return samples.empty(); }

  /// Per-class counts of the visible labels. Samples without a label are
  /// skipped.
  std::vector<std::int64_t> label_histogram() const;

  /// Checks features are finite with length `dim`, labels are within range,
  /// and that a label is present exactly when provenance is not unlabeled.
  void validate() const;

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

/// Empty dataset with the same name, class count and dimension.
Dataset empty_like(const Dataset& d);
Dataset subset(const Dataset& d, std::span<const std::size_t> indices);
/// Samples of `a` followed by samples of `b`.
Dataset concat(const Dataset& a, const Dataset& b);

enum class SplitMode { iid, dir };

std::string_view to_string(SplitMode m);
SplitMode split_mode_from_string(std::string_view s);

struct PartitionConfig {
  std::size_t num_clients = 5;
  double gamma = 0.1;
  double labeled_ratio = 0.1;
  double test_fraction = 0.2;
  SplitMode label_mode = SplitMode::dir;
  SplitMode unlabeled_mode = SplitMode::dir;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Evenly spaced points on a circle, a convenient set of class centres.
std::vector<std::vector<double>> circle_means(int num_classes, double radius);

/// `per_class_n` draws from N(means[c], sigma^2 I) for every class, grouped
/// by class. All samples are labeled.
Dataset make_gaussian_mixture(int num_classes, std::size_t per_class_n,
                              const std::vector<std::vector<double>>& means,
                              double sigma, std::uint64_t seed);

/// Splits a labeled dataset across `num_clients` clients.
///
/// IID gives every client an equal share of each class. DIR draws, for each
/// class, client proportions q ~ Dir(gamma) and hands out that class's
/// samples by largest-remainder rounding of n_c * q. Partitions are disjoint,
/// their union is the input, and each keeps the input order. Unlabeled
/// samples are grouped by their hidden label.
std::vector<Dataset> dirichlet_partition(const Dataset& dataset,
                                         std::size_t num_clients, SplitMode mode,
                                         double gamma, std::uint64_t seed);

/// Picks round(ratio * n) samples to stay labeled. The rest become unlabeled;
/// their label moves to the hidden slot.
std::pair<Dataset, Dataset> labeled_split(const Dataset& dataset, double ratio,
                                          std::uint64_t seed);

/// Stratified holdout. Each class contributes round(fraction * n_c) test
/// samples; with `min_one_per_class` every class holding at least two samples
/// contributes at least one. Returns {train, test}.
std::pair<Dataset, Dataset> holdout_test_split(const Dataset& labeled,
                                               double test_fraction,
                                               std::uint64_t seed,
                                               bool min_one_per_class = true);

/// Writes `manifest.json` and `features.bin` into `dir`.
void save_dataset(const Dataset& dataset, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

}  // namespace ddsa::data
