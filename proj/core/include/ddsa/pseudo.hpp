#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "ddsa/data.hpp"
#include "ddsa/error.hpp"
#include "ddsa/nn.hpp"

namespace ddsa::pseudo {

/// C x C nonnegative entries. Rows are true classes, columns predicted ones.
/// Raw counts are integral; estimated matrices may hold fractions.
class ConfusionMatrix {
 public:
  ConfusionMatrix() = default;
  explicit ConfusionMatrix(int num_classes);

  int num_classes() const { return num_classes_; }
  double& operator()(int true_class, int predicted) { return data_[index(true_class, predicted)]; }
  double operator()(int true_class, int predicted) const { return data_[index(true_class, predicted)]; }

  double column_sum(int j) const;
  double row_sum(int i) const;
  double total() const;
  const std::vector<double>& data() const { return data_; }

  static ConfusionMatrix diagonal(std::span<const std::int64_t> counts);

  void validate() const;

  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;

 private:
  std::size_t index(int i, int j) const {
    return static_cast<std::size_t>(i) * static_cast<std::size_t>(num_classes_) + static_cast<std::size_t>(j);
  }

  int num_classes_ = 0;
  std::vector<double> data_;
};

/// Column j with n_j > 0 had no mass in the global test confusion.
class CoverageError : public Error {
 public:
  CoverageError(int column, const std::string& what) : Error(what), column_(column) {}
  int column() const { return column_; }

 private:
  int column_;
};

/// n_j = number of samples carrying label j.
using PseudoLabelCounts = std::vector<std::int64_t>;

PseudoLabelCounts label_counts(const data::Dataset& d);

/// Labels every sample with the classifier's argmax. Provenance becomes
/// pseudo; hidden labels are carried over untouched.
data::Dataset pseudo_label(const nn::ParamVector& params, const nn::MlpSpec& spec, const data::Dataset& unlabeled);

/// counts(i, j) = number of test samples of true class i predicted as j.
ConfusionMatrix local_confusion(const nn::ParamVector& params, const nn::MlpSpec& spec, const data::Dataset& test);

/// Confusion of arbitrary (truth, prediction) pairs.
ConfusionMatrix confusion_from_pairs(int num_classes, std::span<const int> truth, std::span<const int> predicted);

/// Elementwise sum.
ConfusionMatrix aggregate_confusions(std::span<const ConfusionMatrix> matrices);

/// Estimated confusion of a pseudo-labeled set: column j of the global test
/// confusion, normalised to a distribution over true classes, scaled by n_j.
/// Throws CoverageError when n_j > 0 but the column is empty.
ConfusionMatrix estimate_pseudo_confusion(const ConfusionMatrix& global_test, const PseudoLabelCounts& counts);

/// CSV with C rows of C comma-separated values.
void write_confusion_csv(const std::filesystem::path& path, const ConfusionMatrix& m);
ConfusionMatrix read_confusion_csv(const std::filesystem::path& path);

}  // namespace ddsa::pseudo
