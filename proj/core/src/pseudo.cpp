#include "ddsa/pseudo.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

namespace ddsa::pseudo {

ConfusionMatrix::ConfusionMatrix(int num_classes)
    : num_classes_(num_classes),
      data_(static_cast<std::size_t>(num_classes) * static_cast<std::size_t>(num_classes), 0.0) {
  if (num_classes <= 0) throw std::invalid_argument("confusion matrix: num_classes must be positive");
}

double ConfusionMatrix::column_sum(int j) const {
  double s = 0.0;
  for (int i = 0; i < num_classes_; ++i) s += (*this)(i, j);
  return s;
}

double ConfusionMatrix::row_sum(int i) const {
  double s = 0.0;
  for (int j = 0; j < num_classes_; ++j) s += (*this)(i, j);
  return s;
}

double ConfusionMatrix::total() const {
  double s = 0.0;
  for (double v : data_) s += v;
  return s;
}

ConfusionMatrix ConfusionMatrix::diagonal(std::span<const std::int64_t> counts) {
  ConfusionMatrix m(static_cast<int>(counts.size()));
  for (std::size_t c = 0; c < counts.size(); ++c)
    m(static_cast<int>(c), static_cast<int>(c)) = static_cast<double>(counts[c]);
  return m;
}

void ConfusionMatrix::validate() const {
  for (double v : data_) {
    if (!std::isfinite(v)) throw NumericError("confusion matrix: non-finite entry");
    if (v < 0.0) throw std::invalid_argument("confusion matrix: negative entry");
  }
}

PseudoLabelCounts label_counts(const data::Dataset& d) { return d.label_histogram(); }

data::Dataset pseudo_label(const nn::ParamVector& params, const nn::MlpSpec& spec, const data::Dataset& unlabeled) {
  data::Dataset out = unlabeled;
  if (unlabeled.empty()) return out;
  const auto preds = nn::predict(params, spec, nn::make_batch(unlabeled).x);
  for (std::size_t i = 0; i < out.samples.size(); ++i) {
    auto& s = out.samples[i];
    if (s.provenance != data::Provenance::unlabeled)
      throw std::invalid_argument("pseudo_label: input sample " + std::to_string(i) + " is not unlabeled");
    s.label = preds[i];
    s.provenance = data::Provenance::pseudo;
  }
  return out;
}

ConfusionMatrix confusion_from_pairs(int num_classes, std::span<const int> truth, std::span<const int> predicted) {
  if (truth.size() != predicted.size()) throw DimensionError("confusion: truth/prediction length mismatch");
  ConfusionMatrix m(num_classes);
  for (std::size_t k = 0; k < truth.size(); ++k) {
    if (truth[k] < 0 || truth[k] >= num_classes || predicted[k] < 0 || predicted[k] >= num_classes)
      throw DimensionError("confusion: class index out of range");
    m(truth[k], predicted[k]) += 1.0;
  }
  return m;
}

ConfusionMatrix local_confusion(const nn::ParamVector& params, const nn::MlpSpec& spec, const data::Dataset& test) {
  if (test.empty()) return ConfusionMatrix(test.num_classes);
  const nn::Batch b = nn::make_batch(test);
  for (int y : b.y)
    if (y < 0) throw std::invalid_argument("local_confusion: test set must be labeled");
  const auto preds = nn::predict(params, spec, b.x);
  return confusion_from_pairs(test.num_classes, b.y, preds);
}

ConfusionMatrix aggregate_confusions(std::span<const ConfusionMatrix> matrices) {
  if (matrices.empty()) throw std::invalid_argument("aggregate_confusions: nothing to aggregate");
  ConfusionMatrix out(matrices.front().num_classes());
  for (const auto& m : matrices) {
    if (m.num_classes() != out.num_classes()) throw DimensionError("aggregate_confusions: class counts differ");
    for (int i = 0; i < out.num_classes(); ++i)
      for (int j = 0; j < out.num_classes(); ++j) out(i, j) += m(i, j);
  }
  return out;
}

ConfusionMatrix estimate_pseudo_confusion(const ConfusionMatrix& global_test, const PseudoLabelCounts& counts) {
  const int C = global_test.num_classes();
  if (counts.size() != static_cast<std::size_t>(C)) throw DimensionError("estimate_pseudo_confusion: C mismatch");
  ConfusionMatrix out(C);
  for (int j = 0; j < C; ++j) {
    const double n_j = static_cast<double>(counts[static_cast<std::size_t>(j)]);
    if (n_j == 0.0) continue;
    const double col = global_test.column_sum(j);
    if (!(col > 0.0))
      throw CoverageError(j, "estimate_pseudo_confusion: column " + std::to_string(j) +
                                 " of the global test confusion is empty but " +
                                 std::to_string(counts[static_cast<std::size_t>(j)]) +
                                 " samples are pseudo-labeled with it");
    for (int i = 0; i < C; ++i) out(i, j) = global_test(i, j) / col * n_j;
  }
  return out;
}

void write_confusion_csv(const std::filesystem::path& path, const ConfusionMatrix& m) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path.string());
  out.precision(17);
  for (int i = 0; i < m.num_classes(); ++i) {
    for (int j = 0; j < m.num_classes(); ++j) out << (j ? "," : "") << m(i, j);
    out << '\n';
  }
}

ConfusionMatrix read_confusion_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("missing " + path.string());
  std::vector<std::vector<double>> rows;
  for (std::string line; std::getline(in, line);) {
    if (line.empty()) continue;
    std::vector<double> row;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) {
      try {
        row.push_back(std::stod(cell));
      } catch (const std::exception&) {
        throw FormatError("confusion csv: bad cell '" + cell + "'");
      }
    }
    rows.push_back(std::move(row));
  }
  const int C = static_cast<int>(rows.size());
  if (C == 0) throw FormatError("confusion csv: empty");
  ConfusionMatrix m(C);
  for (int i = 0; i < C; ++i) {
    if (rows[static_cast<std::size_t>(i)].size() != static_cast<std::size_t>(C))
      throw FormatError("confusion csv: not square");
    for (int j = 0; j < C; ++j) m(i, j) = rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
  }
  return m;
}

}  // namespace ddsa::pseudo
