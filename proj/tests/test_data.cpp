#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "ddsa/data.hpp"
#include "ddsa/error.hpp"
#include "json.hpp"

namespace {

using namespace ddsa;
using namespace ddsa::data;

// Labeled dataset whose single feature is the sample index, so partitions can
// be traced back to their source.
Dataset indexed(int C, std::size_t per_class) {
  Dataset d;
  d.name = "indexed";
  d.num_classes = C;
  d.dim = 1;
  for (int c = 0; c < C; ++c)
    for (std::size_t i = 0; i < per_class; ++i) {
      Sample s;
      s.features = {static_cast<float>(d.samples.size())};
      s.label = c;
      d.samples.push_back(s);
    }
  return d;
}

std::multiset<float> ids(const std::vector<Dataset>& parts) {
  std::multiset<float> out;
  for (const auto& p : parts)
    for (const auto& s : p.samples) out.insert(s.features[0]);
  return out;
}

std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("ddsa_test_data_" + name);
  std::filesystem::remove_all(p);
  return p;
}

TEST(GaussianMixture, ZeroSigmaReproducesMeans) {
  const std::vector<std::vector<double>> means{{1.0, -2.0}, {0.5, 3.0}};
  const Dataset d = make_gaussian_mixture(2, 50, means, 0.0, 7);
  ASSERT_EQ(d.size(), 100u);
  for (const auto& s : d.samples) {
    EXPECT_EQ(s.provenance, Provenance::labeled);
    const auto& m = means[static_cast<std::size_t>(*s.label)];
    EXPECT_EQ(s.features[0], static_cast<float>(m[0]));
    EXPECT_EQ(s.features[1], static_cast<float>(m[1]));
  }
}

TEST(GaussianMixture, DeterministicPerSeed) {
  const auto means = circle_means(3, 1.0);
  EXPECT_EQ(make_gaussian_mixture(3, 20, means, 0.7, 11), make_gaussian_mixture(3, 20, means, 0.7, 11));
  EXPECT_NE(make_gaussian_mixture(3, 20, means, 0.7, 11), make_gaussian_mixture(3, 20, means, 0.7, 12));
}

TEST(GaussianMixture, ClassMeansWithinThreeStandardErrors) {
  const auto means = circle_means(4, 1.0);
  const Dataset d = make_gaussian_mixture(4, 100, means, 0.5, 3);
  const double bound = 3.0 * 0.5 / std::sqrt(100.0);
  for (int c = 0; c < 4; ++c) {
    double sx = 0.0, sy = 0.0;
    for (const auto& s : d.samples)
      if (*s.label == c) {
        sx += s.features[0];
        sy += s.features[1];
      }
    EXPECT_NEAR(sx / 100.0, means[static_cast<std::size_t>(c)][0], bound);
    EXPECT_NEAR(sy / 100.0, means[static_cast<std::size_t>(c)][1], bound);
  }
}

TEST(GaussianMixture, RejectsMismatchedMeans) {
  EXPECT_THROW(make_gaussian_mixture(2, 5, {{0.0, 0.0}, {1.0}}, 1.0, 0), DimensionError);
  EXPECT_THROW(make_gaussian_mixture(3, 5, {{0.0}, {1.0}}, 1.0, 0), DimensionError);
}

TEST(Partition, SingleClientIsIdentity) {
  const Dataset d = indexed(3, 10);
  for (auto mode : {SplitMode::iid, SplitMode::dir}) {
    const auto parts = dirichlet_partition(d, 1, mode, 0.1, 5);
    ASSERT_EQ(parts.size(), 1u);
    EXPECT_EQ(parts[0].samples, d.samples);
  }
}

TEST(Partition, IsABijectionOnSamples) {
  const Dataset d = indexed(4, 37);
  const auto all = ids({d});
  for (std::uint64_t seed = 0; seed < 20; ++seed)
    for (std::size_t K : {2u, 3u, 7u})
      for (double g : {0.05, 0.5, 5.0})
        for (auto mode : {SplitMode::iid, SplitMode::dir}) {
          const auto parts = dirichlet_partition(d, K, mode, g, seed);
          ASSERT_EQ(parts.size(), K);
          std::size_t total = 0;
          for (const auto& p : parts) total += p.size();
          EXPECT_EQ(total, d.size());
          EXPECT_EQ(ids(parts), all);
        }
}

TEST(Partition, LargeGammaMatchesGlobalProportions) {
  const Dataset d = indexed(4, 100);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto parts = dirichlet_partition(d, 5, SplitMode::dir, 1e6, seed);
    for (const auto& p : parts) {
      const auto h = p.label_histogram();
      for (auto n : h) EXPECT_NEAR(static_cast<double>(n) / static_cast<double>(p.size()), 0.25, 0.02);
    }
  }
}

TEST(Partition, DeviationFromGlobalShrinksWithGamma) {
  const Dataset d = indexed(4, 250);
  double previous = 1e9;
  for (double g : {0.1, 1.0, 100.0, 1e6}) {
    double dev = 0.0;
    int n = 0;
    for (std::uint64_t seed = 0; seed < 10; ++seed)
      for (const auto& p : dirichlet_partition(d, 5, SplitMode::dir, g, seed)) {
        if (p.empty()) continue;
        double worst = 0.0;
        for (auto c : p.label_histogram())
          worst = std::max(worst, std::fabs(static_cast<double>(c) / static_cast<double>(p.size()) - 0.25));
        dev += worst;
        ++n;
      }
    dev /= n;
    EXPECT_LT(dev, previous) << "gamma " << g;
    previous = dev;
  }
}

TEST(Partition, IidSplitsEachClassEvenly) {
  const Dataset d = indexed(3, 10);
  const auto parts = dirichlet_partition(d, 5, SplitMode::iid, 0.1, 0);
  for (const auto& p : parts)
    for (auto n : p.label_histogram()) EXPECT_EQ(n, 2);
}

TEST(Partition, KeepsInputOrderAndIsSeeded) {
  const Dataset d = indexed(3, 20);
  const auto a = dirichlet_partition(d, 4, SplitMode::dir, 0.3, 9);
  EXPECT_EQ(a, dirichlet_partition(d, 4, SplitMode::dir, 0.3, 9));
  for (const auto& p : a)
    for (std::size_t i = 1; i < p.size(); ++i) EXPECT_LT(p.samples[i - 1].features[0], p.samples[i].features[0]);
}

TEST(Partition, MoreClientsThanSamplesFails) {
  EXPECT_THROW(dirichlet_partition(indexed(2, 2), 5, SplitMode::dir, 0.1, 0), std::invalid_argument);
}

TEST(LabeledSplit, RatioArithmetic) {
  const Dataset d = indexed(4, 25);
  auto [l1, u1] = labeled_split(d, 1.0, 0);
  EXPECT_EQ(l1.size(), 100u);
  EXPECT_TRUE(u1.empty());
  auto [l0, u0] = labeled_split(d, 0.0, 0);
  EXPECT_TRUE(l0.empty());
  EXPECT_EQ(u0.size(), 100u);
  auto [l, u] = labeled_split(d, 0.1, 0);
  EXPECT_EQ(l.size(), 10u);
  EXPECT_EQ(u.size(), 90u);
  EXPECT_EQ(ids({l, u}), ids({d}));
}

TEST(LabeledSplit, UnlabeledSamplesHideTheirLabel) {
  const Dataset d = indexed(2, 10);
  auto [l, u] = labeled_split(d, 0.5, 4);
  u.validate();
  for (const auto& s : u.samples) {
    EXPECT_FALSE(s.label.has_value());
    EXPECT_EQ(s.provenance, Provenance::unlabeled);
    ASSERT_TRUE(s.has_hidden_label());
    const auto idx = static_cast<std::size_t>(s.features[0]);
    EXPECT_EQ(s.hidden_label(), *d.samples[idx].label);
  }
}

TEST(LabelGuard, HiddenLabelReadsThrowInsideTrainingScope) {
  auto [l, u] = labeled_split(indexed(2, 5), 0.2, 1);
  ASSERT_FALSE(u.empty());
  const auto before = hidden_label_reads();
  EXPECT_NO_THROW((void)u.samples[0].hidden_label());
  EXPECT_EQ(hidden_label_reads(), before + 1);
  {
    const TrainingScope scope;
    EXPECT_TRUE(TrainingScope::active());
    EXPECT_THROW((void)u.samples[0].hidden_label(), LabelLeakError);
  }
  EXPECT_FALSE(TrainingScope::active());
}

TEST(Holdout, StratifiedArithmetic) {
  const Dataset d = indexed(4, 25);
  auto [train, test] = holdout_test_split(d, 0.2, 3);
  EXPECT_EQ(test.size(), 20u);
  EXPECT_EQ(train.size(), 80u);
  for (auto n : test.label_histogram()) EXPECT_EQ(n, 5);
  EXPECT_EQ(ids({train, test}), ids({d}));
}

TEST(Holdout, TinyFractionWithoutMinimumIsEmpty) {
  auto [train, test] = holdout_test_split(indexed(3, 10), 1e-9, 0, false);
  EXPECT_TRUE(test.empty());
  EXPECT_EQ(train.size(), 30u);
  auto [train2, test2] = holdout_test_split(indexed(3, 10), 1e-9, 0, true);
  EXPECT_EQ(test2.size(), 3u);
}

TEST(Holdout, RandomInputsStayPartitioned) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Dataset d = dirichlet_partition(indexed(5, 31), 3, SplitMode::dir, 0.2, seed)[0];
    auto [train, test] = holdout_test_split(d, 0.3, seed);
    EXPECT_EQ(ids({train, test}), ids({d}));
  }
}

TEST(Holdout, RejectsBadFraction) {
  EXPECT_THROW(holdout_test_split(indexed(2, 4), 0.0, 0), std::invalid_argument);
  EXPECT_THROW(holdout_test_split(indexed(2, 4), 1.0, 0), std::invalid_argument);
}

TEST(DatasetFile, RoundTripIsExact) {
  auto [l, u] = labeled_split(make_gaussian_mixture(3, 7, circle_means(3, 2.0), 0.9, 1), 0.3, 2);
  const auto dir = temp_dir("roundtrip");
  for (const Dataset& d : {l, u}) {
    save_dataset(d, dir);
    const Dataset back = load_dataset(dir);
    EXPECT_EQ(back, d);
  }
}

TEST(DatasetFile, ManifestFollowsTheDocumentedFormat) {
  const auto dir = temp_dir("manifest");
  save_dataset(indexed(2, 3), dir);
  std::ifstream in(dir / "manifest.json");
  const auto j = nlohmann::json::parse(in);
  EXPECT_EQ(j.at("C"), 2);
  EXPECT_EQ(j.at("d"), 1);
  EXPECT_EQ(j.at("n"), 6);
  EXPECT_EQ(j.at("dtype"), "f32le");
  EXPECT_EQ(j.at("labels").size(), 6u);
  EXPECT_EQ(j.at("provenance")[0], "labeled");
  EXPECT_EQ(std::filesystem::file_size(dir / "features.bin"), 6u * 4u);
}

TEST(DatasetFile, TruncatedPayloadIsRejected) {
  const auto dir = temp_dir("truncated");
  save_dataset(indexed(2, 3), dir);
  std::filesystem::resize_file(dir / "features.bin", 10);
  EXPECT_THROW(load_dataset(dir), FormatError);
}

TEST(DatasetFile, OutOfRangeLabelIsRejected) {
  const auto dir = temp_dir("range");
  save_dataset(indexed(3, 2), dir);
  std::ifstream in(dir / "manifest.json");
  auto j = nlohmann::json::parse(in);
  in.close();
  j["labels"][0] = 3;
  std::ofstream(dir / "manifest.json") << j.dump();
  EXPECT_THROW(load_dataset(dir), FormatError);
}

TEST(DatasetFile, MalformedManifestIsRejected) {
  const auto dir = temp_dir("malformed");
  save_dataset(indexed(2, 2), dir);
  std::ofstream(dir / "manifest.json") << "{ not json";
  EXPECT_THROW(load_dataset(dir), FormatError);
}

TEST(DatasetValidate, LabelPresenceFollowsProvenance) {
  Dataset d = indexed(2, 2);
  d.validate();
  d.samples[0].provenance = Provenance::unlabeled;
  EXPECT_THROW(d.validate(), std::invalid_argument);
  d.samples[0].label.reset();
  EXPECT_NO_THROW(d.validate());
  d.samples[1].features[0] = std::nanf("");
  EXPECT_THROW(d.validate(), NumericError);
}

}  // namespace
