#include "ddsa/data.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include "ddsa/apportion.hpp"
#include "ddsa/error.hpp"
#include "ddsa/rng.hpp"
#include "json.hpp"

namespace ddsa::data {

namespace {

std::atomic<int> g_training_depth{0};
std::atomic<std::uint64_t> g_hidden_reads{0};

using json = nlohmann::json;

std::vector<std::vector<std::size_t>> indices_by_class(const Dataset& d, bool use_hidden = false) {
  std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(d.num_classes));
  for (std::size_t i = 0; i < d.samples.size(); ++i) {
    const auto& s = d.samples[i];
    int y = 0;
    if (s.label)
      y = *s.label;
    else if (use_hidden && s.has_hidden_label())
      y = s.hidden_label();
    else
      throw std::invalid_argument("dataset '" + d.name + "' has an unlabeled sample");
    by_class[static_cast<std::size_t>(y)].push_back(i);
  }
  return by_class;
}

void shuffle_indices(std::vector<std::size_t>& v, Rng& rng) {
  // Fisher-Yates on our own draws so the order does not depend on the
  // standard library's shuffle.
  for (std::size_t i = v.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng.below(i));
    std::swap(v[i - 1], v[j]);
  }
}

void write_u32_le(std::ostream& os, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16),
                              static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

}  // namespace

std::string_view to_string(Provenance p) {
  switch (p) {
    case Provenance::labeled: return "labeled";
    case Provenance::unlabeled: return "unlabeled";
    case Provenance::pseudo: return "pseudo";
    case Provenance::synthetic: return "synthetic";
  }
  return "labeled";
}

Provenance provenance_from_string(std::string_view s) {
  if (s == "labeled") return Provenance::labeled;
  if (s == "unlabeled") return Provenance::unlabeled;
  if (s == "pseudo") return Provenance::pseudo;
  if (s == "synthetic") return Provenance::synthetic;
  throw FormatError("unknown provenance '" + std::string(s) + "'");
}

int Sample::hidden_label() const {
  if (TrainingScope::active())
    throw LabelLeakError("hidden label read inside a training scope");
  if (!hidden_label_) throw std::logic_error("sample carries no hidden label");
  g_hidden_reads.fetch_add(1, std::memory_order_relaxed);
  return *hidden_label_;
}

TrainingScope::TrainingScope() { g_training_depth.fetch_add(1); }
TrainingScope::~TrainingScope() { g_training_depth.fetch_sub(1); }
bool TrainingScope::active() { return g_training_depth.load() > 0; }

std::uint64_t hidden_label_reads() { return g_hidden_reads.load(); }

std::vector<std::int64_t> Dataset::label_histogram() const {
  std::vector<std::int64_t> h(static_cast<std::size_t>(std::max(num_classes, 0)), 0);
  for (const auto& s : samples)
    if (s.label) ++h[static_cast<std::size_t>(*s.label)];
  return h;
}

void Dataset::validate() const {
  if (num_classes <= 0) throw DimensionError("dataset '" + name + "': num_classes must be positive");
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    if (s.features.size() != dim)
      throw DimensionError("dataset '" + name + "': sample " + std::to_string(i) +
                           " has wrong feature length");
    for (float f : s.features)
      if (!std::isfinite(f))
        throw NumericError("dataset '" + name + "': non-finite feature in sample " +
                           std::to_string(i));
    if (s.label.has_value() == (s.provenance == Provenance::unlabeled))
      throw std::invalid_argument("dataset '" + name + "': label presence disagrees with provenance at " +
                                  std::to_string(i));
    if (s.label && (*s.label < 0 || *s.label >= num_classes))
      throw DimensionError("dataset '" + name + "': label out of range at " + std::to_string(i));
  }
}

Dataset empty_like(const Dataset& d) {
  Dataset out;
  out.name = d.name;
  out.num_classes = d.num_classes;
  out.dim = d.dim;
  return out;
}

Dataset subset(const Dataset& d, std::span<const std::size_t> indices) {
  Dataset out = empty_like(d);
  out.samples.reserve(indices.size());
  for (auto i : indices) out.samples.push_back(d.samples.at(i));
  return out;
}

Dataset concat(const Dataset& a, const Dataset& b) {
  if (a.num_classes != b.num_classes || (a.dim != b.dim && !a.empty() && !b.empty()))
    throw DimensionError("concat: datasets disagree on shape");
  Dataset out = empty_like(a);
  if (a.empty()) out.dim = b.dim;
  out.samples.reserve(a.size() + b.size());
  out.samples.insert(out.samples.end(), a.samples.begin(), a.samples.end());
  out.samples.insert(out.samples.end(), b.samples.begin(), b.samples.end());
  return out;
}

std::string_view to_string(SplitMode m) { return m == SplitMode::iid ? "IID" : "DIR"; }

SplitMode split_mode_from_string(std::string_view s) {
  if (s == "IID" || s == "iid") return SplitMode::iid;
  if (s == "DIR" || s == "dir") return SplitMode::dir;
  throw FormatError("unknown split mode '" + std::string(s) + "'");
}

void PartitionConfig::validate() const {
  if (num_clients < 1) throw std::invalid_argument("partition: need at least one client");
  if (!(gamma > 0.0)) throw std::invalid_argument("partition: gamma must be positive");
  if (!(labeled_ratio >= 0.0 && labeled_ratio <= 1.0))
    throw std::invalid_argument("partition: labeled ratio must lie in [0, 1]");
  if (!(test_fraction > 0.0 && test_fraction < 1.0))
    throw std::invalid_argument("partition: test fraction must lie in (0, 1)");
}

std::vector<std::vector<double>> circle_means(int num_classes, double radius) {
  std::vector<std::vector<double>> means;
  const double pi = std::acos(-1.0);
  for (int c = 0; c < num_classes; ++c) {
    const double a = 2.0 * pi * c / num_classes;
    means.push_back({radius * std::cos(a), radius * std::sin(a)});
  }
  return means;
}

Dataset make_gaussian_mixture(int num_classes, std::size_t per_class_n,
                              const std::vector<std::vector<double>>& means,
                              double sigma, std::uint64_t seed) {
  if (num_classes <= 0) throw std::invalid_argument("gaussian mixture: num_classes must be positive");
  if (means.size() != static_cast<std::size_t>(num_classes))
    throw DimensionError("gaussian mixture: need one mean per class");
  if (!(sigma >= 0.0)) throw std::invalid_argument("gaussian mixture: sigma must be >= 0");
  const std::size_t d = means.front().size();
  for (const auto& m : means)
    if (m.size() != d || d == 0) throw DimensionError("gaussian mixture: means differ in dimension");

  Rng rng(seed);
  Dataset out;
  out.name = "gaussian_mixture";
  out.num_classes = num_classes;
  out.dim = d;
  out.samples.reserve(per_class_n * means.size());
  for (int c = 0; c < num_classes; ++c) {
    for (std::size_t i = 0; i < per_class_n; ++i) {
      Sample s;
      s.features.resize(d);
      for (std::size_t k = 0; k < d; ++k)
        s.features[k] = static_cast<float>(means[c][k] + sigma * rng.gaussian());
      s.label = c;
      s.provenance = Provenance::labeled;
      out.samples.push_back(std::move(s));
    }
  }
  return out;
}

std::vector<Dataset> dirichlet_partition(const Dataset& dataset, std::size_t num_clients,
                                         SplitMode mode, double gamma, std::uint64_t seed) {
  if (num_clients == 0) throw std::invalid_argument("partition: need at least one client");
  if (num_clients > dataset.size())
    throw std::invalid_argument("partition: more clients (" + std::to_string(num_clients) +
                                ") than samples (" + std::to_string(dataset.size()) + ")");
  if (mode == SplitMode::dir && !(gamma > 0.0))
    throw std::invalid_argument("partition: gamma must be positive");

  Rng rng(seed);
  auto by_class = indices_by_class(dataset, true);
  std::vector<std::vector<std::size_t>> assigned(num_clients);
  const std::size_t K = num_clients;

  for (std::size_t c = 0; c < by_class.size(); ++c) {
    auto& idx = by_class[c];
    std::vector<double> share(K, 1.0);
    if (mode == SplitMode::dir) {
      double total = 0.0;
      for (auto& q : share) total += (q = rng.gamma(gamma));
      if (!(total > 0.0)) {
        // Every gamma draw underflowed; the limit of Dir(gamma) is a vertex.
        std::fill(share.begin(), share.end(), 0.0);
        share[rng.below(K)] = 1.0;
      }
    }
    shuffle_indices(idx, rng);
    if (idx.empty()) continue;
    std::vector<std::int64_t> counts;
    if (mode == SplitMode::iid) {
      // Rotate the tie-break start so leftover units do not always land on
      // client 0.
      std::vector<double> rotated(K, 1.0);
      auto base = largest_remainder(static_cast<std::int64_t>(idx.size()), rotated);
      counts.assign(K, 0);
      for (std::size_t k = 0; k < K; ++k) counts[(k + c) % K] = base[k];
    } else {
      counts = largest_remainder(static_cast<std::int64_t>(idx.size()), share);
    }
    std::size_t pos = 0;
    for (std::size_t k = 0; k < K; ++k)
      for (std::int64_t n = 0; n < counts[k]; ++n) assigned[k].push_back(idx[pos++]);
  }

  std::vector<Dataset> parts;
  parts.reserve(K);
  for (std::size_t k = 0; k < K; ++k) {
    std::sort(assigned[k].begin(), assigned[k].end());
    Dataset p = subset(dataset, assigned[k]);
    p.name = dataset.name + "/client" + std::to_string(k);
    if (K == 1) p.name = dataset.name;
    parts.push_back(std::move(p));
  }
  return parts;
}

std::pair<Dataset, Dataset> labeled_split(const Dataset& dataset, double ratio,
                                          std::uint64_t seed) {
  if (!(ratio >= 0.0 && ratio <= 1.0))
    throw std::invalid_argument("labeled_split: ratio must lie in [0, 1]");
  const std::size_t n = dataset.size();
  const auto n_labeled =
      static_cast<std::size_t>(std::min<std::int64_t>(round_half_up(ratio * static_cast<double>(n)),
                                                      static_cast<std::int64_t>(n)));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  shuffle_indices(order, rng);
  std::vector<bool> keep(n, false);
  for (std::size_t i = 0; i < n_labeled; ++i) keep[order[i]] = true;

  Dataset labeled = empty_like(dataset);
  Dataset unlabeled = empty_like(dataset);
  for (std::size_t i = 0; i < n; ++i) {
    const Sample& s = dataset.samples[i];
    if (!s.label) throw std::invalid_argument("labeled_split: input must be fully labeled");
    if (keep[i]) {
      labeled.samples.push_back(s);
    } else {
      Sample u = s;
      u.set_hidden_label(s.label);
      u.label.reset();
      u.provenance = Provenance::unlabeled;
      unlabeled.samples.push_back(std::move(u));
    }
  }
  return {std::move(labeled), std::move(unlabeled)};
}

std::pair<Dataset, Dataset> holdout_test_split(const Dataset& labeled, double test_fraction,
                                               std::uint64_t seed, bool min_one_per_class) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0))
    throw std::invalid_argument("holdout_test_split: test fraction must lie in (0, 1)");
  Rng rng(seed);
  auto by_class = indices_by_class(labeled);
  std::vector<bool> to_test(labeled.size(), false);
  for (auto& idx : by_class) {
    shuffle_indices(idx, rng);
    const auto n_c = static_cast<std::int64_t>(idx.size());
    std::int64_t n_test = std::min(round_half_up(test_fraction * static_cast<double>(n_c)), n_c);
    if (min_one_per_class && n_c >= 2 && n_test == 0) n_test = 1;
    for (std::int64_t i = 0; i < n_test; ++i) to_test[idx[static_cast<std::size_t>(i)]] = true;
  }
  Dataset train = empty_like(labeled);
  Dataset test = empty_like(labeled);
  for (std::size_t i = 0; i < labeled.size(); ++i)
    (to_test[i] ? test : train).samples.push_back(labeled.samples[i]);
  return {std::move(train), std::move(test)};
}

void save_dataset(const Dataset& dataset, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  json labels = json::array();
  json provenance = json::array();
  json hidden = json::array();
  bool any_hidden = false;
  for (const auto& s : dataset.samples) {
    labels.push_back(s.label ? json(*s.label) : json(nullptr));
    provenance.push_back(std::string(to_string(s.provenance)));
    if (s.has_hidden_label()) {
      any_hidden = true;
      hidden.push_back(s.hidden_label());
    } else {
      hidden.push_back(nullptr);
    }
  }
  json manifest = {{"name", dataset.name},
                   {"C", dataset.num_classes},
                   {"d", dataset.dim},
                   {"n", dataset.size()},
                   {"dtype", "f32le"},
                   {"labels", labels},
                   {"provenance", provenance}};
  if (any_hidden) manifest["hidden_labels"] = hidden;

  std::ofstream m(dir / "manifest.json");
  if (!m) throw FormatError("cannot write " + (dir / "manifest.json").string());
  m << manifest.dump(1) << '\n';

  std::ofstream f(dir / "features.bin", std::ios::binary);
  if (!f) throw FormatError("cannot write " + (dir / "features.bin").string());
  for (const auto& s : dataset.samples)
    for (float v : s.features) {
      std::uint32_t bits;
      std::memcpy(&bits, &v, sizeof bits);
      write_u32_le(f, bits);
    }
}

Dataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream m(dir / "manifest.json");
  if (!m) throw FormatError("missing " + (dir / "manifest.json").string());
  json manifest;
  try {
    manifest = json::parse(m);
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed manifest: ") + e.what());
  }

  Dataset out;
  std::vector<std::optional<int>> hidden;
  std::size_t n = 0;
  try {
    out.name = manifest.at("name").get<std::string>();
    out.num_classes = manifest.at("C").get<int>();
    out.dim = manifest.at("d").get<std::size_t>();
    n = manifest.at("n").get<std::size_t>();
    if (manifest.at("dtype").get<std::string>() != "f32le")
      throw FormatError("unsupported dtype " + manifest.at("dtype").get<std::string>());
    const auto& labels = manifest.at("labels");
    const auto& prov = manifest.at("provenance");
    if (!labels.is_array() || !prov.is_array() || labels.size() != n || prov.size() != n)
      throw FormatError("manifest label/provenance arrays must have n entries");
    if (manifest.contains("hidden_labels") && manifest["hidden_labels"].size() != n)
      throw FormatError("manifest hidden_labels must have n entries");
    out.samples.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      auto& s = out.samples[i];
      if (!labels[i].is_null()) s.label = labels[i].get<int>();
      s.provenance = provenance_from_string(prov[i].get<std::string>());
      if (manifest.contains("hidden_labels") && !manifest["hidden_labels"][i].is_null())
        s.set_hidden_label(manifest["hidden_labels"][i].get<int>());
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed manifest: ") + e.what());
  }
  if (out.num_classes <= 0) throw FormatError("manifest: C must be positive");
  for (std::size_t i = 0; i < n; ++i) {
    const auto& s = out.samples[i];
    if (s.label && (*s.label < 0 || *s.label >= out.num_classes))
      throw FormatError("manifest: label " + std::to_string(*s.label) + " out of range for C=" +
                        std::to_string(out.num_classes));
  }

  std::ifstream f(dir / "features.bin", std::ios::binary);
  if (!f) throw FormatError("missing " + (dir / "features.bin").string());
  std::vector<unsigned char> raw((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (raw.size() != n * out.dim * 4)
    throw FormatError("features.bin holds " + std::to_string(raw.size()) + " bytes, manifest implies " +
                      std::to_string(n * out.dim * 4));
  std::size_t pos = 0;
  for (auto& s : out.samples) {
    s.features.resize(out.dim);
    for (auto& v : s.features) {
      const std::uint32_t bits = static_cast<std::uint32_t>(raw[pos]) |
                                 (static_cast<std::uint32_t>(raw[pos + 1]) << 8) |
                                 (static_cast<std::uint32_t>(raw[pos + 2]) << 16) |
                                 (static_cast<std::uint32_t>(raw[pos + 3]) << 24);
      std::memcpy(&v, &bits, sizeof v);
      pos += 4;
    }
  }
  out.validate();
  return out;
}

}  // namespace ddsa::data
