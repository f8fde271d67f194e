#include "ddsa/pipeline.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>

#include "ddsa/error.hpp"
#include "ddsa/rng.hpp"
#include "json.hpp"

namespace ddsa::pipeline {

using nlohmann::json;

namespace {

// Stream tags for derive_seed(config.seed, {tag, ...}).
enum Tag : std::uint64_t {
  kWorld = 1,
  kGlobalTest,
  kLabelSplit,
  kPartitionLabeled,
  kPartitionUnlabeled,
  kLocalTest,
  kClassifierClients,
  kClassifierInit,
  kClassifierFed,
  kRetrainFed,
  kVaeClients,
  kVaeInit,
  kVaeFed,
  kCdmClients,
  kCdmInit,
  kCdmFed,
  kSelection,
  kApplySelection,
  kSynthesis,
};

constexpr const char* kConditioningNote =
    "denoiser conditioning: learned label embedding added to the first hidden layer";
constexpr const char* kOracleNote = "oracle mode: hidden labels of unlabeled data revealed for training";

// ---------------------------------------------------------------------------
// JSON helpers

class Reader {
 public:
  Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw FormatError(path_ + ": expected an object");
  }

  template <class T>
  void get(const char* key, T& out) {
    if (!j_.contains(key)) return;
    seen_.insert(key);
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw FormatError(path_ + "." + key + ": " + e.what());
    }
  }

  const json* child(const char* key) {
    if (!j_.contains(key)) return nullptr;
    seen_.insert(key);
    return &j_.at(key);
  }

  void finish() const {
    for (const auto& item : j_.items())
      if (!seen_.count(item.key())) throw FormatError(path_ + ": unknown key '" + item.key() + "'");
  }

  const std::string& path() const { return path_; }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

json to_json(const nn::OptimizerConfig& o) {
  return {{"kind", nn::to_string(o.kind)}, {"learning_rate", o.learning_rate}, {"momentum", o.momentum},
          {"weight_decay", o.weight_decay}, {"beta1", o.beta1}, {"beta2", o.beta2}, {"epsilon", o.epsilon}};
}

void read(const json& j, const std::string& path, nn::OptimizerConfig& o) {
  Reader r(j, path);
  std::string kind(nn::to_string(o.kind));
  r.get("kind", kind);
  o.kind = nn::optimizer_kind_from_string(kind);
  r.get("learning_rate", o.learning_rate);
  r.get("momentum", o.momentum);
  r.get("weight_decay", o.weight_decay);
  r.get("beta1", o.beta1);
  r.get("beta2", o.beta2);
  r.get("epsilon", o.epsilon);
  r.finish();
}

json to_json(const fed::RoundConfig& c) {
  return {{"rounds", c.rounds},         {"local_epochs", c.local_epochs}, {"batch_size", c.batch_size},
          {"participation", c.participation}, {"lr_decay", c.lr_decay},   {"optimizer", to_json(c.optimizer)}};
}

void read(const json& j, const std::string& path, fed::RoundConfig& c) {
  Reader r(j, path);
  r.get("rounds", c.rounds);
  r.get("local_epochs", c.local_epochs);
  r.get("batch_size", c.batch_size);
  r.get("participation", c.participation);
  r.get("lr_decay", c.lr_decay);
  if (const json* o = r.child("optimizer")) read(*o, path + ".optimizer", c.optimizer);
  r.finish();
}

nn::Activation read_activation(Reader& r, nn::Activation current) {
  std::string a(nn::to_string(current));
  r.get("activation", a);
  return nn::activation_from_string(a);
}

json to_json(const pseudo::ConfusionMatrix& m) {
  json rows = json::array();
  for (int i = 0; i < m.num_classes(); ++i) {
    json row = json::array();
    for (int j = 0; j < m.num_classes(); ++j) row.push_back(m(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

pseudo::ConfusionMatrix confusion_from_json(const json& j) {
  pseudo::ConfusionMatrix m(static_cast<int>(j.size()));
  for (int i = 0; i < m.num_classes(); ++i) {
    const auto& row = j.at(static_cast<std::size_t>(i));
    if (row.size() != static_cast<std::size_t>(m.num_classes())) throw FormatError("confusion: not square");
    for (int k = 0; k < m.num_classes(); ++k) m(i, k) = row.at(static_cast<std::size_t>(k)).get<double>();
  }
  return m;
}

json to_json(const Evaluation& e) {
  return {{"accuracy", e.accuracy},
          {"precision", e.precision},
          {"recall", e.recall},
          {"macro_precision", e.macro_precision()},
          {"macro_recall", e.macro_recall()},
          {"confusion", to_json(e.confusion)}};
}

Evaluation evaluation_from_json(const json& j) {
  Evaluation e;
  e.accuracy = j.at("accuracy").get<double>();
  e.precision = j.at("precision").get<std::vector<double>>();
  e.recall = j.at("recall").get<std::vector<double>>();
  e.confusion = confusion_from_json(j.at("confusion"));
  return e;
}

std::string format_value(double v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

// ---------------------------------------------------------------------------
// Run directory

class RunDir {
 public:
  explicit RunDir(std::filesystem::path root) : root_(std::move(root)) {
    if (root_.empty()) return;
    std::filesystem::create_directories(root_ / "confusion");
    std::filesystem::remove(root_ / "rounds.csv");
    std::filesystem::remove(root_ / "error.json");
  }

  bool enabled() const { return !root_.empty(); }
  const std::filesystem::path& root() const { return root_; }

  void text(const std::string& name, const std::string& body) const {
    if (!enabled()) return;
    std::ofstream out(root_ / name);
    if (!out) throw FormatError("cannot write " + (root_ / name).string());
    out << body;
  }

  void rounds(const std::vector<fed::RoundTelemetry>& rows) const {
    if (enabled()) fed::append_rounds_csv(root_ / "rounds.csv", rows);
  }

  void confusion(const std::string& name, const pseudo::ConfusionMatrix& m) const {
    if (enabled()) pseudo::write_confusion_csv(root_ / "confusion" / (name + ".csv"), m);
  }

  void metrics(const RunReport& report) const {
    if (!enabled()) return;
    std::ostringstream os;
    os.precision(17);
    os << "phase,accuracy,macro_precision,macro_recall\n";
    for (const auto& [phase, e] : report.phases)
      os << phase << ',' << e.accuracy << ',' << e.macro_precision() << ',' << e.macro_recall() << '\n';
    text("metrics.csv", os.str());
  }

  void failure(const std::string& phase, const std::string& what) const {
    if (!enabled()) return;
    try {
      text("error.json", json({{"phase", phase}, {"message", what}}).dump(2) + "\n");
    } catch (const std::exception&) {
      // Keep the original failure.
    }
  }

 private:
  std::filesystem::path root_;
};

class Stopwatch {
 public:
  double elapsed_ms() const {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0_).count();
  }

 private:
  std::chrono::steady_clock::time_point t0_ = std::chrono::steady_clock::now();
};

// Runs `fn` as the named phase: failures become PhaseError and are recorded
// in the run directory, and wall time is logged in the report.
template <class Fn>
auto in_phase(const std::string& name, RunReport& report, const RunDir& dir, Fn&& fn) {
  Stopwatch sw;
  try {
    if constexpr (std::is_void_v<decltype(fn())>) {
      fn();
      report.wall_ms[name] += sw.elapsed_ms();
    } else {
      auto out = fn();
      report.wall_ms[name] += sw.elapsed_ms();
      return out;
    }
  } catch (const PhaseError&) {
    throw;
  } catch (const std::exception& e) {
    dir.failure(name, e.what());
    throw PhaseError(name, e.what());
  }
}

PhaseTraffic traffic_of(const std::vector<fed::RoundTelemetry>& rows) {
  PhaseTraffic t;
  for (const auto& r : rows) {
    t.bytes_up += r.bytes_up;
    t.bytes_down += r.bytes_down;
  }
  return t;
}

std::size_t resolved_threads(const ExperimentConfig& c) { return c.threads ? c.threads : fed::threads_from_env(); }

data::Dataset concat_all(const std::vector<data::Dataset>& parts, const data::Dataset& like) {
  data::Dataset out = data::empty_like(like);
  for (const auto& p : parts) out = data::concat(out, p);
  return out;
}

struct Trained {
  nn::ParamVector params;
  std::vector<fed::RoundTelemetry> rounds;
};

// Steps 1 and 5 and both baselines train through here, with the same client
// streams and initial weights, so they differ only in data and round config.
Trained train_classifier(const ExperimentConfig& c, const std::vector<data::Dataset>& client_data,
                         const fed::RoundConfig& rounds, const std::string& phase, std::uint64_t fed_tag) {
  std::vector<fed::ClientState> clients;
  for (std::size_t k = 0; k < client_data.size(); ++k)
    clients.push_back(fed::make_client(k, client_data[k], derive_seed(c.seed, {kClassifierClients})));
  const nn::Batch probe = nn::make_batch(concat_all(client_data, client_data.front()));
  fed::FedOptions opts;
  opts.phase = phase;
  opts.seed = derive_seed(c.seed, {fed_tag});
  opts.probe = &probe;
  opts.threads = resolved_threads(c);
  const data::TrainingScope scope;
  auto res = fed::run_federated(clients, rounds, nn::classifier_objective(c.classifier),
                                nn::init_classifier(c.classifier, derive_seed(c.seed, {kClassifierInit})), opts);
  return {std::move(res.params), std::move(res.rounds)};
}

data::Dataset reveal_labels(const data::Dataset& unlabeled) {
  data::Dataset out = unlabeled;
  for (auto& s : out.samples) {
    s.label = s.hidden_label();
    s.provenance = data::Provenance::labeled;
  }
  return out;
}

data::Dataset encode_latents(const nn::ParamVector& vae, const nn::VaeSpec& spec, const data::Dataset& d) {
  data::Dataset out = data::empty_like(d);
  out.dim = spec.latent_dim;
  if (d.empty()) return out;
  const nn::Batch b = nn::make_batch(d);
  const auto [mu, logvar] = nn::vae_encode_batch(vae, spec, b.x);
  for (std::size_t r = 0; r < d.size(); ++r) {
    data::Sample s;
    for (double v : mu.row(r)) s.features.push_back(static_cast<float>(v));
    s.label = d.samples[r].label;
    s.provenance = d.samples[r].provenance;
    out.samples.push_back(std::move(s));
  }
  return out;
}

double label_agreement(const std::vector<data::Dataset>& sets) {
  std::size_t hit = 0, total = 0;
  for (const auto& d : sets)
    for (const auto& s : d.samples) {
      if (!s.label || !s.has_hidden_label()) continue;
      ++total;
      hit += *s.label == s.hidden_label() ? 1 : 0;
    }
  return total ? static_cast<double>(hit) / static_cast<double>(total) : 0.0;
}

RunReport start_report(const ExperimentConfig& c, const World& w, std::string method) {
  RunReport r;
  r.method = std::move(method);
  r.seed = c.seed;
  for (std::size_t k = 0; k < c.partition.num_clients; ++k) {
    ClientReport cr;
    cr.client_id = k;
    cr.n_labeled = w.labeled[k].size();
    cr.n_local_test = w.local_test[k].size();
    cr.n_unlabeled = w.unlabeled[k].size();
    r.clients.push_back(cr);
  }
  return r;
}

void finish_run(const RunReport& report, const RunDir& dir) {
  dir.metrics(report);
  dir.text("summary.json", report_to_json(report) + "\n");
}

}  // namespace

// ---------------------------------------------------------------------------
// Configuration

void WorldConfig::validate() const {
  if (num_classes < 2) throw std::invalid_argument("world: need at least two classes");
  if (dim < 2) throw std::invalid_argument("world: dim must be >= 2");
  if (per_class_n < 1) throw std::invalid_argument("world: per_class_n must be >= 1");
  if (!(sigma > 0.0) || !(radius >= 0.0)) throw std::invalid_argument("world: need sigma > 0 and radius >= 0");
  if (!(test_fraction > 0.0 && test_fraction < 1.0))
    throw std::invalid_argument("world: test_fraction must lie in (0, 1)");
}

std::string_view to_string(BaselineMode m) {
  switch (m) {
    case BaselineMode::none:
      return "none";
    case BaselineMode::fedavg_labeled:
      return "fedavg_labeled";
    case BaselineMode::fedavg_sl:
      return "fedavg_sl";
  }
  return "none";
}

BaselineMode baseline_mode_from_string(std::string_view s) {
  if (s == "none") return BaselineMode::none;
  if (s == "fedavg_labeled") return BaselineMode::fedavg_labeled;
  if (s == "fedavg_sl") return BaselineMode::fedavg_sl;
  throw std::invalid_argument("unknown baseline mode '" + std::string(s) + "'");
}

void ExperimentConfig::resolve() {
  partition.seed = seed;
  classifier.input_dim = world.dim;
  classifier.output_dim = static_cast<std::size_t>(world.num_classes);
  vae.input_dim = world.dim;
  denoiser.latent_dim = vae.latent_dim;
  denoiser.num_classes = world.num_classes;
  validate();
}

void ExperimentConfig::validate() const {
  world.validate();
  partition.validate();
  for (const auto* r : {&classifier_rounds, &vae_rounds, &cdm_rounds, &retrain_rounds}) {
    r->validate();
    r->optimizer.validate();
  }
  classifier.validate();
  if (classifier.input_dim != world.dim || classifier.output_dim != static_cast<std::size_t>(world.num_classes))
    throw DimensionError("config: classifier shape does not match the world (call resolve)");
  vae.validate();
  if (vae.input_dim != world.dim) throw DimensionError("config: vae input does not match the world");
  denoiser.validate();
  if (denoiser.latent_dim != vae.latent_dim || denoiser.num_classes != world.num_classes)
    throw DimensionError("config: denoiser shape does not match the vae and world");
  if (!(kl_weight >= 0.0)) throw std::invalid_argument("config: kl_weight must be >= 0");
  diffusion::make_schedule(schedule.T, schedule.beta_1, schedule.beta_T);
  selection.validate();
  synthesis.validate();
}

std::string config_to_json(const ExperimentConfig& c) {
  json j;
  j["seed"] = c.seed;
  j["output_dir"] = c.output_dir.string();
  j["use_selection"] = c.use_selection;
  j["baseline_mode"] = to_string(c.baseline_mode);
  j["threads"] = c.threads;
  j["world"] = {{"num_classes", c.world.num_classes}, {"dim", c.world.dim},
                {"per_class_n", c.world.per_class_n}, {"radius", c.world.radius},
                {"sigma", c.world.sigma},             {"test_fraction", c.world.test_fraction}};
  j["partition"] = {{"num_clients", c.partition.num_clients},
                    {"gamma", c.partition.gamma},
                    {"labeled_ratio", c.partition.labeled_ratio},
                    {"local_test_fraction", c.partition.test_fraction},
                    {"label_mode", data::to_string(c.partition.label_mode)},
                    {"unlabeled_mode", data::to_string(c.partition.unlabeled_mode)}};
  j["rounds"] = {{"classifier", to_json(c.classifier_rounds)},
                 {"vae", to_json(c.vae_rounds)},
                 {"cdm", to_json(c.cdm_rounds)},
                 {"retrain", to_json(c.retrain_rounds)}};
  j["classifier"] = {{"hidden_dims", c.classifier.hidden_dims}, {"activation", nn::to_string(c.classifier.activation)}};
  j["vae"] = {{"latent_dim", c.vae.latent_dim},
              {"hidden_dims", c.vae.hidden_dims},
              {"activation", nn::to_string(c.vae.activation)},
              {"kl_weight", c.kl_weight}};
  j["denoiser"] = {{"time_embed_dim", c.denoiser.time_embed_dim},
                   {"hidden_dims", c.denoiser.hidden_dims},
                   {"activation", nn::to_string(c.denoiser.activation)}};
  j["schedule"] = {{"T", c.schedule.T},
                   {"beta_1", c.schedule.beta_1},
                   {"beta_T", c.schedule.beta_T},
                   {"posterior_variance", diffusion::to_string(c.synthesis.variance)}};
  j["selection"] = {{"w_l1", c.selection.w_l1},
                    {"w_p", c.selection.w_p},
                    {"tau", c.selection.tau},
                    {"solver", select::to_string(c.selection.solver)},
                    {"restarts", c.selection.restarts},
                    {"max_iters", c.selection.max_iters},
                    {"step_size", c.selection.step_size},
                    {"tolerance", c.selection.tolerance},
                    {"fd_step", c.selection.fd_step},
                    {"grid_step", c.selection.grid_step}};
  j["synthesis"] = {{"alpha", c.synthesis.alpha},
                    {"per_class_cap", c.synthesis.per_class_cap ? json(*c.synthesis.per_class_cap) : json(nullptr)},
                    {"batch_size", c.synthesis.batch_size}};
  return j.dump(2);
}

ExperimentConfig config_from_json(std::string_view text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw FormatError(std::string("config: malformed json: ") + e.what());
  }
  ExperimentConfig c;
  Reader top(j, "config");
  top.get("seed", c.seed);
  std::string out_dir;
  top.get("output_dir", out_dir);
  c.output_dir = out_dir;
  top.get("use_selection", c.use_selection);
  std::string mode(to_string(c.baseline_mode));
  top.get("baseline_mode", mode);
  c.baseline_mode = baseline_mode_from_string(mode);
  top.get("threads", c.threads);

  if (const json* w = top.child("world")) {
    Reader r(*w, "config.world");
    r.get("num_classes", c.world.num_classes);
    r.get("dim", c.world.dim);
    r.get("per_class_n", c.world.per_class_n);
    r.get("radius", c.world.radius);
    r.get("sigma", c.world.sigma);
    r.get("test_fraction", c.world.test_fraction);
    r.finish();
  }
  if (const json* p = top.child("partition")) {
    Reader r(*p, "config.partition");
    r.get("num_clients", c.partition.num_clients);
    r.get("gamma", c.partition.gamma);
    r.get("labeled_ratio", c.partition.labeled_ratio);
    r.get("local_test_fraction", c.partition.test_fraction);
    std::string lm(data::to_string(c.partition.label_mode)), um(data::to_string(c.partition.unlabeled_mode));
    r.get("label_mode", lm);
    r.get("unlabeled_mode", um);
    c.partition.label_mode = data::split_mode_from_string(lm);
    c.partition.unlabeled_mode = data::split_mode_from_string(um);
    r.finish();
  }
  if (const json* rounds = top.child("rounds")) {
    Reader r(*rounds, "config.rounds");
    if (const json* x = r.child("classifier")) read(*x, "config.rounds.classifier", c.classifier_rounds);
    if (const json* x = r.child("vae")) read(*x, "config.rounds.vae", c.vae_rounds);
    if (const json* x = r.child("cdm")) read(*x, "config.rounds.cdm", c.cdm_rounds);
    if (const json* x = r.child("retrain")) read(*x, "config.rounds.retrain", c.retrain_rounds);
    r.finish();
  }
  if (const json* x = top.child("classifier")) {
    Reader r(*x, "config.classifier");
    r.get("hidden_dims", c.classifier.hidden_dims);
    c.classifier.activation = read_activation(r, c.classifier.activation);
    r.finish();
  }
  if (const json* x = top.child("vae")) {
    Reader r(*x, "config.vae");
    r.get("latent_dim", c.vae.latent_dim);
    r.get("hidden_dims", c.vae.hidden_dims);
    c.vae.activation = read_activation(r, c.vae.activation);
    r.get("kl_weight", c.kl_weight);
    r.finish();
  }
  if (const json* x = top.child("denoiser")) {
    Reader r(*x, "config.denoiser");
    r.get("time_embed_dim", c.denoiser.time_embed_dim);
    r.get("hidden_dims", c.denoiser.hidden_dims);
    c.denoiser.activation = read_activation(r, c.denoiser.activation);
    r.finish();
  }
  if (const json* x = top.child("schedule")) {
    Reader r(*x, "config.schedule");
    r.get("T", c.schedule.T);
    r.get("beta_1", c.schedule.beta_1);
    r.get("beta_T", c.schedule.beta_T);
    std::string v(diffusion::to_string(c.synthesis.variance));
    r.get("posterior_variance", v);
    c.synthesis.variance = diffusion::posterior_variance_from_string(v);
    r.finish();
  }
  if (const json* x = top.child("selection")) {
    Reader r(*x, "config.selection");
    r.get("w_l1", c.selection.w_l1);
    r.get("w_p", c.selection.w_p);
    r.get("tau", c.selection.tau);
    std::string solver(select::to_string(c.selection.solver));
    r.get("solver", solver);
    c.selection.solver = select::solver_kind_from_string(solver);
    r.get("restarts", c.selection.restarts);
    r.get("max_iters", c.selection.max_iters);
    r.get("step_size", c.selection.step_size);
    r.get("tolerance", c.selection.tolerance);
    r.get("fd_step", c.selection.fd_step);
    r.get("grid_step", c.selection.grid_step);
    r.finish();
  }
  if (const json* x = top.child("synthesis")) {
    Reader r(*x, "config.synthesis");
    r.get("alpha", c.synthesis.alpha);
    if (const json* cap = r.child("per_class_cap")) {
      if (cap->is_null())
        c.synthesis.per_class_cap.reset();
      else if (cap->is_number_integer())
        c.synthesis.per_class_cap = cap->get<std::int64_t>();
      else
        throw FormatError("config.synthesis.per_class_cap: expected an integer or null");
    }
    r.get("batch_size", c.synthesis.batch_size);
    r.finish();
  }
  top.finish();
  try {
    c.resolve();
  } catch (const FormatError&) {
    throw;
  } catch (const std::exception& e) {
    throw FormatError(std::string("config: ") + e.what());
  }
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return config_from_json(ss.str());
}

// ---------------------------------------------------------------------------
// Evaluation

double Evaluation::macro_precision() const {
  double s = 0.0;
  for (double v : precision) s += v;
  return precision.empty() ? 0.0 : s / static_cast<double>(precision.size());
}

double Evaluation::macro_recall() const {
  double s = 0.0;
  for (double v : recall) s += v;
  return recall.empty() ? 0.0 : s / static_cast<double>(recall.size());
}

Evaluation evaluate_confusion(const pseudo::ConfusionMatrix& m) {
  const double total = m.total();
  if (!(total > 0.0)) throw std::invalid_argument("evaluate: empty test set");
  Evaluation e;
  e.confusion = m;
  const int C = m.num_classes();
  double correct = 0.0;
  for (int c = 0; c < C; ++c) {
    correct += m(c, c);
    const double col = m.column_sum(c);
    const double row = m.row_sum(c);
    e.precision.push_back(col > 0.0 ? m(c, c) / col : 0.0);
    e.recall.push_back(row > 0.0 ? m(c, c) / row : 0.0);
  }
  e.accuracy = correct / total;
  return e;
}

Evaluation evaluate(const nn::ParamVector& params, const nn::MlpSpec& spec, const data::Dataset& test) {
  if (test.empty()) throw std::invalid_argument("evaluate: empty test set");
  return evaluate_confusion(pseudo::local_confusion(params, spec, test));
}

// ---------------------------------------------------------------------------
// Reports

const Evaluation* RunReport::phase(std::string_view name) const {
  for (const auto& [n, e] : phases)
    if (n == name) return &e;
  return nullptr;
}

bool RunReport::same_outcome(const RunReport& o) const {
  return method == o.method && seed == o.seed && oracle_labels == o.oracle_labels && phases == o.phases &&
         clients == o.clients && traffic == o.traffic && pseudo_label_accuracy == o.pseudo_label_accuracy &&
         selected_label_accuracy == o.selected_label_accuracy;
}

std::string report_to_json(const RunReport& r) {
  json j;
  j["method"] = r.method;
  j["seed"] = r.seed;
  j["oracle_labels"] = r.oracle_labels;
  j["final_accuracy"] = r.phases.empty() ? 0.0 : r.accuracy();
  json phases = json::array();
  for (const auto& [name, e] : r.phases) {
    json p = to_json(e);
    p["phase"] = name;
    phases.push_back(std::move(p));
  }
  j["phases"] = std::move(phases);
  json clients = json::array();
  for (const auto& c : r.clients)
    clients.push_back({{"client_id", c.client_id},
                       {"n_labeled", c.n_labeled},
                       {"n_local_test", c.n_local_test},
                       {"n_unlabeled", c.n_unlabeled},
                       {"n_selected", c.n_selected},
                       {"n_synthetic", c.n_synthetic},
                       {"rho", c.rho},
                       {"alpha_requested", c.alpha_requested},
                       {"alpha_realized", c.alpha_realized}});
  j["clients"] = std::move(clients);
  json traffic = json::object();
  for (const auto& [phase, t] : r.traffic) traffic[phase] = {{"bytes_up", t.bytes_up}, {"bytes_down", t.bytes_down}};
  j["traffic"] = std::move(traffic);
  j["pseudo_label_accuracy"] = r.pseudo_label_accuracy;
  j["selected_label_accuracy"] = r.selected_label_accuracy;
  j["wall_ms"] = r.wall_ms;
  json notes = json::array({kConditioningNote});
  if (r.oracle_labels) notes.push_back(kOracleNote);
  j["notes"] = std::move(notes);
  return j.dump(2);
}

RunReport report_from_json(std::string_view text) {
  try {
    const json j = json::parse(text);
    RunReport r;
    r.method = j.at("method").get<std::string>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.oracle_labels = j.at("oracle_labels").get<bool>();
    for (const auto& p : j.at("phases")) r.phases.emplace_back(p.at("phase").get<std::string>(), evaluation_from_json(p));
    for (const auto& c : j.at("clients")) {
      ClientReport cr;
      cr.client_id = c.at("client_id").get<std::size_t>();
      cr.n_labeled = c.at("n_labeled").get<std::size_t>();
      cr.n_local_test = c.at("n_local_test").get<std::size_t>();
      cr.n_unlabeled = c.at("n_unlabeled").get<std::size_t>();
      cr.n_selected = c.at("n_selected").get<std::size_t>();
      cr.n_synthetic = c.at("n_synthetic").get<std::size_t>();
      cr.rho = c.at("rho").get<std::vector<double>>();
      cr.alpha_requested = c.at("alpha_requested").get<double>();
      cr.alpha_realized = c.at("alpha_realized").get<double>();
      r.clients.push_back(std::move(cr));
    }
    for (const auto& [phase, t] : j.at("traffic").items())
      r.traffic[phase] = {t.at("bytes_up").get<std::uint64_t>(), t.at("bytes_down").get<std::uint64_t>()};
    r.pseudo_label_accuracy = j.at("pseudo_label_accuracy").get<double>();
    r.selected_label_accuracy = j.at("selected_label_accuracy").get<double>();
    r.wall_ms = j.at("wall_ms").get<std::map<std::string, double>>();
    return r;
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed summary: ") + e.what());
  }
}

RunReport load_report(const std::filesystem::path& run_dir) {
  std::ifstream in(run_dir / "summary.json");
  if (!in) throw FormatError("missing " + (run_dir / "summary.json").string());
  std::stringstream ss;
  ss << in.rdbuf();
  return report_from_json(ss.str());
}

// ---------------------------------------------------------------------------
// World

World build_world(const ExperimentConfig& c) {
  c.validate();
  auto means = data::circle_means(c.world.num_classes, c.world.radius);
  for (auto& m : means) m.resize(c.world.dim, 0.0);
  data::Dataset full = data::make_gaussian_mixture(c.world.num_classes, c.world.per_class_n, means, c.world.sigma,
                                                   derive_seed(c.seed, {kWorld}));
  full.name = "world";
  auto [pool, test] = data::holdout_test_split(full, c.world.test_fraction, derive_seed(c.seed, {kGlobalTest}));
  test.name = "global_test";
  auto [labeled, unlabeled] = data::labeled_split(pool, c.partition.labeled_ratio, derive_seed(c.seed, {kLabelSplit}));
  labeled.name = "labeled";
  unlabeled.name = "unlabeled";

  const std::size_t K = c.partition.num_clients;
  const auto split = [&](const data::Dataset& d, data::SplitMode mode, std::uint64_t tag) {
    if (d.empty()) return std::vector<data::Dataset>(K, data::empty_like(d));
    return data::dirichlet_partition(d, K, mode, c.partition.gamma, derive_seed(c.seed, {tag}));
  };

  World w;
  w.global_test = std::move(test);
  w.unlabeled = split(unlabeled, c.partition.unlabeled_mode, kPartitionUnlabeled);
  for (auto& part : split(labeled, c.partition.label_mode, kPartitionLabeled)) {
    const std::size_t k = w.labeled.size();
    auto [train, local] =
        data::holdout_test_split(part, c.partition.test_fraction, derive_seed(c.seed, {kLocalTest, k}));
    w.labeled.push_back(std::move(train));
    w.local_test.push_back(std::move(local));
  }
  return w;
}

// ---------------------------------------------------------------------------
// Runs

RunReport run_ddsa_fssl(const ExperimentConfig& c) {
  c.validate();
  const RunDir dir(c.output_dir);
  dir.text("config.resolved.json", config_to_json(c) + "\n");
  const std::size_t K = c.partition.num_clients;
  const int C = c.world.num_classes;

  RunReport setup;
  const World w = in_phase("world", setup, dir, [&] { return build_world(c); });
  RunReport report = start_report(c, w, "ddsa_fssl");
  report.wall_ms = setup.wall_ms;
  const std::size_t threads = resolved_threads(c);

  // Step 1: classifier on labeled data.
  const Trained step1 = in_phase("classifier", report, dir, [&] {
    return train_classifier(c, w.labeled, c.classifier_rounds, "classifier", kClassifierFed);
  });
  dir.rounds(step1.rounds);
  report.traffic["classifier"] = traffic_of(step1.rounds);
  report.phases.emplace_back("classifier", evaluate(step1.params, c.classifier, w.global_test));
  dir.confusion("classifier", report.phases.back().second.confusion);

  // Step 2: pseudo-labels, confusion protocol and selection.
  std::vector<data::Dataset> pseudo_sets(K), selected(K);
  in_phase("selection", report, dir, [&] {
    const data::TrainingScope scope;
    std::vector<pseudo::ConfusionMatrix> local;
    for (std::size_t k = 0; k < K; ++k) {
      local.push_back(pseudo::local_confusion(step1.params, c.classifier, w.local_test[k]));
      dir.confusion("client" + std::to_string(k) + "_local_test", local.back());
    }
    const pseudo::ConfusionMatrix global = pseudo::aggregate_confusions(local);
    dir.confusion("global_test_step1", global);

    for (std::size_t k = 0; k < K; ++k) {
      pseudo_sets[k] = pseudo::pseudo_label(step1.params, c.classifier, w.unlabeled[k]);
      auto counts = pseudo::label_counts(pseudo_sets[k]);
      // Pseudo classes the global test confusion never predicted carry no
      // precision estimate; none of their samples are kept.
      std::vector<bool> covered(static_cast<std::size_t>(C), true);
      for (int j = 0; j < C; ++j)
        if (counts[static_cast<std::size_t>(j)] > 0 && !(global.column_sum(j) > 0.0)) {
          covered[static_cast<std::size_t>(j)] = false;
          counts[static_cast<std::size_t>(j)] = 0;
        }
      const pseudo::ConfusionMatrix m_p = pseudo::estimate_pseudo_confusion(global, counts);
      dir.confusion("client" + std::to_string(k) + "_pseudo_estimate", m_p);

      std::vector<double> rho(static_cast<std::size_t>(C), 0.0);
      if (!pseudo_sets[k].empty()) {
        if (c.use_selection) {
          select::SelectionConfig sc = c.selection;
          sc.seed = derive_seed(c.seed, {kSelection, k});
          const auto m_l = pseudo::ConfusionMatrix::diagonal(w.labeled[k].label_histogram());
          const auto res = select::solve_selection(m_l, m_p, sc);
          rho = res.rho;
          if (dir.enabled()) select::write_trace_csv(dir.root() / ("selection_trace_client" + std::to_string(k) + ".csv"), res.trace);
        } else {
          std::fill(rho.begin(), rho.end(), 1.0);
        }
        for (int j = 0; j < C; ++j)
          if (!covered[static_cast<std::size_t>(j)]) rho[static_cast<std::size_t>(j)] = 0.0;
      }
      selected[k] = select::apply_selection(pseudo_sets[k], rho, derive_seed(c.seed, {kApplySelection, k}));
      report.clients[k].rho = rho;
      report.clients[k].n_selected = selected[k].size();
    }
  });
  report.pseudo_label_accuracy = label_agreement(pseudo_sets);
  report.selected_label_accuracy = label_agreement(selected);

  // Step 4 planning needs only histograms, so it runs before the generative
  // models; when nothing is to be generated they are not trained at all.
  std::vector<synth::QuotaPlan> plans(K);
  std::int64_t total_quota = 0;
  in_phase("quota", report, dir, [&] {
    std::vector<synth::ClassHistogram> local;
    for (const auto& d : w.labeled) local.push_back(d.label_histogram());
    const auto global = synth::global_histogram(local);
    for (std::size_t k = 0; k < K; ++k) {
      plans[k] = synth::capped(synth::plan_quota(local[k], static_cast<std::int64_t>(w.unlabeled[k].size()), global,
                                                 c.synthesis.alpha),
                               c.synthesis);
      total_quota += plans[k].total_quota();
    }
  });

  std::vector<data::Dataset> synthetic(K);
  for (std::size_t k = 0; k < K; ++k) synthetic[k] = data::empty_like(w.labeled[k]);

  if (total_quota > 0) {
    // Step 3: federated VAE, then federated CDM on encoded data.
    const nn::ParamVector vae = in_phase("vae", report, dir, [&] {
      std::vector<fed::ClientState> clients;
      std::vector<data::Dataset> parts;
      for (std::size_t k = 0; k < K; ++k) {
        parts.push_back(data::concat(w.labeled[k], w.unlabeled[k]));
        clients.push_back(fed::make_client(k, parts.back(), derive_seed(c.seed, {kVaeClients})));
      }
      const nn::Batch probe = nn::make_batch(concat_all(parts, parts.front()));
      fed::FedOptions opts{"vae", derive_seed(c.seed, {kVaeFed}), &probe, threads};
      const data::TrainingScope scope;
      auto res = fed::run_federated(clients, c.vae_rounds, nn::vae_objective(c.vae, c.kl_weight),
                                    nn::init_vae(c.vae, derive_seed(c.seed, {kVaeInit})), opts);
      dir.rounds(res.rounds);
      report.traffic["vae"] = traffic_of(res.rounds);
      return std::move(res.params);
    });

    const auto schedule = diffusion::make_schedule(c.schedule.T, c.schedule.beta_1, c.schedule.beta_T);
    const nn::ParamVector denoiser = in_phase("cdm", report, dir, [&] {
      std::vector<fed::ClientState> clients;
      std::vector<data::Dataset> parts;
      for (std::size_t k = 0; k < K; ++k) {
        parts.push_back(encode_latents(vae, c.vae, data::concat(w.labeled[k], selected[k])));
        clients.push_back(fed::make_client(k, parts.back(), derive_seed(c.seed, {kCdmClients})));
      }
      const nn::Batch probe = nn::make_batch(concat_all(parts, parts.front()));
      fed::FedOptions opts{"cdm", derive_seed(c.seed, {kCdmFed}), &probe, threads};
      const data::TrainingScope scope;
      auto res = fed::run_federated(clients, c.cdm_rounds, diffusion::cdm_objective(c.denoiser, schedule),
                                    diffusion::init_denoiser(c.denoiser, derive_seed(c.seed, {kCdmInit})), opts);
      dir.rounds(res.rounds);
      report.traffic["cdm"] = traffic_of(res.rounds);
      return std::move(res.params);
    });
    if (dir.enabled()) dir.text("schedule.json", schedule.to_json() + "\n");

    // Step 4: generation.
    in_phase("synthesis", report, dir, [&] {
      const synth::Generator gen{denoiser, c.denoiser, vae, c.vae, schedule};
      for (std::size_t k = 0; k < K; ++k) {
        synthetic[k] = synth::generate_synthetic(plans[k], gen, c.synthesis, derive_seed(c.seed, {kSynthesis, k}),
                                                 w.labeled[k]);
        synthetic[k].name = "synthetic/client" + std::to_string(k);
      }
    });
  }

  std::vector<synth::QuotaRecord> records;
  for (std::size_t k = 0; k < K; ++k) {
    auto& cr = report.clients[k];
    cr.n_synthetic = synthetic[k].size();
    cr.alpha_requested = c.synthesis.alpha;
    const auto n_l = static_cast<std::int64_t>(w.labeled[k].size());
    const auto n_u = static_cast<std::int64_t>(w.unlabeled[k].size());
    cr.alpha_realized = n_l + n_u > 0 ? synth::effective_alpha(n_l, n_u, static_cast<std::int64_t>(cr.n_synthetic)) : 0.0;
    records.push_back({k, cr.alpha_requested, cr.alpha_realized, plans[k]});
    if (dir.enabled()) data::save_dataset(synthetic[k], dir.root() / "synthetic" / ("client" + std::to_string(k)));
  }
  if (dir.enabled()) synth::write_quota_json(dir.root() / "quota.json", records);

  // Step 5: retrain on labeled plus synthetic from a fresh initialisation.
  const Trained step5 = in_phase("retrain", report, dir, [&] {
    std::vector<data::Dataset> parts;
    for (std::size_t k = 0; k < K; ++k) parts.push_back(data::concat(w.labeled[k], synthetic[k]));
    return train_classifier(c, parts, c.retrain_rounds, "retrain", kRetrainFed);
  });
  dir.rounds(step5.rounds);
  report.traffic["retrain"] = traffic_of(step5.rounds);
  report.phases.emplace_back("final", evaluate(step5.params, c.classifier, w.global_test));
  dir.confusion("final", report.phases.back().second.confusion);

  finish_run(report, dir);
  return report;
}

RunReport run_baseline(const ExperimentConfig& c) {
  if (c.baseline_mode == BaselineMode::none) throw std::invalid_argument("run_baseline: baseline_mode is none");
  c.validate();
  const RunDir dir(c.output_dir);
  dir.text("config.resolved.json", config_to_json(c) + "\n");
  const std::size_t K = c.partition.num_clients;
  const bool oracle = c.baseline_mode == BaselineMode::fedavg_sl;

  RunReport setup;
  const World w = in_phase("world", setup, dir, [&] { return build_world(c); });
  RunReport report = start_report(c, w, std::string(to_string(c.baseline_mode)));
  report.wall_ms = setup.wall_ms;
  report.oracle_labels = oracle;
  if (oracle) std::clog << "ddsa: " << kOracleNote << '\n';

  std::vector<data::Dataset> parts;
  for (std::size_t k = 0; k < K; ++k)
    parts.push_back(oracle ? data::concat(w.labeled[k], reveal_labels(w.unlabeled[k])) : w.labeled[k]);

  // Same phase identity as Step 5 of the full pipeline.
  const Trained t = in_phase("retrain", report, dir,
                             [&] { return train_classifier(c, parts, c.retrain_rounds, "retrain", kRetrainFed); });
  dir.rounds(t.rounds);
  report.traffic["retrain"] = traffic_of(t.rounds);
  report.phases.emplace_back("final", evaluate(t.params, c.classifier, w.global_test));
  dir.confusion("final", report.phases.back().second.confusion);
  finish_run(report, dir);
  return report;
}

RunReport run(const ExperimentConfig& config) {
  return config.baseline_mode == BaselineMode::none ? run_ddsa_fssl(config) : run_baseline(config);
}

// ---------------------------------------------------------------------------
// Sweeps

std::string_view to_string(SweepAxis a) {
  switch (a) {
    case SweepAxis::alpha:
      return "alpha";
    case SweepAxis::lambda:
      return "lambda";
    case SweepAxis::gamma:
      return "gamma";
    case SweepAxis::selection:
      return "selection";
  }
  return "alpha";
}

SweepAxis sweep_axis_from_string(std::string_view s) {
  if (s == "alpha") return SweepAxis::alpha;
  if (s == "lambda") return SweepAxis::lambda;
  if (s == "gamma") return SweepAxis::gamma;
  if (s == "selection") return SweepAxis::selection;
  throw std::invalid_argument("unknown sweep axis '" + std::string(s) + "'");
}

ExperimentConfig with_axis(const ExperimentConfig& base, SweepAxis axis, double value) {
  ExperimentConfig c = base;
  switch (axis) {
    case SweepAxis::alpha:
      c.synthesis.alpha = value;
      break;
    case SweepAxis::lambda:
      c.partition.labeled_ratio = value;
      break;
    case SweepAxis::gamma:
      c.partition.gamma = value;
      break;
    case SweepAxis::selection:
      c.use_selection = value != 0.0;
      break;
  }
  if (!base.output_dir.empty())
    c.output_dir = base.output_dir / (std::string(to_string(axis)) + "_" + format_value(value));
  c.validate();
  return c;
}

std::vector<SweepPoint> run_sweep(const ExperimentConfig& base, SweepAxis axis, const std::vector<double>& values) {
  if (values.empty()) throw std::invalid_argument("run_sweep: no values");
  std::vector<SweepPoint> out;
  for (double v : values) out.push_back({v, run(with_axis(base, axis, v))});
  if (!base.output_dir.empty()) {
    std::filesystem::create_directories(base.output_dir);
    write_sweep_csv(base.output_dir / "sweep.csv", axis, out);
  }
  return out;
}

void write_sweep_csv(const std::filesystem::path& path, SweepAxis axis, const std::vector<SweepPoint>& points) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path.string());
  out.precision(17);
  out << "axis,value,method,seed,accuracy,macro_precision,macro_recall,alpha_realized_mean\n";
  for (const auto& p : points) {
    const auto& r = p.report;
    double alpha = 0.0;
    for (const auto& c : r.clients) alpha += c.alpha_realized;
    if (!r.clients.empty()) alpha /= static_cast<double>(r.clients.size());
    out << to_string(axis) << ',' << format_value(p.value) << ',' << r.method << ',' << r.seed << ','
        << r.accuracy() << ',' << r.final_eval().macro_precision() << ',' << r.final_eval().macro_recall() << ','
        << alpha << '\n';
  }
}

}  // namespace ddsa::pipeline
