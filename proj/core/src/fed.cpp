#include "ddsa/fed.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <limits>
#include <numeric>
#include <thread>

#include "ddsa/apportion.hpp"
#include "ddsa/error.hpp"
#include "ddsa/rng.hpp"

namespace ddsa::fed {

namespace {

constexpr std::uint64_t kSamplingTag = 0x5A4D;
constexpr std::uint64_t kProbeTag = 0x9E0B;

std::vector<std::size_t> choose_participants(const std::vector<std::size_t>& eligible, double fraction,
                                             std::uint64_t seed, std::size_t round) {
  if (fraction >= 1.0 || eligible.size() <= 1) return eligible;
  const auto m = static_cast<std::size_t>(
      std::max<std::int64_t>(1, round_half_up(fraction * static_cast<double>(eligible.size()))));
  std::vector<std::size_t> pool = eligible;
  Rng rng(derive_seed(seed, {kSamplingTag, round}));
  for (std::size_t i = 0; i < m; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.below(pool.size() - i));
    std::swap(pool[i], pool[j]);
  }
  pool.resize(m);
  std::sort(pool.begin(), pool.end());
  return pool;
}

}  // namespace

void RoundConfig::validate() const {
  if (batch_size < 1) throw std::invalid_argument("round config: batch size must be >= 1");
  if (!(participation > 0.0 && participation <= 1.0))
    throw std::invalid_argument("round config: participation must lie in (0, 1]");
  if (!(lr_decay > 0.0)) throw std::invalid_argument("round config: lr decay must be positive");
  optimizer.validate();
}

ClientState make_client(std::size_t client_id, data::Dataset train_data, std::uint64_t global_seed) {
  ClientState c;
  c.client_id = client_id;
  c.train_data = std::move(train_data);
  c.stream_seed = derive_seed(global_seed, {client_id});
  return c;
}

nn::ParamVector local_train(ClientState& client, const nn::ParamVector& global_params, const RoundConfig& config,
                            const nn::LossFn& loss, std::size_t round) {
  if (!client.local_params.same_layout(global_params) && client.local_params.size() != 0)
    throw DimensionError("local_train: client layout differs from global layout");
  client.local_params = global_params;
  if (config.local_epochs == 0) return client.local_params;
  const std::size_t n = client.train_data.size();
  if (n == 0) throw std::invalid_argument("local_train: client " + std::to_string(client.client_id) + " has no data");

  const double lr_scale = std::pow(config.lr_decay, static_cast<double>(round > 0 ? round - 1 : 0));
  Rng rng(derive_seed(client.stream_seed, {round}));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t e = 0; e < config.local_epochs; ++e) {
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    for (std::size_t start = 0; start < n; start += config.batch_size) {
      const std::size_t stop = std::min(n, start + config.batch_size);
      const nn::Batch batch =
          nn::make_batch(client.train_data, std::span<const std::size_t>(order).subspan(start, stop - start));
      const nn::ParamVector g = nn::gradient(loss, client.local_params, batch, rng);
      nn::optimizer_step(client.local_params, g, client.optimizer_state, config.optimizer, lr_scale);
    }
  }
  return client.local_params;
}

nn::ParamVector fedavg_aggregate(std::span<const nn::ParamVector> params, std::span<const std::size_t> data_sizes) {
  if (params.empty()) throw std::invalid_argument("fedavg_aggregate: no client parameters");
  if (params.size() != data_sizes.size()) throw DimensionError("fedavg_aggregate: one size per client required");
  double total = 0.0;
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (data_sizes[k] == 0) throw std::invalid_argument("fedavg_aggregate: data sizes must be positive");
    if (!params[k].same_layout(params.front())) throw DimensionError("fedavg_aggregate: layouts differ");
    total += static_cast<double>(data_sizes[k]);
  }
  nn::ParamVector out = params.front().zeros_like();
  auto& acc = out.values();
  for (std::size_t k = 0; k < params.size(); ++k) {
    const double p = static_cast<double>(data_sizes[k]) / total;
    const auto& v = params[k].values();
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += p * v[i];
  }
  return out;
}

FedResult run_federated(std::vector<ClientState>& clients, const RoundConfig& config, const nn::LossFn& loss,
                        const nn::ParamVector& init_params, const FedOptions& options) {
  config.validate();
  FedResult result{init_params, {}};
  std::vector<std::size_t> eligible;
  for (std::size_t i = 0; i < clients.size(); ++i) {
    if (!clients[i].train_data.empty()) eligible.push_back(i);
    if (i > 0 && clients[i].client_id <= clients[i - 1].client_id)
      throw std::invalid_argument("run_federated: clients must be sorted by client_id");
  }
  if (config.rounds > 0 && eligible.empty()) throw std::invalid_argument("run_federated: every client is empty");

  const std::uint64_t param_bytes = static_cast<std::uint64_t>(init_params.size()) * 4;
  for (std::size_t r = 1; r <= config.rounds; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto participants = choose_participants(eligible, config.participation, options.seed, r);
    std::vector<nn::ParamVector> local(participants.size());
    std::vector<std::size_t> sizes(participants.size());

    const std::size_t workers = std::max<std::size_t>(1, std::min(options.threads, participants.size()));
    if (workers == 1) {
      for (std::size_t i = 0; i < participants.size(); ++i) {
        auto& c = clients[participants[i]];
        local[i] = local_train(c, result.params, config, loss, r);
        sizes[i] = c.train_data.size();
      }
    } else {
      std::atomic<std::size_t> next{0};
      std::vector<std::exception_ptr> errors(participants.size());
      auto work = [&] {
        for (std::size_t i; (i = next.fetch_add(1)) < participants.size();) {
          try {
            auto& c = clients[participants[i]];
            local[i] = local_train(c, result.params, config, loss, r);
            sizes[i] = c.train_data.size();
          } catch (...) {
            errors[i] = std::current_exception();
          }
        }
      };
      std::vector<std::thread> pool;
      for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work);
      for (auto& t : pool) t.join();
      for (auto& e : errors)
        if (e) std::rethrow_exception(e);
    }
    result.params = fedavg_aggregate(local, sizes);

    RoundTelemetry row;
    row.round = r;
    row.phase = options.phase;
    row.global_loss = std::numeric_limits<double>::quiet_NaN();
    if (options.probe && options.probe->size() > 0) {
      Rng probe_rng(derive_seed(options.seed, {kProbeTag, r}));
      row.global_loss = loss(result.params, *options.probe, probe_rng, nullptr);
    }
    row.bytes_up = param_bytes * participants.size();
    row.bytes_down = param_bytes * participants.size();
    row.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    result.rounds.push_back(row);
  }
  return result;
}

void append_rounds_csv(const std::filesystem::path& path, std::span<const RoundTelemetry> rows) {
  const bool fresh = !std::filesystem::exists(path);
  std::ofstream out(path, std::ios::app);
  if (!out) throw FormatError("cannot write " + path.string());
  out.precision(10);
  if (fresh) out << "round,phase,global_loss,bytes_up,bytes_down,wall_ms\n";
  for (const auto& r : rows)
    out << r.round << ',' << r.phase << ',' << r.global_loss << ',' << r.bytes_up << ',' << r.bytes_down << ','
        << r.wall_ms << '\n';
}

std::size_t threads_from_env() {
  const char* v = std::getenv("DDSA_THREADS");
  if (!v) return 1;
  char* end = nullptr;
  const long n = std::strtol(v, &end, 10);
  if (end == v || n < 1) return 1;
  return static_cast<std::size_t>(n);
}

}  // namespace ddsa::fed
