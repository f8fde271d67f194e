#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "ddsa/data.hpp"
#include "ddsa/nn.hpp"

namespace ddsa::fed {

struct RoundConfig {
  std::size_t rounds = 10;        // R
  std::size_t local_epochs = 1;   // E
  std::size_t batch_size = 32;
  nn::OptimizerConfig optimizer;
  double participation = 1.0;     // fraction of clients per round
  double lr_decay = 1.0;          // learning rate of round r is lr * lr_decay^(r-1)

  void validate() const;
};

struct ClientState {
  std::size_t client_id = 0;
  data::Dataset train_data;
  nn::ParamVector local_params;
  /// Root of this client's random streams; the stream for round r is
  /// derive_seed(stream_seed, {r}).
  std::uint64_t stream_seed = 0;
  nn::OptimizerState optimizer_state;
};

/// Client with stream_seed = derive_seed(global_seed, {client_id}).
ClientState make_client(std::size_t client_id, data::Dataset train_data, std::uint64_t global_seed);

/// E epochs of shuffled mini-batch steps starting from `global_params`.
/// Also stores the result in `client.local_params`. The optimizer state
/// persists in the client across rounds.
nn::ParamVector local_train(ClientState& client, const nn::ParamVector& global_params,
                            const RoundConfig& config, const nn::LossFn& loss, std::size_t round);

/// sum_k p_k theta_k with p_k = n_k / sum n, accumulated in list order.
nn::ParamVector fedavg_aggregate(std::span<const nn::ParamVector> params,
                                 std::span<const std::size_t> data_sizes);

struct RoundTelemetry {
  std::size_t round = 0;
  std::string phase;
  double global_loss = 0.0;
  std::uint64_t bytes_up = 0;
  std::uint64_t bytes_down = 0;
  double wall_ms = 0.0;
};

struct FedOptions {
  std::string phase = "train";
  /// Seeds client sampling and the probe-loss noise.
  std::uint64_t seed = 0;
  /// Probe set for the per-round global loss. Without one the loss is NaN.
  const nn::Batch* probe = nullptr;
  /// Worker threads for local training. Results do not depend on it.
  std::size_t threads = 1;
};

struct FedResult {
  nn::ParamVector params;
  std::vector<RoundTelemetry> rounds;
};

/// R rounds of broadcast, local training on the participating clients and
/// aggregation. Clients with no data carry zero aggregation weight and are
/// left out. Clients run in ascending client_id order.
FedResult run_federated(std::vector<ClientState>& clients, const RoundConfig& config, const nn::LossFn& loss,
                        const nn::ParamVector& init_params, const FedOptions& options = {});

/// Appends rows to `rounds.csv`, writing the header if the file is new.
void append_rounds_csv(const std::filesystem::path& path, std::span<const RoundTelemetry> rows);

/// Reads DDSA_THREADS; 1 when unset or invalid.
std::size_t threads_from_env();

}  // namespace ddsa::fed
