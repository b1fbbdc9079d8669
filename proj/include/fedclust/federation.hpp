#pragma once

#include <cstdint>
#include <iosfwd>
#include <vector>

#include "fedclust/data.hpp"
#include "fedclust/metrics.hpp"
#include "fedclust/model.hpp"

namespace fedclust {

/// What the server broadcasts each round.
struct ServerState {
  ClusterContrastiveModel global_model;
  Matrix global_centroids; ///< k x d'
  int round = 0;
};

/// What a client uploads after local training.
struct ClientUpdate {
  ClusterContrastiveModel model;
  Matrix local_centroids; ///< k x d'
  Eigen::Index n_samples = 0;
  int client_id = 0;
  double loss_mean = 0.0; ///< mean mini-batch loss over the local epochs
  int skipped = 0;        ///< degenerate prediction columns skipped during training
};

struct FailureConfig {
  double disconnection_rate = 0.0; ///< in [0, 1)
  std::uint64_t seed = 0;
};

struct FederationConfig {
  int rounds = 1;
  int k = 0;
  TrainConfig train;
  FailureConfig failure;
  std::uint64_t seed = 0;    ///< server-side k-means and probe seeding
  int workers = 1;           ///< concurrent client simulations
  int probe_per_client = 64; ///< samples per client used to bootstrap round-0 centroids
  KMeansOptions kmeans{100, 3};
  double tau0 = 1e-3; ///< near-zero threshold for the per-round collapse report

  void validate() const;
};

struct RoundRecord {
  int round = 0;
  double nmi = 0.0;
  double kappa = 0.0;
  double effective_rank = 0.0;
  double mean_abs_offdiag_corr = 0.0;
  int near_zero_count = 0;
  double loss_mean = 0.0;
  int participants = 0;
  int skipped = 0;
  Labels labels; ///< global assignment of every sample after this round
};

struct FederationResult {
  std::vector<RoundRecord> history;
  Labels final_labels;
  ServerState final_state;
  std::vector<int> survivors;
};

/// Round-0 state: the template model plus k-means centroids of its
/// representations of a pooled probe (the first `probe_per_client` samples of
/// every shard, in client order).
ServerState init_server(const LabeledDataset& ds, const std::vector<ClientShard>& shards,
                        const ClusterContrastiveModel& model_template, int k, std::uint64_t seed,
                        int probe_per_client = 64, KMeansOptions opts = {100, 3});

struct LocalTrainResult {
  ClusterContrastiveModel model;
  double loss_mean = 0.0;
  int skipped = 0;
  int steps = 0;
};

/// Mini-batch SGD on the CCFC(++) loss with fixed cluster labels. Batches
/// follow a fresh permutation each epoch drawn from `seed`.
LocalTrainResult local_train(const ClusterContrastiveModel& start,
                             const ClusterContrastiveModel& global_model, const Matrix& X,
                             const Labels& labels, int k, const TrainConfig& cfg,
                             std::uint64_t seed);

/// One client's work in a round: label with the global encoder and
/// centroids, train locally, then extract k local centroids.
ClientUpdate client_round(const LabeledDataset& ds, const ClientShard& shard,
                          const ServerState& server, const FederationConfig& cfg);

/// Weights n_l / sum n, in the order of `updates`.
std::vector<double> aggregation_weights(const std::vector<ClientUpdate>& updates);
ClusterContrastiveModel aggregate_models(const std::vector<ClientUpdate>& updates);
/// k-means over the pooled local centroids (each counts once).
Matrix aggregate_centroids(const std::vector<ClientUpdate>& updates, int k, std::uint64_t seed,
                           KMeansOptions opts = {100, 3});

/// Ids of the clients that stay connected: floor(rate * m) are dropped,
/// chosen uniformly from `seed`. Sorted ascending.
std::vector<int> apply_failures(int m, double rate, std::uint64_t seed);

/// Worker count after applying the FEDCLUST_THREADS cap, if set.
int effective_workers(int requested);

FederationResult run_federation(const LabeledDataset& ds, const std::vector<ClientShard>& shards,
                                const ClusterContrastiveModel& model_template,
                                const FederationConfig& cfg);

/// The same round schedule run on a single model that sees all of `indices`
/// directly (no upload or aggregation).
ServerState train_centralized(const LabeledDataset& ds, const std::vector<Eigen::Index>& indices,
                              const ClusterContrastiveModel& model_template,
                              const FederationConfig& cfg);

/// round,nmi,kappa,effective_rank,mean_abs_offdiag_corr,loss_mean
void write_history_csv(std::ostream& os, const std::vector<RoundRecord>& history);
/// index,label
void write_labels_csv(std::ostream& os, const Labels& labels);

} // namespace fedclust
