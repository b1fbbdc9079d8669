#include "fedclust/federation.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <numeric>
#include <ostream>
#include <random>
#include <thread>

namespace fedclust {

void FederationConfig::validate() const {
  if (rounds < 1)
    throw InvalidArgument("federation: rounds must be at least 1");
  if (k < 1)
    throw InvalidArgument("federation: k must be at least 1");
  if (!(failure.disconnection_rate >= 0.0 && failure.disconnection_rate < 1.0))
    throw InvalidArgument("federation: disconnection_rate must lie in [0, 1)");
  if (workers < 1)
    throw InvalidArgument("federation: workers must be at least 1");
  train.validate();
}

ServerState init_server(const LabeledDataset& ds, const std::vector<ClientShard>& shards,
                        const ClusterContrastiveModel& model_template, int k, std::uint64_t seed,
                        int probe_per_client, KMeansOptions opts) {
  if (shards.empty())
    throw InvalidArgument("init_server: no client shards");
  std::vector<Eigen::Index> probe;
  for (const auto& s : shards) {
    const std::size_t take = std::min<std::size_t>(s.indices.size(),
                                                   static_cast<std::size_t>(probe_per_client));
    probe.insert(probe.end(), s.indices.begin(), s.indices.begin() + static_cast<long>(take));
  }
  if (static_cast<int>(probe.size()) < k)
    throw InvalidArgument("init_server: probe of " + std::to_string(probe.size()) +
                          " samples is smaller than k=" + std::to_string(k));
  const Matrix Z = model_template.encoder.forward(ds.columns(probe));
  ServerState state;
  state.global_model = model_template;
  state.global_centroids = kmeans(Z.transpose(), k, derive_seed(seed, 0xC0), opts).centroids;
  state.round = 0;
  return state;
}

LocalTrainResult local_train(const ClusterContrastiveModel& start,
                             const ClusterContrastiveModel& global_model, const Matrix& X,
                             const Labels& labels, int k, const TrainConfig& cfg,
                             std::uint64_t seed) {
  LocalTrainResult out;
  out.model = start;
  const Eigen::Index n = X.cols();
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::mt19937_64 rng(seed);
  double loss_sum = 0;
  for (int epoch = 0; epoch < cfg.local_epochs; ++epoch) {
    std::iota(order.begin(), order.end(), Eigen::Index{0});
    std::shuffle(order.begin(), order.end(), rng);
    for (Eigen::Index begin = 0; begin < n; begin += cfg.batch_size) {
      const Eigen::Index end = std::min<Eigen::Index>(n, begin + cfg.batch_size);
      Matrix xb(X.rows(), end - begin);
      Labels lb(static_cast<std::size_t>(end - begin));
      for (Eigen::Index t = begin; t < end; ++t) {
        xb.col(t - begin) = X.col(order[t]);
        lb[t - begin] = labels[order[t]];
      }
      const ForwardCache cache = make_forward_cache(out.model, global_model, xb, lb, k);
      loss_sum += ccfc_loss(cache, cfg);
      const Gradients g = backward(out.model, cache, cfg);
      out.skipped += g.skipped;
      out.model = sgd_step(out.model, g, cfg.lr);
      ++out.steps;
    }
  }
  out.loss_mean = out.steps ? loss_sum / out.steps : 0.0;
  return out;
}

ClientUpdate client_round(const LabeledDataset& ds, const ClientShard& shard,
                          const ServerState& server, const FederationConfig& cfg) {
  if (shard.indices.empty())
    throw InvalidArgument("client_round: client " + std::to_string(shard.client_id) +
                          " has no samples");
  const Matrix X = ds.columns(shard.indices);
  const Labels labels =
      assign_labels(server.global_model.encoder, server.global_centroids, X);

  const auto cid = static_cast<std::uint64_t>(shard.client_id);
  const auto rnd = static_cast<std::uint64_t>(server.round);
  LocalTrainResult trained = local_train(server.global_model, server.global_model, X, labels, cfg.k,
                                         cfg.train, derive_seed(cfg.train.seed, cid, rnd));

  ClientUpdate up;
  up.client_id = shard.client_id;
  up.n_samples = X.cols();
  up.loss_mean = trained.loss_mean;
  up.skipped = trained.skipped;
  const Matrix Z = trained.model.encoder.forward(X);
  up.local_centroids =
      kmeans(Z.transpose(), cfg.k, derive_seed(cfg.seed, cid, rnd, 1), cfg.kmeans).centroids;
  up.model = std::move(trained.model);
  return up;
}

std::vector<double> aggregation_weights(const std::vector<ClientUpdate>& updates) {
  double total = 0;
  for (const auto& u : updates)
    total += static_cast<double>(u.n_samples);
  if (!(total > 0))
    throw InvalidArgument("aggregate: no samples across updates");
  std::vector<double> w;
  w.reserve(updates.size());
  for (const auto& u : updates)
    w.push_back(static_cast<double>(u.n_samples) / total);
  return w;
}

ClusterContrastiveModel aggregate_models(const std::vector<ClientUpdate>& updates) {
  if (updates.empty())
    throw InvalidArgument("aggregate_models: no updates");
  for (const auto& u : updates)
    if (!same_architecture(u.model, updates.front().model))
      throw DimensionError("aggregate_models: client " + std::to_string(u.client_id) +
                           " uploaded a model with a different architecture");
  if (updates.size() == 1)
    return updates.front().model;
  const auto w = aggregation_weights(updates);
  Vector acc = Vector::Zero(parameter_count(updates.front().model));
  for (std::size_t i = 0; i < updates.size(); ++i)
    acc += w[i] * flatten(updates[i].model);
  return unflatten(updates.front().model, acc);
}

Matrix aggregate_centroids(const std::vector<ClientUpdate>& updates, int k, std::uint64_t seed,
                           KMeansOptions opts) {
  if (updates.empty())
    throw InvalidArgument("aggregate_centroids: no updates");
  Eigen::Index rows = 0;
  for (const auto& u : updates)
    rows += u.local_centroids.rows();
  if (rows < k)
    throw InvalidArgument("aggregate_centroids: pool of " + std::to_string(rows) +
                          " centroids is smaller than k=" + std::to_string(k));
  Matrix pool(rows, updates.front().local_centroids.cols());
  Eigen::Index r = 0;
  for (const auto& u : updates) {
    pool.middleRows(r, u.local_centroids.rows()) = u.local_centroids;
    r += u.local_centroids.rows();
  }
  return kmeans(pool, k, seed, opts).centroids;
}

std::vector<int> apply_failures(int m, double rate, std::uint64_t seed) {
  if (m < 1)
    throw InvalidArgument("apply_failures: need at least one client");
  if (!(rate >= 0.0 && rate < 1.0))
    throw InvalidArgument("apply_failures: rate must lie in [0, 1)");
  const int dropped = static_cast<int>(std::floor(rate * m));
  if (dropped >= m)
    throw InvalidArgument("apply_failures: every client would be disconnected");
  std::vector<int> ids(static_cast<std::size_t>(m));
  std::iota(ids.begin(), ids.end(), 0);
  std::mt19937_64 rng(derive_seed(seed, 0xFA11));
  std::shuffle(ids.begin(), ids.end(), rng);
  ids.erase(ids.begin(), ids.begin() + dropped);
  std::sort(ids.begin(), ids.end());
  return ids;
}

int effective_workers(int requested) {
  int w = std::max(1, requested);
  if (const char* env = std::getenv("FEDCLUST_THREADS")) {
    const int cap = std::atoi(env);
    if (cap >= 1)
      w = std::min(w, cap);
  }
  return w;
}

namespace {

// Runs the survivors' rounds on up to `workers` threads. Results land in
// survivor order, which is ascending client id.
std::vector<ClientUpdate> run_clients(const LabeledDataset& ds,
                                      const std::vector<ClientShard>& shards,
                                      const std::vector<int>& survivors, const ServerState& state,
                                      const FederationConfig& cfg) {
  std::vector<ClientUpdate> updates(survivors.size());
  std::vector<std::exception_ptr> errors(survivors.size());
  auto work = [&](std::size_t slot) {
    try {
      updates[slot] = client_round(ds, shards[static_cast<std::size_t>(survivors[slot])], state, cfg);
    } catch (...) {
      errors[slot] = std::current_exception();
    }
  };
  const int workers = std::min<int>(effective_workers(cfg.workers), static_cast<int>(survivors.size()));
  if (workers <= 1) {
    for (std::size_t i = 0; i < survivors.size(); ++i)
      work(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::jthread> pool;
    for (int w = 0; w < workers; ++w)
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < survivors.size(); i = next++)
          work(i);
      });
  }
  for (auto& e : errors)
    if (e)
      std::rethrow_exception(e);
  return updates;
}

} // namespace

FederationResult run_federation(const LabeledDataset& ds, const std::vector<ClientShard>& shards,
                                const ClusterContrastiveModel& model_template,
                                const FederationConfig& cfg) {
  cfg.validate();
  ds.validate();
  if (shards.empty())
    throw InvalidArgument("run_federation: no client shards");
  for (std::size_t i = 0; i < shards.size(); ++i)
    if (shards[i].client_id != static_cast<int>(i))
      throw InvalidArgument("run_federation: shard " + std::to_string(i) + " carries client id " +
                            std::to_string(shards[i].client_id));

  FederationResult result;
  result.survivors = apply_failures(static_cast<int>(shards.size()),
                                    cfg.failure.disconnection_rate, cfg.failure.seed);
  std::vector<ClientShard> connected;
  for (int id : result.survivors)
    connected.push_back(shards[static_cast<std::size_t>(id)]);
  ServerState state =
      init_server(ds, connected, model_template, cfg.k, cfg.seed, cfg.probe_per_client, cfg.kmeans);

  for (int r = 1; r <= cfg.rounds; ++r) {
    auto updates = run_clients(ds, shards, result.survivors, state, cfg);
    std::sort(updates.begin(), updates.end(),
              [](const ClientUpdate& a, const ClientUpdate& b) { return a.client_id < b.client_id; });

    RoundRecord rec;
    rec.round = r;
    rec.participants = static_cast<int>(updates.size());
    for (const auto& u : updates) {
      rec.loss_mean += u.loss_mean / static_cast<double>(updates.size());
      rec.skipped += u.skipped;
    }
    state.global_model = aggregate_models(updates);
    state.global_centroids =
        aggregate_centroids(updates, cfg.k, derive_seed(cfg.seed, 0x5E, static_cast<std::uint64_t>(r)),
                            cfg.kmeans);
    state.round = r;

    const Matrix Z = state.global_model.encoder.forward(ds.X);
    rec.labels = nearest_centroid(Z, state.global_centroids);
    rec.nmi = nmi(rec.labels, ds.y);
    rec.kappa = kappa(rec.labels, ds.y);
    const CollapseReport cr = collapse_report(Z, cfg.tau0);
    rec.effective_rank = cr.effective_rank;
    rec.mean_abs_offdiag_corr = cr.mean_abs_offdiag;
    rec.near_zero_count = cr.near_zero_count;
    result.history.push_back(std::move(rec));
  }
  result.final_labels = result.history.back().labels;
  result.final_state = std::move(state);
  return result;
}

ServerState train_centralized(const LabeledDataset& ds, const std::vector<Eigen::Index>& indices,
                              const ClusterContrastiveModel& model_template,
                              const FederationConfig& cfg) {
  cfg.validate();
  ClientShard all;
  all.indices = indices;
  ServerState state =
      init_server(ds, {all}, model_template, cfg.k, cfg.seed, cfg.probe_per_client, cfg.kmeans);
  const Matrix X = ds.columns(indices);
  for (int r = 1; r <= cfg.rounds; ++r) {
    const Labels labels = assign_labels(state.global_model.encoder, state.global_centroids, X);
    const auto rnd = static_cast<std::uint64_t>(r - 1);
    LocalTrainResult trained = local_train(state.global_model, state.global_model, X, labels, cfg.k,
                                           cfg.train, derive_seed(cfg.train.seed, 0, rnd));
    const Matrix Z = trained.model.encoder.forward(X);
    state.global_centroids = kmeans(Z.transpose(), cfg.k, derive_seed(cfg.seed, 0, rnd, 1), cfg.kmeans).centroids;
    state.global_model = std::move(trained.model);
    state.round = r;
  }
  return state;
}

void write_history_csv(std::ostream& os, const std::vector<RoundRecord>& history) {
  os << "round,nmi,kappa,effective_rank,mean_abs_offdiag_corr,loss_mean\n";
  for (const auto& r : history)
    os << r.round << ',' << format_real(r.nmi) << ',' << format_real(r.kappa) << ','
       << format_real(r.effective_rank) << ',' << format_real(r.mean_abs_offdiag_corr) << ','
       << format_real(r.loss_mean) << '\n';
}

void write_labels_csv(std::ostream& os, const Labels& labels) {
  os << "index,label\n";
  for (std::size_t i = 0; i < labels.size(); ++i)
    os << i << ',' << labels[i] << '\n';
}

} // namespace fedclust
