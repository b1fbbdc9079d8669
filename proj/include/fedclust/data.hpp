#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fedclust/numerics.hpp"

namespace fedclust {

/// Samples stored as columns of `X` (d x N) with ground-truth labels in [0, k_star).
struct LabeledDataset {
  Matrix X;
  Labels y;
  int k_star = 0;

  Eigen::Index d() const { return X.rows(); }
  Eigen::Index size() const { return X.cols(); }

  /// Columns of X selected by `indices`, in order.
  Matrix columns(const std::vector<Eigen::Index>& indices) const;
  Labels labels(const std::vector<Eigen::Index>& indices) const;
  /// Throws InvalidArgument when the invariants do not hold.
  void validate() const;
};

/// A client's local slice of a dataset.
struct ClientShard {
  int client_id = 0;
  std::vector<Eigen::Index> indices;
  double p_used = 0.0;
  std::uint64_t seed = 0;
};

struct PartitionSpec {
  int m = 0;       ///< number of clients; must equal k_star
  double p = 0.0;  ///< heterogeneity in [0, 1]
  int s = 0;       ///< samples per client
  std::uint64_t seed = 0;
};

// IDX (MNIST) ingestion ------------------------------------------------------

/// Failure kind of an IDX read, so callers can tell problems apart.
enum class IdxErrorKind { Io, BadMagic, Truncated, CountMismatch };

class IdxError : public FormatError {
public:
  IdxError(IdxErrorKind kind, const std::string& what) : FormatError(what), kind_(kind) {}
  IdxErrorKind kind() const { return kind_; }

private:
  IdxErrorKind kind_;
};

/// Reads an image file (magic 0x00000803) and a label file (0x00000801).
/// Pixels are scaled to [0, 1]; each image becomes one column.
LabeledDataset load_idx(const std::filesystem::path& images_path,
                        const std::filesystem::path& labels_path);

// Synthetic data --------------------------------------------------------------

/// Gaussian mixture: cluster c has unit variance around separation * e_{c mod d}.
/// Samples are grouped by cluster, n_per_cluster each.
LabeledDataset synth_gmm(int k_star, int d, int n_per_cluster, double separation,
                         std::uint64_t seed);

// Partitioning ------------------------------------------------------------------

/// Client l receives round(p*s) samples of true class l and s - round(p*s)
/// samples drawn uniformly over the whole dataset. Clients draw independently,
/// so shards may overlap; indices are unique within a shard.
std::vector<ClientShard> partition_heterogeneous(const LabeledDataset& ds,
                                                 const PartitionSpec& spec);

/// Fraction of the shard whose true label equals `cls`.
double label_fraction(const LabeledDataset& ds, const ClientShard& shard, int cls);

nlohmann::json shard_to_json(const ClientShard& shard);
ClientShard shard_from_json(const nlohmann::json& j);

} // namespace fedclust
