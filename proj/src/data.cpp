#include "fedclust/data.hpp"

#include <array>
#include <cmath>
#include <fstream>
#include <iterator>
#include <random>
#include <sstream>

namespace fedclust {

Matrix LabeledDataset::columns(const std::vector<Eigen::Index>& indices) const {
  Matrix out(X.rows(), static_cast<Eigen::Index>(indices.size()));
  for (std::size_t j = 0; j < indices.size(); ++j)
    out.col(static_cast<Eigen::Index>(j)) = X.col(indices[j]);
  return out;
}

Labels LabeledDataset::labels(const std::vector<Eigen::Index>& indices) const {
  Labels out;
  out.reserve(indices.size());
  for (auto i : indices)
    out.push_back(y[static_cast<std::size_t>(i)]);
  return out;
}

void LabeledDataset::validate() const {
  if (static_cast<Eigen::Index>(y.size()) != X.cols())
    throw InvalidArgument("dataset: label count " + std::to_string(y.size()) +
                          " != sample count " + std::to_string(X.cols()));
  for (int l : y)
    if (l < 0 || l >= k_star)
      throw InvalidArgument("dataset: label " + std::to_string(l) + " outside [0, " +
                            std::to_string(k_star) + ")");
  require_finite(X, "dataset");
}

// ---------------------------------------------------------------------------
// IDX

namespace {

std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw IdxError(IdxErrorKind::Io, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t read_be32(const std::vector<unsigned char>& buf, std::size_t offset,
                        const std::filesystem::path& path) {
  if (offset + 4 > buf.size())
    throw IdxError(IdxErrorKind::Truncated, path.string() + ": truncated header at offset " +
                                                std::to_string(offset));
  return (std::uint32_t(buf[offset]) << 24) | (std::uint32_t(buf[offset + 1]) << 16) |
         (std::uint32_t(buf[offset + 2]) << 8) | std::uint32_t(buf[offset + 3]);
}

void check_magic(std::uint32_t magic, std::uint32_t expected, const std::filesystem::path& path) {
  if (magic != expected) {
    std::ostringstream msg;
    msg << path.string() << ": bad magic number 0x" << std::hex << magic << " at offset 0 (expected 0x"
        << expected << ")";
    throw IdxError(IdxErrorKind::BadMagic, msg.str());
  }
}

} // namespace

LabeledDataset load_idx(const std::filesystem::path& images_path,
                        const std::filesystem::path& labels_path) {
  const auto img = read_file(images_path);
  const auto lab = read_file(labels_path);

  check_magic(read_be32(img, 0, images_path), 0x00000803u, images_path);
  const std::uint32_t n_images = read_be32(img, 4, images_path);
  const std::uint32_t rows = read_be32(img, 8, images_path);
  const std::uint32_t cols = read_be32(img, 12, images_path);

  check_magic(read_be32(lab, 0, labels_path), 0x00000801u, labels_path);
  const std::uint32_t n_labels = read_be32(lab, 4, labels_path);

  if (n_images != n_labels)
    throw IdxError(IdxErrorKind::CountMismatch,
                   "image/label count mismatch: " + std::to_string(n_images) + " images in " +
                       images_path.string() + " vs " + std::to_string(n_labels) + " labels in " +
                       labels_path.string());

  const std::size_t pixels = std::size_t(rows) * cols;
  const std::size_t img_need = 16 + pixels * n_images;
  if (img.size() < img_need)
    throw IdxError(IdxErrorKind::Truncated, images_path.string() + ": truncated at offset " +
                                                std::to_string(img.size()) + ", expected " +
                                                std::to_string(img_need) + " bytes");
  if (lab.size() < 8 + std::size_t(n_labels))
    throw IdxError(IdxErrorKind::Truncated, labels_path.string() + ": truncated at offset " +
                                                std::to_string(lab.size()) + ", expected " +
                                                std::to_string(8 + n_labels) + " bytes");

  LabeledDataset ds;
  ds.X.resize(static_cast<Eigen::Index>(pixels), n_images);
  for (std::uint32_t i = 0; i < n_images; ++i)
    for (std::size_t p = 0; p < pixels; ++p)
      ds.X(static_cast<Eigen::Index>(p), i) = img[16 + i * pixels + p] / 255.0;
  ds.y.resize(n_labels);
  int max_label = -1;
  for (std::uint32_t i = 0; i < n_labels; ++i) {
    ds.y[i] = lab[8 + i];
    max_label = std::max(max_label, ds.y[i]);
  }
  ds.k_star = max_label + 1;
  return ds;
}

// ---------------------------------------------------------------------------
// Synthetic mixture

LabeledDataset synth_gmm(int k_star, int d, int n_per_cluster, double separation,
                         std::uint64_t seed) {
  if (k_star < 2 || d < 2 || n_per_cluster < 1)
    throw InvalidArgument("synth_gmm: need k_star >= 2, d >= 2, n_per_cluster >= 1");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  LabeledDataset ds;
  ds.k_star = k_star;
  ds.X.resize(d, static_cast<Eigen::Index>(k_star) * n_per_cluster);
  ds.y.resize(static_cast<std::size_t>(k_star) * n_per_cluster);
  Eigen::Index col = 0;
  for (int c = 0; c < k_star; ++c) {
    for (int i = 0; i < n_per_cluster; ++i, ++col) {
      for (int r = 0; r < d; ++r)
        ds.X(r, col) = normal(rng);
      ds.X(c % d, col) += separation;
      ds.y[static_cast<std::size_t>(col)] = c;
    }
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Partitioning

std::vector<ClientShard> partition_heterogeneous(const LabeledDataset& ds,
                                                 const PartitionSpec& spec) {
  if (!(spec.p >= 0.0 && spec.p <= 1.0))
    throw InvalidArgument("partition: p must lie in [0, 1]");
  if (spec.m != ds.k_star)
    throw InvalidArgument("partition: m=" + std::to_string(spec.m) +
                          " must equal the number of true clusters " + std::to_string(ds.k_star));
  if (spec.s < 1)
    throw InvalidArgument("partition: s must be positive");
  const Eigen::Index n = ds.size();
  if (spec.s > n)
    throw InvalidArgument("partition: s=" + std::to_string(spec.s) + " exceeds dataset size");

  std::vector<std::vector<Eigen::Index>> members(static_cast<std::size_t>(ds.k_star));
  for (Eigen::Index i = 0; i < n; ++i)
    members[ds.y[i]].push_back(i);

  const int dominant = static_cast<int>(std::lround(spec.p * spec.s));
  std::vector<ClientShard> shards;
  shards.reserve(static_cast<std::size_t>(spec.m));
  for (int l = 0; l < spec.m; ++l) {
    const auto& own = members[l];
    if (own.empty())
      throw InvalidArgument("partition: true cluster " + std::to_string(l) + " has no members");
    if (static_cast<std::size_t>(dominant) > own.size())
      throw InvalidArgument("partition: cluster " + std::to_string(l) + " has " +
                            std::to_string(own.size()) + " members, need " +
                            std::to_string(dominant));

    std::mt19937_64 rng(derive_seed(spec.seed, static_cast<std::uint64_t>(l)));
    ClientShard shard;
    shard.client_id = l;
    shard.p_used = spec.p;
    shard.seed = spec.seed;
    shard.indices.reserve(static_cast<std::size_t>(spec.s));

    std::vector<char> used(static_cast<std::size_t>(n), 0);
    std::vector<std::size_t> used_per_class(static_cast<std::size_t>(ds.k_star), 0);
    auto take = [&](Eigen::Index i) {
      used[i] = 1;
      ++used_per_class[ds.y[i]];
      shard.indices.push_back(i);
    };

    // dominant share: distinct members of class l
    std::vector<Eigen::Index> pool = own;
    for (int t = 0; t < dominant; ++t) {
      std::uniform_int_distribution<std::size_t> pick(t, pool.size() - 1);
      std::swap(pool[t], pool[pick(rng)]);
      take(pool[t]);
    }

    // uniform share: the class of each draw is that of a uniform index over the
    // whole dataset; a draw that hits an index already held is redrawn inside
    // the same class, which keeps the class frequencies exact.
    std::uniform_int_distribution<Eigen::Index> any(0, n - 1);
    for (int t = dominant; t < spec.s; ++t) {
      Eigen::Index i = any(rng);
      if (used[i]) {
        const int cls = ds.y[i];
        const auto& cand = members[cls];
        if (used_per_class[cls] >= cand.size())
          throw InvalidArgument("partition: class " + std::to_string(cls) +
                                " exhausted for client " + std::to_string(l));
        std::uniform_int_distribution<std::size_t> in_class(0, cand.size() - 1);
        do {
          i = cand[in_class(rng)];
        } while (used[i]);
      }
      take(i);
    }
    shards.push_back(std::move(shard));
  }
  return shards;
}

double label_fraction(const LabeledDataset& ds, const ClientShard& shard, int cls) {
  if (shard.indices.empty())
    return 0.0;
  std::size_t hits = 0;
  for (auto i : shard.indices)
    hits += ds.y[static_cast<std::size_t>(i)] == cls;
  return static_cast<double>(hits) / static_cast<double>(shard.indices.size());
}

nlohmann::json shard_to_json(const ClientShard& shard) {
  return {{"client_id", shard.client_id},
          {"indices", shard.indices},
          {"p", shard.p_used},
          {"seed", shard.seed}};
}

ClientShard shard_from_json(const nlohmann::json& j) {
  ClientShard s;
  s.client_id = j.at("client_id").get<int>();
  s.indices = j.at("indices").get<std::vector<Eigen::Index>>();
  s.p_used = j.at("p").get<double>();
  s.seed = j.at("seed").get<std::uint64_t>();
  return s;
}

} // namespace fedclust
