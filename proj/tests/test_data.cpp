#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include <unistd.h>

#include "fedclust/data.hpp"
#include "fedclust/metrics.hpp"

using namespace fedclust;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("fedclust_data_" + std::to_string(::getpid()));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

void put_be32(std::ofstream& f, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                              static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
  f.write(reinterpret_cast<const char*>(b), 4);
}

void write_images(const fs::path& p, std::uint32_t magic, std::uint32_t n, std::uint32_t rows,
                  std::uint32_t cols, std::size_t pixel_bytes) {
  std::ofstream f(p, std::ios::binary);
  put_be32(f, magic);
  put_be32(f, n);
  put_be32(f, rows);
  put_be32(f, cols);
  for (std::size_t i = 0; i < pixel_bytes; ++i)
    f.put(static_cast<char>(i % 256));
}

void write_labels(const fs::path& p, std::uint32_t magic, const std::vector<unsigned char>& labels) {
  std::ofstream f(p, std::ios::binary);
  put_be32(f, magic);
  put_be32(f, static_cast<std::uint32_t>(labels.size()));
  for (unsigned char l : labels)
    f.put(static_cast<char>(l));
}

IdxErrorKind idx_kind(const fs::path& img, const fs::path& lab, std::string* msg = nullptr) {
  try {
    load_idx(img, lab);
  } catch (const IdxError& e) {
    if (msg)
      *msg = e.what();
    return e.kind();
  }
  FAIL("load_idx did not throw");
  return IdxErrorKind::Io;
}

LabeledDataset balanced(int k, int per_class, int d = 2) { return synth_gmm(k, d, per_class, 1.0, 7); }

} // namespace

TEST_CASE("load_idx reads a 4-image fixture") {
  TempDir tmp;
  const auto img = tmp.path / "img", lab = tmp.path / "lab";
  write_images(img, 0x803, 4, 28, 28, 4 * 784);
  write_labels(lab, 0x801, {3, 1, 4, 1});
  const auto ds = load_idx(img, lab);
  CHECK(ds.size() == 4);
  CHECK(ds.d() == 784);
  CHECK(ds.y == Labels{3, 1, 4, 1});
  CHECK(ds.k_star == 5);
  // byte i of the pixel block sits at pixel i % 784 of image i / 784
  CHECK(ds.X(0, 0) == 0.0);
  CHECK(ds.X(255, 0) == 1.0);
  CHECK(ds.X(1, 1) == doctest::Approx(double((784 + 1) % 256) / 255.0));
  CHECK(ds.X.minCoeff() >= 0.0);
  CHECK(ds.X.maxCoeff() <= 1.0);
}

TEST_CASE("load_idx diagnostics are distinct") {
  TempDir tmp;
  const auto img = tmp.path / "img", lab = tmp.path / "lab";
  SUBCASE("bad magic names the offset") {
    write_images(img, 0x802, 4, 2, 2, 16);
    write_labels(lab, 0x801, {0, 1, 0, 1});
    std::string msg;
    CHECK(idx_kind(img, lab, &msg) == IdxErrorKind::BadMagic);
    CHECK(msg.find("offset 0") != std::string::npos);
  }
  SUBCASE("bad label magic") {
    write_images(img, 0x803, 4, 2, 2, 16);
    write_labels(lab, 0x803, {0, 1, 0, 1});
    CHECK(idx_kind(img, lab) == IdxErrorKind::BadMagic);
  }
  SUBCASE("count mismatch") {
    write_images(img, 0x803, 4, 2, 2, 16);
    write_labels(lab, 0x801, {0, 1, 0});
    std::string msg;
    CHECK(idx_kind(img, lab, &msg) == IdxErrorKind::CountMismatch);
    CHECK(msg.find("mismatch") != std::string::npos);
  }
  SUBCASE("truncated pixels") {
    write_images(img, 0x803, 4, 2, 2, 15);
    write_labels(lab, 0x801, {0, 1, 0, 1});
    CHECK(idx_kind(img, lab) == IdxErrorKind::Truncated);
  }
  SUBCASE("truncated header") {
    {
      std::ofstream f(img, std::ios::binary);
      put_be32(f, 0x803);
    }
    write_labels(lab, 0x801, {0});
    CHECK(idx_kind(img, lab) == IdxErrorKind::Truncated);
  }
  SUBCASE("missing file") {
    write_labels(lab, 0x801, {0});
    std::string msg;
    CHECK(idx_kind(tmp.path / "nope", lab, &msg) == IdxErrorKind::Io);
    CHECK(msg.find("nope") != std::string::npos);
  }
}

TEST_CASE("synth_gmm") {
  SUBCASE("layout and determinism") {
    const auto a = synth_gmm(3, 4, 10, 5.0, 11);
    const auto b = synth_gmm(3, 4, 10, 5.0, 11);
    CHECK(a.X == b.X);
    CHECK(a.y == b.y);
    CHECK(a.size() == 30);
    CHECK(a.k_star == 3);
    CHECK(a.y[0] == 0);
    CHECK(a.y[29] == 2);
    a.validate();
  }
  SUBCASE("cluster means sit at separation * e_c") {
    const auto ds = synth_gmm(3, 3, 4000, 6.0, 1);
    for (int c = 0; c < 3; ++c) {
      const Vector mean = ds.X.middleCols(c * 4000, 4000).rowwise().mean();
      Vector expect = Vector::Zero(3);
      expect(c) = 6.0;
      CHECK((mean - expect).norm() < 0.1);
    }
  }
  SUBCASE("no separation leaves nothing to find") {
    const auto ds = synth_gmm(2, 2, 1000, 0.0, 3);
    const auto km = kmeans(Matrix(ds.X.transpose()), 2, 5);
    CHECK(nmi(km.labels, ds.y) < 0.05);
  }
  SUBCASE("wide separation is recovered exactly") {
    const auto ds = synth_gmm(4, 8, 100, 20.0, 3);
    const auto km = kmeans(Matrix(ds.X.transpose()), 4, 5, {100, 5});
    CHECK(nmi(km.labels, ds.y) == 1.0);
  }
  SUBCASE("invalid sizes") { CHECK_THROWS_AS(synth_gmm(1, 4, 10, 1.0, 0), InvalidArgument); }
}

TEST_CASE("partition_heterogeneous") {
  const auto ds = balanced(4, 600);

  SUBCASE("p = 1 gives pure shards") {
    const auto shards = partition_heterogeneous(ds, {4, 1.0, 200, 9});
    REQUIRE(shards.size() == 4);
    for (const auto& s : shards) {
      CHECK(s.indices.size() == 200);
      CHECK(label_fraction(ds, s, s.client_id) == 1.0);
    }
  }
  SUBCASE("p = 0.5, s = 100 has exactly 50 dominant draws first") {
    const auto shards = partition_heterogeneous(ds, {4, 0.5, 100, 2});
    for (const auto& s : shards) {
      REQUIRE(s.indices.size() == 100);
      for (int i = 0; i < 50; ++i)
        CHECK(ds.y[s.indices[i]] == s.client_id);
      CHECK(s.p_used == 0.5);
    }
  }
  SUBCASE("indices are unique within a shard and in range") {
    const auto shards = partition_heterogeneous(ds, {4, 0.3, 900, 5});
    for (const auto& s : shards) {
      std::set<Eigen::Index> seen(s.indices.begin(), s.indices.end());
      CHECK(seen.size() == s.indices.size());
      CHECK(*seen.begin() >= 0);
      CHECK(*seen.rbegin() < ds.size());
    }
  }
  SUBCASE("deterministic per seed") {
    const auto a = partition_heterogeneous(ds, {4, 0.4, 100, 3});
    const auto b = partition_heterogeneous(ds, {4, 0.4, 100, 3});
    const auto c = partition_heterogeneous(ds, {4, 0.4, 100, 4});
    CHECK(a[2].indices == b[2].indices);
    CHECK(a[2].indices != c[2].indices);
  }
  SUBCASE("p = 0 passes a per-class 3 sigma multinomial bound") {
    const int s = 500, k = 4;
    const double mean = s / double(k), sd = std::sqrt(s * 0.25 * 0.75);
    int cells = 0, pass = 0;
    for (std::uint64_t seed = 0; seed < 20; ++seed)
      for (const auto& shard : partition_heterogeneous(ds, {k, 0.0, s, seed}))
        for (int c = 0; c < k; ++c) {
          const double count = label_fraction(ds, shard, c) * s;
          ++cells;
          pass += std::abs(count - mean) <= 3 * sd;
        }
    CHECK(pass >= 0.95 * cells);
  }
  SUBCASE("dominant fraction averages p + (1 - p)/k") {
    const double p = 0.6;
    double total = 0;
    for (std::uint64_t seed = 0; seed < 50; ++seed)
      total += label_fraction(ds, partition_heterogeneous(ds, {4, p, 500, seed})[1], 1);
    CHECK(std::abs(total / 50 - (p + (1 - p) / 4)) < 0.03);
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(partition_heterogeneous(ds, {3, 0.5, 10, 0}), InvalidArgument);
    CHECK_THROWS_AS(partition_heterogeneous(ds, {4, 1.5, 10, 0}), InvalidArgument);
    CHECK_THROWS_AS(partition_heterogeneous(ds, {4, 1.0, 601, 0}), InvalidArgument);
    LabeledDataset gap = ds;
    for (auto& l : gap.y)
      if (l == 2)
        l = 1;
    CHECK_THROWS_AS(partition_heterogeneous(gap, {4, 0.5, 10, 0}), InvalidArgument);
  }
}

TEST_CASE("shard manifests round-trip through JSON") {
  ClientShard s{2, {5, 1, 9}, 0.25, 77};
  const auto j = shard_to_json(s);
  CHECK(j.at("client_id") == 2);
  CHECK(j.at("p") == 0.25);
  const auto back = shard_from_json(nlohmann::json::parse(j.dump()));
  CHECK(back.client_id == 2);
  CHECK(back.indices == s.indices);
  CHECK(back.p_used == 0.25);
  CHECK(back.seed == 77);
}

TEST_CASE("dataset validation") {
  LabeledDataset ds = balanced(2, 3);
  ds.validate();
  ds.y.back() = 2;
  CHECK_THROWS_AS(ds.validate(), InvalidArgument);
  ds = balanced(2, 3);
  ds.y.pop_back();
  CHECK_THROWS_AS(ds.validate(), InvalidArgument);
  ds = balanced(2, 3);
  ds.X(0, 0) = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(ds.validate(), InvalidArgument);
}
