#pragma once

// Experiment harness: JSON configuration, command execution and artifact
// emission. Exit codes: 0 success, 2 configuration error, 3 runtime error.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fedclust/data.hpp"
#include "fedclust/federation.hpp"
#include "fedclust/model.hpp"
#include "fedclust/theory.hpp"

namespace fedclust::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitRuntime = 3;

/// Strict reader over one JSON object. Every access records the key; done()
/// rejects keys that were never read. Errors carry the JSON pointer.
class Section {
public:
  Section(const nlohmann::json& j, std::string path);

  const std::string& path() const { return path_; }
  bool has(const std::string& key) const;
  std::string child_path(const std::string& key) const { return path_ + "/" + key; }

  double number(const std::string& key);
  double number_or(const std::string& key, double fallback);
  int integer(const std::string& key);
  int integer_or(const std::string& key, int fallback);
  std::uint64_t seed(const std::string& key);
  std::uint64_t seed_or(const std::string& key, std::uint64_t fallback);
  std::string string(const std::string& key);
  std::string string_or(const std::string& key, const std::string& fallback);
  std::vector<int> integers_or(const std::string& key, std::vector<int> fallback);
  std::vector<double> numbers(const std::string& key);
  Section object(const std::string& key);
  std::optional<Section> object_opt(const std::string& key);

  /// Marks `key` as handled elsewhere.
  void skip(const std::string& key) { seen_.insert(key); }
  void done() const;

private:
  const nlohmann::json& at(const std::string& key);

  const nlohmann::json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

/// Parses a JSON file; unreadable or malformed files raise ConfigError.
nlohmann::json load_config(const std::filesystem::path& path);

/// Dataset section: {"source": "gmm"|"idx", "params": {...}}.
LabeledDataset load_dataset(Section dataset);

struct TrainRun {
  LabeledDataset data;
  PartitionSpec partition;
  FederationConfig federation;
  ModelSpec model;
  std::uint64_t model_seed = 0;
  std::optional<std::filesystem::path> output_dir;
};

/// Parses {dataset, partition, federation, train, model?, output_dir?}.
/// `extra_keys` are tolerated at the top level (command-specific fields).
TrainRun parse_train_run(const nlohmann::json& cfg, const std::set<std::string>& extra_keys = {});

struct TheoryRun {
  TheoryConfig theory;
  VerifyOptions verify;
  std::optional<std::filesystem::path> output_dir;
};

TheoryRun parse_theory_run(const nlohmann::json& cfg);

using OutDir = std::optional<std::filesystem::path>;

void cmd_partition(const nlohmann::json& cfg, const OutDir& out, std::ostream& log);
void cmd_train(const nlohmann::json& cfg, const OutDir& out, std::ostream& log);
void cmd_theory(const nlohmann::json& cfg, const OutDir& out, std::ostream& log);
void cmd_diagnose(const nlohmann::json& cfg, const OutDir& out, std::ostream& log);
void cmd_failures(const nlohmann::json& cfg, const OutDir& out, std::ostream& log);

/// Full command-line entry point; returns the process exit code.
int run(int argc, char** argv, std::ostream& out, std::ostream& err);

} // namespace fedclust::cli
