#pragma once

// Serialization of profiles, plans and correlation tables, plus the
// command-line front end (`analyze`, `weights`, `plan`, `correlate`, `synth`).

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "sftscope/planner.hpp"
#include "sftscope/protocol.hpp"
#include "sftscope/weights.hpp"

namespace sftscope {

inline constexpr std::string_view kToolName = "sftscope";
inline constexpr std::string_view kToolVersion = "0.1.0";

/// Shortest decimal string that parses back to the same double.
std::string format_double(double value);

std::string sha256_hex(std::string_view data);
/// Hash of manifest.json followed by every tensor file in manifest order.
std::string hash_run(const std::filesystem::path& run_dir);
/// Hash of weights.json followed by every matrix file in manifest order.
std::string hash_weights(const std::filesystem::path& weights_dir);

struct InputDigest {
  std::string role;  // "base", "sft", "profiles", ...
  std::string sha256;
};

struct Provenance {
  std::string tool = std::string(kToolName);
  std::string version = std::string(kToolVersion);
  std::string config_hash;
  std::vector<InputDigest> inputs;
};

/// Settings shared by the subcommands; every key is optional in the JSON file.
struct Config {
  double alpha = kDefaultAlpha;
  double epsilon = kDefaultEpsilon;
  double rank_tol = kDefaultRankTol;
  double cka_floor = 0.98;
  double z_cap = 1.0;
  int segments = 5;
  std::vector<std::string> metrics;
};

Config read_config(const std::filesystem::path& file);
nlohmann::json to_json(const Config& config);
/// sha256 of the canonical JSON form of the config.
std::string config_hash(const Config& config);

nlohmann::json to_json(const Provenance& provenance);
Provenance provenance_from_json(const nlohmann::json& j);
/// One-line `# ...` header carried by every CSV output.
std::string provenance_comment(const Provenance& provenance);

nlohmann::json to_json(const LayerProfile& profile);
LayerProfile profile_from_json(const nlohmann::json& j);

nlohmann::json to_json(const SegmentPlan& plan);
SegmentPlan plan_from_json(const nlohmann::json& j);

struct ReportBundle {
  std::vector<LayerProfile> profiles;
  /// Square table over `profiles`; empty cells are constant-profile pairs.
  std::vector<std::vector<std::optional<CorrelationCell>>> correlations;
  std::optional<SegmentPlan> plan;
  std::vector<MetricFailure> failures;
  Provenance provenance;
};

nlohmann::json to_json(const ReportBundle& bundle);
ReportBundle bundle_from_json(const nlohmann::json& j);

/// Reads a profiles file: either a bundle object or a bare array of profiles.
std::vector<LayerProfile> read_profiles(const std::filesystem::path& file);

/// `layer,metric,mode,value` rows, one per layer x profile.
std::string profiles_csv(const std::vector<LayerProfile>& profiles, const Provenance& provenance);

/// Pearson table over every profile pair; constant profiles give empty cells.
std::vector<std::vector<std::optional<CorrelationCell>>> correlation_matrix(
    const std::vector<LayerProfile>& profiles, std::vector<std::string>* warnings = nullptr);

std::vector<LayerProfile> weight_profiles(const std::vector<WeightDelta>& deltas,
                                          const std::string& model_tag);

/// Entry point shared by the `sftscope` binary and the tests. Returns the
/// process exit code: 0 ok, 2 input error, 3 planning error, 4 numerical.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace sftscope
