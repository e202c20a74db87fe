#pragma once

// On-disk activation and weight dumps.
//
// A run directory holds `manifest.json`, token-level tensors at
// `layers/L{l}/sample_{i}.f32` and pooled tensors at `pooled/L{l}.f32`.
// Tensors are raw little-endian float32, row-major, without a header.
// Either granularity may be absent; pooled matrices are then derived from
// token-level tensors on load.

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "sftscope/matrix.hpp"

namespace sftscope {

struct RunManifest {
  std::string model_id;
  int num_layers = 0;  // L; hidden-state streams are 0..L, 0 = embedding output
  int hidden_dim = 0;
  int num_samples = 0;
  std::vector<std::string> sample_ids;
  std::vector<int> token_counts;
  std::string dtype = "f32";
  std::string endianness = "little";
  std::uint64_t seed = 0;
  std::string dataset_tag;

  int num_streams() const { return num_layers + 1; }
};

/// Checks the structural invariants; throws InvalidManifest / UnsupportedDtype.
void check_manifest(const RunManifest& manifest);

RunManifest read_manifest(const std::filesystem::path& run_dir);
void write_manifest(const std::filesystem::path& run_dir, const RunManifest& manifest);

std::filesystem::path token_path(const std::filesystem::path& run_dir, int layer, int sample);
std::filesystem::path pooled_path(const std::filesystem::path& run_dir, int layer);

/// Raw float32 tensor IO. Reading checks the byte length against rows*cols*4.
Matrix read_f32(const std::filesystem::path& file, Eigen::Index rows, Eigen::Index cols);
void write_f32(const std::filesystem::path& file, const Matrix& m);

/// A directory-backed activation dump. Tensors are read on demand so only the
/// (layer, sample) slices being analysed are resident.
class ActivationRun {
 public:
  /// Opens a run without the full validation pass.
  static ActivationRun open(const std::filesystem::path& run_dir);

  const RunManifest& manifest() const { return manifest_; }
  const std::filesystem::path& root() const { return root_; }
  bool has_tokens() const { return has_tokens_; }
  bool has_pooled() const { return has_pooled_; }

  Matrix load_pooled(int layer) const;
  Matrix load_tokens(int layer, int sample) const;

 private:
  ActivationRun(std::filesystem::path root, RunManifest manifest, bool has_tokens,
                bool has_pooled);

  void check_layer(int layer) const;

  std::filesystem::path root_;
  RunManifest manifest_;
  bool has_tokens_ = false;
  bool has_pooled_ = false;
};

/// Full validation: manifest invariants, tensor byte sizes, and a seeded
/// pooled-vs-token spot check on up to 8 samples per layer.
RunManifest validate_run(const std::filesystem::path& run_dir);

/// Row-wise mean of a token matrix, summed sequentially in token order.
Eigen::RowVectorXd mean_pool(const Matrix& tokens);

inline constexpr double kPoolingTolerance = 1e-6;

/// Base/SFT pair sharing architecture and sample order.
class PairedRun {
 public:
  PairedRun(ActivationRun base, ActivationRun sft);

  const ActivationRun& base() const { return base_; }
  const ActivationRun& sft() const { return sft_; }
  const RunManifest& manifest() const { return base_.manifest(); }

 private:
  ActivationRun base_;
  ActivationRun sft_;
};

PairedRun pair_runs(ActivationRun base, ActivationRun sft);

// ---------------------------------------------------------------------------
// Weights

struct WeightEntry {
  std::string name;
  std::string file;  // relative to the weights directory
  Eigen::Index rows = 0;
  Eigen::Index cols = 0;
};

struct WeightLayer {
  int layer = 0;  // transformer block, 1..num_layers
  std::vector<WeightEntry> matrices;
};

struct WeightManifest {
  std::filesystem::path root;
  std::string model_id;
  int num_layers = 0;
  std::vector<WeightLayer> layers;
};

WeightManifest read_weight_manifest(const std::filesystem::path& weights_dir);
void write_weight_manifest(const std::filesystem::path& weights_dir, const WeightManifest& manifest);

/// Loads the named matrices of one block, keyed by name.
std::map<std::string, Matrix> load_weight_layer(const WeightManifest& manifest,
                                                const WeightLayer& layer);

}  // namespace sftscope
