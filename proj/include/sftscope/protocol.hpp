#pragma once

// Base-vs-SFT evaluation protocol. Every metric is assigned one computation
// mode:
//   sample_diff   mean over samples of f(H_s,i) - f(H_b,i) on token matrices
//   dataset_diff  f(pooled_s) - f(pooled_b) on whole pooled matrices
//   alignment     f(pooled_b, pooled_s)
//   single_run    the metric of one run on its own (figure data)
// Sweeps iterate layers outermost and stream samples in manifest order.

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "sftscope/ingest.hpp"
#include "sftscope/spectral.hpp"

namespace sftscope {

enum class Mode { SampleDiff, DatasetDiff, Alignment, SingleRun };

enum class Metric {
  PromptEntropy,
  Curvature,
  Sparsity,
  DatasetEntropy,
  EffectiveRank,
  EffectiveRankNormalized,
  RankDeficiency,
  ConditionNumber,
  SpectralNorm,
  Cka,
  CosineProfile,
  MeanShift,
  WeightDelta,
  WeightDeltaRelative,
};

std::string_view to_string(Mode mode);
Mode parse_mode(std::string_view name);
std::string_view to_string(Metric metric);
Metric parse_metric(std::string_view name);

/// The mode a metric runs in when comparing two runs.
Mode comparison_mode(Metric metric);
bool uses_alpha(Metric metric);

/// Metrics a sweep computes when none are requested, in output order.
std::vector<Metric> default_metrics(bool have_tokens);

struct ProfileMetadata {
  std::uint64_t seed = 0;
  int num_samples = 0;
  std::string dataset_tag;
  double epsilon = kDefaultEpsilon;
  double rank_tol = kDefaultRankTol;
};

struct LayerProfile {
  std::string metric_name;
  Mode mode = Mode::SingleRun;
  std::optional<double> alpha;
  std::optional<std::string> source;  // "base" / "sft" for single-run profiles
  int first_layer = 0;                // index of values[0]; 1 for per-block weight profiles
  std::vector<double> values;
  ProfileMetadata metadata;

  /// Label used in correlation tables, e.g. "alignment:cka" or "single_run:sft:spectral_norm".
  std::string label() const;
};

struct AnalysisConfig {
  double alpha = kDefaultAlpha;
  double epsilon = kDefaultEpsilon;
  double rank_tol = kDefaultRankTol;
  std::vector<Metric> metrics;  // empty: default_metrics()
  bool include_single_run = true;
  int threads = 1;
  /// Load every token matrix of a layer before evaluating (reference path).
  bool materialize = false;
};

/// f_k on one token matrix (sample-level metrics only).
double sample_metric(Metric metric, const Matrix& tokens, const AnalysisConfig& config);
/// f_k on one pooled matrix (dataset-level metrics only).
double dataset_metric(Metric metric, const Matrix& pooled, const AnalysisConfig& config);
/// f_k(pooled_b, pooled_s) (alignment metrics only).
double alignment_metric(Metric metric, const Matrix& base, const Matrix& sft,
                        const AnalysisConfig& config);

double sample_level_diff(Metric metric, const PairedRun& pair, int layer,
                         const AnalysisConfig& config = {});
double dataset_level_diff(Metric metric, const PairedRun& pair, int layer,
                          const AnalysisConfig& config = {});
double alignment_score(Metric metric, const PairedRun& pair, int layer,
                       const AnalysisConfig& config = {});

/// Per-layer accumulator for one streaming pass. Samples must be pushed in
/// manifest order; each pooled row is written exactly once.
class StreamState {
 public:
  StreamState(const RunManifest& manifest, std::vector<Metric> sample_metrics,
              bool derive_pooled, const AnalysisConfig& config);

  void push(int sample, const Matrix& base_tokens, const Matrix& sft_tokens);

  int count() const { return count_; }
  bool complete() const { return count_ == num_samples_; }

  struct Totals {
    double diff_sum = 0.0;
    double base_sum = 0.0;
    double sft_sum = 0.0;
    bool failed = false;
    std::string error_code;
    std::string error_message;
  };
  const std::vector<Metric>& sample_metrics() const { return metrics_; }
  const std::vector<Totals>& totals() const { return totals_; }

  const Matrix& pooled_base() const { return pooled_base_; }
  const Matrix& pooled_sft() const { return pooled_sft_; }

 private:
  int num_samples_ = 0;
  int count_ = 0;
  bool derive_pooled_ = false;
  std::vector<Metric> metrics_;
  std::vector<Totals> totals_;
  Matrix pooled_base_;
  Matrix pooled_sft_;
  const AnalysisConfig* config_;
};

struct MetricFailure {
  std::string metric;
  std::string mode;
  int layer = 0;
  std::string code;
  std::string message;
};

struct SweepResult {
  std::vector<LayerProfile> profiles;
  std::vector<MetricFailure> failures;
};

/// Evaluates every requested metric at every layer 0..L. A metric failing at
/// any layer is dropped from the output and reported in `failures`; the
/// remaining metrics still run.
SweepResult full_sweep(const PairedRun& pair, const AnalysisConfig& config);

}  // namespace sftscope
