#pragma once

// Turns layer profiles into depth-targeted tuning plans: segment partitions,
// selection masks, divergence localization, correlation and significance
// tests, plus the synthetic fixture generator used to validate them.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "sftscope/protocol.hpp"

namespace sftscope {

struct Segment {
  int start = 0;  // inclusive block index
  int end = 0;    // exclusive
  int size() const { return end - start; }
};

struct SegmentPlan {
  int num_layers = 0;  // transformer blocks, embedding excluded
  int num_segments = 0;
  std::vector<Segment> boundaries;
  std::string mask;  // one '0'/'1' per segment
};

/// Splits [0, L) into M contiguous ranges; the first L mod M ranges get one
/// extra layer. The mask starts as all zeros.
SegmentPlan segment_layers(int num_layers, int num_segments);

/// Replaces the mask after checking its length and alphabet.
SegmentPlan with_mask(SegmentPlan plan, const std::string& mask);

/// Ascending block indices covered by '1' segments.
std::vector<int> mask_to_layers(const SegmentPlan& plan);

struct CorrelationCell {
  std::string metric_a;
  std::string metric_b;
  double r = 0.0;
  int n = 0;
};

/// Pearson r over layer-aligned values. Profiles are aligned by layer index:
/// when one starts at layer 0 and the other at layer 1, the layer-0 entry is
/// dropped. Aligned lengths must match and be >= 3.
CorrelationCell correlate(const LayerProfile& a, const LayerProfile& b);
double pearson(const std::vector<double>& a, const std::vector<double>& b);

struct TTestResult {
  double t = 0.0;
  double p = 1.0;
  double df = 0.0;
};

/// Welch's unequal-variance two-sample t-test with a two-sided p-value.
TTestResult welch_ttest(const std::vector<double>& group_a, const std::vector<double>& group_b);

struct LocalizationRules {
  double cka_floor = 0.98;
  double z_cap = 1.0;
  /// Fixed-range variant: select segments lying inside [lo*L, hi*L).
  std::optional<std::pair<double, double>> depth_range;
};

struct SegmentDiagnostics {
  int segment = 0;
  Segment range;
  double min_cka = 0.0;
  double max_shift_z = 0.0;
  bool contains_embedding = false;
  bool selected = false;
  std::string reason;
};

struct LocalizationResult {
  SegmentPlan plan;
  LocalizationRules rules;
  std::vector<SegmentDiagnostics> segments;
  std::optional<TTestResult> separation;  // selected vs unselected layer CKA
  std::string separation_note;
  std::vector<std::string> warnings;
};

/// Profile index (hidden stream) l feeds block l. Segment [a, b) is judged on
/// streams a..b-1, and the last segment also on the final stream L. A segment
/// is selected iff all its CKA values are >= cka_floor and all mean-shift
/// z-scores (over every stream) are <= z_cap. The segment holding stream 0
/// (the embedding output) is never selected.
LocalizationResult localize_divergence(const std::vector<LayerProfile>& profiles,
                                       int num_segments, const LocalizationRules& rules = {});

struct SynthesisOptions {
  int num_layers = 20;
  int num_samples = 128;
  int hidden_dim = 32;
  double inject_depth_fraction = 0.8;
  double shift_magnitude = 12.0;
  double rotation_angle = 0.0;
  std::uint64_t seed = 0;
  int min_tokens = 4;
  int max_tokens = 12;
  /// Blend of injected-layer token paths toward a straight line, in [0, 1].
  double straighten = 0.0;
  bool write_tokens = true;
  bool write_pooled = true;
};

/// First hidden stream the SFT run diverges at: ceil(fraction * L).
int injection_layer(int num_layers, double fraction);

/// Writes a base/SFT pair of valid run directories. The base run holds seeded
/// Gaussian token states. From the injection layer on, each SFT sample is
/// rotated about the base centroid by `rotation_angle` in the plane spanned
/// by its own pooled deviation and a random orthogonal direction, then moved
/// by a fixed vector of norm `shift_magnitude`. A per-layer recentering keeps
/// the SFT centroid exactly at base centroid + shift. A fraction of 1 leaves
/// the two runs identical.
std::pair<ActivationRun, ActivationRun> synthesize_pair(const std::filesystem::path& base_dir,
                                                        const std::filesystem::path& sft_dir,
                                                        const SynthesisOptions& options);

/// Writes base/SFT weight directories whose block b has aggregate attention
/// delta `deltas[b-1]` (Frobenius, before float32 rounding).
void synthesize_weights(const std::filesystem::path& base_dir, const std::filesystem::path& sft_dir,
                        const std::vector<double>& deltas, int rows, int cols, std::uint64_t seed);

/// Delta schedule matching a synthesized pair: small below the injection
/// depth, large from it on.
std::vector<double> localization_deltas(int num_layers, double inject_depth_fraction);

}  // namespace sftscope
