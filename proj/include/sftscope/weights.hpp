#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

#include "sftscope/ingest.hpp"
#include "sftscope/matrix.hpp"

namespace sftscope {

/// Attention projections that make up a block's parameter set.
inline const std::set<std::string> kAttentionProjections = {"W_Q", "W_K", "W_V", "W_O"};

struct WeightDelta {
  int layer = 0;
  std::map<std::string, double> per_matrix;  // ||W_s - W_b||_F
  double aggregate = 0.0;                    // sqrt(sum per_matrix^2)
  double relative = 0.0;                     // aggregate / sqrt(sum ||W_b||_F^2)
};

struct WeightOptions {
  /// When false, matrices outside the attention projections are ignored.
  bool all_matrices = false;
};

/// Frobenius distance of one block. Sums run in double, row-major.
WeightDelta weight_delta(const std::map<std::string, Matrix>& base,
                         const std::map<std::string, Matrix>& sft,
                         const WeightOptions& options = {});

/// Per-block deltas ordered by block index.
std::vector<WeightDelta> weight_profile(const WeightManifest& base, const WeightManifest& sft,
                                        const WeightOptions& options = {});

}  // namespace sftscope
