#pragma once

// Trajectory and cross-model geometry: token-path curvature, linear CKA,
// paired cosine similarity and centroid shift.

#include <vector>

#include "sftscope/ingest.hpp"
#include "sftscope/matrix.hpp"

namespace sftscope {

struct TrajectoryStats {
  double curvature = 0.0;  // mean turning angle / pi, in [0, 1]
  int skipped_angles = 0;  // angle terms dropped for near-zero steps
  bool degenerate = false; // every term skipped; curvature reported as 0
};

/// Mean normalized turning angle between consecutive step vectors
/// v_t = h_t - h_{t-1}. Steps shorter than 1e-12 * max step are skipped
/// together with both angle terms that touch them. Requires T >= 3.
TrajectoryStats curvature(const Matrix& tokens);

/// Mean per-sample curvature over a run layer, in manifest order.
double dataset_curvature(const ActivationRun& run, int layer);

/// Linear CKA between two N-row representations (columns are centered).
double cka(const Matrix& hb, const Matrix& hs);

std::vector<double> cosine_per_row(const Matrix& hb, const Matrix& hs);
/// Mean of per-row cosine similarities, in [-1, 1].
double cosine_profile(const Matrix& hb, const Matrix& hs);

/// Euclidean distance between the column means.
double mean_shift(const Matrix& hb, const Matrix& hs);

}  // namespace sftscope
