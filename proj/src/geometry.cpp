#include "sftscope/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "sftscope/error.hpp"

namespace sftscope {

namespace {

constexpr double kDegenerateStep = 1e-12;

// Angle between two non-zero vectors via 2*atan2(|a|b| - b|a||, |a|b| + b|a||).
// Stays accurate near 0 and pi where acos of the cosine ratio loses half the
// digits.
double angle_between(const Eigen::RowVectorXd& a, double na, const Eigen::RowVectorXd& b,
                     double nb) {
  const Eigen::RowVectorXd p = a * nb;
  const Eigen::RowVectorXd q = b * na;
  return 2.0 * std::atan2((p - q).norm(), (p + q).norm());
}

Eigen::RowVectorXd column_mean(const Matrix& h) {
  Eigen::RowVectorXd sum = Eigen::RowVectorXd::Zero(h.cols());
  for (Eigen::Index i = 0; i < h.rows(); ++i) sum += h.row(i);
  return sum / static_cast<double>(h.rows());
}

Matrix centered(const Matrix& h) { return h.rowwise() - column_mean(h); }

void require_same_rows(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) {
    throw Error(ErrorCode::InvalidArgument, "row counts differ: " + std::to_string(a.rows()) +
                                                " vs " + std::to_string(b.rows()));
  }
}

void require_same_shape(const Matrix& a, const Matrix& b) {
  require_same_rows(a, b);
  if (a.cols() != b.cols()) throw Error(ErrorCode::InvalidArgument, "column counts differ");
}

}  // namespace

TrajectoryStats curvature(const Matrix& tokens) {
  const Eigen::Index t_count = tokens.rows();
  if (t_count < 3) {
    throw Error(ErrorCode::TooFewTokens, "curvature needs T >= 3, got " + std::to_string(t_count));
  }
  const Eigen::Index steps = t_count - 1;
  std::vector<Eigen::RowVectorXd> v;
  std::vector<double> norms;
  v.reserve(static_cast<std::size_t>(steps));
  norms.reserve(static_cast<std::size_t>(steps));
  for (Eigen::Index t = 1; t < t_count; ++t) {
    v.emplace_back(tokens.row(t) - tokens.row(t - 1));
    norms.push_back(v.back().norm());
  }
  const double longest = *std::max_element(norms.begin(), norms.end());
  const double cutoff = kDegenerateStep * longest;

  TrajectoryStats stats;
  double sum = 0.0;
  int used = 0;
  for (std::size_t t = 0; t + 1 < v.size(); ++t) {
    if (!(norms[t] >= cutoff) || !(norms[t + 1] >= cutoff) || longest == 0.0) {
      ++stats.skipped_angles;
      continue;
    }
    sum += angle_between(v[t], norms[t], v[t + 1], norms[t + 1]);
    ++used;
  }
  if (used == 0) {
    stats.degenerate = true;
    return stats;
  }
  stats.curvature = std::clamp(sum / (static_cast<double>(used) * std::numbers::pi), 0.0, 1.0);
  return stats;
}

double dataset_curvature(const ActivationRun& run, int layer) {
  const int n = run.manifest().num_samples;
  double sum = 0.0;
  for (int i = 0; i < n; ++i) sum += curvature(run.load_tokens(layer, i)).curvature;
  return sum / static_cast<double>(n);
}

double cka(const Matrix& hb, const Matrix& hs) {
  require_same_rows(hb, hs);
  if (hb.rows() < 2) throw Error(ErrorCode::InvalidArgument, "CKA needs N >= 2");
  if (!hb.allFinite() || !hs.allFinite()) {
    throw Error(ErrorCode::NonFiniteInput, "CKA input has NaN or Inf entries");
  }
  const Matrix cb = centered(hb);
  const Matrix cs = centered(hs);
  if (!(cb.norm() > kDegenerateStep * hb.norm()) || !(cs.norm() > kDegenerateStep * hs.norm())) {
    throw Error(ErrorCode::DegenerateGram, "a centered Gram matrix is zero");
  }

  double cross = 0.0;
  double self_b = 0.0;
  double self_s = 0.0;
  const auto n = hb.rows();
  if (n <= std::max(hb.cols(), hs.cols())) {
    const Eigen::MatrixXd kb = cb * cb.transpose();
    const Eigen::MatrixXd ks = cs * cs.transpose();
    cross = kb.cwiseProduct(ks).sum();
    self_b = kb.squaredNorm();
    self_s = ks.squaredNorm();
  } else {
    // <JKbJ, JKsJ>_F = ||Cb^T Cs||_F^2, computed in feature space.
    cross = (cb.transpose() * cs).squaredNorm();
    self_b = (cb.transpose() * cb).squaredNorm();
    self_s = (cs.transpose() * cs).squaredNorm();
  }
  return std::clamp(cross / std::sqrt(self_b * self_s), 0.0, 1.0);
}

std::vector<double> cosine_per_row(const Matrix& hb, const Matrix& hs) {
  require_same_shape(hb, hs);
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(hb.rows()));
  for (Eigen::Index i = 0; i < hb.rows(); ++i) {
    const double nb = hb.row(i).norm();
    const double ns = hs.row(i).norm();
    if (nb == 0.0 || ns == 0.0) {
      throw Error(ErrorCode::ZeroVectorRow, "row " + std::to_string(i) + " has zero norm");
    }
    out.push_back(std::clamp(hb.row(i).dot(hs.row(i)) / (nb * ns), -1.0, 1.0));
  }
  return out;
}

double cosine_profile(const Matrix& hb, const Matrix& hs) {
  const std::vector<double> rows = cosine_per_row(hb, hs);
  double sum = 0.0;
  for (double c : rows) sum += c;
  return sum / static_cast<double>(rows.size());
}

double mean_shift(const Matrix& hb, const Matrix& hs) {
  require_same_shape(hb, hs);
  return (column_mean(hs) - column_mean(hb)).norm();
}

}  // namespace sftscope
