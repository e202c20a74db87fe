#include "sftscope/weights.hpp"

#include <cmath>

#include "sftscope/error.hpp"

namespace sftscope {

namespace {

double squared_frobenius_diff(const Matrix& a, const Matrix& b) {
  double sum = 0.0;
  const double* pa = a.data();
  const double* pb = b.data();
  for (Eigen::Index k = 0; k < a.size(); ++k) {
    const double d = pa[k] - pb[k];
    sum += d * d;
  }
  return sum;
}

double squared_frobenius(const Matrix& a) {
  double sum = 0.0;
  const double* p = a.data();
  for (Eigen::Index k = 0; k < a.size(); ++k) sum += p[k] * p[k];
  return sum;
}

}  // namespace

WeightDelta weight_delta(const std::map<std::string, Matrix>& base,
                         const std::map<std::string, Matrix>& sft, const WeightOptions& options) {
  auto in_scope = [&](const std::string& name) {
    return options.all_matrices || kAttentionProjections.contains(name);
  };

  std::set<std::string> names_b;
  std::set<std::string> names_s;
  for (const auto& [name, m] : base) {
    if (in_scope(name)) names_b.insert(name);
  }
  for (const auto& [name, m] : sft) {
    if (in_scope(name)) names_s.insert(name);
  }
  if (names_b != names_s) throw Error(ErrorCode::NameSetMismatch, "matrix names differ");
  if (names_b.empty()) throw Error(ErrorCode::NameSetMismatch, "no attention projections found");

  WeightDelta out;
  double total = 0.0;
  double base_total = 0.0;
  for (const std::string& name : names_b) {
    const Matrix& wb = base.at(name);
    const Matrix& ws = sft.at(name);
    if (wb.rows() != ws.rows() || wb.cols() != ws.cols()) {
      throw Error(ErrorCode::ShapeMismatch, name + " shapes differ");
    }
    const double sq = squared_frobenius_diff(ws, wb);
    out.per_matrix[name] = std::sqrt(sq);
    total += sq;
    base_total += squared_frobenius(wb);
  }
  out.aggregate = std::sqrt(total);
  out.relative = base_total > 0.0 ? out.aggregate / std::sqrt(base_total) : 0.0;
  return out;
}

std::vector<WeightDelta> weight_profile(const WeightManifest& base, const WeightManifest& sft,
                                        const WeightOptions& options) {
  if (base.num_layers != sft.num_layers || base.layers.size() != sft.layers.size()) {
    throw Error(ErrorCode::LayerCountMismatch, std::to_string(base.num_layers) + " vs " +
                                                   std::to_string(sft.num_layers) + " layers");
  }
  std::vector<WeightDelta> out;
  out.reserve(base.layers.size());
  for (std::size_t l = 0; l < base.layers.size(); ++l) {
    if (base.layers[l].layer != sft.layers[l].layer) {
      throw Error(ErrorCode::LayerCountMismatch, "block indices differ at position " +
                                                     std::to_string(l));
    }
    WeightDelta d = weight_delta(load_weight_layer(base, base.layers[l]),
                                 load_weight_layer(sft, sft.layers[l]), options);
    d.layer = base.layers[l].layer;
    out.push_back(std::move(d));
  }
  return out;
}

}  // namespace sftscope
