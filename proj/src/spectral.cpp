#include "sftscope/spectral.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>

#include <Eigen/Eigenvalues>
#include <Eigen/SVD>

#include "sftscope/error.hpp"

namespace sftscope {

namespace {

constexpr double kClampFraction = 1e-10;

void require_finite(const Matrix& z) {
  if (!z.allFinite()) throw Error(ErrorCode::NonFiniteInput, "matrix has NaN or Inf entries");
}

void require_alpha(double alpha) {
  if (!(alpha > 0.0) || !std::isfinite(alpha)) {
    throw Error(ErrorCode::InvalidAlpha, "alpha must be a finite value > 0");
  }
}

}  // namespace

GramSpectrum gram_spectrum(const Matrix& z) {
  if (z.rows() < 1 || z.cols() < 1) throw Error(ErrorCode::InvalidArgument, "empty matrix");
  require_finite(z);

  const double trace = z.squaredNorm();
  if (!(trace > 0.0)) throw Error(ErrorCode::ZeroTrace, "Gram matrix has zero trace");

  Eigen::MatrixXd k = z.rows() <= z.cols() ? Eigen::MatrixXd(z * z.transpose())
                                          : Eigen::MatrixXd(z.transpose() * z);
  k /= trace;

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(k, Eigen::EigenvaluesOnly);
  if (solver.info() != Eigen::Success) {
    throw Error(ErrorCode::NumericalBreakdown, "symmetric eigensolver did not converge");
  }

  GramSpectrum spec;
  spec.source_rows = z.rows();
  spec.source_cols = z.cols();
  const Eigen::VectorXd& ev = solver.eigenvalues();
  spec.eigenvalues.assign(ev.data(), ev.data() + ev.size());
  std::sort(spec.eigenvalues.begin(), spec.eigenvalues.end(), std::greater<>());

  const double top = spec.eigenvalues.front();
  const double floor = -kClampFraction * top;
  // Forming K costs about max(n, d) roundings per entry; eigenvalues inside
  // that band are zeros the solver cannot resolve, and alpha < 1 would
  // amplify them.
  const double noise = static_cast<double>(std::max(z.rows(), z.cols())) *
                       std::numeric_limits<double>::epsilon() * top;
  for (double& v : spec.eigenvalues) {
    if (v < floor) {
      throw Error(ErrorCode::NumericalBreakdown,
                  "Gram eigenvalue " + std::to_string(v) + " is significantly negative");
    }
    if (v <= noise) v = 0.0;
  }
  return spec;
}

SingularSpectrum make_singular_spectrum(std::vector<double> singular_values, double rank_tol) {
  std::sort(singular_values.begin(), singular_values.end(), std::greater<>());
  SingularSpectrum spec;
  spec.singular_values = std::move(singular_values);
  spec.rank_tol = rank_tol;
  if (!spec.singular_values.empty() && spec.singular_values.front() > 0.0) {
    const double cutoff = rank_tol * spec.singular_values.front();
    spec.numeric_rank = static_cast<int>(
        std::count_if(spec.singular_values.begin(), spec.singular_values.end(),
                      [cutoff](double s) { return s > cutoff; }));
  }
  return spec;
}

SingularSpectrum singular_spectrum(const Matrix& z, double rank_tol) {
  if (z.rows() < 1 || z.cols() < 1) throw Error(ErrorCode::InvalidArgument, "empty matrix");
  require_finite(z);
  if (!(rank_tol >= 0.0)) throw Error(ErrorCode::InvalidArgument, "rank_tol must be >= 0");
  const Eigen::MatrixXd dense = z;
  Eigen::BDCSVD<Eigen::MatrixXd> svd(dense);
  if (svd.info() != Eigen::Success) {
    throw Error(ErrorCode::NumericalBreakdown, "SVD did not converge");
  }
  const Eigen::VectorXd& sv = svd.singularValues();
  return make_singular_spectrum(std::vector<double>(sv.data(), sv.data() + sv.size()), rank_tol);
}

double matrix_entropy(const GramSpectrum& spec, double alpha) {
  require_alpha(alpha);
  if (alpha == 1.0) {
    double h = 0.0;
    for (double v : spec.eigenvalues) {
      if (v > 0.0) h -= v * std::log2(v);
    }
    return std::max(h, 0.0);
  }
  double power_sum = 0.0;
  for (double v : spec.eigenvalues) {
    if (v > 0.0) power_sum += std::pow(v, alpha);
  }
  return std::max(std::log2(power_sum) / (1.0 - alpha), 0.0);
}

double normalized_entropy(const GramSpectrum& spec, double alpha) {
  const double h = matrix_entropy(spec, alpha);
  if (spec.source_rows <= 1) return 0.0;
  return h / std::log2(static_cast<double>(spec.source_rows));
}

double sample_prompt_entropy(const Matrix& tokens, double alpha, bool* single_token) {
  require_alpha(alpha);
  const bool single = tokens.rows() == 1;
  if (single_token) *single_token = single;
  if (single) return 0.0;
  return normalized_entropy(gram_spectrum(tokens), alpha);
}

PromptEntropy prompt_entropy(const ActivationRun& run, int layer, double alpha) {
  PromptEntropy out;
  const int n = run.manifest().num_samples;
  out.per_sample.reserve(static_cast<std::size_t>(n));
  double sum = 0.0;
  for (int i = 0; i < n; ++i) {
    bool single = false;
    const double h = sample_prompt_entropy(run.load_tokens(layer, i), alpha, &single);
    out.single_token_samples += single ? 1 : 0;
    out.per_sample.push_back(h);
    sum += h;
  }
  out.mean = sum / static_cast<double>(n);
  return out;
}

double dataset_entropy(const Matrix& pooled, double alpha) {
  return normalized_entropy(gram_spectrum(pooled), alpha);
}

double dataset_entropy(const ActivationRun& run, int layer, double alpha) {
  return dataset_entropy(run.load_pooled(layer), alpha);
}

double effective_rank(const SingularSpectrum& spec) {
  if (spec.singular_values.empty() || !(spec.singular_values.front() > 0.0)) {
    throw Error(ErrorCode::AllZeroSingularValues, "effective rank needs a positive sigma");
  }
  double total = 0.0;
  for (double s : spec.singular_values) total += s * s;
  double h = 0.0;
  for (double s : spec.singular_values) {
    if (s <= 0.0) continue;
    const double p = s * s / total;
    if (p > 0.0) h -= p * std::log(p);
  }
  return std::exp(h);
}

int rank_deficiency(const SingularSpectrum& spec, Eigen::Index n, Eigen::Index d) {
  const auto full = std::min(n, d);
  if (spec.numeric_rank > full) {
    throw Error(ErrorCode::InvalidArgument, "numeric rank exceeds min(n, d)");
  }
  return static_cast<int>(full) - spec.numeric_rank;
}

double spectral_norm(const SingularSpectrum& spec) {
  if (spec.singular_values.empty() || !(spec.singular_values.front() > 0.0)) {
    throw Error(ErrorCode::AllZeroSingularValues, "spectral norm of a zero matrix");
  }
  return spec.singular_values.front();
}

double condition_number(const SingularSpectrum& spec) {
  const double top = spectral_norm(spec);
  return top / spec.singular_values[static_cast<std::size_t>(spec.numeric_rank - 1)];
}

double sparsity(const Matrix& z, double epsilon) {
  if (!(epsilon > 0.0)) throw Error(ErrorCode::InvalidArgument, "epsilon must be > 0");
  if (z.size() == 0) throw Error(ErrorCode::InvalidArgument, "empty matrix");
  const auto inactive = (z.array().abs() < epsilon).count();
  return static_cast<double>(inactive) / static_cast<double>(z.size());
}

}  // namespace sftscope
