#pragma once

// Spectral diagnostics of representation matrices: Gram-matrix (Rényi)
// entropy, effective rank, rank deficiency, condition number, spectral norm
// and activation sparsity.

#include <vector>

#include "sftscope/ingest.hpp"
#include "sftscope/matrix.hpp"

namespace sftscope {

inline constexpr double kDefaultRankTol = 1e-10;
inline constexpr double kDefaultAlpha = 1.0;
inline constexpr double kDefaultEpsilon = 0.01;

/// Eigenvalues of K / tr(K) with K = Z Z^T, sorted descending. They are
/// non-negative and sum to one.
struct GramSpectrum {
  std::vector<double> eigenvalues;
  Eigen::Index source_rows = 0;
  Eigen::Index source_cols = 0;
};

struct SingularSpectrum {
  std::vector<double> singular_values;  // descending
  int numeric_rank = 0;                 // count of sigma_j > rank_tol * sigma_1
  double rank_tol = kDefaultRankTol;
};

/// Built from the smaller of Z Z^T and Z^T Z; both share their non-zero
/// spectrum. Eigenvalues down to -1e-10 * lambda_max are clamped to zero,
/// anything more negative raises NumericalBreakdown. Values within the
/// roundoff of forming K (max(n, d) * eps * lambda_max) are set to zero.
GramSpectrum gram_spectrum(const Matrix& z);

SingularSpectrum singular_spectrum(const Matrix& z, double rank_tol = kDefaultRankTol);
SingularSpectrum make_singular_spectrum(std::vector<double> singular_values,
                                        double rank_tol = kDefaultRankTol);

/// Rényi entropy of order alpha in bits; alpha == 1 is the Shannon limit.
double matrix_entropy(const GramSpectrum& spec, double alpha);

/// matrix_entropy / log2(source_rows); zero when there is a single row.
double normalized_entropy(const GramSpectrum& spec, double alpha);

struct PromptEntropy {
  std::vector<double> per_sample;  // normalized, manifest order
  double mean = 0.0;
  int single_token_samples = 0;    // samples with T_i == 1, scored as 0
};

/// Normalized prompt entropy of one sample's token matrix. A single-token
/// sample scores 0 and sets `single_token`.
double sample_prompt_entropy(const Matrix& tokens, double alpha, bool* single_token = nullptr);
PromptEntropy prompt_entropy(const ActivationRun& run, int layer, double alpha = kDefaultAlpha);

double dataset_entropy(const Matrix& pooled, double alpha = kDefaultAlpha);
double dataset_entropy(const ActivationRun& run, int layer, double alpha = kDefaultAlpha);

/// exp of the Shannon entropy (nats) of sigma_j^2 / sum sigma_k^2.
double effective_rank(const SingularSpectrum& spec);
int rank_deficiency(const SingularSpectrum& spec, Eigen::Index n, Eigen::Index d);
double condition_number(const SingularSpectrum& spec);
double spectral_norm(const SingularSpectrum& spec);

/// Fraction of entries with |z| < epsilon (strict).
double sparsity(const Matrix& z, double epsilon = kDefaultEpsilon);

}  // namespace sftscope
