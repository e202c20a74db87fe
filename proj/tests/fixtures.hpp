#pragma once

#include <atomic>
#include <cmath>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <unistd.h>

#include "sftscope/error.hpp"
#include "sftscope/ingest.hpp"

// Checks that `expr` throws sftscope::Error carrying `expected`.
#define CHECK_ERROR_CODE(expr, expected)                                  \
  do {                                                                     \
    sftscope::ErrorCode seen_code_{};                                      \
    bool threw_ = false;                                                   \
    try {                                                                  \
      (void)(expr);                                                        \
    } catch (const sftscope::Error& e) {                                   \
      threw_ = true;                                                       \
      seen_code_ = e.code();                                               \
    }                                                                      \
    CHECK_MESSAGE(threw_, (std::string("expected ") + std::string(sftscope::to_string(expected)))); \
    if (threw_) CHECK(std::string(sftscope::to_string(seen_code_)) == std::string(sftscope::to_string(expected))); \
  } while (false)

namespace fixtures {

using sftscope::Matrix;

/// Scratch directory removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag = "t") {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("sftscope_" + tag + "_" + std::to_string(::getpid()) + "_" +
             std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& sub) const { return path_ / sub; }

 private:
  std::filesystem::path path_;
};

inline Matrix gaussian(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng,
                       double scale = 1.0) {
  std::normal_distribution<double> normal(0.0, scale);
  Matrix m(rows, cols);
  for (Eigen::Index k = 0; k < m.size(); ++k) m.data()[k] = normal(rng);
  return m;
}

/// Rounds every entry to float32 so on-disk round trips are exact.
inline Matrix as_f32(Matrix m) {
  for (Eigen::Index k = 0; k < m.size(); ++k) m.data()[k] = static_cast<float>(m.data()[k]);
  return m;
}

/// Haar-ish random orthogonal matrix from a QR of a Gaussian.
inline Eigen::MatrixXd random_orthogonal(Eigen::Index d, std::mt19937_64& rng) {
  const Eigen::MatrixXd g = gaussian(d, d, rng);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
  return qr.householderQ() * Eigen::MatrixXd::Identity(d, d);
}

struct RunSource {
  sftscope::RunManifest manifest;
  std::vector<std::vector<Matrix>> tokens;  // [layer][sample], f32-exact values
  std::vector<Matrix> pooled;               // [layer]
};

/// Builds an in-memory run with Gaussian token states and derived pooled rows.
inline RunSource make_source(int layers, int samples, int dim, std::uint64_t seed,
                             int min_tokens = 3, int max_tokens = 9) {
  std::mt19937_64 rng(seed);
  RunSource src;
  auto& m = src.manifest;
  m.model_id = "fixture";
  m.num_layers = layers;
  m.hidden_dim = dim;
  m.num_samples = samples;
  m.seed = seed;
  m.dataset_tag = "fixture";
  std::uniform_int_distribution<int> tok(min_tokens, max_tokens);
  for (int i = 0; i < samples; ++i) {
    m.sample_ids.push_back("id" + std::to_string(i));
    m.token_counts.push_back(tok(rng));
  }
  for (int l = 0; l <= layers; ++l) {
    src.tokens.emplace_back();
    Matrix pooled(samples, dim);
    for (int i = 0; i < samples; ++i) {
      src.tokens.back().push_back(as_f32(gaussian(m.token_counts[static_cast<std::size_t>(i)], dim, rng)));
      pooled.row(i) = sftscope::mean_pool(src.tokens.back().back());
    }
    src.pooled.push_back(as_f32(pooled));
  }
  return src;
}

inline void write_source(const std::filesystem::path& dir, const RunSource& src,
                         bool tokens = true, bool pooled = true) {
  std::filesystem::create_directories(dir);
  sftscope::write_manifest(dir, src.manifest);
  for (int l = 0; l <= src.manifest.num_layers; ++l) {
    for (int i = 0; tokens && i < src.manifest.num_samples; ++i) {
      sftscope::write_f32(sftscope::token_path(dir, l, i),
                          src.tokens[static_cast<std::size_t>(l)][static_cast<std::size_t>(i)]);
    }
    if (pooled) sftscope::write_f32(sftscope::pooled_path(dir, l), src.pooled[static_cast<std::size_t>(l)]);
  }
}

}  // namespace fixtures
