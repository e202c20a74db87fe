#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "fixtures.hpp"
#include "sftscope/ingest.hpp"

using namespace sftscope;
using fixtures::TempDir;

namespace fs = std::filesystem;

namespace {

bool bit_equal(const Matrix& a, const Matrix& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() &&
         std::equal(a.data(), a.data() + a.size(), b.data());
}

void truncate_by(const fs::path& file, std::uintmax_t bytes) {
  fs::resize_file(file, fs::file_size(file) - bytes);
}

}  // namespace

TEST_SUITE("ingest") {

TEST_CASE("well-formed fixture validates and round-trips bit-exactly") {
  TempDir dir("ingest");
  const auto src = fixtures::make_source(4, 8, 16, 11);
  fixtures::write_source(dir.path(), src);

  const RunManifest m = validate_run(dir.path());
  CHECK(m.num_layers == 4);
  CHECK(m.num_samples == 8);
  CHECK(m.hidden_dim == 16);
  CHECK(m.sample_ids == src.manifest.sample_ids);
  CHECK(m.token_counts == src.manifest.token_counts);

  const ActivationRun run = ActivationRun::open(dir.path());
  CHECK(run.has_tokens());
  CHECK(run.has_pooled());
  for (int l = 0; l <= 4; ++l) {
    CHECK(bit_equal(run.load_pooled(l), src.pooled[static_cast<std::size_t>(l)]));
    for (int i = 0; i < 8; ++i) {
      CHECK(bit_equal(run.load_tokens(l, i),
                      src.tokens[static_cast<std::size_t>(l)][static_cast<std::size_t>(i)]));
    }
  }
}

TEST_CASE("load shapes and repeated loads are identical") {
  TempDir dir("ingest");
  const auto src = fixtures::make_source(4, 8, 16, 12);
  fixtures::write_source(dir.path(), src);
  const ActivationRun run = ActivationRun::open(dir.path());

  const Matrix p = run.load_pooled(0);
  CHECK(p.rows() == 8);
  CHECK(p.cols() == 16);
  const Matrix t = run.load_tokens(2, 3);
  CHECK(t.rows() == src.manifest.token_counts[3]);
  CHECK(t.cols() == 16);
  CHECK(bit_equal(t, run.load_tokens(2, 3)));
  CHECK(bit_equal(p, run.load_pooled(0)));
}

TEST_CASE("out-of-range indices") {
  TempDir dir("ingest");
  fixtures::write_source(dir.path(), fixtures::make_source(4, 8, 16, 13));
  const ActivationRun run = ActivationRun::open(dir.path());
  CHECK_ERROR_CODE(run.load_pooled(5), ErrorCode::LayerOutOfRange);
  CHECK_ERROR_CODE(run.load_pooled(-1), ErrorCode::LayerOutOfRange);
  CHECK_ERROR_CODE(run.load_tokens(0, 8), ErrorCode::SampleOutOfRange);
}

TEST_CASE("missing manifest") {
  TempDir dir("ingest");
  CHECK_ERROR_CODE(validate_run(dir.path()), ErrorCode::MissingManifest);
  CHECK_ERROR_CODE(ActivationRun::open(dir.path() / "nope"), ErrorCode::MissingManifest);
}

TEST_CASE("truncated token file is a shape mismatch") {
  TempDir dir("ingest");
  fixtures::write_source(dir.path(), fixtures::make_source(4, 8, 16, 14));
  truncate_by(token_path(dir.path(), 2, 5), 4);
  CHECK_ERROR_CODE(validate_run(dir.path()), ErrorCode::ShapeMismatch);
  CHECK_ERROR_CODE(ActivationRun::open(dir.path()).load_tokens(2, 5), ErrorCode::ShapeMismatch);
}

TEST_CASE("truncated pooled file is a shape mismatch") {
  TempDir dir("ingest");
  fixtures::write_source(dir.path(), fixtures::make_source(3, 8, 16, 15));
  truncate_by(pooled_path(dir.path(), 1), 4);
  CHECK_ERROR_CODE(validate_run(dir.path()), ErrorCode::ShapeMismatch);
}

TEST_CASE("perturbed pooled row is detected") {
  TempDir dir("ingest");
  auto src = fixtures::make_source(4, 8, 16, 16);
  src.pooled[3](6, 2) += 1e-2;
  fixtures::write_source(dir.path(), src);
  CHECK_ERROR_CODE(validate_run(dir.path()), ErrorCode::PoolingInconsistent);
}

TEST_CASE("pooled rows rounded to float32 stay within tolerance") {
  // Pooled values are float32-rounded token means; the relative error is ~6e-8.
  TempDir dir("ingest");
  const auto src = fixtures::make_source(2, 8, 16, 17, 30, 40);
  fixtures::write_source(dir.path(), src);
  CHECK_NOTHROW(validate_run(dir.path()));
}

TEST_CASE("unsupported dtype and malformed manifests") {
  TempDir dir("ingest");
  auto src = fixtures::make_source(2, 4, 8, 18);
  src.manifest.dtype = "f16";
  fixtures::write_source(dir.path(), src);
  CHECK_ERROR_CODE(validate_run(dir.path()), ErrorCode::UnsupportedDtype);

  src.manifest.dtype = "f32";
  src.manifest.endianness = "big";
  write_manifest(dir.path(), src.manifest);
  CHECK_ERROR_CODE(validate_run(dir.path()), ErrorCode::UnsupportedDtype);

  src.manifest.endianness = "little";
  src.manifest.token_counts.pop_back();
  write_manifest(dir.path(), src.manifest);
  CHECK_ERROR_CODE(read_manifest(dir.path()), ErrorCode::InvalidManifest);

  std::ofstream(dir.path() / "manifest.json") << "{not json";
  CHECK_ERROR_CODE(read_manifest(dir.path()), ErrorCode::InvalidManifest);

  std::ofstream(dir.path() / "manifest.json") << R"({"model_id":"m","num_layers":2})";
  CHECK_ERROR_CODE(read_manifest(dir.path()), ErrorCode::InvalidManifest);
}

TEST_CASE("duplicate sample ids are rejected") {
  RunManifest m;
  m.num_layers = 1;
  m.hidden_dim = 2;
  m.num_samples = 2;
  m.sample_ids = {"a", "a"};
  m.token_counts = {1, 1};
  CHECK_ERROR_CODE(check_manifest(m), ErrorCode::InvalidManifest);
  m.sample_ids = {"a", "b"};
  CHECK_NOTHROW(check_manifest(m));
  m.token_counts = {1, 0};
  CHECK_ERROR_CODE(check_manifest(m), ErrorCode::InvalidManifest);
}

TEST_CASE("pooled rows are derived when only tokens exist") {
  TempDir dir("ingest");
  const auto src = fixtures::make_source(3, 6, 8, 19);
  fixtures::write_source(dir.path(), src, true, false);
  CHECK_NOTHROW(validate_run(dir.path()));
  const ActivationRun run = ActivationRun::open(dir.path());
  CHECK_FALSE(run.has_pooled());
  for (int l = 0; l <= 3; ++l) {
    const Matrix derived = run.load_pooled(l);
    for (int i = 0; i < 6; ++i) {
      // Sequential sum in token order, then divide by T.
      const Matrix& tok = src.tokens[static_cast<std::size_t>(l)][static_cast<std::size_t>(i)];
      Eigen::RowVectorXd acc = Eigen::RowVectorXd::Zero(8);
      for (Eigen::Index t = 0; t < tok.rows(); ++t) acc += tok.row(t);
      acc /= static_cast<double>(tok.rows());
      CHECK(derived.row(i) == acc);
    }
  }
}

TEST_CASE("pooled-only runs load pooled data and refuse token access") {
  TempDir dir("ingest");
  const auto src = fixtures::make_source(2, 5, 4, 20);
  fixtures::write_source(dir.path(), src, false, true);
  CHECK_NOTHROW(validate_run(dir.path()));
  const ActivationRun run = ActivationRun::open(dir.path());
  CHECK_FALSE(run.has_tokens());
  CHECK(bit_equal(run.load_pooled(1), src.pooled[1]));
  CHECK_ERROR_CODE(run.load_tokens(1, 0), ErrorCode::MissingGranularity);
}

TEST_CASE("a run without either granularity cannot be opened") {
  TempDir dir("ingest");
  write_manifest(dir.path(), fixtures::make_source(1, 2, 2, 21).manifest);
  CHECK_ERROR_CODE(ActivationRun::open(dir.path()), ErrorCode::MissingGranularity);
}

TEST_CASE("validation ignores stray files") {
  TempDir dir("ingest");
  fixtures::write_source(dir.path(), fixtures::make_source(2, 4, 4, 22));
  std::ofstream(dir.path() / "layers" / "L0" / "zz_extra.f32") << "junk";
  std::ofstream(dir.path() / "pooled" / "notes.txt") << "junk";
  CHECK_NOTHROW(validate_run(dir.path()));
}

TEST_CASE("pairing") {
  TempDir dir("ingest");
  const auto src = fixtures::make_source(2, 4, 16, 23);
  fixtures::write_source(dir / "a", src);
  fixtures::write_source(dir / "b", src);

  SUBCASE("same fixture pairs") {
    const PairedRun pair = pair_runs(ActivationRun::open(dir / "a"), ActivationRun::open(dir / "b"));
    CHECK(pair.manifest().num_samples == 4);
  }
  SUBCASE("permuted ids") {
    auto m = src.manifest;
    std::swap(m.sample_ids[0], m.sample_ids[1]);
    write_manifest(dir / "b", m);
    CHECK_ERROR_CODE(pair_runs(ActivationRun::open(dir / "a"), ActivationRun::open(dir / "b")),
                     ErrorCode::OrderMismatch);
  }
  SUBCASE("different ids") {
    auto m = src.manifest;
    m.sample_ids[0] = "other";
    write_manifest(dir / "b", m);
    CHECK_ERROR_CODE(pair_runs(ActivationRun::open(dir / "a"), ActivationRun::open(dir / "b")),
                     ErrorCode::SampleSetMismatch);
  }
  SUBCASE("different token counts") {
    auto m = src.manifest;
    m.token_counts[2] += 1;
    write_manifest(dir / "b", m);
    CHECK_ERROR_CODE(pair_runs(ActivationRun::open(dir / "a"), ActivationRun::open(dir / "b")),
                     ErrorCode::SampleSetMismatch);
  }
  SUBCASE("different hidden size") {
    fixtures::write_source(dir / "c", fixtures::make_source(2, 4, 32, 23));
    CHECK_ERROR_CODE(pair_runs(ActivationRun::open(dir / "a"), ActivationRun::open(dir / "c")),
                     ErrorCode::ArchitectureMismatch);
  }
}

TEST_CASE("weight manifest round trip") {
  TempDir dir("ingest");
  std::mt19937_64 rng(5);
  WeightManifest m;
  m.model_id = "w";
  m.num_layers = 2;
  std::map<std::string, Matrix> written;
  for (int b = 1; b <= 2; ++b) {
    WeightLayer layer;
    layer.layer = b;
    for (const char* name : {"W_Q", "W_K"}) {
      const std::string file = "L" + std::to_string(b) + "_" + name + ".f32";
      const Matrix w = fixtures::as_f32(fixtures::gaussian(3, 5, rng));
      write_f32(dir.path() / file, w);
      written[file] = w;
      layer.matrices.push_back({name, file, 3, 5});
    }
    m.layers.push_back(layer);
  }
  write_weight_manifest(dir.path(), m);

  const WeightManifest back = read_weight_manifest(dir.path());
  CHECK(back.num_layers == 2);
  CHECK(back.layers[1].layer == 2);
  const auto loaded = load_weight_layer(back, back.layers[0]);
  CHECK(loaded.size() == 2);
  CHECK(bit_equal(loaded.at("W_Q"), written.at("L1_W_Q.f32")));

  m.layers[1].matrices.pop_back();
  write_weight_manifest(dir.path(), m);
  CHECK_ERROR_CODE(read_weight_manifest(dir.path()), ErrorCode::NameSetMismatch);
  CHECK_ERROR_CODE(read_weight_manifest(dir.path() / "missing"), ErrorCode::MissingManifest);
}

}  // TEST_SUITE
