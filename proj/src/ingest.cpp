#include "sftscope/ingest.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "json.hpp"
#include "sftscope/error.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace sftscope {

static_assert(std::endian::native == std::endian::little,
              "tensor IO assumes a little-endian host");

namespace {

std::string read_text(const fs::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + file.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& file, const std::string& text) {
  fs::create_directories(file.parent_path());
  std::ofstream out(file, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + file.string());
  out << text;
}

json parse_json(const fs::path& file) {
  try {
    return json::parse(read_text(file));
  } catch (const json::parse_error& e) {
    throw Error(ErrorCode::InvalidManifest, file.string() + ": " + e.what());
  }
}

template <typename T>
T field(const json& j, const char* key, const fs::path& file) {
  if (!j.contains(key)) {
    throw Error(ErrorCode::InvalidManifest, file.string() + ": missing field '" + key + "'");
  }
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw Error(ErrorCode::InvalidManifest,
                file.string() + ": bad field '" + key + "': " + e.what());
  }
}

std::string where(int layer, int sample) {
  return "layer " + std::to_string(layer) + ", sample " + std::to_string(sample);
}

}  // namespace

void check_manifest(const RunManifest& m) {
  if (m.dtype != "f32") throw Error(ErrorCode::UnsupportedDtype, "dtype '" + m.dtype + "'");
  if (m.endianness != "little") {
    throw Error(ErrorCode::UnsupportedDtype, "endianness '" + m.endianness + "'");
  }
  if (m.num_layers < 1) throw Error(ErrorCode::InvalidManifest, "num_layers must be >= 1");
  if (m.hidden_dim < 1) throw Error(ErrorCode::InvalidManifest, "hidden_dim must be >= 1");
  if (m.num_samples < 1) throw Error(ErrorCode::InvalidManifest, "num_samples must be >= 1");
  if (static_cast<int>(m.sample_ids.size()) != m.num_samples ||
      static_cast<int>(m.token_counts.size()) != m.num_samples) {
    throw Error(ErrorCode::InvalidManifest, "sample_ids/token_counts length != num_samples");
  }
  for (int t : m.token_counts) {
    if (t < 1) throw Error(ErrorCode::InvalidManifest, "token count < 1");
  }
  std::set<std::string> unique(m.sample_ids.begin(), m.sample_ids.end());
  if (unique.size() != m.sample_ids.size()) {
    throw Error(ErrorCode::InvalidManifest, "duplicate sample_ids");
  }
}

RunManifest read_manifest(const fs::path& run_dir) {
  const fs::path file = run_dir / "manifest.json";
  if (!fs::is_regular_file(file)) {
    throw Error(ErrorCode::MissingManifest, "no manifest.json in " + run_dir.string());
  }
  const json j = parse_json(file);
  RunManifest m;
  m.model_id = field<std::string>(j, "model_id", file);
  m.num_layers = field<int>(j, "num_layers", file);
  m.hidden_dim = field<int>(j, "hidden_dim", file);
  m.num_samples = field<int>(j, "num_samples", file);
  m.sample_ids = field<std::vector<std::string>>(j, "sample_ids", file);
  m.token_counts = field<std::vector<int>>(j, "token_counts", file);
  m.dtype = j.value("dtype", std::string("f32"));
  m.endianness = j.value("endianness", std::string("little"));
  m.seed = j.value("seed", std::uint64_t{0});
  m.dataset_tag = j.value("dataset_tag", std::string());
  check_manifest(m);
  return m;
}

void write_manifest(const fs::path& run_dir, const RunManifest& m) {
  json j;
  j["model_id"] = m.model_id;
  j["num_layers"] = m.num_layers;
  j["hidden_dim"] = m.hidden_dim;
  j["num_samples"] = m.num_samples;
  j["sample_ids"] = m.sample_ids;
  j["token_counts"] = m.token_counts;
  j["dtype"] = m.dtype;
  j["endianness"] = m.endianness;
  j["seed"] = m.seed;
  j["dataset_tag"] = m.dataset_tag;
  write_text(run_dir / "manifest.json", j.dump(2) + "\n");
}

fs::path token_path(const fs::path& run_dir, int layer, int sample) {
  return run_dir / "layers" / ("L" + std::to_string(layer)) /
         ("sample_" + std::to_string(sample) + ".f32");
}

fs::path pooled_path(const fs::path& run_dir, int layer) {
  return run_dir / "pooled" / ("L" + std::to_string(layer) + ".f32");
}

Matrix read_f32(const fs::path& file, Eigen::Index rows, Eigen::Index cols) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + file.string());
  const auto expected = static_cast<std::uintmax_t>(rows * cols) * sizeof(float);
  std::error_code ec;
  const auto actual = fs::file_size(file, ec);
  if (ec || actual != expected) {
    throw Error(ErrorCode::ShapeMismatch, file.string() + ": expected " +
                                              std::to_string(expected) + " bytes, found " +
                                              std::to_string(ec ? 0 : actual));
  }
  std::vector<float> buf(static_cast<std::size_t>(rows * cols));
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(expected));
  if (!in) throw Error(ErrorCode::IoError, "short read on " + file.string());
  Matrix m(rows, cols);
  std::copy(buf.begin(), buf.end(), m.data());
  return m;
}

void write_f32(const fs::path& file, const Matrix& m) {
  fs::create_directories(file.parent_path());
  std::vector<float> buf(static_cast<std::size_t>(m.size()));
  std::transform(m.data(), m.data() + m.size(), buf.begin(),
                 [](double v) { return static_cast<float>(v); });
  std::ofstream out(file, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + file.string());
  out.write(reinterpret_cast<const char*>(buf.data()),
            static_cast<std::streamsize>(buf.size() * sizeof(float)));
}

Eigen::RowVectorXd mean_pool(const Matrix& tokens) {
  Eigen::RowVectorXd sum = Eigen::RowVectorXd::Zero(tokens.cols());
  for (Eigen::Index t = 0; t < tokens.rows(); ++t) sum += tokens.row(t);
  return sum / static_cast<double>(tokens.rows());
}

// ---------------------------------------------------------------------------

ActivationRun::ActivationRun(fs::path root, RunManifest manifest, bool has_tokens,
                             bool has_pooled)
    : root_(std::move(root)),
      manifest_(std::move(manifest)),
      has_tokens_(has_tokens),
      has_pooled_(has_pooled) {}

ActivationRun ActivationRun::open(const fs::path& run_dir) {
  RunManifest m = read_manifest(run_dir);
  const bool tokens = fs::is_directory(run_dir / "layers");
  const bool pooled = fs::is_directory(run_dir / "pooled");
  if (!tokens && !pooled) {
    throw Error(ErrorCode::MissingGranularity,
                run_dir.string() + " has neither layers/ nor pooled/");
  }
  return ActivationRun(run_dir, std::move(m), tokens, pooled);
}

void ActivationRun::check_layer(int layer) const {
  if (layer < 0 || layer > manifest_.num_layers) {
    throw Error(ErrorCode::LayerOutOfRange,
                "layer " + std::to_string(layer) + " not in [0, " +
                    std::to_string(manifest_.num_layers) + "]");
  }
}

Matrix ActivationRun::load_tokens(int layer, int sample) const {
  check_layer(layer);
  if (sample < 0 || sample >= manifest_.num_samples) {
    throw Error(ErrorCode::SampleOutOfRange, "sample " + std::to_string(sample));
  }
  if (!has_tokens_) {
    throw Error(ErrorCode::MissingGranularity, root_.string() + " has no token-level tensors");
  }
  return read_f32(token_path(root_, layer, sample),
                  manifest_.token_counts[static_cast<std::size_t>(sample)],
                  manifest_.hidden_dim);
}

Matrix ActivationRun::load_pooled(int layer) const {
  check_layer(layer);
  if (has_pooled_) {
    return read_f32(pooled_path(root_, layer), manifest_.num_samples, manifest_.hidden_dim);
  }
  Matrix pooled(manifest_.num_samples, manifest_.hidden_dim);
  for (int i = 0; i < manifest_.num_samples; ++i) pooled.row(i) = mean_pool(load_tokens(layer, i));
  return pooled;
}

// ---------------------------------------------------------------------------

RunManifest validate_run(const fs::path& run_dir) {
  const ActivationRun run = ActivationRun::open(run_dir);
  const RunManifest& m = run.manifest();
  const auto d = static_cast<std::uintmax_t>(m.hidden_dim);

  auto check_size = [&](const fs::path& file, std::uintmax_t rows, int layer, int sample) {
    std::error_code ec;
    const auto size = fs::file_size(file, ec);
    if (ec) throw Error(ErrorCode::IoError, "missing tensor " + file.string());
    if (size != rows * d * sizeof(float)) {
      throw Error(ErrorCode::ShapeMismatch,
                  where(layer, sample) + ": " + file.string() + " has " +
                      std::to_string(size) + " bytes, expected " +
                      std::to_string(rows * d * sizeof(float)));
    }
  };

  for (int l = 0; l <= m.num_layers; ++l) {
    if (run.has_tokens()) {
      for (int i = 0; i < m.num_samples; ++i) {
        check_size(token_path(run_dir, l, i),
                   static_cast<std::uintmax_t>(m.token_counts[static_cast<std::size_t>(i)]), l, i);
      }
    }
    if (run.has_pooled()) {
      check_size(pooled_path(run_dir, l), static_cast<std::uintmax_t>(m.num_samples), l, -1);
    }
  }

  if (run.has_tokens() && run.has_pooled()) {
    std::vector<int> order(static_cast<std::size_t>(m.num_samples));
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(m.seed);
    std::shuffle(order.begin(), order.end(), rng);
    order.resize(std::min<std::size_t>(order.size(), 8));
    std::sort(order.begin(), order.end());

    for (int l = 0; l <= m.num_layers; ++l) {
      const Matrix pooled = run.load_pooled(l);
      for (int i : order) {
        const Eigen::RowVectorXd mean = mean_pool(run.load_tokens(l, i));
        const double scale = std::max(mean.cwiseAbs().maxCoeff(), 1e-30);
        const double err = (pooled.row(i) - mean).cwiseAbs().maxCoeff();
        if (!(err <= kPoolingTolerance * scale)) {
          throw Error(ErrorCode::PoolingInconsistent,
                      where(l, i) + ": pooled row differs from token mean by " +
                          std::to_string(err));
        }
      }
    }
  }
  return m;
}

// ---------------------------------------------------------------------------

PairedRun::PairedRun(ActivationRun base, ActivationRun sft)
    : base_(std::move(base)), sft_(std::move(sft)) {}

PairedRun pair_runs(ActivationRun base, ActivationRun sft) {
  const RunManifest& b = base.manifest();
  const RunManifest& s = sft.manifest();
  if (b.num_layers != s.num_layers || b.hidden_dim != s.hidden_dim) {
    throw Error(ErrorCode::ArchitectureMismatch,
                "L/D " + std::to_string(b.num_layers) + "/" + std::to_string(b.hidden_dim) +
                    " vs " + std::to_string(s.num_layers) + "/" + std::to_string(s.hidden_dim));
  }
  if (b.num_samples != s.num_samples) {
    throw Error(ErrorCode::SampleSetMismatch, "sample counts differ");
  }
  if (b.sample_ids != s.sample_ids) {
    const std::set<std::string> a(b.sample_ids.begin(), b.sample_ids.end());
    const std::set<std::string> c(s.sample_ids.begin(), s.sample_ids.end());
    if (a != c) throw Error(ErrorCode::SampleSetMismatch, "sample_ids differ");
    throw Error(ErrorCode::OrderMismatch, "sample_ids are in a different order");
  }
  if (b.token_counts != s.token_counts) {
    throw Error(ErrorCode::SampleSetMismatch, "token_counts differ");
  }
  return PairedRun(std::move(base), std::move(sft));
}

// ---------------------------------------------------------------------------

WeightManifest read_weight_manifest(const fs::path& weights_dir) {
  const fs::path file = weights_dir / "weights.json";
  if (!fs::is_regular_file(file)) {
    throw Error(ErrorCode::MissingManifest, "no weights.json in " + weights_dir.string());
  }
  const json j = parse_json(file);
  WeightManifest m;
  m.root = weights_dir;
  m.model_id = field<std::string>(j, "model_id", file);
  m.num_layers = field<int>(j, "num_layers", file);
  for (const json& jl : field<json>(j, "layers", file)) {
    WeightLayer layer;
    layer.layer = field<int>(jl, "layer", file);
    for (const json& je : field<json>(jl, "matrices", file)) {
      layer.matrices.push_back({field<std::string>(je, "name", file),
                                field<std::string>(je, "file", file),
                                field<Eigen::Index>(je, "rows", file),
                                field<Eigen::Index>(je, "cols", file)});
    }
    m.layers.push_back(std::move(layer));
  }
  if (static_cast<int>(m.layers.size()) != m.num_layers) {
    throw Error(ErrorCode::InvalidManifest, file.string() + ": layers length != num_layers");
  }
  for (std::size_t l = 0; l < m.layers.size(); ++l) {
    auto names = [](const WeightLayer& wl) {
      std::set<std::string> s;
      for (const auto& e : wl.matrices) s.insert(e.name);
      return s;
    };
    if (names(m.layers[l]) != names(m.layers.front())) {
      throw Error(ErrorCode::NameSetMismatch,
                  file.string() + ": layer " + std::to_string(m.layers[l].layer) +
                      " lists a different matrix set");
    }
  }
  return m;
}

void write_weight_manifest(const fs::path& weights_dir, const WeightManifest& m) {
  json j;
  j["model_id"] = m.model_id;
  j["num_layers"] = m.num_layers;
  j["layers"] = json::array();
  for (const auto& layer : m.layers) {
    json jl;
    jl["layer"] = layer.layer;
    jl["matrices"] = json::array();
    for (const auto& e : layer.matrices) {
      jl["matrices"].push_back({{"name", e.name}, {"file", e.file}, {"rows", e.rows}, {"cols", e.cols}});
    }
    j["layers"].push_back(std::move(jl));
  }
  write_text(weights_dir / "weights.json", j.dump(2) + "\n");
}

std::map<std::string, Matrix> load_weight_layer(const WeightManifest& manifest,
                                                const WeightLayer& layer) {
  std::map<std::string, Matrix> out;
  for (const auto& e : layer.matrices) {
    out.emplace(e.name, read_f32(manifest.root / e.file, e.rows, e.cols));
  }
  return out;
}

}  // namespace sftscope
