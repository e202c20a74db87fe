#include "sftscope/report.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <iomanip>
#include <memory>
#include <set>
#include <sstream>

#include <openssl/evp.h>

#include "sftscope/error.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace sftscope {

std::string format_double(double value) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, value);
  return std::string(buf, res.ptr);
}

// ---------------------------------------------------------------------------
// Hashing

namespace {

class Sha256 {
 public:
  Sha256() : ctx_(EVP_MD_CTX_new(), &EVP_MD_CTX_free) {
    if (!ctx_ || EVP_DigestInit_ex(ctx_.get(), EVP_sha256(), nullptr) != 1) {
      throw Error(ErrorCode::IoError, "sha256 init failed");
    }
  }

  void update(std::string_view data) {
    EVP_DigestUpdate(ctx_.get(), data.data(), data.size());
  }

  void update_file(const fs::path& file) {
    std::ifstream in(file, std::ios::binary);
    if (!in) throw Error(ErrorCode::IoError, "cannot open " + file.string());
    std::vector<char> buf(1 << 16);
    while (in) {
      in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
      update(std::string_view(buf.data(), static_cast<std::size_t>(in.gcount())));
    }
  }

  std::string hex() {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_DigestFinal_ex(ctx_.get(), digest, &len);
    std::ostringstream ss;
    for (unsigned int i = 0; i < len; ++i) {
      ss << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
    }
    return ss.str();
  }

 private:
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx_;
};

std::string read_text(const fs::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + file.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

std::string sha256_hex(std::string_view data) {
  Sha256 h;
  h.update(data);
  return h.hex();
}

std::string hash_run(const fs::path& run_dir) {
  const RunManifest m = read_manifest(run_dir);
  Sha256 h;
  h.update_file(run_dir / "manifest.json");
  const bool tokens = fs::is_directory(run_dir / "layers");
  const bool pooled = fs::is_directory(run_dir / "pooled");
  for (int l = 0; l <= m.num_layers; ++l) {
    for (int i = 0; tokens && i < m.num_samples; ++i) h.update_file(token_path(run_dir, l, i));
    if (pooled) h.update_file(pooled_path(run_dir, l));
  }
  return h.hex();
}

std::string hash_weights(const fs::path& weights_dir) {
  const WeightManifest m = read_weight_manifest(weights_dir);
  Sha256 h;
  h.update_file(weights_dir / "weights.json");
  for (const auto& layer : m.layers) {
    for (const auto& e : layer.matrices) h.update_file(weights_dir / e.file);
  }
  return h.hex();
}

// ---------------------------------------------------------------------------
// Config

Config read_config(const fs::path& file) {
  json j;
  try {
    j = json::parse(read_text(file));
  } catch (const json::parse_error& e) {
    throw Error(ErrorCode::InvalidArgument, file.string() + ": " + e.what());
  }
  if (!j.is_object()) throw Error(ErrorCode::InvalidArgument, file.string() + ": not an object");
  static const std::set<std::string> known{"alpha",   "epsilon", "rank_tol", "cka_floor",
                                           "z_cap",   "segments", "metrics"};
  for (const auto& [key, value] : j.items()) {
    if (!known.contains(key)) {
      throw Error(ErrorCode::InvalidArgument, file.string() + ": unknown key '" + key + "'");
    }
  }
  Config c;
  try {
    c.alpha = j.value("alpha", c.alpha);
    c.epsilon = j.value("epsilon", c.epsilon);
    c.rank_tol = j.value("rank_tol", c.rank_tol);
    c.cka_floor = j.value("cka_floor", c.cka_floor);
    c.z_cap = j.value("z_cap", c.z_cap);
    c.segments = j.value("segments", c.segments);
    c.metrics = j.value("metrics", c.metrics);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::InvalidArgument, file.string() + ": " + e.what());
  }
  return c;
}

json to_json(const Config& c) {
  return {{"alpha", c.alpha},         {"epsilon", c.epsilon}, {"rank_tol", c.rank_tol},
          {"cka_floor", c.cka_floor}, {"z_cap", c.z_cap},     {"segments", c.segments},
          {"metrics", c.metrics}};
}

std::string config_hash(const Config& config) { return sha256_hex(to_json(config).dump()); }

// ---------------------------------------------------------------------------
// JSON forms

json to_json(const Provenance& p) {
  json inputs = json::array();
  for (const auto& in : p.inputs) inputs.push_back({{"role", in.role}, {"sha256", in.sha256}});
  return {{"tool", p.tool},
          {"version", p.version},
          {"config_hash", p.config_hash},
          {"inputs", inputs}};
}

Provenance provenance_from_json(const json& j) {
  Provenance p;
  p.tool = j.at("tool").get<std::string>();
  p.version = j.at("version").get<std::string>();
  p.config_hash = j.at("config_hash").get<std::string>();
  for (const auto& in : j.at("inputs")) {
    p.inputs.push_back({in.at("role").get<std::string>(), in.at("sha256").get<std::string>()});
  }
  return p;
}

std::string provenance_comment(const Provenance& p) {
  std::string out = "# " + p.tool + " " + p.version + " config=" + p.config_hash;
  for (const auto& in : p.inputs) out += " " + in.role + "=" + in.sha256;
  return out + "\n";
}

json to_json(const LayerProfile& p) {
  json j;
  j["metric_name"] = p.metric_name;
  j["mode"] = std::string(to_string(p.mode));
  j["alpha"] = p.alpha ? json(*p.alpha) : json(nullptr);
  if (p.source) j["source"] = *p.source;
  j["first_layer"] = p.first_layer;
  j["values"] = p.values;
  j["metadata"] = {{"seed", p.metadata.seed},
                   {"N", p.metadata.num_samples},
                   {"dataset_tag", p.metadata.dataset_tag},
                   {"epsilon", p.metadata.epsilon},
                   {"rank_tol", p.metadata.rank_tol}};
  return j;
}

LayerProfile profile_from_json(const json& j) {
  try {
    LayerProfile p;
    p.metric_name = j.at("metric_name").get<std::string>();
    p.mode = parse_mode(j.at("mode").get<std::string>());
    if (j.contains("alpha") && !j.at("alpha").is_null()) p.alpha = j.at("alpha").get<double>();
    if (j.contains("source")) p.source = j.at("source").get<std::string>();
    p.first_layer = j.value("first_layer", 0);
    p.values = j.at("values").get<std::vector<double>>();
    const json& m = j.at("metadata");
    p.metadata.seed = m.at("seed").get<std::uint64_t>();
    p.metadata.num_samples = m.at("N").get<int>();
    p.metadata.dataset_tag = m.at("dataset_tag").get<std::string>();
    p.metadata.epsilon = m.at("epsilon").get<double>();
    p.metadata.rank_tol = m.at("rank_tol").get<double>();
    return p;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::InvalidArgument, std::string("malformed profile: ") + e.what());
  }
}

json to_json(const SegmentPlan& plan) {
  json bounds = json::array();
  for (const auto& s : plan.boundaries) bounds.push_back({s.start, s.end});
  return {{"num_layers", plan.num_layers},
          {"num_segments", plan.num_segments},
          {"boundaries", bounds},
          {"mask", plan.mask}};
}

SegmentPlan plan_from_json(const json& j) {
  try {
    SegmentPlan plan;
    plan.num_layers = j.at("num_layers").get<int>();
    plan.num_segments = j.at("num_segments").get<int>();
    for (const auto& b : j.at("boundaries")) plan.boundaries.push_back({b.at(0).get<int>(), b.at(1).get<int>()});
    plan.mask = j.at("mask").get<std::string>();
    return plan;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::InvalidArgument, std::string("malformed plan: ") + e.what());
  }
}

json to_json(const ReportBundle& b) {
  json j;
  j["provenance"] = to_json(b.provenance);
  j["profiles"] = json::array();
  for (const auto& p : b.profiles) j["profiles"].push_back(to_json(p));
  j["failures"] = json::array();
  for (const auto& f : b.failures) {
    j["failures"].push_back({{"metric", f.metric},
                             {"mode", f.mode},
                             {"layer", f.layer},
                             {"code", f.code},
                             {"message", f.message}});
  }
  if (!b.correlations.empty()) {
    json rows = json::array();
    for (const auto& row : b.correlations) {
      json r = json::array();
      for (const auto& cell : row) {
        if (cell) {
          r.push_back({{"a", cell->metric_a}, {"b", cell->metric_b}, {"r", cell->r}, {"n", cell->n}});
        } else {
          r.push_back(nullptr);
        }
      }
      rows.push_back(std::move(r));
    }
    j["correlations"] = std::move(rows);
  }
  if (b.plan) j["plan"] = to_json(*b.plan);
  return j;
}

ReportBundle bundle_from_json(const json& j) {
  ReportBundle b;
  try {
    b.provenance = provenance_from_json(j.at("provenance"));
    for (const auto& p : j.at("profiles")) b.profiles.push_back(profile_from_json(p));
    for (const auto& f : j.value("failures", json::array())) {
      b.failures.push_back({f.at("metric").get<std::string>(), f.at("mode").get<std::string>(),
                            f.at("layer").get<int>(), f.at("code").get<std::string>(),
                            f.at("message").get<std::string>()});
    }
    for (const auto& row : j.value("correlations", json::array())) {
      std::vector<std::optional<CorrelationCell>> r;
      for (const auto& cell : row) {
        if (cell.is_null()) {
          r.emplace_back();
        } else {
          r.emplace_back(CorrelationCell{cell.at("a").get<std::string>(),
                                         cell.at("b").get<std::string>(),
                                         cell.at("r").get<double>(), cell.at("n").get<int>()});
        }
      }
      b.correlations.push_back(std::move(r));
    }
    if (j.contains("plan")) b.plan = plan_from_json(j.at("plan"));
  } catch (const json::exception& e) {
    throw Error(ErrorCode::InvalidArgument, std::string("malformed report: ") + e.what());
  }
  return b;
}

std::vector<LayerProfile> read_profiles(const fs::path& file) {
  if (!fs::is_regular_file(file)) {
    throw Error(ErrorCode::IoError, "no profiles file " + file.string());
  }
  json j;
  try {
    j = json::parse(read_text(file));
  } catch (const json::parse_error& e) {
    throw Error(ErrorCode::InvalidArgument, file.string() + ": " + e.what());
  }
  if (j.is_array()) {
    std::vector<LayerProfile> out;
    for (const auto& p : j) out.push_back(profile_from_json(p));
    return out;
  }
  if (!j.is_object() || !j.contains("profiles")) {
    throw Error(ErrorCode::InvalidArgument, file.string() + ": no profiles");
  }
  return bundle_from_json(j).profiles;
}

std::string profiles_csv(const std::vector<LayerProfile>& profiles, const Provenance& provenance) {
  std::string out = provenance_comment(provenance);
  out += "layer,metric,mode,value\n";
  for (const auto& p : profiles) {
    std::string metric = p.metric_name;
    if (p.source) metric = *p.source + ":" + metric;
    for (std::size_t i = 0; i < p.values.size(); ++i) {
      out += std::to_string(p.first_layer + static_cast<int>(i)) + "," + metric + "," +
             std::string(to_string(p.mode)) + "," + format_double(p.values[i]) + "\n";
    }
  }
  return out;
}

std::vector<std::vector<std::optional<CorrelationCell>>> correlation_matrix(
    const std::vector<LayerProfile>& profiles, std::vector<std::string>* warnings) {
  const std::size_t n = profiles.size();
  std::vector<std::vector<std::optional<CorrelationCell>>> table(
      n, std::vector<std::optional<CorrelationCell>>(n));
  std::set<std::string> warned;
  for (std::size_t a = 0; a < n; ++a) {
    for (std::size_t b = a; b < n; ++b) {
      try {
        CorrelationCell cell = correlate(profiles[a], profiles[b]);
        if (a == b) cell.r = 1.0;
        table[a][b] = cell;
        std::swap(cell.metric_a, cell.metric_b);
        table[b][a] = cell;
      } catch (const Error& e) {
        if (e.code() != ErrorCode::ConstantProfile) throw;
        for (const auto* p : {&profiles[a], &profiles[b]}) {
          const std::string label = p->label();
          if (warnings && !warned.contains(label)) {
            try {
              pearson(p->values, p->values);
            } catch (const Error&) {
              warned.insert(label);
              warnings->push_back("ConstantProfile: " + label + " has zero variance");
            }
          }
        }
      }
    }
  }
  return table;
}

std::vector<LayerProfile> weight_profiles(const std::vector<WeightDelta>& deltas,
                                          const std::string& model_tag) {
  LayerProfile absolute;
  absolute.metric_name = std::string(to_string(Metric::WeightDelta));
  absolute.mode = Mode::SingleRun;
  absolute.first_layer = deltas.empty() ? 1 : deltas.front().layer;
  absolute.metadata.dataset_tag = model_tag;
  LayerProfile relative = absolute;
  relative.metric_name = std::string(to_string(Metric::WeightDeltaRelative));
  for (const auto& d : deltas) {
    absolute.values.push_back(d.aggregate);
    relative.values.push_back(d.relative);
  }
  return {absolute, relative};
}

}  // namespace sftscope
