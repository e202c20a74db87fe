#include <cmath>
#include <fstream>
#include <iostream>
#include <numbers>
#include <sstream>

#include "CLI11.hpp"
#include "sftscope/error.hpp"
#include "sftscope/report.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace sftscope {

namespace {

void write_text(const fs::path& file, const std::string& text) {
  if (file.has_parent_path()) fs::create_directories(file.parent_path());
  std::ofstream out(file, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + file.string());
  out << text;
}

std::string figure_name(const LayerProfile& p) {
  std::string name = std::string(to_string(p.mode));
  if (p.source) name += "_" + *p.source;
  return name + "_" + p.metric_name + ".csv";
}

void report_error(std::ostream& err, ErrorCode code, const std::string& message,
                  const json& extra = json::object()) {
  json j = extra;
  j["code"] = std::string(to_string(code));
  j["message"] = message;
  err << j.dump() << "\n";
}

struct ConfigFlags {
  std::string config_file;
  std::optional<double> alpha;
  std::optional<double> epsilon;
  std::optional<double> rank_tol;
  std::optional<double> cka_floor;
  std::optional<double> z_cap;
  std::optional<int> segments;
  std::vector<std::string> metrics;

  Config resolve() const {
    Config c = config_file.empty() ? Config{} : read_config(config_file);
    if (alpha) c.alpha = *alpha;
    if (epsilon) c.epsilon = *epsilon;
    if (rank_tol) c.rank_tol = *rank_tol;
    if (cka_floor) c.cka_floor = *cka_floor;
    if (z_cap) c.z_cap = *z_cap;
    if (segments) c.segments = *segments;
    if (!metrics.empty()) c.metrics = metrics;
    return c;
  }
};

void add_config_flags(CLI::App* cmd, ConfigFlags& f) {
  cmd->add_option("--config", f.config_file, "JSON config file")->check(CLI::ExistingFile);
  cmd->add_option("--alpha", f.alpha, "Renyi entropy order (default 1)");
  cmd->add_option("--epsilon", f.epsilon, "sparsity threshold (default 0.01)");
  cmd->add_option("--rank-tol", f.rank_tol, "relative numeric-rank tolerance (default 1e-10)");
  cmd->add_option("--cka-floor", f.cka_floor, "minimum CKA for a stable segment (default 0.98)");
  cmd->add_option("--z-cap", f.z_cap, "maximum mean-shift z-score (default 1.0)");
  cmd->add_option("-M,--segments", f.segments, "number of segments (default 5)");
  cmd->add_option("--metrics", f.metrics, "metrics to compute")->delimiter(',');
}

// ---------------------------------------------------------------------------

int cmd_analyze(const fs::path& base_dir, const fs::path& sft_dir, const fs::path& out_dir,
                const Config& config, int threads, bool single_run, bool materialize,
                std::ostream& out, std::ostream& err) {
  validate_run(base_dir);
  validate_run(sft_dir);
  const PairedRun pair = pair_runs(ActivationRun::open(base_dir), ActivationRun::open(sft_dir));

  AnalysisConfig ac;
  ac.alpha = config.alpha;
  ac.epsilon = config.epsilon;
  ac.rank_tol = config.rank_tol;
  for (const auto& name : config.metrics) ac.metrics.push_back(parse_metric(name));
  ac.threads = threads;
  ac.include_single_run = single_run;
  ac.materialize = materialize;
  SweepResult sweep = full_sweep(pair, ac);

  ReportBundle bundle;
  bundle.profiles = std::move(sweep.profiles);
  bundle.failures = std::move(sweep.failures);
  bundle.provenance.config_hash = config_hash(config);
  bundle.provenance.inputs = {{"base", hash_run(base_dir)}, {"sft", hash_run(sft_dir)}};

  write_text(out_dir / "profiles.json", to_json(bundle).dump(2) + "\n");
  write_text(out_dir / "profiles.csv", profiles_csv(bundle.profiles, bundle.provenance));
  const std::string header = provenance_comment(bundle.provenance);
  for (const auto& p : bundle.profiles) {
    std::string csv = header + "layer,value\n";
    for (std::size_t i = 0; i < p.values.size(); ++i) {
      csv += std::to_string(p.first_layer + static_cast<int>(i)) + "," +
             format_double(p.values[i]) + "\n";
    }
    write_text(out_dir / "figures" / figure_name(p), csv);
  }
  out << "wrote " << bundle.profiles.size() << " profiles to " << out_dir.string() << "\n";

  if (!bundle.failures.empty()) {
    json failures = json::array();
    for (const auto& f : bundle.failures) {
      failures.push_back({{"metric", f.metric}, {"layer", f.layer}, {"code", f.code},
                          {"message", f.message}});
    }
    const ErrorCode first = parse_error_code(bundle.failures.front().code);
    report_error(err, first, "one or more metrics failed", {{"failures", failures}});
    return exit_code_for(first);
  }
  return 0;
}

int cmd_weights(const fs::path& base_dir, const fs::path& sft_dir, const fs::path& out_dir,
                bool all_matrices, std::ostream& out) {
  const WeightManifest base = read_weight_manifest(base_dir);
  const WeightManifest sft = read_weight_manifest(sft_dir);
  const std::vector<WeightDelta> deltas = weight_profile(base, sft, {all_matrices});

  ReportBundle bundle;
  bundle.profiles = weight_profiles(deltas, base.model_id);
  bundle.provenance.config_hash = sha256_hex(json{{"all_matrices", all_matrices}}.dump());
  bundle.provenance.inputs = {{"base_weights", hash_weights(base_dir)},
                              {"sft_weights", hash_weights(sft_dir)}};

  std::string csv = provenance_comment(bundle.provenance) + "layer,absolute,relative\n";
  for (const auto& d : deltas) {
    csv += std::to_string(d.layer) + "," + format_double(d.aggregate) + "," +
           format_double(d.relative) + "\n";
  }
  write_text(out_dir / "weight_profile.csv", csv);
  write_text(out_dir / "weight_profile.json", to_json(bundle).dump(2) + "\n");
  out << "wrote weight profile for " << deltas.size() << " layers to " << out_dir.string() << "\n";
  return 0;
}

std::pair<double, double> parse_depth_range(const std::string& text) {
  const auto colon = text.find(':');
  try {
    if (colon == std::string::npos) throw std::invalid_argument("missing ':'");
    const double lo = std::stod(text.substr(0, colon));
    const double hi = std::stod(text.substr(colon + 1));
    if (!(lo >= 0.0 && lo < hi && hi <= 1.0)) throw std::invalid_argument("bad bounds");
    return {lo, hi};
  } catch (const std::exception&) {
    throw Error(ErrorCode::InvalidArgument, "--depth-range expects LO:HI with 0<=LO<HI<=1");
  }
}

int cmd_plan(const std::optional<fs::path>& profiles_path, const Config& config,
             const std::optional<std::string>& depth_range, const std::optional<std::string>& mask,
             std::optional<int> num_layers, const std::optional<int>& suggested_rank,
             const fs::path& out_file, std::ostream& out) {
  std::vector<LayerProfile> profiles;
  Provenance provenance;
  provenance.config_hash = config_hash(config);
  if (profiles_path) {
    profiles = read_profiles(*profiles_path);
    std::ifstream in(*profiles_path, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    provenance.inputs.push_back({"profiles", sha256_hex(ss.str())});
  }

  json doc;
  SegmentPlan plan;
  LocalizationRules rules{config.cka_floor, config.z_cap, std::nullopt};
  if (depth_range) rules.depth_range = parse_depth_range(*depth_range);

  json rule_parameters = {{"cka_floor", config.cka_floor},
                          {"z_cap", config.z_cap},
                          {"z_score", "population, over all layers"},
                          {"significance_test", "welch"}};
  json diagnostics = json::array();
  json warnings = json::array();

  if (mask) {
    if (!num_layers) {
      if (profiles.empty()) {
        throw Error(ErrorCode::InvalidArgument, "--mask needs a profiles file or --num-layers");
      }
      num_layers = static_cast<int>(profiles.front().values.size()) - 1 +
                   profiles.front().first_layer;
    }
    plan = with_mask(segment_layers(*num_layers, config.segments), *mask);
    rule_parameters["rule"] = "override";
  } else {
    if (!profiles_path) throw Error(ErrorCode::InvalidArgument, "plan needs a profiles file");
    const LocalizationResult result = localize_divergence(profiles, config.segments, rules);
    plan = result.plan;
    rule_parameters["rule"] = depth_range ? "depth_range" : "metric";
    if (depth_range) {
      rule_parameters["depth_range"] = {rules.depth_range->first, rules.depth_range->second};
    }
    for (const auto& d : result.segments) {
      diagnostics.push_back({{"segment", d.segment},
                             {"range", {d.range.start, d.range.end}},
                             {"min_cka", d.min_cka},
                             {"max_mean_shift_z", d.max_shift_z},
                             {"contains_embedding", d.contains_embedding},
                             {"selected", d.selected},
                             {"reason", d.reason}});
    }
    for (const auto& w : result.warnings) warnings.push_back(w);
    json test = {{"variant", "welch"}, {"note", result.separation_note}};
    if (result.separation) {
      test["t"] = result.separation->t;
      test["p"] = result.separation->p;
      test["df"] = result.separation->df;
    }
    rule_parameters["separation_test"] = test;
  }

  const std::vector<int> layers = mask_to_layers(plan);
  doc = to_json(plan);
  doc["layers"] = layers;
  doc["rule_parameters"] = rule_parameters;
  doc["per_segment_diagnostics"] = diagnostics;
  doc["warnings"] = warnings;
  doc["suggested_rank"] = suggested_rank ? json(*suggested_rank) : json(nullptr);
  doc["provenance"] = to_json(provenance);
  write_text(out_file, doc.dump(2) + "\n");

  for (const auto& w : warnings) out << "warning: " << w.get<std::string>() << "\n";
  out << "layers:";
  for (int l : layers) out << " " << l;
  out << "\n" << plan.mask << "\n";
  return 0;
}

int cmd_correlate(const std::vector<fs::path>& inputs, const fs::path& out_file,
                  std::ostream& out, std::ostream& err) {
  std::vector<LayerProfile> profiles;
  Provenance provenance;
  provenance.config_hash = sha256_hex("{}");
  for (const auto& path : inputs) {
    auto loaded = read_profiles(path);
    profiles.insert(profiles.end(), loaded.begin(), loaded.end());
    std::ifstream in(path, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    provenance.inputs.push_back({"profiles", sha256_hex(ss.str())});
  }
  if (profiles.empty()) throw Error(ErrorCode::InvalidArgument, "no profiles to correlate");

  std::vector<std::string> warnings;
  const auto table = correlation_matrix(profiles, &warnings);
  std::string csv = provenance_comment(provenance) + "metric";
  for (const auto& p : profiles) csv += "," + p.label();
  csv += "\n";
  for (std::size_t a = 0; a < profiles.size(); ++a) {
    csv += profiles[a].label();
    for (std::size_t b = 0; b < profiles.size(); ++b) {
      csv += ",";
      if (table[a][b]) csv += format_double(table[a][b]->r);
    }
    csv += "\n";
  }
  write_text(out_file, csv);
  for (const auto& w : warnings) err << "warning: " << w << "\n";
  out << "wrote " << profiles.size() << "x" << profiles.size() << " correlation table to "
      << out_file.string() << "\n";
  return 0;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Layer-wise representation diagnostics for base vs fine-tuned models"};
  app.name(std::string(kToolName));
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(kToolVersion));

  // analyze
  auto* analyze = app.add_subcommand("analyze", "compare two activation dumps layer by layer");
  fs::path a_base, a_sft, a_out = "report";
  int threads = 1;
  bool no_single = false;
  bool materialize = false;
  ConfigFlags a_flags;
  analyze->add_option("base", a_base, "base run directory")->required();
  analyze->add_option("sft", a_sft, "fine-tuned run directory")->required();
  analyze->add_option("-o,--out", a_out, "output directory");
  analyze->add_option("--threads", threads, "worker threads across layers")->check(CLI::PositiveNumber);
  analyze->add_flag("--no-single-run", no_single, "skip per-model profiles");
  analyze->add_flag("--materialize", materialize, "load whole layers before evaluating");
  add_config_flags(analyze, a_flags);

  // weights
  auto* weights = app.add_subcommand("weights", "per-layer attention weight change");
  fs::path w_base, w_sft, w_out = "report";
  bool all_matrices = false;
  weights->add_option("base", w_base, "base weights directory")->required();
  weights->add_option("sft", w_sft, "fine-tuned weights directory")->required();
  weights->add_option("-o,--out", w_out, "output directory");
  weights->add_flag("--all-matrices", all_matrices, "include matrices beyond W_Q/W_K/W_V/W_O");

  // plan
  auto* plan = app.add_subcommand("plan", "segment plan and tuning mask from profiles");
  std::optional<fs::path> p_profiles;
  fs::path p_out = "plan.json";
  std::optional<std::string> depth_range;
  std::optional<std::string> mask;
  std::optional<int> num_layers;
  std::optional<int> suggested_rank;
  ConfigFlags p_flags;
  plan->add_option("profiles", p_profiles, "profiles.json from analyze");
  plan->add_option("-o,--out", p_out, "plan file");
  plan->add_option("--depth-range", depth_range, "fixed range LO:HI, e.g. 0.2:0.8");
  plan->add_option("--mask", mask, "explicit mask, e.g. 01000");
  plan->add_option("--num-layers", num_layers, "layer count when no profiles are given");
  plan->add_option("--suggested-rank", suggested_rank, "LoRA rank recorded in the plan");
  add_config_flags(plan, p_flags);

  // correlate
  auto* correlate_cmd = app.add_subcommand("correlate", "Pearson table over profiles");
  std::vector<fs::path> c_inputs;
  fs::path c_out = "correlation.csv";
  correlate_cmd->add_option("profiles", c_inputs, "profile files")->required();
  correlate_cmd->add_option("-o,--out", c_out, "output CSV");

  // synth
  auto* synth = app.add_subcommand("synth", "write a synthetic base/SFT fixture pair");
  fs::path s_base, s_sft;
  SynthesisOptions so;
  std::optional<fs::path> s_weights;
  int w_rows = 16;
  int w_cols = 16;
  bool pooled_only = false;
  synth->add_option("base", s_base, "base run output directory")->required();
  synth->add_option("sft", s_sft, "fine-tuned run output directory")->required();
  synth->add_option("--layers", so.num_layers, "L");
  synth->add_option("--samples", so.num_samples, "N");
  synth->add_option("--dim", so.hidden_dim, "D");
  synth->add_option("--fraction", so.inject_depth_fraction, "injection depth fraction");
  synth->add_option("--shift", so.shift_magnitude, "shift norm above the injection depth");
  synth->add_option("--rotation", so.rotation_angle, "rotation angle in radians");
  synth->add_option("--seed", so.seed, "RNG seed");
  synth->add_option("--min-tokens", so.min_tokens, "shortest sample");
  synth->add_option("--max-tokens", so.max_tokens, "longest sample");
  synth->add_option("--straighten", so.straighten, "token-path straightening in [0,1]");
  synth->add_flag("--pooled-only", pooled_only, "omit token-level tensors");
  synth->add_option("--weights-out", s_weights, "also write weights to DIR/base and DIR/sft");
  synth->add_option("--weight-rows", w_rows, "rows per projection matrix");
  synth->add_option("--weight-cols", w_cols, "cols per projection matrix");

  std::vector<const char*> argv{"sftscope"};
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForVersion&) {
    out << kToolVersion << "\n";
    return 0;
  } catch (const CLI::ParseError& e) {
    report_error(err, ErrorCode::InvalidArgument, e.what());
    return 2;
  }

  try {
    if (*analyze) {
      return cmd_analyze(a_base, a_sft, a_out, a_flags.resolve(), threads, !no_single,
                         materialize, out, err);
    }
    if (*weights) return cmd_weights(w_base, w_sft, w_out, all_matrices, out);
    if (*plan) {
      return cmd_plan(p_profiles, p_flags.resolve(), depth_range, mask, num_layers,
                      suggested_rank, p_out, out);
    }
    if (*correlate_cmd) return cmd_correlate(c_inputs, c_out, out, err);
    if (*synth) {
      so.write_tokens = !pooled_only;
      synthesize_pair(s_base, s_sft, so);
      if (s_weights) {
        synthesize_weights(*s_weights / "base", *s_weights / "sft",
                           localization_deltas(so.num_layers, so.inject_depth_fraction), w_rows,
                           w_cols, so.seed);
      }
      out << "wrote " << s_base.string() << " and " << s_sft.string() << "\n";
      return 0;
    }
  } catch (const Error& e) {
    report_error(err, e.code(), e.detail());
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    report_error(err, ErrorCode::IoError, e.what());
    return 2;
  }
  return 2;
}

}  // namespace sftscope
