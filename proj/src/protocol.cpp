#include "sftscope/protocol.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <optional>
#include <utility>

#include "sftscope/error.hpp"
#include "sftscope/geometry.hpp"
#include "sftscope/parallel.hpp"

namespace sftscope {

namespace {

struct MetricInfo {
  Metric metric;
  std::string_view name;
  Mode mode;
  bool alpha;
};

constexpr std::array<MetricInfo, 14> kMetrics{{
    {Metric::PromptEntropy, "prompt_entropy", Mode::SampleDiff, true},
    {Metric::Curvature, "curvature", Mode::SampleDiff, false},
    {Metric::Sparsity, "sparsity", Mode::SampleDiff, false},
    {Metric::DatasetEntropy, "dataset_entropy", Mode::DatasetDiff, true},
    {Metric::EffectiveRank, "effective_rank", Mode::DatasetDiff, false},
    {Metric::EffectiveRankNormalized, "effective_rank_normalized", Mode::DatasetDiff, false},
    {Metric::RankDeficiency, "rank_deficiency", Mode::DatasetDiff, false},
    {Metric::ConditionNumber, "condition_number", Mode::DatasetDiff, false},
    {Metric::SpectralNorm, "spectral_norm", Mode::DatasetDiff, false},
    {Metric::Cka, "cka", Mode::Alignment, false},
    {Metric::CosineProfile, "cosine_profile", Mode::Alignment, false},
    {Metric::MeanShift, "mean_shift", Mode::Alignment, false},
    {Metric::WeightDelta, "weight_delta", Mode::SingleRun, false},
    {Metric::WeightDeltaRelative, "weight_delta_relative", Mode::SingleRun, false},
}};

const MetricInfo& info(Metric metric) {
  for (const auto& m : kMetrics) {
    if (m.metric == metric) return m;
  }
  throw Error(ErrorCode::UnknownMetric, "unregistered metric");
}

/// Spectra of one pooled matrix, computed at most once per layer.
class PooledSpectra {
 public:
  PooledSpectra(const Matrix& pooled, const AnalysisConfig& config)
      : pooled_(pooled), config_(config) {}

  const GramSpectrum& gram() {
    if (!gram_) gram_ = gram_spectrum(pooled_);
    return *gram_;
  }
  const SingularSpectrum& singular() {
    if (!singular_) singular_ = singular_spectrum(pooled_, config_.rank_tol);
    return *singular_;
  }
  const Matrix& matrix() const { return pooled_; }

 private:
  const Matrix& pooled_;
  const AnalysisConfig& config_;
  std::optional<GramSpectrum> gram_;
  std::optional<SingularSpectrum> singular_;
};

double dataset_metric_from(Metric metric, PooledSpectra& s, const AnalysisConfig& config) {
  const Matrix& z = s.matrix();
  switch (metric) {
    case Metric::DatasetEntropy:
      return normalized_entropy(s.gram(), config.alpha);
    case Metric::EffectiveRank:
      return effective_rank(s.singular());
    case Metric::EffectiveRankNormalized:
      return effective_rank(s.singular()) / static_cast<double>(std::min(z.rows(), z.cols()));
    case Metric::RankDeficiency:
      return static_cast<double>(rank_deficiency(s.singular(), z.rows(), z.cols()));
    case Metric::ConditionNumber:
      return condition_number(s.singular());
    case Metric::SpectralNorm:
      return spectral_norm(s.singular());
    default:
      throw Error(ErrorCode::MetricNotDatasetLevel,
                  std::string(to_string(metric)) + " is not a dataset-level metric");
  }
}

void require_layer(const PairedRun& pair, int layer) {
  if (layer < 0 || layer > pair.manifest().num_layers) {
    throw Error(ErrorCode::LayerOutOfRange, "layer " + std::to_string(layer));
  }
}

// ---------------------------------------------------------------------------
// Sweep internals

struct Entry {
  double compare = 0.0;
  double base = 0.0;
  double sft = 0.0;
  bool failed = false;
  std::string code;
  std::string message;
};

void fail(Entry& e, const Error& err) {
  e.failed = true;
  e.code = std::string(to_string(err.code()));
  e.message = err.detail();
}

void fail(Entry& e, std::string code, std::string message) {
  e.failed = true;
  e.code = std::move(code);
  e.message = std::move(message);
}

// Evaluates dataset and alignment metrics once the pooled matrices exist.
void finish_pooled(const std::vector<Metric>& metrics, const Matrix& pb, const Matrix& ps,
                   const AnalysisConfig& config, std::vector<Entry>& entries) {
  PooledSpectra sb(pb, config);
  PooledSpectra ss(ps, config);
  for (std::size_t k = 0; k < metrics.size(); ++k) {
    const Mode mode = comparison_mode(metrics[k]);
    Entry& e = entries[k];
    try {
      if (mode == Mode::DatasetDiff) {
        e.base = dataset_metric_from(metrics[k], sb, config);
        e.sft = dataset_metric_from(metrics[k], ss, config);
        e.compare = e.sft - e.base;
      } else if (mode == Mode::Alignment) {
        e.compare = alignment_metric(metrics[k], pb, ps, config);
      }
    } catch (const Error& err) {
      fail(e, err);
    }
  }
}

bool needs_pooled(const std::vector<Metric>& metrics) {
  return std::any_of(metrics.begin(), metrics.end(), [](Metric m) {
    return comparison_mode(m) == Mode::DatasetDiff || comparison_mode(m) == Mode::Alignment;
  });
}

std::vector<Metric> sample_subset(const std::vector<Metric>& metrics) {
  std::vector<Metric> out;
  std::copy_if(metrics.begin(), metrics.end(), std::back_inserter(out),
               [](Metric m) { return comparison_mode(m) == Mode::SampleDiff; });
  return out;
}

void fail_unavailable(const std::vector<Metric>& metrics, std::vector<Entry>& entries,
                      bool sample_level, const std::string& why) {
  for (std::size_t k = 0; k < metrics.size(); ++k) {
    const bool is_sample = comparison_mode(metrics[k]) == Mode::SampleDiff;
    if (is_sample == sample_level && !entries[k].failed) {
      fail(entries[k], "MissingGranularity", why);
    }
  }
}

void copy_sample_totals(const std::vector<Metric>& metrics, const StreamState& state, int n,
                        std::vector<Entry>& entries) {
  std::size_t j = 0;
  for (std::size_t k = 0; k < metrics.size(); ++k) {
    if (comparison_mode(metrics[k]) != Mode::SampleDiff) continue;
    const auto& t = state.totals()[j++];
    Entry& e = entries[k];
    if (t.failed) {
      fail(e, t.error_code, t.error_message);
      continue;
    }
    e.compare = t.diff_sum / n;
    e.base = t.base_sum / n;
    e.sft = t.sft_sum / n;
  }
}

std::vector<Entry> evaluate_layer_streaming(const PairedRun& pair, int layer,
                                            const std::vector<Metric>& metrics,
                                            const AnalysisConfig& config) {
  const RunManifest& m = pair.manifest();
  std::vector<Entry> entries(metrics.size());
  const auto sample_metrics = sample_subset(metrics);
  const bool have_tokens = pair.base().has_tokens() && pair.sft().has_tokens();
  const bool pooled_on_disk = pair.base().has_pooled() && pair.sft().has_pooled();
  const bool pooled_wanted = needs_pooled(metrics);
  const bool derive = pooled_wanted && !pooled_on_disk;

  if (!have_tokens) {
    fail_unavailable(metrics, entries, true, "token-level tensors absent");
  }
  if (derive && !have_tokens) {
    fail_unavailable(metrics, entries, false, "pooled tensors absent and cannot be derived");
    return entries;
  }

  StreamState state(m, have_tokens ? sample_metrics : std::vector<Metric>{}, derive, config);
  if (have_tokens && (!sample_metrics.empty() || derive)) {
    for (int i = 0; i < m.num_samples; ++i) {
      state.push(i, pair.base().load_tokens(layer, i), pair.sft().load_tokens(layer, i));
    }
    copy_sample_totals(metrics, state, m.num_samples, entries);
  }

  if (pooled_wanted) {
    if (derive) {
      finish_pooled(metrics, state.pooled_base(), state.pooled_sft(), config, entries);
    } else {
      finish_pooled(metrics, pair.base().load_pooled(layer), pair.sft().load_pooled(layer),
                    config, entries);
    }
  }
  return entries;
}

// Reference path: the whole layer is read into memory first and every metric
// is evaluated over the resident token matrices.
std::vector<Entry> evaluate_layer_materialized(const PairedRun& pair, int layer,
                                               const std::vector<Metric>& metrics,
                                               const AnalysisConfig& config) {
  const RunManifest& m = pair.manifest();
  std::vector<Entry> entries(metrics.size());
  const bool have_tokens = pair.base().has_tokens() && pair.sft().has_tokens();
  const bool pooled_on_disk = pair.base().has_pooled() && pair.sft().has_pooled();
  const bool pooled_wanted = needs_pooled(metrics);

  std::vector<Matrix> tb;
  std::vector<Matrix> ts;
  if (have_tokens) {
    for (int i = 0; i < m.num_samples; ++i) {
      tb.push_back(pair.base().load_tokens(layer, i));
      ts.push_back(pair.sft().load_tokens(layer, i));
    }
  } else {
    fail_unavailable(metrics, entries, true, "token-level tensors absent");
  }

  for (std::size_t k = 0; k < metrics.size() && have_tokens; ++k) {
    if (comparison_mode(metrics[k]) != Mode::SampleDiff) continue;
    Entry& e = entries[k];
    try {
      std::vector<double> fb;
      std::vector<double> fs;
      for (const auto& t : tb) fb.push_back(sample_metric(metrics[k], t, config));
      for (const auto& t : ts) fs.push_back(sample_metric(metrics[k], t, config));
      double diff = 0.0;
      double sb = 0.0;
      double ss = 0.0;
      for (std::size_t i = 0; i < fb.size(); ++i) {
        diff += fs[i] - fb[i];
        sb += fb[i];
        ss += fs[i];
      }
      e.compare = diff / m.num_samples;
      e.base = sb / m.num_samples;
      e.sft = ss / m.num_samples;
    } catch (const Error& err) {
      fail(e, err);
    }
  }

  if (!pooled_wanted) return entries;
  if (pooled_on_disk) {
    finish_pooled(metrics, pair.base().load_pooled(layer), pair.sft().load_pooled(layer), config,
                  entries);
  } else if (have_tokens) {
    Matrix pb(m.num_samples, m.hidden_dim);
    Matrix ps(m.num_samples, m.hidden_dim);
    for (int i = 0; i < m.num_samples; ++i) {
      pb.row(i) = mean_pool(tb[static_cast<std::size_t>(i)]);
      ps.row(i) = mean_pool(ts[static_cast<std::size_t>(i)]);
    }
    finish_pooled(metrics, pb, ps, config, entries);
  } else {
    fail_unavailable(metrics, entries, false, "pooled tensors absent and cannot be derived");
  }
  return entries;
}

}  // namespace

// ---------------------------------------------------------------------------

std::string_view to_string(Mode mode) {
  switch (mode) {
    case Mode::SampleDiff: return "sample_diff";
    case Mode::DatasetDiff: return "dataset_diff";
    case Mode::Alignment: return "alignment";
    case Mode::SingleRun: return "single_run";
  }
  return "unknown";
}

Mode parse_mode(std::string_view name) {
  for (Mode m : {Mode::SampleDiff, Mode::DatasetDiff, Mode::Alignment, Mode::SingleRun}) {
    if (to_string(m) == name) return m;
  }
  throw Error(ErrorCode::InvalidArgument, "unknown mode '" + std::string(name) + "'");
}

std::string_view to_string(Metric metric) { return info(metric).name; }

Metric parse_metric(std::string_view name) {
  for (const auto& m : kMetrics) {
    if (m.name == name) return m.metric;
  }
  throw Error(ErrorCode::UnknownMetric, "unknown metric '" + std::string(name) + "'");
}

Mode comparison_mode(Metric metric) { return info(metric).mode; }
bool uses_alpha(Metric metric) { return info(metric).alpha; }

std::vector<Metric> default_metrics(bool have_tokens) {
  std::vector<Metric> out;
  if (have_tokens) out = {Metric::PromptEntropy, Metric::Curvature, Metric::Sparsity};
  out.insert(out.end(), {Metric::DatasetEntropy, Metric::EffectiveRank,
                         Metric::EffectiveRankNormalized, Metric::RankDeficiency,
                         Metric::ConditionNumber, Metric::SpectralNorm, Metric::Cka,
                         Metric::CosineProfile, Metric::MeanShift});
  return out;
}

std::string LayerProfile::label() const {
  std::string out(to_string(mode));
  if (source) out += ":" + *source;
  return out + ":" + metric_name;
}

double sample_metric(Metric metric, const Matrix& tokens, const AnalysisConfig& config) {
  switch (metric) {
    case Metric::PromptEntropy:
      return sample_prompt_entropy(tokens, config.alpha);
    case Metric::Curvature:
      return curvature(tokens).curvature;
    case Metric::Sparsity:
      return sparsity(tokens, config.epsilon);
    default:
      throw Error(ErrorCode::MetricNotSampleLevel,
                  std::string(to_string(metric)) + " is not a sample-level metric");
  }
}

double dataset_metric(Metric metric, const Matrix& pooled, const AnalysisConfig& config) {
  PooledSpectra spectra(pooled, config);
  return dataset_metric_from(metric, spectra, config);
}

double alignment_metric(Metric metric, const Matrix& base, const Matrix& sft,
                        const AnalysisConfig&) {
  switch (metric) {
    case Metric::Cka: return cka(base, sft);
    case Metric::CosineProfile: return cosine_profile(base, sft);
    case Metric::MeanShift: return mean_shift(base, sft);
    default:
      throw Error(ErrorCode::MetricNotAlignment,
                  std::string(to_string(metric)) + " is not an alignment metric");
  }
}

double sample_level_diff(Metric metric, const PairedRun& pair, int layer,
                         const AnalysisConfig& config) {
  if (comparison_mode(metric) != Mode::SampleDiff) {
    throw Error(ErrorCode::MetricNotSampleLevel,
                std::string(to_string(metric)) + " is not a sample-level metric");
  }
  require_layer(pair, layer);
  const int n = pair.manifest().num_samples;
  double sum = 0.0;
  for (int i = 0; i < n; ++i) {
    const double fb = sample_metric(metric, pair.base().load_tokens(layer, i), config);
    const double fs = sample_metric(metric, pair.sft().load_tokens(layer, i), config);
    sum += fs - fb;
  }
  return sum / n;
}

double dataset_level_diff(Metric metric, const PairedRun& pair, int layer,
                          const AnalysisConfig& config) {
  if (comparison_mode(metric) != Mode::DatasetDiff) {
    throw Error(ErrorCode::MetricNotDatasetLevel,
                std::string(to_string(metric)) + " is not a dataset-level metric");
  }
  require_layer(pair, layer);
  const double fb = dataset_metric(metric, pair.base().load_pooled(layer), config);
  const double fs = dataset_metric(metric, pair.sft().load_pooled(layer), config);
  return fs - fb;
}

double alignment_score(Metric metric, const PairedRun& pair, int layer,
                       const AnalysisConfig& config) {
  if (comparison_mode(metric) != Mode::Alignment) {
    throw Error(ErrorCode::MetricNotAlignment,
                std::string(to_string(metric)) + " is not an alignment metric");
  }
  require_layer(pair, layer);
  return alignment_metric(metric, pair.base().load_pooled(layer), pair.sft().load_pooled(layer),
                          config);
}

// ---------------------------------------------------------------------------

StreamState::StreamState(const RunManifest& manifest, std::vector<Metric> sample_metrics,
                         bool derive_pooled, const AnalysisConfig& config)
    : num_samples_(manifest.num_samples),
      derive_pooled_(derive_pooled),
      metrics_(std::move(sample_metrics)),
      totals_(metrics_.size()),
      config_(&config) {
  for (Metric m : metrics_) {
    if (comparison_mode(m) != Mode::SampleDiff) {
      throw Error(ErrorCode::MetricNotSampleLevel,
                  std::string(to_string(m)) + " is not a sample-level metric");
    }
  }
  if (derive_pooled_) {
    pooled_base_.resize(manifest.num_samples, manifest.hidden_dim);
    pooled_sft_.resize(manifest.num_samples, manifest.hidden_dim);
  }
}

void StreamState::push(int sample, const Matrix& base_tokens, const Matrix& sft_tokens) {
  if (sample != count_) {
    throw Error(ErrorCode::OrderMismatch, "expected sample " + std::to_string(count_) +
                                              ", got " + std::to_string(sample));
  }
  for (std::size_t k = 0; k < metrics_.size(); ++k) {
    Totals& t = totals_[k];
    if (t.failed) continue;
    try {
      const double fb = sample_metric(metrics_[k], base_tokens, *config_);
      const double fs = sample_metric(metrics_[k], sft_tokens, *config_);
      t.diff_sum += fs - fb;
      t.base_sum += fb;
      t.sft_sum += fs;
    } catch (const Error& err) {
      t.failed = true;
      t.error_code = std::string(to_string(err.code()));
      t.error_message = "sample " + std::to_string(sample) + ": " + err.detail();
    }
  }
  if (derive_pooled_) {
    pooled_base_.row(sample) = mean_pool(base_tokens);
    pooled_sft_.row(sample) = mean_pool(sft_tokens);
  }
  ++count_;
}

// ---------------------------------------------------------------------------

SweepResult full_sweep(const PairedRun& pair, const AnalysisConfig& config) {
  const RunManifest& m = pair.manifest();
  const bool have_tokens = pair.base().has_tokens() && pair.sft().has_tokens();
  const std::vector<Metric> metrics =
      config.metrics.empty() ? default_metrics(have_tokens) : config.metrics;
  for (Metric metric : metrics) {
    if (comparison_mode(metric) == Mode::SingleRun) {
      throw Error(ErrorCode::InvalidArgument,
                  std::string(to_string(metric)) + " is not a representation metric");
    }
  }

  const int streams = m.num_streams();
  std::vector<std::vector<Entry>> per_layer(static_cast<std::size_t>(streams));
  parallel_for(per_layer.size(), config.threads, [&](std::size_t l) {
    const int layer = static_cast<int>(l);
    per_layer[l] = config.materialize ? evaluate_layer_materialized(pair, layer, metrics, config)
                                      : evaluate_layer_streaming(pair, layer, metrics, config);
  });

  ProfileMetadata meta;
  meta.seed = m.seed;
  meta.num_samples = m.num_samples;
  meta.dataset_tag = m.dataset_tag;
  meta.epsilon = config.epsilon;
  meta.rank_tol = config.rank_tol;

  SweepResult result;
  for (std::size_t k = 0; k < metrics.size(); ++k) {
    const Metric metric = metrics[k];
    const Mode mode = comparison_mode(metric);
    bool ok = true;
    for (int l = 0; l < streams; ++l) {
      const Entry& e = per_layer[static_cast<std::size_t>(l)][k];
      if (e.failed) {
        result.failures.push_back({std::string(to_string(metric)), std::string(to_string(mode)),
                                   l, e.code, e.message});
        ok = false;
        break;
      }
    }
    if (!ok) continue;

    auto make = [&](Mode profile_mode, std::optional<std::string> source, auto pick) {
      LayerProfile p;
      p.metric_name = std::string(to_string(metric));
      p.mode = profile_mode;
      if (uses_alpha(metric)) p.alpha = config.alpha;
      p.source = std::move(source);
      p.metadata = meta;
      for (int l = 0; l < streams; ++l) p.values.push_back(pick(per_layer[static_cast<std::size_t>(l)][k]));
      return p;
    };
    result.profiles.push_back(make(mode, std::nullopt, [](const Entry& e) { return e.compare; }));
    if (config.include_single_run && mode != Mode::Alignment) {
      result.profiles.push_back(make(Mode::SingleRun, "base", [](const Entry& e) { return e.base; }));
      result.profiles.push_back(make(Mode::SingleRun, "sft", [](const Entry& e) { return e.sft; }));
    }
  }
  return result;
}

}  // namespace sftscope
