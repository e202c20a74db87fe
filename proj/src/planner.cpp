#include "sftscope/planner.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include <boost/math/distributions/students_t.hpp>

#include "sftscope/error.hpp"

namespace fs = std::filesystem;

namespace sftscope {

SegmentPlan segment_layers(int num_layers, int num_segments) {
  if (num_segments < 1 || num_segments > num_layers) {
    throw Error(ErrorCode::InvalidSegmentCount,
                "M=" + std::to_string(num_segments) + " for L=" + std::to_string(num_layers));
  }
  SegmentPlan plan;
  plan.num_layers = num_layers;
  plan.num_segments = num_segments;
  const int base = num_layers / num_segments;
  const int extra = num_layers % num_segments;
  int start = 0;
  for (int s = 0; s < num_segments; ++s) {
    const int size = base + (s < extra ? 1 : 0);
    plan.boundaries.push_back({start, start + size});
    start += size;
  }
  plan.mask.assign(static_cast<std::size_t>(num_segments), '0');
  return plan;
}

SegmentPlan with_mask(SegmentPlan plan, const std::string& mask) {
  if (static_cast<int>(mask.size()) != plan.num_segments) {
    throw Error(ErrorCode::MaskLengthMismatch, "mask '" + mask + "' has " +
                                                   std::to_string(mask.size()) + " chars, M=" +
                                                   std::to_string(plan.num_segments));
  }
  for (char c : mask) {
    if (c != '0' && c != '1') throw Error(ErrorCode::MaskCharInvalid, "mask '" + mask + "'");
  }
  plan.mask = mask;
  return plan;
}

std::vector<int> mask_to_layers(const SegmentPlan& plan) {
  with_mask(plan, plan.mask);
  std::vector<int> layers;
  for (int s = 0; s < plan.num_segments; ++s) {
    if (plan.mask[static_cast<std::size_t>(s)] != '1') continue;
    const Segment& seg = plan.boundaries[static_cast<std::size_t>(s)];
    for (int l = seg.start; l < seg.end; ++l) layers.push_back(l);
  }
  return layers;
}

// ---------------------------------------------------------------------------

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw Error(ErrorCode::LengthMismatch, "profile lengths differ");
  if (a.size() < 3) throw Error(ErrorCode::LengthMismatch, "need at least 3 layers");
  const auto n = static_cast<double>(a.size());
  double ma = 0.0;
  double mb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double sab = 0.0;
  double saa = 0.0;
  double sbb = 0.0;
  double amax = 0.0;
  double bmax = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double da = a[i] - ma;
    const double db = b[i] - mb;
    sab += da * db;
    saa += da * da;
    sbb += db * db;
    amax = std::max(amax, std::abs(a[i]));
    bmax = std::max(bmax, std::abs(b[i]));
  }
  auto constant = [n](double ss, double scale) {
    return scale == 0.0 || std::sqrt(ss / n) <= 1e-12 * scale;
  };
  if (constant(saa, amax) || constant(sbb, bmax)) {
    throw Error(ErrorCode::ConstantProfile, "profile has zero variance");
  }
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

CorrelationCell correlate(const LayerProfile& a, const LayerProfile& b) {
  std::vector<double> va = a.values;
  std::vector<double> vb = b.values;
  if (a.first_layer != b.first_layer) {
    if (a.first_layer == 0 && b.first_layer == 1 && !va.empty()) {
      va.erase(va.begin());
    } else if (a.first_layer == 1 && b.first_layer == 0 && !vb.empty()) {
      vb.erase(vb.begin());
    } else {
      throw Error(ErrorCode::LengthMismatch, "profiles start at incompatible layers");
    }
  }
  if (va.size() != vb.size()) {
    throw Error(ErrorCode::LengthMismatch, a.label() + " and " + b.label() +
                                               " cover different layer counts");
  }
  CorrelationCell cell;
  cell.metric_a = a.label();
  cell.metric_b = b.label();
  cell.r = pearson(va, vb);
  cell.n = static_cast<int>(va.size());
  return cell;
}

TTestResult welch_ttest(const std::vector<double>& group_a, const std::vector<double>& group_b) {
  if (group_a.size() < 2 || group_b.size() < 2) {
    throw Error(ErrorCode::InvalidArgument, "each group needs at least 2 values");
  }
  auto moments = [](const std::vector<double>& g) {
    double mean = 0.0;
    for (double v : g) mean += v;
    mean /= static_cast<double>(g.size());
    double ss = 0.0;
    for (double v : g) ss += (v - mean) * (v - mean);
    return std::pair{mean, ss / static_cast<double>(g.size() - 1)};
  };
  const auto [ma, va] = moments(group_a);
  const auto [mb, vb] = moments(group_b);
  const double sa = va / static_cast<double>(group_a.size());
  const double sb = vb / static_cast<double>(group_b.size());
  const double se2 = sa + sb;
  if (!(se2 > 0.0)) throw Error(ErrorCode::DegenerateVariance, "both groups have zero variance");

  TTestResult out;
  out.t = (ma - mb) / std::sqrt(se2);
  out.df = se2 * se2 /
           (sa * sa / static_cast<double>(group_a.size() - 1) +
            sb * sb / static_cast<double>(group_b.size() - 1));
  const boost::math::students_t dist(out.df);
  out.p = std::min(1.0, 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(out.t))));
  return out;
}

// ---------------------------------------------------------------------------

namespace {

const LayerProfile& find_profile(const std::vector<LayerProfile>& profiles,
                                 const std::string& metric) {
  for (const auto& p : profiles) {
    if (p.metric_name == metric && p.mode == Mode::Alignment) return p;
  }
  throw Error(ErrorCode::MissingRequiredProfile, "no alignment profile for '" + metric + "'");
}

std::vector<double> z_scores(const std::vector<double>& v) {
  const auto n = static_cast<double>(v.size());
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= n;
  double ss = 0.0;
  double scale = 0.0;
  for (double x : v) {
    ss += (x - mean) * (x - mean);
    scale = std::max(scale, std::abs(x));
  }
  const double sd = std::sqrt(ss / n);
  std::vector<double> z(v.size(), 0.0);
  if (sd <= 1e-12 * scale || sd == 0.0) return z;
  for (std::size_t i = 0; i < v.size(); ++i) z[i] = (v[i] - mean) / sd;
  return z;
}

std::string fmt_value(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

}  // namespace

LocalizationResult localize_divergence(const std::vector<LayerProfile>& profiles,
                                       int num_segments, const LocalizationRules& rules) {
  const LayerProfile& cka_profile = find_profile(profiles, "cka");
  const LayerProfile& shift_profile = find_profile(profiles, "mean_shift");
  if (cka_profile.values.size() != shift_profile.values.size() || cka_profile.values.size() < 2) {
    throw Error(ErrorCode::LengthMismatch, "cka and mean_shift profiles must span the same layers");
  }
  const int streams = static_cast<int>(cka_profile.values.size());
  const int num_layers = streams - 1;

  LocalizationResult result;
  result.rules = rules;
  result.plan = segment_layers(num_layers, num_segments);
  const std::vector<double> z = z_scores(shift_profile.values);

  std::vector<int> stream_selected(static_cast<std::size_t>(streams), 0);
  for (int s = 0; s < num_segments; ++s) {
    const Segment seg = result.plan.boundaries[static_cast<std::size_t>(s)];
    const int last_stream = (s == num_segments - 1) ? num_layers : seg.end - 1;
    SegmentDiagnostics d;
    d.segment = s;
    d.range = seg;
    d.contains_embedding = seg.start == 0;
    d.min_cka = 1.0;
    d.max_shift_z = -INFINITY;
    for (int l = seg.start; l <= last_stream; ++l) {
      d.min_cka = std::min(d.min_cka, cka_profile.values[static_cast<std::size_t>(l)]);
      d.max_shift_z = std::max(d.max_shift_z, z[static_cast<std::size_t>(l)]);
    }

    if (rules.depth_range) {
      const double lo = rules.depth_range->first * num_layers;
      const double hi = rules.depth_range->second * num_layers;
      d.selected = seg.start >= lo - 1e-9 && seg.end <= hi + 1e-9;
      d.reason = d.selected ? "inside fixed depth range" : "outside fixed depth range";
    } else if (d.contains_embedding) {
      d.reason = "contains embedding output (layer 0)";
    } else if (d.min_cka < rules.cka_floor) {
      d.reason = "cka " + fmt_value(d.min_cka) + " < floor " + fmt_value(rules.cka_floor);
    } else if (d.max_shift_z > rules.z_cap) {
      d.reason = "mean-shift z " + fmt_value(d.max_shift_z) + " > cap " + fmt_value(rules.z_cap);
    } else {
      d.selected = true;
      d.reason = "stable";
    }
    if (d.selected) {
      result.plan.mask[static_cast<std::size_t>(s)] = '1';
      for (int l = seg.start; l <= last_stream; ++l) stream_selected[static_cast<std::size_t>(l)] = 1;
    }
    result.segments.push_back(std::move(d));
  }

  if (result.plan.mask.find('1') == std::string::npos) {
    result.warnings.emplace_back("NoStableSegment: no segment passed the selection rules");
  }

  std::vector<double> inside;
  std::vector<double> outside;
  for (int l = 0; l < streams; ++l) {
    (stream_selected[static_cast<std::size_t>(l)] ? inside : outside)
        .push_back(cka_profile.values[static_cast<std::size_t>(l)]);
  }
  try {
    result.separation = welch_ttest(inside, outside);
    result.separation_note = "welch t-test of cka, selected vs unselected layers";
  } catch (const Error& e) {
    result.separation_note = "welch t-test not applicable: " + std::string(to_string(e.code()));
  }
  return result;
}

// ---------------------------------------------------------------------------

int injection_layer(int num_layers, double fraction) {
  if (!(fraction >= 0.0 && fraction <= 1.0)) {
    throw Error(ErrorCode::InvalidFraction, "inject_depth_fraction must be in [0, 1]");
  }
  return static_cast<int>(std::ceil(fraction * num_layers - 1e-9));
}

namespace {

Eigen::RowVectorXd gaussian_row(Eigen::Index d, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::RowVectorXd v(d);
  for (Eigen::Index k = 0; k < d; ++k) v[k] = normal(rng);
  return v;
}

Matrix gaussian(Eigen::Index rows, Eigen::Index cols, double scale, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, scale);
  Matrix m(rows, cols);
  for (Eigen::Index k = 0; k < m.size(); ++k) m.data()[k] = normal(rng);
  return m;
}

// Rotation by `angle` in span{a, b} (orthonormal), applied to row vectors,
// returned as the displacement R x - x so that angle 0 yields exact zeros.
struct PlaneRotation {
  Eigen::RowVectorXd a;
  Eigen::RowVectorXd b;
  double cos_minus_one = 0.0;
  double sin = 0.0;

  Eigen::RowVectorXd displacement(const Eigen::RowVectorXd& x) const {
    const double xa = x.dot(a);
    const double xb = x.dot(b);
    return cos_minus_one * (xa * a + xb * b) + sin * (xa * b - xb * a);
  }
};

PlaneRotation sample_rotation(const Eigen::RowVectorXd& deviation, double angle,
                              std::mt19937_64& rng) {
  const Eigen::Index d = deviation.size();
  PlaneRotation r;
  r.cos_minus_one = std::cos(angle) - 1.0;
  r.sin = std::sin(angle);
  const double norm = deviation.norm();
  r.a = norm > 0.0 ? Eigen::RowVectorXd(deviation / norm) : gaussian_row(d, rng).normalized();
  Eigen::RowVectorXd g = gaussian_row(d, rng);
  g -= g.dot(r.a) * r.a;
  r.b = g.normalized();
  return r;
}

}  // namespace

std::pair<ActivationRun, ActivationRun> synthesize_pair(const fs::path& base_dir,
                                                        const fs::path& sft_dir,
                                                        const SynthesisOptions& o) {
  const int inject = injection_layer(o.num_layers, o.inject_depth_fraction);
  if (o.num_layers < 1 || o.num_samples < 2 || o.hidden_dim < 2) {
    throw Error(ErrorCode::InvalidArgument, "need L >= 1, N >= 2, D >= 2");
  }
  if (o.min_tokens < 1 || o.max_tokens < o.min_tokens) {
    throw Error(ErrorCode::InvalidArgument, "bad token range");
  }
  if (!(o.straighten >= 0.0 && o.straighten <= 1.0)) {
    throw Error(ErrorCode::InvalidArgument, "straighten must be in [0, 1]");
  }
  if (!o.write_tokens && !o.write_pooled) {
    throw Error(ErrorCode::InvalidArgument, "nothing to write");
  }

  std::mt19937_64 base_rng(o.seed);
  std::mt19937_64 sft_rng(o.seed ^ 0x9e3779b97f4a7c15ULL);

  RunManifest manifest;
  manifest.num_layers = o.num_layers;
  manifest.hidden_dim = o.hidden_dim;
  manifest.num_samples = o.num_samples;
  manifest.seed = o.seed;
  manifest.dataset_tag = "synthetic";
  std::uniform_int_distribution<int> token_count(o.min_tokens, o.max_tokens);
  for (int i = 0; i < o.num_samples; ++i) {
    char id[32];
    std::snprintf(id, sizeof id, "s%05d", i);
    manifest.sample_ids.emplace_back(id);
    manifest.token_counts.push_back(token_count(base_rng));
  }
  RunManifest sft_manifest = manifest;
  manifest.model_id = "synthetic-base";
  sft_manifest.model_id = "synthetic-sft";

  fs::remove_all(base_dir);
  fs::remove_all(sft_dir);
  fs::create_directories(base_dir);
  fs::create_directories(sft_dir);
  write_manifest(base_dir, manifest);
  write_manifest(sft_dir, sft_manifest);

  Eigen::RowVectorXd shift = Eigen::RowVectorXd::Zero(o.hidden_dim);
  if (o.shift_magnitude != 0.0) {
    shift = gaussian_row(o.hidden_dim, sft_rng).normalized() * o.shift_magnitude;
  }

  const auto n = static_cast<std::size_t>(o.num_samples);
  for (int l = 0; l <= o.num_layers; ++l) {
    std::vector<Matrix> base_tokens(n);
    Matrix base_pooled(o.num_samples, o.hidden_dim);
    for (std::size_t i = 0; i < n; ++i) {
      base_tokens[i] = gaussian(manifest.token_counts[i], o.hidden_dim, 1.0, base_rng);
      base_pooled.row(static_cast<Eigen::Index>(i)) = mean_pool(base_tokens[i]);
    }

    std::vector<Matrix> sft_tokens = base_tokens;
    Matrix sft_pooled = base_pooled;
    if (l >= inject && o.inject_depth_fraction < 1.0) {
      Eigen::RowVectorXd centroid = Eigen::RowVectorXd::Zero(o.hidden_dim);
      for (std::size_t i = 0; i < n; ++i) centroid += base_pooled.row(static_cast<Eigen::Index>(i));
      centroid /= static_cast<double>(n);

      // Straighten, then rotate each sample about the centroid.
      std::vector<PlaneRotation> rotations;
      Eigen::RowVectorXd correction = Eigen::RowVectorXd::Zero(o.hidden_dim);
      for (std::size_t i = 0; i < n; ++i) {
        Matrix& tokens = sft_tokens[i];
        const Eigen::RowVectorXd pooled = base_pooled.row(static_cast<Eigen::Index>(i));
        const Eigen::Index t_count = tokens.rows();
        if (o.straighten > 0.0 && t_count > 1) {
          const Eigen::RowVectorXd step =
              (tokens.row(t_count - 1) - tokens.row(0)) / static_cast<double>(t_count - 1);
          for (Eigen::Index t = 0; t < t_count; ++t) {
            const double offset = static_cast<double>(t) - 0.5 * static_cast<double>(t_count - 1);
            const Eigen::RowVectorXd line = pooled + offset * step;
            tokens.row(t) += o.straighten * (line - tokens.row(t));
          }
        }
        rotations.push_back(sample_rotation(pooled - centroid, o.rotation_angle, sft_rng));
        correction += rotations.back().displacement(pooled - centroid);
      }
      correction /= static_cast<double>(n);

      for (std::size_t i = 0; i < n; ++i) {
        Matrix& tokens = sft_tokens[i];
        for (Eigen::Index t = 0; t < tokens.rows(); ++t) {
          const Eigen::RowVectorXd x = tokens.row(t) - centroid;
          tokens.row(t) += rotations[i].displacement(x) + shift - correction;
        }
        sft_pooled.row(static_cast<Eigen::Index>(i)) = mean_pool(tokens);
      }
    }

    for (std::size_t i = 0; i < n && o.write_tokens; ++i) {
      write_f32(token_path(base_dir, l, static_cast<int>(i)), base_tokens[i]);
      write_f32(token_path(sft_dir, l, static_cast<int>(i)), sft_tokens[i]);
    }
    if (o.write_pooled) {
      write_f32(pooled_path(base_dir, l), base_pooled);
      write_f32(pooled_path(sft_dir, l), sft_pooled);
    }
  }
  return {ActivationRun::open(base_dir), ActivationRun::open(sft_dir)};
}

void synthesize_weights(const fs::path& base_dir, const fs::path& sft_dir,
                        const std::vector<double>& deltas, int rows, int cols,
                        std::uint64_t seed) {
  if (deltas.empty() || rows < 1 || cols < 1) {
    throw Error(ErrorCode::InvalidArgument, "need at least one block and a positive shape");
  }
  std::mt19937_64 base_rng(seed);
  std::mt19937_64 delta_rng(seed + 1);

  WeightManifest base;
  base.model_id = "synthetic-base";
  base.num_layers = static_cast<int>(deltas.size());
  WeightManifest sft = base;
  sft.model_id = "synthetic-sft";
  fs::remove_all(base_dir);
  fs::remove_all(sft_dir);

  const std::vector<std::string> names{"W_Q", "W_K", "W_V", "W_O"};
  for (std::size_t b = 0; b < deltas.size(); ++b) {
    const int block = static_cast<int>(b) + 1;
    WeightLayer layer{block, {}};
    std::vector<Matrix> noise;
    double total = 0.0;
    for (std::size_t k = 0; k < names.size(); ++k) {
      noise.push_back(gaussian(rows, cols, 1.0, delta_rng));
      total += noise.back().squaredNorm();
    }
    const double scale = deltas[b] / std::sqrt(total);
    for (std::size_t k = 0; k < names.size(); ++k) {
      const std::string file = "L" + std::to_string(block) + "/" + names[k] + ".f32";
      const Matrix w = gaussian(rows, cols, 0.02, base_rng);
      write_f32(base_dir / file, w);
      write_f32(sft_dir / file, w + scale * noise[k]);
      layer.matrices.push_back({names[k], file, rows, cols});
    }
    base.layers.push_back(layer);
    sft.layers.push_back(std::move(layer));
  }
  write_weight_manifest(base_dir, base);
  write_weight_manifest(sft_dir, sft);
}

std::vector<double> localization_deltas(int num_layers, double inject_depth_fraction) {
  const int inject = injection_layer(num_layers, inject_depth_fraction);
  std::vector<double> out;
  for (int block = 1; block <= num_layers; ++block) {
    out.push_back(block >= inject ? 0.05 + 0.01 * (block - inject + 1) : 0.01 + 0.0005 * block);
  }
  return out;
}

}  // namespace sftscope
