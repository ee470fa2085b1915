#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "crpsrft/dynamics.hpp"
#include "crpsrft/errors.hpp"
#include "crpsrft/model.hpp"
#include "crpsrft/modulation.hpp"
#include "crpsrft/objectives.hpp"
#include "crpsrft/parallel.hpp"
#include "crpsrft/rng.hpp"

namespace crpsrft {

// ---------------------------------------------------------------------------
// Autoregressive rollout
// ---------------------------------------------------------------------------

enum class NoiseMode { resample, frozen };

inline std::string noise_mode_name(NoiseMode m) {
  return m == NoiseMode::resample ? "resample" : "frozen";
}

inline NoiseMode noise_mode_from_name(const std::string& s) {
  if (s == "resample") return NoiseMode::resample;
  if (s == "frozen") return NoiseMode::frozen;
  throw ConfigError("unknown noise mode \"" + s + "\" (resample|frozen)");
}

/// Physical-space member forecasts, [M, T, frame] row-major. A member whose
/// prediction goes non-finite at step t is frozen there: diverged_at = t,
/// frames from t onward are NaN and excluded from metrics.
struct EnsembleForecast {
  std::size_t members = 0;
  std::size_t horizon = 0;
  std::size_t frame_size = 0;
  std::vector<double> values;
  std::vector<std::size_t> diverged_at;  // == horizon when clean
  std::vector<double> initial_history;   // [k, frame]
  std::uint64_t seed = 0;
  std::uint64_t model_id = 0;

  const double* frame(std::size_t m, std::size_t t) const {
    return values.data() + (m * horizon + t) * frame_size;
  }
  double* frame(std::size_t m, std::size_t t) {
    return values.data() + (m * horizon + t) * frame_size;
  }
  bool ok(std::size_t m, std::size_t t) const { return t < diverged_at[m]; }

  double diverged_fraction() const {
    std::size_t clean = 0;
    for (std::size_t d : diverged_at) clean += d;
    return 1.0 - static_cast<double>(clean) /
                     static_cast<double>(members * horizon);
  }
};

/// Advances `members` independent copies of the initial history through the
/// model for `horizon` steps. Deterministic models roll a single member;
/// frozen mode reuses the step-0 noise draw for every step.
inline EnsembleForecast rollout(const ModelBundle& model,
                                const std::vector<const double*>& history,
                                std::size_t horizon, std::size_t members,
                                std::uint64_t seed,
                                NoiseMode mode = NoiseMode::resample) {
  if (horizon == 0) throw ValueError("rollout: horizon must be >= 1");
  if (members == 0) throw ValueError("rollout: need at least one member");
  if (!model.noise && members > 1)
    throw ValueError("rollout: deterministic model cannot spread " +
                     std::to_string(members) + " members; retrofit first");
  ensure_finite_params(model);
  NoGradGuard ng;

  const std::size_t k = model.backbone.history_len;
  const std::size_t fs =
      model.backbone.channels * model.backbone.spatial_size();
  if (history.size() != k)
    throw ShapeError("rollout: expected " + std::to_string(k) +
                     " history frames, got " + std::to_string(history.size()));

  EnsembleForecast fc;
  fc.members = members;
  fc.horizon = horizon;
  fc.frame_size = fs;
  fc.seed = seed;
  fc.model_id = model.config_hash;
  fc.values.assign(members * horizon * fs,
                   std::numeric_limits<double>::quiet_NaN());
  fc.diverged_at.assign(members, horizon);
  fc.initial_history.resize(k * fs);
  for (std::size_t j = 0; j < k; ++j)
    std::copy(history[j], history[j] + fs, fc.initial_history.data() + j * fs);

  // per-member history windows, physical units, oldest first
  std::vector<std::vector<double>> win(members,
                                       std::vector<double>(k * fs));
  for (std::size_t m = 0; m < members; ++m)
    std::copy(fc.initial_history.begin(), fc.initial_history.end(),
              win[m].begin());
  std::vector<std::size_t> live(members);
  for (std::size_t m = 0; m < members; ++m) live[m] = m;

  for (std::size_t t = 0; t < horizon && !live.empty(); ++t) {
    std::vector<std::vector<const double*>> hist(live.size());
    for (std::size_t r = 0; r < live.size(); ++r) {
      hist[r].resize(k);
      for (std::size_t j = 0; j < k; ++j)
        hist[r][j] = win[live[r]].data() + j * fs;
    }
    Tensor input = build_history_input(model, hist);
    Tensor out;
    if (model.noise) {
      const std::uint64_t step_key = mode == NoiseMode::frozen ? 0 : t;
      const Tensor full_eps =
          sample_noise_eps(members, model.noise->d_noise, seed, step_key);
      std::vector<double> rows(live.size() * model.noise->d_noise);
      for (std::size_t r = 0; r < live.size(); ++r)
        std::copy_n(full_eps.data().data() + live[r] * model.noise->d_noise,
                    model.noise->d_noise,
                    rows.data() + r * model.noise->d_noise);
      const Tensor eps = Tensor::from_data({live.size(), model.noise->d_noise},
                                           std::move(rows));
      out = forward_modulated(model, input, eps);
    } else {
      out = forward_core(model, input);
    }

    std::vector<std::size_t> still;
    for (std::size_t r = 0; r < live.size(); ++r) {
      const std::size_t m = live[r];
      double* dst = fc.frame(m, t);
      denormalize_into(model, out.data(), r, dst);
      bool finite = true;
      for (std::size_t i = 0; i < fs; ++i)
        if (!std::isfinite(dst[i])) {
          finite = false;
          break;
        }
      if (!finite) {
        fc.diverged_at[m] = t;
        std::fill(dst, dst + fs, std::numeric_limits<double>::quiet_NaN());
        continue;
      }
      std::vector<double>& w = win[m];
      std::copy(w.begin() + fs, w.end(), w.begin());
      std::copy(dst, dst + fs, w.end() - fs);
      still.push_back(m);
    }
    live.swap(still);
  }
  return fc;
}

// ---------------------------------------------------------------------------
// Frame-level metrics
// ---------------------------------------------------------------------------

inline constexpr double kVrmseEps = 1e-6;

/// Variance-normalised RMSE over one field; the variance is that of the TRUE
/// field, so predicting the spatial mean of the truth scores ~1.
inline double vrmse(const double* pred, const double* truth, std::size_t n) {
  if (n == 0) throw ValueError("vrmse: empty field");
  double tmean = 0.0;
  for (std::size_t i = 0; i < n; ++i) tmean += truth[i];
  tmean /= static_cast<double>(n);
  double num = 0.0, var = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = pred[i] - truth[i];
    const double c = truth[i] - tmean;
    num += d * d;
    var += c * c;
  }
  num /= static_cast<double>(n);
  var /= static_cast<double>(n);
  return std::sqrt(num / (var + kVrmseEps));
}

struct SpreadSkill {
  double skill = 0.0;
  double spread = 0.0;
  double ssr_corrected = 0.0;
  bool skill_zero = false;
};

/// Skill = RMSE of the ensemble mean; Spread = RMS of the per-site ensemble
/// standard deviation (M-1 divisor); SSR_corrected = Spread/Skill * sqrt((M+1)/M).
inline SpreadSkill skill_spread_ssr(const std::vector<const double*>& members,
                                    const double* truth, std::size_t n) {
  const std::size_t m = members.size();
  if (m < 2) throw ValueError("skill_spread_ssr: need at least two members");
  if (n == 0) throw ValueError("skill_spread_ssr: empty field");
  double skill_sq = 0.0, spread_sq = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double mean = 0.0;
    for (std::size_t j = 0; j < m; ++j) mean += members[j][i];
    mean /= static_cast<double>(m);
    double var = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      const double d = members[j][i] - mean;
      var += d * d;
    }
    var /= static_cast<double>(m - 1);
    const double e = mean - truth[i];
    skill_sq += e * e;
    spread_sq += var;
  }
  SpreadSkill out;
  out.skill = std::sqrt(skill_sq / static_cast<double>(n));
  out.spread = std::sqrt(spread_sq / static_cast<double>(n));
  const double corr =
      std::sqrt((static_cast<double>(m) + 1.0) / static_cast<double>(m));
  if (out.skill == 0.0) {
    out.skill_zero = true;
    out.ssr_corrected = std::numeric_limits<double>::infinity();
  } else {
    out.ssr_corrected = out.spread / out.skill * corr;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Per-trajectory records
// ---------------------------------------------------------------------------

struct TrajectoryRecord {
  std::size_t trajectory = 0;
  double fcrps = std::numeric_limits<double>::quiet_NaN();
  double vrmse = std::numeric_limits<double>::quiet_NaN();
  double skill = std::numeric_limits<double>::quiet_NaN();
  double spread = std::numeric_limits<double>::quiet_NaN();
  double ssr_corrected = std::numeric_limits<double>::quiet_NaN();
  double diverged_fraction = 0.0;
  bool skill_zero = false;
};

namespace detail {

/// Time-mean VRMSE of the mean over the first `prefix` members, skipping
/// frames where every prefix member has diverged.
inline double ensemble_mean_vrmse(const EnsembleForecast& fc,
                                  const std::vector<const double*>& truth,
                                  std::size_t n_channels, std::size_t prefix) {
  const std::size_t spatial = fc.frame_size / n_channels;
  std::vector<double> mean(fc.frame_size);
  double acc = 0.0;
  std::size_t frames = 0;
  for (std::size_t t = 0; t < fc.horizon; ++t) {
    std::size_t valid = 0;
    std::fill(mean.begin(), mean.end(), 0.0);
    for (std::size_t m = 0; m < prefix; ++m) {
      if (!fc.ok(m, t)) continue;
      const double* f = fc.frame(m, t);
      for (std::size_t i = 0; i < fc.frame_size; ++i) mean[i] += f[i];
      ++valid;
    }
    if (valid == 0) continue;
    for (double& v : mean) v /= static_cast<double>(valid);
    double per_frame = 0.0;
    for (std::size_t ch = 0; ch < n_channels; ++ch)
      per_frame += vrmse(mean.data() + ch * spatial,
                         truth[t] + ch * spatial, spatial);
    acc += per_frame / static_cast<double>(n_channels);
    ++frames;
  }
  return frames == 0 ? std::numeric_limits<double>::quiet_NaN()
                     : acc / static_cast<double>(frames);
}

}  // namespace detail

/// Channel- and time-averaged metrics of one forecast against the truth.
/// fCRPS degenerates to the rollout MAE for single-member (deterministic)
/// forecasts; spread/skill need at least two live members per frame, and the
/// trajectory SSR is the ratio of the time-mean spread to the time-mean skill.
inline TrajectoryRecord trajectory_metrics(
    const EnsembleForecast& fc, const std::vector<const double*>& truth,
    std::size_t n_channels) {
  if (truth.size() != fc.horizon)
    throw ShapeError("trajectory_metrics: " + std::to_string(truth.size()) +
                     " truth frames for horizon " + std::to_string(fc.horizon));
  if (n_channels == 0 || fc.frame_size % n_channels != 0)
    throw ShapeError("trajectory_metrics: frame size " +
                     std::to_string(fc.frame_size) +
                     " not divisible into " + std::to_string(n_channels) +
                     " channels");
  TrajectoryRecord rec;
  rec.diverged_fraction = fc.diverged_fraction();

  double crps_acc = 0.0;
  std::size_t crps_frames = 0;
  double skill_acc = 0.0, spread_acc = 0.0;
  std::size_t ss_frames = 0;
  bool any_skill_zero = false;
  const std::size_t spatial = fc.frame_size / n_channels;

  std::vector<const double*> valid;
  for (std::size_t t = 0; t < fc.horizon; ++t) {
    valid.clear();
    for (std::size_t m = 0; m < fc.members; ++m)
      if (fc.ok(m, t)) valid.push_back(fc.frame(m, t));
    if (valid.empty()) continue;
    crps_acc += crps_field(valid, truth[t], fc.frame_size, CrpsKind::fair);
    ++crps_frames;
    if (valid.size() >= 2) {
      double sk = 0.0, sp = 0.0;
      for (std::size_t ch = 0; ch < n_channels; ++ch) {
        std::vector<const double*> chans(valid.size());
        for (std::size_t j = 0; j < valid.size(); ++j)
          chans[j] = valid[j] + ch * spatial;
        const SpreadSkill ss =
            skill_spread_ssr(chans, truth[t] + ch * spatial, spatial);
        sk += ss.skill;
        sp += ss.spread;
        any_skill_zero = any_skill_zero || ss.skill_zero;
      }
      skill_acc += sk / static_cast<double>(n_channels);
      spread_acc += sp / static_cast<double>(n_channels);
      ++ss_frames;
    }
  }
  if (crps_frames > 0)
    rec.fcrps = crps_acc / static_cast<double>(crps_frames);
  rec.vrmse =
      detail::ensemble_mean_vrmse(fc, truth, n_channels, fc.members);
  if (ss_frames > 0) {
    rec.skill = skill_acc / static_cast<double>(ss_frames);
    rec.spread = spread_acc / static_cast<double>(ss_frames);
    const double m = static_cast<double>(fc.members);
    rec.skill_zero = any_skill_zero || rec.skill == 0.0;
    rec.ssr_corrected =
        rec.skill == 0.0
            ? std::numeric_limits<double>::infinity()
            : rec.spread / rec.skill * std::sqrt((m + 1.0) / m);
  }
  return rec;
}

// ---------------------------------------------------------------------------
// Bootstrap aggregation
// ---------------------------------------------------------------------------

namespace detail {

inline double sorted_quantile(const std::vector<double>& sorted, double q) {
  const std::size_t n = sorted.size();
  if (n == 1) return sorted[0];
  const double pos = q * static_cast<double>(n - 1);
  const std::size_t lo = static_cast<std::size_t>(pos);
  const std::size_t hi = std::min(lo + 1, n - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

inline double median_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return sorted_quantile(v, 0.5);
}

inline std::vector<std::size_t> resample_indices(std::size_t n,
                                                 std::uint64_t seed,
                                                 std::size_t iteration) {
  RngStream rng(mix_seed(seed, 7, iteration));
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = rng.uniform_index(n);
  return idx;
}

}  // namespace detail

struct MetricSummary {
  double median = std::numeric_limits<double>::quiet_NaN();
  double lo95 = std::numeric_limits<double>::quiet_NaN();
  double hi95 = std::numeric_limits<double>::quiet_NaN();
  double lo68 = std::numeric_limits<double>::quiet_NaN();
  double hi68 = std::numeric_limits<double>::quiet_NaN();
  std::size_t n_records = 0;
};

/// Trajectory bootstrap: resample records with replacement n_boot times, take
/// the median of each resample, report the median of those medians with
/// percentile intervals (2.5/97.5 and 16/84).
inline MetricSummary bootstrap_aggregate(const std::vector<double>& records,
                                         std::size_t n_boot,
                                         std::uint64_t seed) {
  if (records.empty())
    throw ValueError("bootstrap_aggregate: no records to aggregate");
  if (n_boot == 0) throw ValueError("bootstrap_aggregate: n_boot must be > 0");
  std::vector<double> medians(n_boot);
  std::vector<double> sample(records.size());
  for (std::size_t b = 0; b < n_boot; ++b) {
    const std::vector<std::size_t> idx =
        detail::resample_indices(records.size(), seed, b);
    for (std::size_t i = 0; i < idx.size(); ++i) sample[i] = records[idx[i]];
    medians[b] = detail::median_of(sample);
  }
  std::sort(medians.begin(), medians.end());
  MetricSummary s;
  s.median = detail::sorted_quantile(medians, 0.5);
  s.lo95 = detail::sorted_quantile(medians, 0.025);
  s.hi95 = detail::sorted_quantile(medians, 0.975);
  s.lo68 = detail::sorted_quantile(medians, 0.16);
  s.hi68 = detail::sorted_quantile(medians, 0.84);
  s.n_records = records.size();
  return s;
}

struct ImprovementStats {
  double median = std::numeric_limits<double>::quiet_NaN();
  double lo95 = std::numeric_limits<double>::quiet_NaN();
  double hi95 = std::numeric_limits<double>::quiet_NaN();
  double lo68 = std::numeric_limits<double>::quiet_NaN();
  double hi68 = std::numeric_limits<double>::quiet_NaN();
  std::size_t n_boot = 0;
};

/// Paired relative improvement (percent): per bootstrap iteration the SAME
/// resample indices are applied to both sets and
/// delta = (median_det - median_prob) / median_det * 100.
inline ImprovementStats paired_improvement(const std::vector<double>& det,
                                           const std::vector<double>& prob,
                                           std::size_t n_boot,
                                           std::uint64_t seed) {
  if (det.empty() || det.size() != prob.size())
    throw ValueError("paired_improvement: record sets must be non-empty and "
                     "paired 1:1 by trajectory");
  if (n_boot == 0) throw ValueError("paired_improvement: n_boot must be > 0");
  std::vector<double> deltas(n_boot);
  std::vector<double> a(det.size()), b(det.size());
  for (std::size_t it = 0; it < n_boot; ++it) {
    const std::vector<std::size_t> idx =
        detail::resample_indices(det.size(), seed, it);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      a[i] = det[idx[i]];
      b[i] = prob[idx[i]];
    }
    const double med_det = detail::median_of(a);
    const double med_prob = detail::median_of(b);
    if (med_det == 0.0)
      throw NumericError("paired_improvement: baseline median is zero");
    deltas[it] = (med_det - med_prob) / med_det * 100.0;
  }
  std::sort(deltas.begin(), deltas.end());
  ImprovementStats s;
  s.median = detail::sorted_quantile(deltas, 0.5);
  s.lo95 = detail::sorted_quantile(deltas, 0.025);
  s.hi95 = detail::sorted_quantile(deltas, 0.975);
  s.lo68 = detail::sorted_quantile(deltas, 0.16);
  s.hi68 = detail::sorted_quantile(deltas, 0.84);
  s.n_boot = n_boot;
  return s;
}

// ---------------------------------------------------------------------------
// Dataset-level evaluation
// ---------------------------------------------------------------------------

inline std::size_t default_horizon(SystemKind k) {
  switch (k) {
    case SystemKind::heat2d: return 50;
    case SystemKind::burgers1d: return 100;
    case SystemKind::lorenz96: return 100;
  }
  throw ValueError("default_horizon: unknown system kind");
}

struct EvalConfig {
  std::size_t m_eval = 16;
  std::size_t horizon = 0;  // 0 = system default
  NoiseMode noise_mode = NoiseMode::resample;
  std::size_t n_boot = 100;
  std::uint64_t seed = 0;

  std::size_t resolve_horizon(const TrajectoryDataset& ds,
                              std::size_t history_len) const {
    const std::size_t h =
        horizon == 0 ? default_horizon(ds.spec.system) : horizon;
    if (ds.spec.n_steps < history_len + h)
      throw ConfigError("evaluate: trajectories hold " +
                        std::to_string(ds.spec.n_steps) +
                        " frames; need history_len + horizon = " +
                        std::to_string(history_len + h));
    return h;
  }
};

/// Rolls out and scores every trajectory of a split. Deterministic models are
/// evaluated as single-member ensembles (the fCRPS column is then the rollout
/// MAE). Per-trajectory seeds keep the result independent of thread count.
inline std::vector<TrajectoryRecord> evaluate_split(
    const ModelBundle& model, const TrajectoryDataset& ds, Split split,
    const EvalConfig& cfg) {
  if (model.backbone.channels != ds.n_channels() ||
      model.backbone.spatial_size() != ds.frame_size() / ds.n_channels())
    throw ConfigError("evaluate: model geometry does not match the dataset");
  const std::size_t k = model.backbone.history_len;
  const std::size_t h = cfg.resolve_horizon(ds, k);
  const std::size_t members = model.noise ? cfg.m_eval : 1;
  const std::vector<std::size_t> trajs = ds.indices_of(split);
  if (trajs.empty()) throw ConfigError("evaluate: split has no trajectories");

  std::vector<TrajectoryRecord> records(trajs.size());
  parallel_for(trajs.size(), [&](std::size_t i) {
    const std::size_t traj = trajs[i];
    std::vector<const double*> history(k), truth(h);
    for (std::size_t j = 0; j < k; ++j) history[j] = ds.frame(traj, j);
    for (std::size_t t = 0; t < h; ++t) truth[t] = ds.frame(traj, k + t);
    const EnsembleForecast fc = rollout(model, history, h, members,
                                        mix_seed(cfg.seed, 5, traj),
                                        cfg.noise_mode);
    records[i] = trajectory_metrics(fc, truth, ds.n_channels());
    records[i].trajectory = traj;
  });
  return records;
}

// ---------------------------------------------------------------------------
// Report assembly
// ---------------------------------------------------------------------------

struct MetricsReport {
  std::vector<TrajectoryRecord> records;
  MetricSummary fcrps, vrmse, skill, spread, ssr_corrected;
  double diverged_fraction = 0.0;
  std::size_t n_boot = 0;
  std::uint64_t bootstrap_seed = 0;
  std::size_t m_eval = 0;
  std::size_t horizon = 0;
};

namespace detail {

inline MetricSummary summarise_finite(const std::vector<double>& values,
                                      std::size_t n_boot, std::uint64_t seed) {
  std::vector<double> finite;
  for (double v : values)
    if (std::isfinite(v)) finite.push_back(v);
  if (finite.empty()) return MetricSummary{};
  return bootstrap_aggregate(finite, n_boot, seed);
}

}  // namespace detail

inline MetricsReport aggregate_records(std::vector<TrajectoryRecord> records,
                                       std::size_t n_boot,
                                       std::uint64_t seed) {
  if (records.empty())
    throw ValueError("aggregate_records: no trajectory records");
  MetricsReport rep;
  rep.records = std::move(records);
  rep.n_boot = n_boot;
  rep.bootstrap_seed = seed;
  auto column = [&](auto getter) {
    std::vector<double> v;
    v.reserve(rep.records.size());
    for (const TrajectoryRecord& r : rep.records) v.push_back(getter(r));
    return v;
  };
  rep.fcrps = detail::summarise_finite(
      column([](const TrajectoryRecord& r) { return r.fcrps; }), n_boot, seed);
  rep.vrmse = detail::summarise_finite(
      column([](const TrajectoryRecord& r) { return r.vrmse; }), n_boot, seed);
  rep.skill = detail::summarise_finite(
      column([](const TrajectoryRecord& r) { return r.skill; }), n_boot, seed);
  rep.spread = detail::summarise_finite(
      column([](const TrajectoryRecord& r) { return r.spread; }), n_boot,
      seed);
  rep.ssr_corrected = detail::summarise_finite(
      column([](const TrajectoryRecord& r) { return r.ssr_corrected; }),
      n_boot, seed);
  double df = 0.0;
  for (const TrajectoryRecord& r : rep.records) df += r.diverged_fraction;
  rep.diverged_fraction = df / static_cast<double>(rep.records.size());
  return rep;
}

inline nlohmann::json summary_to_json(const MetricSummary& s) {
  return {{"median", s.median},
          {"ci95", {s.lo95, s.hi95}},
          {"ci68", {s.lo68, s.hi68}},
          {"n_records", s.n_records}};
}

inline nlohmann::json report_to_json(const MetricsReport& rep) {
  nlohmann::json recs = nlohmann::json::array();
  for (const TrajectoryRecord& r : rep.records)
    recs.push_back({{"trajectory", r.trajectory},
                    {"fcrps", r.fcrps},
                    {"vrmse", r.vrmse},
                    {"skill", r.skill},
                    {"spread", r.spread},
                    {"ssr_corrected", r.ssr_corrected},
                    {"diverged_fraction", r.diverged_fraction},
                    {"skill_zero", r.skill_zero}});
  return {{"records", recs},
          {"aggregates",
           {{"fcrps", summary_to_json(rep.fcrps)},
            {"vrmse", summary_to_json(rep.vrmse)},
            {"skill", summary_to_json(rep.skill)},
            {"spread", summary_to_json(rep.spread)},
            {"ssr_corrected", summary_to_json(rep.ssr_corrected)}}},
          {"diverged_fraction", rep.diverged_fraction},
          {"n_boot", rep.n_boot},
          {"bootstrap_seed", rep.bootstrap_seed},
          {"m_eval", rep.m_eval},
          {"horizon", rep.horizon}};
}

inline std::string report_to_csv(const MetricsReport& rep) {
  std::string out =
      "trajectory,fcrps,vrmse,skill,spread,ssr_corrected,diverged_fraction\n";
  char buf[256];
  for (const TrajectoryRecord& r : rep.records) {
    std::snprintf(buf, sizeof buf, "%zu,%.12g,%.12g,%.12g,%.12g,%.12g,%.12g\n",
                  r.trajectory, r.fcrps, r.vrmse, r.skill, r.spread,
                  r.ssr_corrected, r.diverged_fraction);
    out += buf;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Ensemble-size scaling
// ---------------------------------------------------------------------------

struct ScalingRow {
  std::size_t members = 0;
  double median_vrmse = 0.0;
  double normalised = 0.0;
};

/// Rollout VRMSE vs. ensemble size. One M_max-member forecast per trajectory;
/// smaller ensembles reuse its member prefixes, so rows are variance-paired.
inline std::vector<ScalingRow> ensemble_scaling_sweep(
    const ModelBundle& model, const TrajectoryDataset& ds,
    std::vector<std::size_t> ms, const EvalConfig& cfg) {
  if (!model.noise)
    throw ValueError("ensemble_scaling_sweep: model has no noise branch");
  std::sort(ms.begin(), ms.end());
  ms.erase(std::unique(ms.begin(), ms.end()), ms.end());
  if (ms.empty() || ms.front() != 1)
    throw ConfigError(
        "ensemble_scaling_sweep: member list must include the M=1 baseline");
  const std::size_t m_max = ms.back();
  const std::size_t k = model.backbone.history_len;
  const std::size_t h = cfg.resolve_horizon(ds, k);
  const std::vector<std::size_t> trajs = ds.indices_of(Split::test);
  if (trajs.empty())
    throw ConfigError("ensemble_scaling_sweep: test split is empty");

  std::vector<std::vector<double>> per_m(ms.size(),
                                         std::vector<double>(trajs.size()));
  parallel_for(trajs.size(), [&](std::size_t i) {
    const std::size_t traj = trajs[i];
    std::vector<const double*> history(k), truth(h);
    for (std::size_t j = 0; j < k; ++j) history[j] = ds.frame(traj, j);
    for (std::size_t t = 0; t < h; ++t) truth[t] = ds.frame(traj, k + t);
    const EnsembleForecast fc = rollout(model, history, h, m_max,
                                        mix_seed(cfg.seed, 5, traj),
                                        cfg.noise_mode);
    for (std::size_t mi = 0; mi < ms.size(); ++mi)
      per_m[mi][i] =
          detail::ensemble_mean_vrmse(fc, truth, ds.n_channels(), ms[mi]);
  });

  std::vector<ScalingRow> rows(ms.size());
  for (std::size_t mi = 0; mi < ms.size(); ++mi) {
    std::vector<double> finite;
    for (double v : per_m[mi])
      if (std::isfinite(v)) finite.push_back(v);
    if (finite.empty())
      throw NumericError("ensemble_scaling_sweep: every trajectory diverged");
    rows[mi].members = ms[mi];
    rows[mi].median_vrmse = detail::median_of(finite);
  }
  const double base = rows[0].median_vrmse;
  if (base == 0.0)
    throw NumericError(
        "ensemble_scaling_sweep: single-member baseline VRMSE is zero");
  for (ScalingRow& r : rows) r.normalised = r.median_vrmse / base;
  return rows;
}

}  // namespace crpsrft
