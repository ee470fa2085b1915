#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "crpsrft/dynamics.hpp"
#include "crpsrft/errors.hpp"
#include "crpsrft/model.hpp"
#include "crpsrft/modulation.hpp"
#include "crpsrft/objectives.hpp"
#include "crpsrft/rng.hpp"

namespace crpsrft {

// ---------------------------------------------------------------------------
// Optimiser
// ---------------------------------------------------------------------------

struct ParamGroup {
  std::vector<Tensor> params;
  double lr = 1e-3;
  double weight_decay = 0.0;
};

/// AdamW with decoupled weight decay: the decay term lr*wd*p bypasses the
/// moment estimates entirely, so zero gradients still shrink parameters by
/// exactly (1 - lr*wd) per step.
class AdamW {
 public:
  explicit AdamW(std::vector<ParamGroup> groups, double beta1 = 0.9,
                 double beta2 = 0.999, double eps = 1e-8)
      : groups_(std::move(groups)), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (const ParamGroup& g : groups_) {
      if (g.lr < 0.0 || g.weight_decay < 0.0)
        throw ConfigError("AdamW: negative learning rate or weight decay");
      for (const Tensor& p : g.params) {
        m_.emplace_back(p.size(), 0.0);
        v_.emplace_back(p.size(), 0.0);
      }
    }
  }

  void step(double lr_scale = 1.0) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    std::size_t slot = 0;
    for (ParamGroup& g : groups_) {
      const double lr = g.lr * lr_scale;
      for (Tensor& p : g.params) {
        std::vector<double>& m = m_[slot];
        std::vector<double>& v = v_[slot];
        ++slot;
        std::vector<double>& x = p.mutable_data();
        const std::vector<double>* grad =
            p.has_grad() ? &p.grad() : nullptr;
        for (std::size_t i = 0; i < x.size(); ++i) {
          const double gi = grad ? (*grad)[i] : 0.0;
          m[i] = beta1_ * m[i] + (1.0 - beta1_) * gi;
          v[i] = beta2_ * v[i] + (1.0 - beta2_) * gi * gi;
          const double mhat = m[i] / bc1;
          const double vhat = v[i] / bc2;
          x[i] -= lr * mhat / (std::sqrt(vhat) + eps_);
          x[i] -= lr * g.weight_decay * x[i];
        }
      }
    }
  }

  void zero_grad() {
    for (ParamGroup& g : groups_)
      for (Tensor& p : g.params) p.zero_grad();
  }

  std::size_t steps_taken() const { return t_; }
  const std::vector<ParamGroup>& groups() const { return groups_; }

 private:
  std::vector<ParamGroup> groups_;
  double beta1_, beta2_, eps_;
  std::size_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

inline double global_grad_norm(const std::vector<Tensor>& params) {
  double sq = 0.0;
  for (const Tensor& p : params) {
    if (!p.has_grad()) continue;
    for (double g : p.grad()) sq += g * g;
  }
  return std::sqrt(sq);
}

/// Scales every gradient by min(1, max_norm/||g||_2) and returns the scale.
inline double clip_grad_norm(std::vector<Tensor>& params, double max_norm) {
  if (max_norm <= 0.0) throw ConfigError("clip_grad_norm: max_norm must be > 0");
  const double norm = global_grad_norm(params);
  if (norm <= max_norm || norm == 0.0) return 1.0;
  const double scale = max_norm / norm;
  for (Tensor& p : params) {
    if (!p.has_grad()) continue;
    for (double& g : p.mutable_grad()) g *= scale;
  }
  return scale;
}

// ---------------------------------------------------------------------------
// Learning-rate schedule
// ---------------------------------------------------------------------------

enum class ScheduleKind { inv_sqrt, cosine };

inline std::string schedule_name(ScheduleKind k) {
  return k == ScheduleKind::inv_sqrt ? "inv_sqrt" : "cosine";
}

inline ScheduleKind schedule_from_name(const std::string& s) {
  if (s == "inv_sqrt") return ScheduleKind::inv_sqrt;
  if (s == "cosine") return ScheduleKind::cosine;
  throw ConfigError("unknown schedule \"" + s + "\" (inv_sqrt|cosine)");
}

struct ScheduleConfig {
  ScheduleKind kind = ScheduleKind::inv_sqrt;
  std::size_t warmup_steps = 1;
  std::size_t cooldown_steps = 0;
  std::size_t total_steps = 1;

  void validate() const {
    if (total_steps == 0) throw ConfigError("schedule: total_steps must be > 0");
    if (warmup_steps == 0)
      throw ConfigError("schedule: warmup_steps must be > 0");
    if (warmup_steps + cooldown_steps > total_steps)
      throw ConfigError("schedule: warmup (" + std::to_string(warmup_steps) +
                        ") + cooldown (" + std::to_string(cooldown_steps) +
                        ") exceed total steps (" + std::to_string(total_steps) +
                        ")");
  }
};

/// Multiplier for 1-based step numbers; step 0 (before any update) maps to 0.
inline double lr_schedule(std::size_t step, const ScheduleConfig& cfg) {
  cfg.validate();
  if (step == 0) return 0.0;
  if (step > cfg.total_steps) return 0.0;
  const double w = static_cast<double>(cfg.warmup_steps);
  if (cfg.kind == ScheduleKind::cosine) {
    if (step <= cfg.warmup_steps) return static_cast<double>(step) / w;
    const double span = static_cast<double>(cfg.total_steps - cfg.warmup_steps);
    return 0.5 *
           (1.0 + std::cos(M_PI * static_cast<double>(step - cfg.warmup_steps) /
                           span));
  }
  double base;
  if (step <= cfg.warmup_steps)
    base = static_cast<double>(step) / w;
  else
    base = std::sqrt(w / static_cast<double>(step));
  if (cfg.cooldown_steps > 0) {
    const std::size_t ramp_from = cfg.total_steps - cfg.cooldown_steps;
    if (step > ramp_from)
      base *= static_cast<double>(cfg.total_steps - step) /
              static_cast<double>(cfg.cooldown_steps);
  }
  return base;
}

// ---------------------------------------------------------------------------
// Train configuration and log
// ---------------------------------------------------------------------------

enum class LossKind { mae, mse, fair_crps };

inline std::string loss_name(LossKind k) {
  switch (k) {
    case LossKind::mae: return "mae";
    case LossKind::mse: return "mse";
    default: return "fair_crps";
  }
}

inline LossKind loss_from_name(const std::string& s) {
  if (s == "mae") return LossKind::mae;
  if (s == "mse") return LossKind::mse;
  if (s == "fair_crps") return LossKind::fair_crps;
  throw ConfigError("unknown loss \"" + s + "\" (mae|mse|fair_crps)");
}

struct TrainConfig {
  LossKind loss = LossKind::mae;
  double lr_backbone = 1e-3;
  double lr_noise = 3e-3;  // retrofit only
  double weight_decay = 1e-4;
  ScheduleKind schedule = ScheduleKind::inv_sqrt;
  std::size_t warmup_epochs = 1;
  std::size_t cooldown_epochs = 0;
  double grad_clip_norm = 10.0;
  std::size_t batch_size = 16;
  std::size_t m_train = 4;
  std::size_t epochs = 10;
  std::size_t steps_per_epoch = 100;
  std::uint64_t seed = 0;

  void validate() const {
    if (batch_size == 0 || epochs == 0 || steps_per_epoch == 0)
      throw ConfigError("train: batch_size, epochs, steps_per_epoch must be > 0");
    if (m_train == 0) throw ConfigError("train: m_train must be > 0");
    if (lr_backbone < 0.0 || lr_noise < 0.0 || weight_decay < 0.0)
      throw ConfigError("train: negative learning rate or weight decay");
    if (grad_clip_norm <= 0.0)
      throw ConfigError("train: grad_clip_norm must be > 0");
    schedule_config().validate();
  }

  ScheduleConfig schedule_config() const {
    ScheduleConfig s;
    s.kind = schedule;
    s.warmup_steps = std::max<std::size_t>(1, warmup_epochs * steps_per_epoch);
    s.cooldown_steps = cooldown_epochs * steps_per_epoch;
    s.total_steps = epochs * steps_per_epoch;
    return s;
  }
};

struct TrainLogRow {
  std::size_t epoch = 0;
  std::size_t step = 0;
  double lr_backbone = 0.0;
  double lr_noise = 0.0;
  double train_loss = std::numeric_limits<double>::quiet_NaN();
  double val_loss = std::numeric_limits<double>::quiet_NaN();
  double grad_norm = std::numeric_limits<double>::quiet_NaN();
  double seconds = 0.0;
};

struct TrainLog {
  std::vector<TrainLogRow> rows;

  std::string to_csv() const {
    std::string out = "epoch,step,lr_backbone,lr_noise,train_loss,val_loss,grad_norm,seconds\n";
    char buf[256];
    for (const TrainLogRow& r : rows) {
      std::snprintf(buf, sizeof buf, "%zu,%zu,%.12g,%.12g,%.12g,%.12g,%.12g,%.6g\n",
                    r.epoch, r.step, r.lr_backbone, r.lr_noise, r.train_loss,
                    r.val_loss, r.grad_norm, r.seconds);
      out += buf;
    }
    return out;
  }

  void save_csv(const std::string& path) const {
    std::ofstream f(path);
    if (!f) throw IoError("TrainLog: cannot open " + path);
    f << to_csv();
    if (!f) throw IoError("TrainLog: write failed for " + path);
  }
};

struct TrainResult {
  ModelBundle model;  // best-validation checkpoint
  TrainLog log;
  double best_val = std::numeric_limits<double>::infinity();
  std::size_t best_epoch = 0;
  std::uint64_t member_forwards = 0;
};

// ---------------------------------------------------------------------------
// Batch assembly
// ---------------------------------------------------------------------------

namespace detail {

using Window = std::pair<std::size_t, std::size_t>;  // (trajectory, newest t)

inline std::size_t window_span(const TrajectoryDataset& ds, std::size_t k) {
  if (ds.spec.n_steps < k + 1)
    throw ConfigError("train: trajectories have " +
                      std::to_string(ds.spec.n_steps) +
                      " frames, need at least history_len+1 = " +
                      std::to_string(k + 1));
  return ds.spec.n_steps - k;  // valid newest-frame times k-1 .. n_steps-2
}

inline std::vector<Window> sample_windows(const TrajectoryDataset& ds,
                                          const std::vector<std::size_t>& trajs,
                                          std::size_t k, std::size_t count,
                                          RngStream& rng) {
  if (trajs.empty()) throw ConfigError("train: split has no trajectories");
  const std::size_t span = window_span(ds, k);
  std::vector<Window> w(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t traj = trajs[rng.uniform_index(trajs.size())];
    w[i] = {traj, k - 1 + rng.uniform_index(span)};
  }
  return w;
}

/// Fixed windows for validation: up to 8 evenly spaced start times per
/// trajectory, no randomness.
inline std::vector<Window> val_windows(const TrajectoryDataset& ds,
                                       const std::vector<std::size_t>& trajs,
                                       std::size_t k) {
  const std::size_t span = window_span(ds, k);
  const std::size_t stride = std::max<std::size_t>(1, span / 8);
  std::vector<Window> w;
  for (std::size_t traj : trajs)
    for (std::size_t off = 0; off < span; off += stride)
      w.push_back({traj, k - 1 + off});
  return w;
}

inline Tensor batch_inputs(const ModelBundle& m, const TrajectoryDataset& ds,
                           const std::vector<Window>& wins) {
  const std::size_t k = m.backbone.history_len;
  std::vector<std::vector<const double*>> histories(wins.size());
  for (std::size_t b = 0; b < wins.size(); ++b) {
    histories[b].resize(k);
    for (std::size_t j = 0; j < k; ++j)
      histories[b][j] = ds.frame(wins[b].first, wins[b].second - (k - 1) + j);
  }
  return build_history_input(m, histories);
}

inline Tensor batch_targets(const ModelBundle& m, const TrajectoryDataset& ds,
                            const std::vector<Window>& wins) {
  const std::size_t c = m.backbone.channels;
  const std::size_t s = m.backbone.spatial_size();
  Shape shape;
  shape.push_back(wins.size());
  for (std::size_t e : m.backbone.spatial) shape.push_back(e);
  shape.push_back(c);
  std::vector<double> data(wins.size() * s * c);
  for (std::size_t b = 0; b < wins.size(); ++b) {
    const double* frame = ds.frame(wins[b].first, wins[b].second + 1);
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t site = 0; site < s; ++site)
        data[(b * s + site) * c + ch] =
            (frame[ch * s + site] - m.stats.mean[ch]) / m.stats.stddev[ch];
  }
  return Tensor::from_data(std::move(shape), std::move(data));
}

/// Repeats each input row m_train times, member-major: output row r = mem*B+b
/// is input row b. Member slices of the folded batch stay contiguous.
inline Tensor tile_members(const Tensor& input, std::size_t members) {
  std::vector<Tensor> copies(members, input);
  return concat(copies, 0);
}

inline Tensor det_loss(const Tensor& pred, const Tensor& target, LossKind k) {
  return k == LossKind::mse ? mse(pred, target) : mae(pred, target);
}

/// fCRPS of a folded [B*M, ...] prediction against B targets.
inline Tensor folded_crps(const Tensor& pred, const Tensor& target,
                          std::size_t members) {
  const std::size_t b = target.extent(0);
  std::vector<Tensor> slices;
  slices.reserve(members);
  for (std::size_t mem = 0; mem < members; ++mem)
    slices.push_back(slice(pred, 0, mem * b, (mem + 1) * b));
  return crps_loss(slices, target, CrpsKind::fair);
}

struct EpochStats {
  double loss_sum = 0.0;
  double norm_sum = 0.0;
  std::size_t n = 0;
};

}  // namespace detail

// ---------------------------------------------------------------------------
// Validation passes
// ---------------------------------------------------------------------------

/// Mean deterministic loss over the fixed validation windows.
inline double validate_deterministic(const ModelBundle& m,
                                     const TrajectoryDataset& ds,
                                     LossKind loss, std::size_t batch_size) {
  NoGradGuard ng;
  const std::vector<detail::Window> wins = detail::val_windows(
      ds, ds.indices_of(Split::val), m.backbone.history_len);
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t at = 0; at < wins.size(); at += batch_size) {
    const std::vector<detail::Window> chunk(
        wins.begin() + at,
        wins.begin() + std::min(wins.size(), at + batch_size));
    const Tensor pred = forward_core(m, detail::batch_inputs(m, ds, chunk));
    const Tensor tgt = detail::batch_targets(m, ds, chunk);
    sum += detail::det_loss(pred, tgt, loss).item() * chunk.size();
    n += chunk.size();
  }
  return sum / static_cast<double>(n);
}

/// Mean fair-CRPS over the fixed validation windows with m_train members.
/// Noise draws are keyed only by (seed, chunk) so the pass is deterministic.
inline double validate_crps(const ModelBundle& m, const TrajectoryDataset& ds,
                            std::size_t members, std::size_t batch_size,
                            std::uint64_t seed) {
  NoGradGuard ng;
  const std::vector<detail::Window> wins = detail::val_windows(
      ds, ds.indices_of(Split::val), m.backbone.history_len);
  double sum = 0.0;
  std::size_t n = 0;
  std::size_t chunk_id = 0;
  for (std::size_t at = 0; at < wins.size(); at += batch_size, ++chunk_id) {
    const std::vector<detail::Window> chunk(
        wins.begin() + at,
        wins.begin() + std::min(wins.size(), at + batch_size));
    const Tensor input =
        detail::tile_members(detail::batch_inputs(m, ds, chunk), members);
    const Tensor eps = sample_noise_eps(
        chunk.size() * members, m.noise->d_noise, mix_seed(seed, 23, chunk_id));
    const Tensor pred = forward_modulated(m, input, eps);
    const Tensor tgt = detail::batch_targets(m, ds, chunk);
    sum += detail::folded_crps(pred, tgt, members).item() * chunk.size();
    n += chunk.size();
  }
  return sum / static_cast<double>(n);
}

// ---------------------------------------------------------------------------
// Training loops
// ---------------------------------------------------------------------------

namespace detail {

template <class StepFn, class ValFn>
TrainResult run_training(ModelBundle& model, const TrainConfig& cfg,
                         StepFn&& do_step, ValFn&& do_val) {
  using clock = std::chrono::steady_clock;
  const ScheduleConfig sched = cfg.schedule_config();
  TrainResult res;
  res.model = clone_model(model);

  auto log_row = [&](std::size_t epoch, std::size_t step, double train_loss,
                     double val_loss, double grad_norm, double secs) {
    TrainLogRow r;
    r.epoch = epoch;
    r.step = step;
    const double scale = lr_schedule(step, sched);
    r.lr_backbone = cfg.lr_backbone * scale;
    r.lr_noise = cfg.lr_noise * scale;
    r.train_loss = train_loss;
    r.val_loss = val_loss;
    r.grad_norm = grad_norm;
    r.seconds = secs;
    res.log.rows.push_back(r);
  };

  const auto t_start = clock::now();
  const double nan = std::numeric_limits<double>::quiet_NaN();
  double val = do_val();
  res.best_val = val;
  res.best_epoch = 0;
  log_row(0, 0, nan, val, nan,
          std::chrono::duration<double>(clock::now() - t_start).count());

  std::size_t global_step = 0;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto t_epoch = clock::now();
    EpochStats stats;
    for (std::size_t s = 0; s < cfg.steps_per_epoch; ++s) {
      ++global_step;
      const auto [loss, norm] = do_step(global_step, epoch);
      if (!std::isfinite(loss))
        throw NumericError("train: non-finite loss at epoch " +
                           std::to_string(epoch) + " step " +
                           std::to_string(global_step));
      stats.loss_sum += loss;
      stats.norm_sum += norm;
      ++stats.n;
    }
    val = do_val();
    if (!std::isfinite(val))
      throw NumericError("train: non-finite validation loss after epoch " +
                         std::to_string(epoch));
    if (val < res.best_val) {
      res.best_val = val;
      res.best_epoch = epoch;
      res.model = clone_model(model);
    }
    log_row(epoch, global_step, stats.loss_sum / stats.n, val,
            stats.norm_sum / stats.n,
            std::chrono::duration<double>(clock::now() - t_epoch).count());
  }
  return res;
}

}  // namespace detail

/// Teacher-forced next-step training with MAE or MSE in normalised space.
/// Each step draws batch_size*m_train independent (trajectory, t) windows so
/// the sample throughput matches a compute-matched CRPS retrofit.
inline TrainResult train_deterministic(const TrajectoryDataset& ds,
                                       ModelBundle model,
                                       const TrainConfig& cfg) {
  cfg.validate();
  if (cfg.loss == LossKind::fair_crps)
    throw ConfigError("train_deterministic: loss must be mae or mse");
  ensure_finite_params(model);
  const std::vector<std::size_t> train_trajs = ds.indices_of(Split::train);
  const std::size_t rows = cfg.batch_size * cfg.m_train;
  const ScheduleConfig sched = cfg.schedule_config();

  std::vector<Tensor> all_params;
  for (std::size_t i = 0; i < model.params.size(); ++i)
    all_params.push_back(model.params.at(i));
  AdamW opt({ParamGroup{all_params, cfg.lr_backbone, cfg.weight_decay}});

  std::uint64_t member_forwards = 0;
  auto do_step = [&](std::size_t step, std::size_t) {
    RngStream rng(mix_seed(cfg.seed, 20, step));
    const std::vector<detail::Window> wins = detail::sample_windows(
        ds, train_trajs, model.backbone.history_len, rows, rng);
    opt.zero_grad();
    const Tensor pred = forward_core(model, detail::batch_inputs(model, ds, wins));
    const Tensor loss =
        detail::det_loss(pred, detail::batch_targets(model, ds, wins), cfg.loss);
    loss.backward();
    member_forwards += rows;
    const double norm = global_grad_norm(all_params);
    clip_grad_norm(all_params, cfg.grad_clip_norm);
    opt.step(lr_schedule(step, sched));
    return std::pair<double, double>{loss.item(), norm};
  };
  auto do_val = [&] {
    return validate_deterministic(model, ds, cfg.loss, rows);
  };

  TrainResult res = detail::run_training(model, cfg, do_step, do_val);
  res.member_forwards = member_forwards;
  return res;
}

/// Builds a fresh backbone from the dataset's training statistics and trains.
inline TrainResult train_deterministic(const TrajectoryDataset& ds,
                                       const BackboneConfig& backbone,
                                       const TrainConfig& cfg) {
  return train_deterministic(
      ds, init_backbone(backbone, compute_train_stats(ds), cfg.seed), cfg);
}

/// CRPS retrofit: attaches the noise branch to a deterministic checkpoint and
/// trains the whole model under fair CRPS with ensemble-replicated batches
/// and differential learning rates (noise branch vs backbone).
inline TrainResult retrofit_crps(const TrajectoryDataset& ds,
                                 const ModelBundle& det_checkpoint,
                                 const NoiseBranchConfig& noise_cfg,
                                 const TrainConfig& cfg) {
  cfg.validate();
  if (cfg.loss != LossKind::fair_crps)
    throw ConfigError("retrofit_crps: loss must be fair_crps");
  if (cfg.m_train < 2)
    throw ConfigError("retrofit_crps: m_train must be >= 2");
  if (cfg.lr_noise < cfg.lr_backbone)
    std::fprintf(stderr,
                 "warning: lr_noise (%g) < lr_backbone (%g); the noise branch "
                 "usually wants the larger rate\n",
                 cfg.lr_noise, cfg.lr_backbone);

  ModelBundle model = attach_noise_branch(det_checkpoint, noise_cfg, cfg.seed);
  const std::vector<std::size_t> train_trajs = ds.indices_of(Split::train);
  const ScheduleConfig sched = cfg.schedule_config();

  ParamGroup backbone_group, noise_group;
  backbone_group.lr = cfg.lr_backbone;
  backbone_group.weight_decay = cfg.weight_decay;
  noise_group.lr = cfg.lr_noise;
  noise_group.weight_decay = cfg.weight_decay;
  for (std::size_t i = 0; i < model.params.size(); ++i) {
    (is_noise_param(model.params.names()[i]) ? noise_group : backbone_group)
        .params.push_back(model.params.at(i));
  }
  std::vector<Tensor> all_params;
  for (std::size_t i = 0; i < model.params.size(); ++i)
    all_params.push_back(model.params.at(i));
  AdamW opt({backbone_group, noise_group});

  std::uint64_t member_forwards = 0;
  auto do_step = [&](std::size_t step, std::size_t) {
    RngStream rng(mix_seed(cfg.seed, 20, step));
    const std::vector<detail::Window> wins = detail::sample_windows(
        ds, train_trajs, model.backbone.history_len, cfg.batch_size, rng);
    opt.zero_grad();
    const Tensor input = detail::tile_members(
        detail::batch_inputs(model, ds, wins), cfg.m_train);
    const Tensor eps =
        sample_noise_eps(cfg.batch_size * cfg.m_train, model.noise->d_noise,
                         mix_seed(cfg.seed, 22, step));
    const Tensor pred = forward_modulated(model, input, eps);
    const Tensor loss = detail::folded_crps(
        pred, detail::batch_targets(model, ds, wins), cfg.m_train);
    loss.backward();
    member_forwards += cfg.batch_size * cfg.m_train;
    const double norm = global_grad_norm(all_params);
    clip_grad_norm(all_params, cfg.grad_clip_norm);
    opt.step(lr_schedule(step, sched));
    return std::pair<double, double>{loss.item(), norm};
  };
  auto do_val = [&] {
    return validate_crps(model, ds, cfg.m_train, cfg.batch_size, cfg.seed);
  };

  TrainResult res = detail::run_training(model, cfg, do_step, do_val);
  res.member_forwards = member_forwards;
  return res;
}

}  // namespace crpsrft
