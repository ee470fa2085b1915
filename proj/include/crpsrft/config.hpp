#pragma once

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <initializer_list>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "crpsrft/dynamics.hpp"
#include "crpsrft/errors.hpp"
#include "crpsrft/evaluation.hpp"
#include "crpsrft/model.hpp"
#include "crpsrft/training.hpp"

namespace crpsrft {

// ---------------------------------------------------------------------------
// Hashing
// ---------------------------------------------------------------------------

inline std::uint64_t fnv1a64(const char* data, std::size_t n,
                             std::uint64_t h = 0xcbf29ce484222325ull) {
  for (std::size_t i = 0; i < n; ++i) {
    h ^= static_cast<unsigned char>(data[i]);
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::uint64_t fnv1a64(const std::string& s) {
  return fnv1a64(s.data(), s.size());
}

inline std::uint64_t file_hash(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("file_hash: cannot open " + path);
  std::uint64_t h = 0xcbf29ce484222325ull;
  char buf[1 << 16];
  while (f) {
    f.read(buf, sizeof buf);
    h = fnv1a64(buf, static_cast<std::size_t>(f.gcount()), h);
  }
  return h;
}

inline std::string hash_hex(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(h));
  return buf;
}

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

struct PathsConfig {
  std::string data = "dataset.bin";
  std::string checkpoint = "model.ckpt";
  std::string base;  // starting checkpoint for retrofit-crps / finetune-det
  std::string log = "train_log.csv";
  std::string out_dir = ".";
};

/// One JSON document drives every command. All keys are optional and fall
/// back to the defaults below; unknown keys are rejected so typos cannot
/// silently revert a field to its default.
struct RunConfig {
  std::uint64_t seed = 0;
  SystemSpec system;
  BackboneConfig backbone;      // spatial defaults to the system grid
  NoiseBranchConfig noise;      // use_delta_gate defaults to long_skips
  TrainConfig train;
  EvalConfig eval;
  std::vector<std::size_t> members_sweep = {1, 2, 4, 8, 16};
  PathsConfig paths;
};

namespace detail {

inline void expect_keys(const nlohmann::json& j,
                        std::initializer_list<const char*> allowed,
                        const std::string& where) {
  if (!j.is_object())
    throw ConfigError("config: section \"" + where + "\" must be an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* k : allowed)
      if (it.key() == k) {
        ok = true;
        break;
      }
    if (!ok)
      throw ConfigError("config: unknown key \"" + it.key() + "\" in " +
                        where);
  }
}

template <class T>
void maybe(const nlohmann::json& j, const char* key, T& field) {
  if (j.contains(key)) {
    try {
      field = j.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("config: bad value for \"" + std::string(key) +
                        "\": " + e.what());
    }
  }
}

}  // namespace detail

inline RunConfig run_config_from_json(const nlohmann::json& j) {
  detail::expect_keys(j,
                      {"seed", "system", "backbone", "noise", "train", "eval",
                       "paths"},
                      "config root");
  RunConfig c;
  c.train.warmup_epochs = 5;  // retrofit default; tiny runs override it
  detail::maybe(j, "seed", c.seed);
  c.system.seed = c.seed;

  if (j.contains("system")) {
    const nlohmann::json& s = j.at("system");
    detail::expect_keys(s,
                        {"kind", "grid", "dt", "kappa", "nu", "forcing",
                         "n_trajectories", "n_steps", "seed"},
                        "system");
    if (s.contains("kind"))
      c.system.system = system_from_name(s.at("kind").get<std::string>());
    detail::maybe(s, "grid", c.system.grid);
    detail::maybe(s, "dt", c.system.dt);
    detail::maybe(s, "kappa", c.system.kappa);
    detail::maybe(s, "nu", c.system.nu);
    detail::maybe(s, "forcing", c.system.forcing);
    detail::maybe(s, "n_trajectories", c.system.n_trajectories);
    detail::maybe(s, "n_steps", c.system.n_steps);
    detail::maybe(s, "seed", c.system.seed);
  }
  if (c.system.grid.empty()) {
    switch (c.system.system) {
      case SystemKind::heat2d: c.system.grid = {64, 64}; break;
      case SystemKind::burgers1d: c.system.grid = {128}; break;
      case SystemKind::lorenz96: c.system.grid = {40}; break;
    }
  }

  if (j.contains("backbone")) {
    const nlohmann::json& b = j.at("backbone");
    detail::expect_keys(b,
                        {"history_len", "channels", "spatial", "hidden_dim",
                         "n_blocks", "norm_placement", "long_skips",
                         "predict_residual", "activation"},
                        "backbone");
    detail::maybe(b, "history_len", c.backbone.history_len);
    detail::maybe(b, "channels", c.backbone.channels);
    detail::maybe(b, "spatial", c.backbone.spatial);
    detail::maybe(b, "hidden_dim", c.backbone.hidden_dim);
    detail::maybe(b, "n_blocks", c.backbone.n_blocks);
    if (b.contains("norm_placement")) {
      const std::string np = b.at("norm_placement").get<std::string>();
      if (np != "pre" && np != "post")
        throw ConfigError("config: norm_placement must be pre or post");
      c.backbone.norm_placement =
          np == "pre" ? NormPlacement::pre : NormPlacement::post;
    }
    detail::maybe(b, "long_skips", c.backbone.long_skips);
    detail::maybe(b, "predict_residual", c.backbone.predict_residual);
    detail::maybe(b, "activation", c.backbone.activation);
  }
  if (c.backbone.spatial.empty()) c.backbone.spatial = c.system.grid;

  bool delta_set = false;
  if (j.contains("noise")) {
    const nlohmann::json& n = j.at("noise");
    detail::expect_keys(
        n, {"d_noise", "injection_density", "use_delta_gate", "init_scale"},
        "noise");
    detail::maybe(n, "d_noise", c.noise.d_noise);
    if (n.contains("injection_density")) {
      const std::string d = n.at("injection_density").get<std::string>();
      if (d != "full" && d != "half")
        throw ConfigError("config: injection_density must be full or half");
      c.noise.injection_density =
          d == "full" ? InjectionDensity::full : InjectionDensity::half;
    }
    if (n.contains("use_delta_gate")) {
      c.noise.use_delta_gate = n.at("use_delta_gate").get<bool>();
      delta_set = true;
    }
    detail::maybe(n, "init_scale", c.noise.init_scale);
  }
  if (!delta_set) c.noise.use_delta_gate = c.backbone.long_skips;

  if (j.contains("train")) {
    const nlohmann::json& t = j.at("train");
    detail::expect_keys(t,
                        {"loss", "lr_backbone", "lr_noise", "weight_decay",
                         "schedule", "warmup_epochs", "cooldown_epochs",
                         "grad_clip_norm", "batch_size", "m_train", "epochs",
                         "steps_per_epoch", "seed"},
                        "train");
    if (t.contains("loss"))
      c.train.loss = loss_from_name(t.at("loss").get<std::string>());
    detail::maybe(t, "lr_backbone", c.train.lr_backbone);
    detail::maybe(t, "lr_noise", c.train.lr_noise);
    detail::maybe(t, "weight_decay", c.train.weight_decay);
    if (t.contains("schedule"))
      c.train.schedule =
          schedule_from_name(t.at("schedule").get<std::string>());
    detail::maybe(t, "warmup_epochs", c.train.warmup_epochs);
    detail::maybe(t, "cooldown_epochs", c.train.cooldown_epochs);
    detail::maybe(t, "grad_clip_norm", c.train.grad_clip_norm);
    detail::maybe(t, "batch_size", c.train.batch_size);
    detail::maybe(t, "m_train", c.train.m_train);
    detail::maybe(t, "epochs", c.train.epochs);
    detail::maybe(t, "steps_per_epoch", c.train.steps_per_epoch);
  }
  c.train.seed = c.seed;

  if (j.contains("eval")) {
    const nlohmann::json& e = j.at("eval");
    detail::expect_keys(
        e, {"m_eval", "horizon", "noise_mode", "n_boot", "members_sweep"},
        "eval");
    detail::maybe(e, "m_eval", c.eval.m_eval);
    detail::maybe(e, "horizon", c.eval.horizon);
    if (e.contains("noise_mode"))
      c.eval.noise_mode =
          noise_mode_from_name(e.at("noise_mode").get<std::string>());
    detail::maybe(e, "n_boot", c.eval.n_boot);
    detail::maybe(e, "members_sweep", c.members_sweep);
  }
  c.eval.seed = c.seed;

  if (j.contains("paths")) {
    const nlohmann::json& p = j.at("paths");
    detail::expect_keys(p, {"data", "checkpoint", "base", "log", "out_dir"},
                        "paths");
    detail::maybe(p, "data", c.paths.data);
    detail::maybe(p, "checkpoint", c.paths.checkpoint);
    detail::maybe(p, "base", c.paths.base);
    detail::maybe(p, "log", c.paths.log);
    detail::maybe(p, "out_dir", c.paths.out_dir);
  }
  return c;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("config: cannot open " + path);
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config: " + path + " is not valid JSON: " + e.what());
  }
  return run_config_from_json(j);
}

/// Canonical dump of the fully-defaulted document; two configs that resolve
/// to the same effective settings share a hash regardless of key order or
/// omitted defaults.
inline nlohmann::json run_config_to_json(const RunConfig& c) {
  nlohmann::json eval = {{"m_eval", c.eval.m_eval},
                         {"horizon", c.eval.horizon},
                         {"noise_mode", noise_mode_name(c.eval.noise_mode)},
                         {"n_boot", c.eval.n_boot},
                         {"members_sweep", c.members_sweep}};
  nlohmann::json train = {{"loss", loss_name(c.train.loss)},
                          {"lr_backbone", c.train.lr_backbone},
                          {"lr_noise", c.train.lr_noise},
                          {"weight_decay", c.train.weight_decay},
                          {"schedule", schedule_name(c.train.schedule)},
                          {"warmup_epochs", c.train.warmup_epochs},
                          {"cooldown_epochs", c.train.cooldown_epochs},
                          {"grad_clip_norm", c.train.grad_clip_norm},
                          {"batch_size", c.train.batch_size},
                          {"m_train", c.train.m_train},
                          {"epochs", c.train.epochs},
                          {"steps_per_epoch", c.train.steps_per_epoch}};
  return {{"seed", c.seed},
          {"system", c.system},
          {"backbone", c.backbone},
          {"noise", c.noise},
          {"train", train},
          {"eval", eval}};
}

/// Provenance hash; deliberately excludes the paths section so moving
/// artifacts around does not change a run's identity.
inline std::uint64_t config_hash(const RunConfig& c) {
  return fnv1a64(run_config_to_json(c).dump());
}

}  // namespace crpsrft
