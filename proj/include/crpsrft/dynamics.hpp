#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "crpsrft/errors.hpp"
#include "crpsrft/parallel.hpp"
#include "crpsrft/rng.hpp"

namespace crpsrft {

enum class SystemKind { heat2d, burgers1d, lorenz96 };

inline std::string system_name(SystemKind k) {
  switch (k) {
    case SystemKind::heat2d: return "heat2d";
    case SystemKind::burgers1d: return "burgers1d";
    case SystemKind::lorenz96: return "lorenz96";
  }
  throw ValueError("system_name: unknown system kind");
}

inline SystemKind system_from_name(const std::string& name) {
  if (name == "heat2d") return SystemKind::heat2d;
  if (name == "burgers1d") return SystemKind::burgers1d;
  if (name == "lorenz96") return SystemKind::lorenz96;
  throw ConfigError("unknown system \"" + name +
                    "\" (expected heat2d, burgers1d or lorenz96)");
}

struct SystemSpec {
  SystemKind system = SystemKind::lorenz96;
  std::vector<std::size_t> grid;  // heat2d {H,W}; burgers1d {S}; lorenz96 {N}
  double dt = 0.05;
  double kappa = 1e-3;   // heat2d diffusivity
  double nu = 5e-3;      // burgers1d viscosity
  double forcing = 8.0;  // lorenz96 F
  std::size_t n_trajectories = 16;
  std::size_t n_steps = 64;  // frames per trajectory, including the initial one
  std::uint64_t seed = 0;

  std::size_t spatial_size() const {
    std::size_t s = 1;
    for (std::size_t e : grid) s *= e;
    return s;
  }
  std::size_t frame_size() const { return spatial_size(); }  // one channel
};

enum class Split : int { train = 0, val = 1, test = 2 };

/// Per-channel normalisation statistics, computed over the train split only.
struct ChannelStats {
  std::vector<double> mean;
  std::vector<double> stddev;
};

struct TrajectoryDataset {
  SystemSpec spec;
  // [N, T, C=1, spatial...] row-major; values are f32-representable
  std::vector<double> states;
  ChannelStats stats;
  std::vector<Split> split;

  std::size_t n_trajectories() const { return spec.n_trajectories; }
  std::size_t n_steps() const { return spec.n_steps; }
  std::size_t n_channels() const { return 1; }
  std::size_t frame_size() const { return spec.frame_size(); }

  const double* frame(std::size_t traj, std::size_t t) const {
    return states.data() + (traj * n_steps() + t) * frame_size();
  }
  double* frame(std::size_t traj, std::size_t t) {
    return states.data() + (traj * n_steps() + t) * frame_size();
  }

  std::vector<std::size_t> indices_of(Split s) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < split.size(); ++i)
      if (split[i] == s) out.push_back(i);
    return out;
  }
};

// ---------------------------------------------------------------------------
// Splits and statistics
// ---------------------------------------------------------------------------

/// Exact 80/10/10 assignment: trajectories ranked by a per-index hash of the
/// dataset seed; no index lists need to be stored.
inline std::vector<Split> assign_splits(std::uint64_t seed, std::size_t n) {
  if (n < 3) throw ValueError("assign_splits: need at least 3 trajectories");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::vector<std::uint64_t> keys(n);
  for (std::size_t i = 0; i < n; ++i) keys[i] = mix_seed(seed, 0x5417, i);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return keys[a] != keys[b] ? keys[a] < keys[b] : a < b;
  });
  const std::size_t n_val = std::max<std::size_t>(1, n / 10);
  const std::size_t n_test = std::max<std::size_t>(1, n / 10);
  std::vector<Split> split(n, Split::train);
  for (std::size_t r = 0; r < n; ++r) {
    if (r >= n - n_test)
      split[order[r]] = Split::test;
    else if (r >= n - n_test - n_val)
      split[order[r]] = Split::val;
  }
  return split;
}

inline ChannelStats compute_train_stats(const TrajectoryDataset& ds) {
  ChannelStats st;
  st.mean.assign(1, 0.0);
  st.stddev.assign(1, 0.0);
  double acc = 0.0, acc2 = 0.0;
  std::size_t count = 0;
  const std::size_t per_traj = ds.n_steps() * ds.frame_size();
  for (std::size_t i = 0; i < ds.n_trajectories(); ++i) {
    if (ds.split[i] != Split::train) continue;
    const double* p = ds.frame(i, 0);
    for (std::size_t k = 0; k < per_traj; ++k) {
      acc += p[k];
      acc2 += p[k] * p[k];
    }
    count += per_traj;
  }
  if (count == 0) throw ValueError("compute_train_stats: empty train split");
  const double mean = acc / static_cast<double>(count);
  const double var = std::max(0.0, acc2 / static_cast<double>(count) - mean * mean);
  st.mean[0] = mean;
  st.stddev[0] = std::sqrt(var);
  if (st.stddev[0] < 1e-12) st.stddev[0] = 1.0;  // constant data: no-op scaling
  return st;
}

// ---------------------------------------------------------------------------
// Solvers
// ---------------------------------------------------------------------------

namespace detail {

/// Band-limited Fourier noise on a periodic 1-D line, amplitude ~ 1/(1+k^2).
inline void fourier_noise_1d(double* u, std::size_t s, RngStream& rng,
                             int kmax = 4) {
  std::fill(u, u + s, 0.0);
  for (int k = 1; k <= kmax; ++k) {
    const double amp = 1.0 / (1.0 + static_cast<double>(k) * k);
    const double a = rng.normal() * amp;
    const double b = rng.normal() * amp;
    for (std::size_t i = 0; i < s; ++i) {
      const double phase = 2.0 * M_PI * k * static_cast<double>(i) / s;
      u[i] += a * std::cos(phase) + b * std::sin(phase);
    }
  }
  const double offset = rng.normal() * 0.25;
  for (std::size_t i = 0; i < s; ++i) u[i] += offset;
}

/// Band-limited Fourier noise on a periodic 2-D grid.
inline void fourier_noise_2d(double* u, std::size_t h, std::size_t w,
                             RngStream& rng, int kmax = 3) {
  std::fill(u, u + h * w, 0.0);
  for (int ky = -kmax; ky <= kmax; ++ky)
    for (int kx = 0; kx <= kmax; ++kx) {
      if (kx == 0 && ky <= 0) continue;  // one representative per +/- pair
      const double k2 = static_cast<double>(kx) * kx + static_cast<double>(ky) * ky;
      const double amp = 1.0 / (1.0 + k2);
      const double a = rng.normal() * amp;
      const double b = rng.normal() * amp;
      for (std::size_t y = 0; y < h; ++y) {
        const double py = 2.0 * M_PI * ky * static_cast<double>(y) / h;
        for (std::size_t x = 0; x < w; ++x) {
          const double phase = 2.0 * M_PI * kx * static_cast<double>(x) / w + py;
          u[y * w + x] += a * std::cos(phase) + b * std::sin(phase);
        }
      }
    }
}

}  // namespace detail

/// One explicit-Euler step of periodic 2-D diffusion.
inline void heat2d_step(const double* u, double* out, std::size_t h,
                        std::size_t w, double kappa, double dt) {
  const double ax = kappa * dt * static_cast<double>(w) * static_cast<double>(w);
  const double ay = kappa * dt * static_cast<double>(h) * static_cast<double>(h);
  for (std::size_t y = 0; y < h; ++y) {
    const std::size_t yn = (y + h - 1) % h, ys = (y + 1) % h;
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t xw = (x + w - 1) % w, xe = (x + 1) % w;
      const double c = u[y * w + x];
      out[y * w + x] = c +
                       ax * (u[y * w + xe] - 2.0 * c + u[y * w + xw]) +
                       ay * (u[ys * w + x] - 2.0 * c + u[yn * w + x]);
    }
  }
}

inline TrajectoryDataset solve_heat2d(const SystemSpec& spec) {
  if (spec.grid.size() != 2)
    throw ConfigError("heat2d: grid must be {H,W}, got " +
                      std::to_string(spec.grid.size()) + " extents");
  const std::size_t h = spec.grid[0], w = spec.grid[1];
  const double rx = spec.kappa * spec.dt * static_cast<double>(w) * w;
  const double ry = spec.kappa * spec.dt * static_cast<double>(h) * h;
  if (rx > 0.25 || ry > 0.25) {
    char buf[160];
    std::snprintf(buf, sizeof buf,
                  "heat2d: stability violated: kappa*dt/dx^2 = %.6g, "
                  "kappa*dt/dy^2 = %.6g (both must be <= 0.25)",
                  rx, ry);
    throw ConfigError(buf);
  }

  TrajectoryDataset ds;
  ds.spec = spec;
  ds.states.resize(spec.n_trajectories * spec.n_steps * spec.frame_size());
  parallel_for(spec.n_trajectories, [&](std::size_t traj) {
    RngStream rng(mix_seed(spec.seed, 1, traj));
    detail::fourier_noise_2d(ds.frame(traj, 0), h, w, rng);
    for (std::size_t t = 1; t < spec.n_steps; ++t)
      heat2d_step(ds.frame(traj, t - 1), ds.frame(traj, t), h, w, spec.kappa,
                  spec.dt);
  });
  return ds;
}

/// Godunov flux for f(u) = u^2/2.
inline double burgers_flux(double ul, double ur) {
  auto f = [](double u) { return 0.5 * u * u; };
  if (ul <= ur) {
    if (ul <= 0.0 && 0.0 <= ur) return 0.0;  // rarefaction through sonic point
    return std::min(f(ul), f(ur));
  }
  return std::max(f(ul), f(ur));
}

/// One conservative finite-volume step (Godunov advection + explicit
/// diffusion) on a periodic line.
inline void burgers1d_step(const double* u, double* out, std::size_t s,
                           double nu, double dt) {
  const double dx = 1.0 / static_cast<double>(s);
  const double adv = dt / dx;
  const double dif = nu * dt / (dx * dx);
  for (std::size_t i = 0; i < s; ++i) {
    const std::size_t il = (i + s - 1) % s, ir = (i + 1) % s;
    const double flux_r = burgers_flux(u[i], u[ir]);
    const double flux_l = burgers_flux(u[il], u[i]);
    out[i] = u[i] - adv * (flux_r - flux_l) +
             dif * (u[ir] - 2.0 * u[i] + u[il]);
  }
}

inline TrajectoryDataset solve_burgers1d(const SystemSpec& spec) {
  if (spec.grid.size() != 1)
    throw ConfigError("burgers1d: grid must be {S}");
  const std::size_t s = spec.grid[0];
  const double dx = 1.0 / static_cast<double>(s);

  TrajectoryDataset ds;
  ds.spec = spec;
  ds.states.resize(spec.n_trajectories * spec.n_steps * spec.frame_size());
  parallel_for(spec.n_trajectories, [&](std::size_t traj) {
    RngStream rng(mix_seed(spec.seed, 2, traj));
    double* frame0 = ds.frame(traj, 0);
    detail::fourier_noise_1d(frame0, s, rng);
    std::vector<double> cur(frame0, frame0 + s), nxt(s);
    for (std::size_t t = 1; t < spec.n_steps; ++t) {
      // internal sub-steps sized for both CFL and diffusion limits
      double umax = 0.0;
      for (double v : cur) umax = std::max(umax, std::fabs(v));
      const double lim_adv = umax > 0.0 ? 0.5 * dx / umax : spec.dt;
      const double lim_dif =
          spec.nu > 0.0 ? 0.25 * dx * dx / spec.nu : spec.dt;
      const double dt_safe = 0.9 * std::min(lim_adv, lim_dif);
      const std::size_t n_sub = std::max<std::size_t>(
          1, static_cast<std::size_t>(std::ceil(spec.dt / dt_safe)));
      const double dt_int = spec.dt / static_cast<double>(n_sub);
      for (std::size_t k = 0; k < n_sub; ++k) {
        burgers1d_step(cur.data(), nxt.data(), s, spec.nu, dt_int);
        cur.swap(nxt);
      }
      std::copy(cur.begin(), cur.end(), ds.frame(traj, t));
    }
  });
  return ds;
}

/// dX_i/dt = (X_{i+1} - X_{i-2}) X_{i-1} - X_i + F on a periodic ring.
inline void lorenz96_rhs(const double* x, double* dx, std::size_t n,
                         double forcing) {
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t ip1 = (i + 1) % n;
    const std::size_t im1 = (i + n - 1) % n;
    const std::size_t im2 = (i + n - 2) % n;
    dx[i] = (x[ip1] - x[im2]) * x[im1] - x[i] + forcing;
  }
}

/// Classic RK4 step for Lorenz-96 (in place).
inline void lorenz96_rk4_step(double* x, std::size_t n, double dt,
                              double forcing) {
  std::vector<double> k1(n), k2(n), k3(n), k4(n), tmp(n);
  lorenz96_rhs(x, k1.data(), n, forcing);
  for (std::size_t i = 0; i < n; ++i) tmp[i] = x[i] + 0.5 * dt * k1[i];
  lorenz96_rhs(tmp.data(), k2.data(), n, forcing);
  for (std::size_t i = 0; i < n; ++i) tmp[i] = x[i] + 0.5 * dt * k2[i];
  lorenz96_rhs(tmp.data(), k3.data(), n, forcing);
  for (std::size_t i = 0; i < n; ++i) tmp[i] = x[i] + dt * k3[i];
  lorenz96_rhs(tmp.data(), k4.data(), n, forcing);
  for (std::size_t i = 0; i < n; ++i)
    x[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
}

inline constexpr double kLorenzWarmup = 10.0;  // model-time units discarded

inline TrajectoryDataset solve_lorenz96(const SystemSpec& spec) {
  if (spec.grid.size() != 1)
    throw ConfigError("lorenz96: grid must be {N}");
  const std::size_t n = spec.grid[0];
  if (n < 4) throw ConfigError("lorenz96: ring needs at least 4 sites");

  TrajectoryDataset ds;
  ds.spec = spec;
  ds.states.resize(spec.n_trajectories * spec.n_steps * spec.frame_size());
  parallel_for(spec.n_trajectories, [&](std::size_t traj) {
    double dt_int_target = 0.01;
    for (int attempt = 0;; ++attempt) {
      RngStream rng(mix_seed(spec.seed, 3, traj));
      std::vector<double> x(n);
      for (std::size_t i = 0; i < n; ++i)
        x[i] = spec.forcing + rng.normal() * 0.5;

      auto diverged = [&] {
        for (double v : x)
          if (!std::isfinite(v) || std::fabs(v) > 1e3) return true;
        return false;
      };
      auto advance = [&](double span) {
        const std::size_t n_sub = std::max<std::size_t>(
            1, static_cast<std::size_t>(std::ceil(span / dt_int_target)));
        const double dt_int = span / static_cast<double>(n_sub);
        for (std::size_t k = 0; k < n_sub; ++k)
          lorenz96_rk4_step(x.data(), n, dt_int, spec.forcing);
      };

      advance(kLorenzWarmup);
      bool ok = !diverged();
      if (ok) {
        std::copy(x.begin(), x.end(), ds.frame(traj, 0));
        for (std::size_t t = 1; t < spec.n_steps && ok; ++t) {
          advance(spec.dt);
          ok = !diverged();
          if (ok) std::copy(x.begin(), x.end(), ds.frame(traj, t));
        }
      }
      if (ok) break;
      if (attempt >= 4)
        throw NumericError("lorenz96: trajectory " + std::to_string(traj) +
                           " diverged even at internal step " +
                           std::to_string(dt_int_target));
      dt_int_target *= 0.5;
    }
  });
  return ds;
}

// ---------------------------------------------------------------------------
// Generation entry point
// ---------------------------------------------------------------------------

inline TrajectoryDataset generate_dataset(const SystemSpec& spec) {
  if (spec.n_steps < 2) throw ConfigError("n_steps must be at least 2");
  TrajectoryDataset ds;
  switch (spec.system) {
    case SystemKind::heat2d: ds = solve_heat2d(spec); break;
    case SystemKind::burgers1d: ds = solve_burgers1d(spec); break;
    case SystemKind::lorenz96: ds = solve_lorenz96(spec); break;
  }
  for (double v : ds.states)
    if (!std::isfinite(v))
      throw NumericError("generate_dataset: non-finite value in " +
                         system_name(spec.system) + " output");
  // quantise to f32 up front so in-memory data, stats and the on-disk payload
  // all describe exactly the same numbers
  for (double& v : ds.states) v = static_cast<double>(static_cast<float>(v));
  ds.split = assign_splits(spec.seed, spec.n_trajectories);
  ds.stats = compute_train_stats(ds);
  return ds;
}

// ---------------------------------------------------------------------------
// On-disk format
// ---------------------------------------------------------------------------

inline void to_json(nlohmann::json& j, const SystemSpec& s) {
  j = nlohmann::json{{"system", system_name(s.system)},
                     {"grid", s.grid},
                     {"dt", s.dt},
                     {"kappa", s.kappa},
                     {"nu", s.nu},
                     {"forcing", s.forcing},
                     {"n_trajectories", s.n_trajectories},
                     {"n_steps", s.n_steps},
                     {"seed", s.seed}};
}

inline void from_json(const nlohmann::json& j, SystemSpec& s) {
  s.system = system_from_name(j.at("system").get<std::string>());
  s.grid = j.at("grid").get<std::vector<std::size_t>>();
  s.dt = j.at("dt").get<double>();
  s.kappa = j.at("kappa").get<double>();
  s.nu = j.at("nu").get<double>();
  s.forcing = j.at("forcing").get<double>();
  s.n_trajectories = j.at("n_trajectories").get<std::size_t>();
  s.n_steps = j.at("n_steps").get<std::size_t>();
  s.seed = j.at("seed").get<std::uint64_t>();
}

namespace detail {

inline constexpr char kDatasetMagic[8] = {'C', 'R', 'P', 'S',
                                          'D', 'A', 'T', 'A'};
inline constexpr std::uint32_t kDatasetVersion = 1;

template <class T>
void write_pod(std::ofstream& f, const T& v) {
  f.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <class T>
void read_pod(std::ifstream& f, T& v, const char* what) {
  f.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!f) throw IoError(std::string("dataset: truncated while reading ") + what);
}

}  // namespace detail

inline void write_dataset(const TrajectoryDataset& ds,
                          const std::string& path) {
  for (double v : ds.states)
    if (!std::isfinite(v))
      throw NumericError("write_dataset: refusing to write non-finite value");
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("write_dataset: cannot open " + path);
  f.write(detail::kDatasetMagic, sizeof detail::kDatasetMagic);
  detail::write_pod(f, detail::kDatasetVersion);
  const std::string header = nlohmann::json(ds.spec).dump();
  detail::write_pod(f, static_cast<std::uint32_t>(header.size()));
  f.write(header.data(), static_cast<std::streamsize>(header.size()));
  const std::uint32_t n_channels = 1;
  detail::write_pod(f, n_channels);
  for (double m : ds.stats.mean) detail::write_pod(f, m);
  for (double s : ds.stats.stddev) detail::write_pod(f, s);
  for (double v : ds.states) {
    const float x = static_cast<float>(v);
    detail::write_pod(f, x);
  }
  if (!f) throw IoError("write_dataset: write failed for " + path);
}

inline TrajectoryDataset read_dataset(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("read_dataset: cannot open " + path);
  char magic[8];
  f.read(magic, sizeof magic);
  if (!f || std::memcmp(magic, detail::kDatasetMagic, sizeof magic) != 0)
    throw IoError("read_dataset: " + path + " is not a trajectory dataset");
  std::uint32_t version = 0;
  detail::read_pod(f, version, "version");
  if (version != detail::kDatasetVersion)
    throw IoError("read_dataset: unsupported version " +
                  std::to_string(version));
  std::uint32_t header_len = 0;
  detail::read_pod(f, header_len, "header length");
  std::string header(header_len, '\0');
  f.read(header.data(), header_len);
  if (!f) throw IoError("read_dataset: truncated header");
  TrajectoryDataset ds;
  try {
    ds.spec = nlohmann::json::parse(header).get<SystemSpec>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("read_dataset: bad header: ") + e.what());
  }
  std::uint32_t n_channels = 0;
  detail::read_pod(f, n_channels, "channel count");
  if (n_channels != 1)
    throw IoError("read_dataset: unsupported channel count " +
                  std::to_string(n_channels));
  ds.stats.mean.resize(n_channels);
  ds.stats.stddev.resize(n_channels);
  for (double& m : ds.stats.mean) detail::read_pod(f, m, "channel mean");
  for (double& s : ds.stats.stddev) detail::read_pod(f, s, "channel std");
  const std::size_t count =
      ds.spec.n_trajectories * ds.spec.n_steps * ds.spec.frame_size();
  ds.states.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    float x = 0.0f;
    detail::read_pod(f, x, "payload");
    ds.states[i] = static_cast<double>(x);
  }
  char extra;
  if (f.read(&extra, 1))
    throw IoError("read_dataset: trailing bytes after payload");
  ds.split = assign_splits(ds.spec.seed, ds.spec.n_trajectories);
  return ds;
}

}  // namespace crpsrft
