#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <vector>

#include "crpsrft/dynamics.hpp"
#include "crpsrft/rng.hpp"

using namespace crpsrft;

namespace {

std::string temp_path(const char* name) {
  return std::string("/tmp/crpsrft_test_") + name;
}

}  // namespace

TEST_CASE("split assignment is exact, disjoint and deterministic") {
  for (std::size_t n : {10u, 512u, 37u}) {
    auto s1 = assign_splits(99, n);
    auto s2 = assign_splits(99, n);
    REQUIRE(s1 == s2);
    std::size_t tr = 0, va = 0, te = 0;
    for (Split s : s1) {
      tr += s == Split::train;
      va += s == Split::val;
      te += s == Split::test;
    }
    REQUIRE(tr + va + te == n);
    REQUIRE(va == std::max<std::size_t>(1, n / 10));
    REQUIRE(te == std::max<std::size_t>(1, n / 10));
  }
  REQUIRE(assign_splits(99, 64) != assign_splits(100, 64));
  REQUIRE_THROWS_AS(assign_splits(1, 2), ValueError);
}

TEST_CASE("heat2d: single Fourier mode decays at the analytic rate") {
  const std::size_t n = 64;
  SystemSpec spec;
  spec.system = SystemKind::heat2d;
  spec.grid = {n, n};
  spec.kappa = 0.05;
  spec.dt = 0.25 / (spec.kappa * n * n) * 0.8;  // 80% of the stability bound
  spec.n_steps = 101;

  // drive the stepper directly with u(x) = sin(2*pi*x)
  std::vector<double> u(n * n), next(n * n);
  for (std::size_t y = 0; y < n; ++y)
    for (std::size_t x = 0; x < n; ++x)
      u[y * n + x] = std::sin(2.0 * M_PI * static_cast<double>(x) / n);
  for (int t = 0; t < 100; ++t) {
    heat2d_step(u.data(), next.data(), n, n, spec.kappa, spec.dt);
    u.swap(next);
  }
  double amp = 0.0;
  for (double v : u) amp = std::max(amp, std::fabs(v));
  const double expected =
      std::exp(-spec.kappa * 4.0 * M_PI * M_PI * 100.0 * spec.dt);
  REQUIRE(std::fabs(amp - expected) / expected < 0.01);
}

TEST_CASE("heat2d: kappa=0 freezes the field, constant IC stays constant") {
  SystemSpec spec;
  spec.system = SystemKind::heat2d;
  spec.grid = {8, 8};
  spec.kappa = 0.0;
  spec.dt = 0.1;
  spec.n_trajectories = 3;
  spec.n_steps = 5;
  spec.seed = 7;
  TrajectoryDataset ds = generate_dataset(spec);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t t = 1; t < 5; ++t)
      for (std::size_t k = 0; k < 64; ++k)
        REQUIRE(ds.frame(i, t)[k] == ds.frame(i, 0)[k]);

  std::vector<double> c(64, 3.75), out(64);
  heat2d_step(c.data(), out.data(), 8, 8, 0.3, 1e-4);
  for (double v : out) REQUIRE(v == Catch::Approx(3.75).margin(1e-14));
}

TEST_CASE("heat2d: unstable step size is refused with the violated bound") {
  SystemSpec spec;
  spec.system = SystemKind::heat2d;
  spec.grid = {32, 32};
  spec.kappa = 1.0;
  spec.dt = 1.0;  // r = 1024 >> 0.25
  spec.n_trajectories = 3;
  spec.n_steps = 4;
  try {
    solve_heat2d(spec);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    REQUIRE(std::string(e.what()).find("0.25") != std::string::npos);
  }
}

TEST_CASE("burgers1d: spatial mean conserved to rounding") {
  SystemSpec spec;
  spec.system = SystemKind::burgers1d;
  spec.grid = {128};
  spec.nu = 2e-3;
  spec.dt = 0.02;
  spec.n_trajectories = 4;
  spec.n_steps = 80;
  spec.seed = 11;
  TrajectoryDataset ds0 = solve_burgers1d(spec);  // pre-quantisation path
  for (std::size_t i = 0; i < spec.n_trajectories; ++i) {
    double mean0 = 0.0;
    for (std::size_t k = 0; k < 128; ++k) mean0 += ds0.frame(i, 0)[k];
    mean0 /= 128.0;
    for (std::size_t t = 1; t < spec.n_steps; ++t) {
      double m = 0.0;
      for (std::size_t k = 0; k < 128; ++k) m += ds0.frame(i, t)[k];
      m /= 128.0;
      REQUIRE(std::fabs(m - mean0) < 1e-10 * static_cast<double>(t));
    }
  }
}

TEST_CASE("burgers1d: large viscosity relaxes toward the spatial mean") {
  SystemSpec spec;
  spec.system = SystemKind::burgers1d;
  spec.grid = {64};
  spec.nu = 0.05;
  spec.dt = 0.05;
  spec.n_trajectories = 3;
  spec.n_steps = 60;
  spec.seed = 5;
  TrajectoryDataset ds = solve_burgers1d(spec);
  for (std::size_t i = 0; i < 3; ++i) {
    double mean = 0.0;
    for (std::size_t k = 0; k < 64; ++k) mean += ds.frame(i, 0)[k];
    mean /= 64.0;
    auto dev = [&](std::size_t t) {
      double d = 0.0;
      for (std::size_t k = 0; k < 64; ++k)
        d = std::max(d, std::fabs(ds.frame(i, t)[k] - mean));
      return d;
    };
    REQUIRE(dev(59) < 0.05 * dev(0));
  }
}

TEST_CASE("burgers1d: sine wave steepens before viscous saturation") {
  // max |du/dx| should grow during the early steepening phase
  const std::size_t s = 256;
  std::vector<double> u(s), next(s);
  for (std::size_t i = 0; i < s; ++i)
    u[i] = std::sin(2.0 * M_PI * static_cast<double>(i) / s);
  auto max_slope = [&](const std::vector<double>& v) {
    double g = 0.0;
    for (std::size_t i = 0; i < s; ++i)
      g = std::max(g, std::fabs(v[(i + 1) % s] - v[i]) * static_cast<double>(s));
    return g;
  };
  const double g0 = max_slope(u);
  const double dt = 0.5 / static_cast<double>(s) * 0.5;
  for (int t = 0; t < 200; ++t) {
    burgers1d_step(u.data(), next.data(), s, 1e-4, dt);
    u.swap(next);
  }
  REQUIRE(max_slope(u) > 1.5 * g0);
}

TEST_CASE("lorenz96: F=0 with zero state is a fixed point") {
  std::vector<double> x(12, 0.0);
  lorenz96_rk4_step(x.data(), 12, 0.05, 0.0);
  for (double v : x) REQUIRE(v == 0.0);
}

TEST_CASE("lorenz96: twin runs separate by 10x within 5 time units") {
  const std::size_t n = 40;
  SystemSpec spec;
  spec.system = SystemKind::lorenz96;
  spec.grid = {n};
  spec.forcing = 8.0;
  spec.dt = 0.05;
  spec.n_trajectories = 3;
  spec.n_steps = 2;
  spec.seed = 21;
  TrajectoryDataset ds = generate_dataset(spec);  // attractor start

  std::vector<double> a(ds.frame(0, 0), ds.frame(0, 0) + n);
  std::vector<double> b = a;
  b[0] += 1e-8;
  auto dist = [&] {
    double d = 0.0;
    for (std::size_t i = 0; i < n; ++i) d += (a[i] - b[i]) * (a[i] - b[i]);
    return std::sqrt(d);
  };
  const double d0 = dist();
  const int steps = 500;  // 5 MTU at dt_int = 0.01
  for (int t = 0; t < steps; ++t) {
    lorenz96_rk4_step(a.data(), n, 0.01, 8.0);
    lorenz96_rk4_step(b.data(), n, 0.01, 8.0);
  }
  REQUIRE(dist() >= 10.0 * d0);
}

TEST_CASE("lorenz96: RK4 shows fourth-order Richardson ratio") {
  const std::size_t n = 40;
  SystemSpec spec;
  spec.system = SystemKind::lorenz96;
  spec.grid = {n};
  spec.dt = 0.05;
  spec.n_trajectories = 3;
  spec.n_steps = 2;
  spec.seed = 33;
  TrajectoryDataset ds = generate_dataset(spec);

  // error(dt) ~ C dt^5 per step; Richardson against a dt/4 reference
  const double dt = 0.08;
  auto err_vs_ref = [&](double step) {
    std::vector<double> x(ds.frame(0, 0), ds.frame(0, 0) + n);
    std::vector<double> ref = x;
    const int ns = static_cast<int>(std::lround(dt / step));
    for (int k = 0; k < ns; ++k) lorenz96_rk4_step(x.data(), n, step, 8.0);
    for (int k = 0; k < 64; ++k) lorenz96_rk4_step(ref.data(), n, dt / 64.0, 8.0);
    double e = 0.0;
    for (std::size_t i = 0; i < n; ++i) e += (x[i] - ref[i]) * (x[i] - ref[i]);
    return std::sqrt(e);
  };
  const double e_full = err_vs_ref(dt);
  const double e_half = err_vs_ref(dt / 2.0);
  // one full step vs two half steps: global order 4 => ratio ~ 2^4
  const double ratio = e_full / e_half;
  REQUIRE(ratio > 10.0);
  REQUIRE(ratio < 24.0);
}

TEST_CASE("generated datasets are finite, normalised and deterministic") {
  SystemSpec spec;
  spec.system = SystemKind::lorenz96;
  spec.grid = {16};
  spec.dt = 0.05;
  spec.n_trajectories = 12;
  spec.n_steps = 20;
  spec.seed = 123;
  TrajectoryDataset a = generate_dataset(spec);
  TrajectoryDataset b = generate_dataset(spec);
  REQUIRE(a.states == b.states);
  REQUIRE(a.split == b.split);

  // stats describe the train split exactly (post-quantisation)
  double acc = 0.0, acc2 = 0.0;
  std::size_t cnt = 0;
  for (std::size_t i = 0; i < a.n_trajectories(); ++i) {
    if (a.split[i] != Split::train) continue;
    const double* p = a.frame(i, 0);
    for (std::size_t k = 0; k < a.n_steps() * a.frame_size(); ++k) {
      const double z = (p[k] - a.stats.mean[0]) / a.stats.stddev[0];
      acc += z;
      acc2 += z * z;
      ++cnt;
    }
  }
  REQUIRE(std::fabs(acc / cnt) < 1e-6);
  REQUIRE(std::fabs(std::sqrt(acc2 / cnt) - 1.0) < 1e-6);
}

TEST_CASE("dataset generation is thread-count invariant") {
  SystemSpec spec;
  spec.system = SystemKind::burgers1d;
  spec.grid = {32};
  spec.dt = 0.02;
  spec.n_trajectories = 8;
  spec.n_steps = 10;
  spec.seed = 77;
  setenv("CRPSRFT_THREADS", "1", 1);
  TrajectoryDataset a = generate_dataset(spec);
  setenv("CRPSRFT_THREADS", "4", 1);
  TrajectoryDataset b = generate_dataset(spec);
  unsetenv("CRPSRFT_THREADS");
  REQUIRE(a.states == b.states);
}

TEST_CASE("dataset round-trip is bit-exact") {
  SystemSpec spec;
  spec.system = SystemKind::heat2d;
  spec.grid = {8, 8};
  spec.kappa = 1e-3;
  spec.dt = 0.5;
  spec.n_trajectories = 5;
  spec.n_steps = 6;
  spec.seed = 9;
  TrajectoryDataset ds = generate_dataset(spec);
  const std::string path = temp_path("roundtrip.bin");
  write_dataset(ds, path);
  TrajectoryDataset back = read_dataset(path);
  REQUIRE(back.states == ds.states);
  REQUIRE(back.split == ds.split);
  REQUIRE(back.stats.mean == ds.stats.mean);
  REQUIRE(back.stats.stddev == ds.stats.stddev);
  REQUIRE(back.spec.grid == ds.spec.grid);
  REQUIRE(back.spec.dt == ds.spec.dt);

  // stats recomputed from the payload match the stored ones
  ChannelStats re = compute_train_stats(back);
  REQUIRE(std::fabs(re.mean[0] - back.stats.mean[0]) < 1e-6);
  REQUIRE(std::fabs(re.stddev[0] - back.stats.stddev[0]) < 1e-6);
  std::remove(path.c_str());
}

TEST_CASE("dataset reader rejects corrupt input") {
  SystemSpec spec;
  spec.system = SystemKind::lorenz96;
  spec.grid = {8};
  spec.dt = 0.05;
  spec.n_trajectories = 4;
  spec.n_steps = 4;
  spec.seed = 2;
  TrajectoryDataset ds = generate_dataset(spec);
  const std::string path = temp_path("corrupt.bin");
  write_dataset(ds, path);

  SECTION("flipped magic byte") {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(0);
    f.put('X');
    f.close();
    REQUIRE_THROWS_AS(read_dataset(path), IoError);
  }
  SECTION("corrupt header byte") {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(16);  // inside the JSON header
    f.put('\x01');
    f.close();
    REQUIRE_THROWS_AS(read_dataset(path), IoError);
  }
  SECTION("truncated payload") {
    std::ifstream in(path, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)),
                      std::istreambuf_iterator<char>());
    in.close();
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() - 7));
    out.close();
    REQUIRE_THROWS_AS(read_dataset(path), IoError);
  }
  SECTION("missing file") {
    REQUIRE_THROWS_AS(read_dataset(temp_path("nonexistent.bin")), IoError);
  }
  std::remove(path.c_str());
}
