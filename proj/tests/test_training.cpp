#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <limits>
#include <vector>

#include "crpsrft/dynamics.hpp"
#include "crpsrft/model.hpp"
#include "crpsrft/training.hpp"

using namespace crpsrft;

namespace {

TrajectoryDataset tiny_heat_dataset() {
  SystemSpec spec;
  spec.system = SystemKind::heat2d;
  spec.grid = {8, 8};
  spec.n_trajectories = 16;
  spec.n_steps = 24;
  spec.dt = 0.05;
  spec.kappa = 1e-3;
  spec.seed = 5;
  return generate_dataset(spec);
}

BackboneConfig tiny_backbone() {
  BackboneConfig cfg;
  cfg.spatial = {8, 8};
  cfg.channels = 1;
  cfg.history_len = 2;
  cfg.hidden_dim = 8;
  cfg.n_blocks = 2;
  cfg.long_skips = true;
  return cfg;
}

TrainConfig tiny_train() {
  TrainConfig cfg;
  cfg.loss = LossKind::mae;
  cfg.lr_backbone = 3e-3;
  cfg.lr_noise = 6e-3;
  cfg.weight_decay = 1e-4;
  cfg.warmup_epochs = 1;
  cfg.batch_size = 4;
  cfg.m_train = 2;
  cfg.epochs = 3;
  cfg.steps_per_epoch = 15;
  cfg.seed = 9;
  return cfg;
}

ScheduleConfig sched(std::size_t warmup, std::size_t cooldown,
                     std::size_t total, ScheduleKind k = ScheduleKind::inv_sqrt) {
  ScheduleConfig s;
  s.kind = k;
  s.warmup_steps = warmup;
  s.cooldown_steps = cooldown;
  s.total_steps = total;
  return s;
}

}  // namespace

TEST_CASE("adamw applies decoupled weight decay exactly") {
  Tensor p = Tensor::from_data({4}, {1.0, -2.0, 0.5, 3.0}, true);
  const std::vector<double> before = p.data();
  AdamW opt({ParamGroup{{p}, 0.1, 0.01}});
  opt.step(1.0);  // no gradients anywhere: pure decay
  for (std::size_t i = 0; i < 4; ++i)
    REQUIRE(p.data()[i] == Catch::Approx(before[i] * (1.0 - 0.1 * 0.01))
                               .margin(1e-15));
}

TEST_CASE("adamw first step moves by ~lr against the gradient sign") {
  Tensor p = Tensor::from_data({2}, {1.0, -1.0}, true);
  p.mutable_grad() = {1.0, -2.0};
  AdamW opt({ParamGroup{{p}, 0.01, 0.0}});
  opt.step(1.0);
  // bias-corrected m/sqrt(v) = g/|g| on the first step
  REQUIRE(p.data()[0] == Catch::Approx(0.99).margin(1e-8));
  REQUIRE(p.data()[1] == Catch::Approx(-0.99).margin(1e-8));
}

TEST_CASE("adamw with zero learning rate is a no-op") {
  Tensor p = Tensor::from_data({3}, {0.3, -0.7, 2.0}, true);
  p.mutable_grad() = {5.0, -1.0, 0.25};
  const std::vector<double> before = p.data();
  AdamW opt({ParamGroup{{p}, 0.0, 0.1}});
  opt.step(1.0);
  REQUIRE(p.data() == before);
}

TEST_CASE("learning-rate schedule hits its pinned points") {
  const ScheduleConfig s = sched(100, 0, 10000);
  REQUIRE(lr_schedule(0, s) == 0.0);
  REQUIRE(lr_schedule(50, s) == Catch::Approx(0.5));
  REQUIRE(lr_schedule(100, s) == Catch::Approx(1.0));
  REQUIRE(lr_schedule(400, s) == Catch::Approx(0.5));
  REQUIRE(lr_schedule(10000, s) == Catch::Approx(0.1));

  const ScheduleConfig c = sched(100, 200, 1000);
  REQUIRE(lr_schedule(800, c) == Catch::Approx(std::sqrt(100.0 / 800.0)));
  REQUIRE(lr_schedule(900, c) ==
          Catch::Approx(std::sqrt(100.0 / 900.0) * 0.5));
  REQUIRE(lr_schedule(1000, c) == 0.0);

  const ScheduleConfig cos = sched(100, 0, 1100, ScheduleKind::cosine);
  REQUIRE(lr_schedule(100, cos) == Catch::Approx(1.0));
  REQUIRE(lr_schedule(600, cos) == Catch::Approx(0.5));
  REQUIRE(lr_schedule(1100, cos) == Catch::Approx(0.0).margin(1e-12));
}

TEST_CASE("schedule rejects warmup+cooldown beyond total") {
  REQUIRE_THROWS_AS(lr_schedule(1, sched(600, 500, 1000)), ConfigError);
  REQUIRE_NOTHROW(lr_schedule(1, sched(500, 500, 1000)));
}

TEST_CASE("gradient clipping preserves small norms and caps large ones") {
  auto make = [](std::vector<double> g) {
    Tensor p = Tensor::zeros({g.size()}, true);
    p.mutable_grad() = std::move(g);
    return p;
  };
  SECTION("norm below the cap is untouched") {
    std::vector<Tensor> ps = {make({3.0, 4.0})};  // norm 5
    REQUIRE(clip_grad_norm(ps, 10.0) == 1.0);
    REQUIRE(ps[0].grad() == std::vector<double>{3.0, 4.0});
  }
  SECTION("norm above the cap lands exactly on it") {
    std::vector<Tensor> ps = {make({12.0}), make({16.0})};  // norm 20
    const double scale = clip_grad_norm(ps, 10.0);
    REQUIRE(scale == Catch::Approx(0.5));
    REQUIRE(global_grad_norm(ps) == Catch::Approx(10.0).margin(1e-9));
  }
  SECTION("random gradients match the recomputation oracle") {
    RngStream rng(77);
    for (int rep = 0; rep < 20; ++rep) {
      std::vector<Tensor> ps;
      for (int k = 0; k < 3; ++k) {
        std::vector<double> g(5);
        for (double& v : g) v = rng.normal() * 4.0;
        ps.push_back(make(std::move(g)));
      }
      const double pre = global_grad_norm(ps);
      clip_grad_norm(ps, 3.0);
      REQUIRE(global_grad_norm(ps) ==
              Catch::Approx(std::min(pre, 3.0)).margin(1e-9));
    }
  }
}

TEST_CASE("train log serialises with the documented header") {
  TrainLog log;
  TrainLogRow r;
  r.epoch = 1;
  r.step = 15;
  r.lr_backbone = 1e-3;
  r.lr_noise = 2e-3;
  r.train_loss = 0.5;
  r.val_loss = 0.4;
  r.grad_norm = 1.25;
  r.seconds = 0.01;
  log.rows.push_back(r);
  const std::string csv = log.to_csv();
  REQUIRE(csv.rfind(
              "epoch,step,lr_backbone,lr_noise,train_loss,val_loss,grad_norm,"
              "seconds\n",
              0) == 0);
  REQUIRE(csv.find("\n1,15,0.001,0.002,0.5,0.4,1.25,0.01\n") !=
          std::string::npos);
}

TEST_CASE("deterministic training improves heat2d validation loss") {
  const TrajectoryDataset ds = tiny_heat_dataset();
  const TrainResult res = train_deterministic(ds, tiny_backbone(), tiny_train());

  REQUIRE(res.log.rows.size() == 4);  // epoch-0 eval + 3 epochs
  REQUIRE(res.log.rows[0].step == 0);
  for (std::size_t i = 1; i < res.log.rows.size(); ++i) {
    REQUIRE(res.log.rows[i].step == i * 15);
    REQUIRE(std::isfinite(res.log.rows[i].train_loss));
    REQUIRE(std::isfinite(res.log.rows[i].val_loss));
  }
  REQUIRE(res.best_val < res.log.rows[0].val_loss);
  REQUIRE(res.member_forwards == 3 * 15 * 4 * 2);
}

TEST_CASE("zero learning rate leaves the model untouched") {
  const TrajectoryDataset ds = tiny_heat_dataset();
  ModelBundle model =
      init_backbone(tiny_backbone(), compute_train_stats(ds), 3);
  const ModelBundle before = clone_model(model);
  TrainConfig cfg = tiny_train();
  cfg.lr_backbone = 0.0;
  cfg.weight_decay = 0.0;
  cfg.epochs = 2;
  cfg.steps_per_epoch = 5;
  const TrainResult res = train_deterministic(ds, model, cfg);
  for (std::size_t i = 0; i < model.params.size(); ++i)
    REQUIRE(model.params.at(i).data() == before.params.at(i).data());
  REQUIRE(res.log.rows[1].val_loss == res.log.rows[0].val_loss);
  REQUIRE(res.log.rows[2].val_loss == res.log.rows[0].val_loss);
}

TEST_CASE("fixed seed reproduces deterministic training bit for bit") {
  const TrajectoryDataset ds = tiny_heat_dataset();
  TrainConfig cfg = tiny_train();
  cfg.epochs = 2;
  cfg.steps_per_epoch = 8;
  const TrainResult a = train_deterministic(ds, tiny_backbone(), cfg);
  const TrainResult b = train_deterministic(ds, tiny_backbone(), cfg);
  REQUIRE(a.log.rows.size() == b.log.rows.size());
  for (std::size_t i = 0; i < a.log.rows.size(); ++i) {
    REQUIRE((a.log.rows[i].train_loss == b.log.rows[i].train_loss ||
             (std::isnan(a.log.rows[i].train_loss) &&
              std::isnan(b.log.rows[i].train_loss))));
    REQUIRE(a.log.rows[i].val_loss == b.log.rows[i].val_loss);
  }
  for (std::size_t i = 0; i < a.model.params.size(); ++i)
    REQUIRE(a.model.params.at(i).data() == b.model.params.at(i).data());
}

TEST_CASE("nan in the training split aborts with epoch context") {
  TrajectoryDataset ds = tiny_heat_dataset();
  for (std::size_t traj : ds.indices_of(Split::train)) {
    double* f = ds.frame(traj, 0);
    const std::size_t n = ds.spec.n_steps * ds.frame_size();
    for (std::size_t i = 0; i < n; ++i)
      f[i] = std::numeric_limits<double>::quiet_NaN();
  }
  TrainConfig cfg = tiny_train();
  cfg.epochs = 1;
  cfg.steps_per_epoch = 3;
  REQUIRE_THROWS_WITH(train_deterministic(ds, tiny_backbone(), cfg),
                      Catch::Matchers::ContainsSubstring("epoch 1"));
}

TEST_CASE("retrofit parameter groups partition the model") {
  const TrajectoryDataset ds = tiny_heat_dataset();
  ModelBundle det = init_backbone(tiny_backbone(), compute_train_stats(ds), 3);
  NoiseBranchConfig nb;
  nb.d_noise = 4;
  nb.use_delta_gate = true;
  const ModelBundle m = attach_noise_branch(det, nb, 4);
  std::size_t noise = 0, backbone = 0;
  for (const std::string& name : m.params.names())
    (is_noise_param(name) ? noise : backbone) += 1;
  REQUIRE(noise > 0);
  REQUIRE(backbone == det.params.size());
  REQUIRE(noise + backbone == m.params.size());
}

TEST_CASE("switched-off retrofit starts at the deterministic MAE") {
  const TrajectoryDataset ds = tiny_heat_dataset();
  const ModelBundle det =
      init_backbone(tiny_backbone(), compute_train_stats(ds), 3);
  NoiseBranchConfig nb;
  nb.d_noise = 4;
  nb.use_delta_gate = true;
  nb.init_scale = 0.0;

  TrainConfig cfg = tiny_train();
  cfg.loss = LossKind::fair_crps;
  cfg.epochs = 1;
  cfg.steps_per_epoch = 1;
  const TrainResult res = retrofit_crps(ds, det, nb, cfg);

  const double det_mae =
      validate_deterministic(det, ds, LossKind::mae, cfg.batch_size);
  REQUIRE(res.log.rows[0].val_loss == Catch::Approx(det_mae).margin(1e-9));
}

TEST_CASE("retrofit trains under fair crps and counts member forwards") {
  const TrajectoryDataset ds = tiny_heat_dataset();
  const ModelBundle det =
      init_backbone(tiny_backbone(), compute_train_stats(ds), 3);
  NoiseBranchConfig nb;
  nb.d_noise = 4;
  nb.use_delta_gate = true;
  nb.init_scale = 0.01;

  TrainConfig cfg = tiny_train();
  cfg.loss = LossKind::fair_crps;
  cfg.epochs = 2;
  cfg.steps_per_epoch = 6;
  const TrainResult res = retrofit_crps(ds, det, nb, cfg);

  REQUIRE(res.log.rows.size() == 3);
  for (const TrainLogRow& r : res.log.rows)
    REQUIRE(std::isfinite(r.val_loss));
  REQUIRE(res.member_forwards == 2 * 6 * cfg.batch_size * cfg.m_train);
  REQUIRE(res.log.rows[1].lr_noise > res.log.rows[1].lr_backbone);
  REQUIRE(res.model.noise.has_value());
}

TEST_CASE("retrofit and deterministic fine-tune are compute matched") {
  const TrajectoryDataset ds = tiny_heat_dataset();
  const ModelBundle det =
      init_backbone(tiny_backbone(), compute_train_stats(ds), 3);
  NoiseBranchConfig nb;
  nb.d_noise = 4;
  nb.use_delta_gate = true;

  TrainConfig cfg = tiny_train();
  cfg.epochs = 2;
  cfg.steps_per_epoch = 5;
  cfg.batch_size = 3;
  cfg.m_train = 2;

  TrainConfig crps_cfg = cfg;
  crps_cfg.loss = LossKind::fair_crps;
  const TrainResult prob = retrofit_crps(ds, det, nb, crps_cfg);
  const TrainResult base = train_deterministic(ds, clone_model(det), cfg);
  REQUIRE(prob.member_forwards == base.member_forwards);
}

TEST_CASE("config validation rejects bad hyperparameters") {
  TrainConfig cfg = tiny_train();
  cfg.batch_size = 0;
  REQUIRE_THROWS_AS(cfg.validate(), ConfigError);
  cfg = tiny_train();
  cfg.grad_clip_norm = 0.0;
  REQUIRE_THROWS_AS(cfg.validate(), ConfigError);
  cfg = tiny_train();
  cfg.warmup_epochs = 3;
  cfg.cooldown_epochs = 1;  // 3+1 epochs > 3 total
  REQUIRE_THROWS_AS(cfg.validate(), ConfigError);
  cfg = tiny_train();
  cfg.loss = LossKind::fair_crps;
  REQUIRE_THROWS_AS(
      train_deterministic(tiny_heat_dataset(), tiny_backbone(), cfg),
      ConfigError);
}
