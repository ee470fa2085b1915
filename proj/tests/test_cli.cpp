#include <catch2/catch_amalgamated.hpp>

#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "crpsrft/checkpoint.hpp"
#include "crpsrft/config.hpp"

using namespace crpsrft;
using nlohmann::json;
using Catch::Matchers::ContainsSubstring;
namespace fs = std::filesystem;

namespace {

struct CmdResult {
  int code = -1;
  std::string output;
};

struct Scratch {
  fs::path dir;
  Scratch() {
    static int counter = 0;
    dir = fs::path("/tmp") /
          ("crpsrft_cli_" + std::to_string(::getpid()) + "_" +
           std::to_string(counter++));
    fs::create_directories(dir);
  }
  ~Scratch() {
    std::error_code ec;
    fs::remove_all(dir, ec);
  }
  std::string path(const std::string& name) const {
    return (dir / name).string();
  }
  void write(const std::string& name, const std::string& text) const {
    std::ofstream f(path(name));
    f << text;
  }

  CmdResult run(const std::string& args) const {
    const std::string capture = path("last_cmd_output.txt");
    const std::string cmd =
        std::string(CRPSRFT_BIN) + " " + args + " >" + capture + " 2>&1";
    const int rc = std::system(cmd.c_str());
    CmdResult r;
    if (rc != -1 && WIFEXITED(rc)) r.code = WEXITSTATUS(rc);
    std::ifstream f(capture);
    std::stringstream ss;
    ss << f.rdbuf();
    r.output = ss.str();
    return r;
  }
};

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  REQUIRE(f.good());
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

std::size_t count_lines(const std::string& text) {
  std::size_t n = 0;
  for (char c : text)
    if (c == '\n') ++n;
  return n;
}

// one tiny run shared by the pipeline tests: 8x8 heat, 20 short trajectories
json tiny_config(const Scratch& s) {
  return json{
      {"seed", 3},
      {"system",
       {{"kind", "heat2d"}, {"grid", {8, 8}}, {"dt", 0.05}, {"kappa", 1e-3},
        {"n_trajectories", 20}, {"n_steps", 24}}},
      {"backbone",
       {{"hidden_dim", 8}, {"n_blocks", 2}, {"long_skips", true}}},
      {"noise", {{"d_noise", 4}, {"init_scale", 0.05}}},
      {"train",
       {{"loss", "mae"}, {"lr_backbone", 3e-3}, {"lr_noise", 6e-3},
        {"warmup_epochs", 1}, {"batch_size", 4}, {"m_train", 2},
        {"epochs", 2}, {"steps_per_epoch", 6}}},
      {"eval",
       {{"m_eval", 4}, {"horizon", 5}, {"n_boot", 50},
        {"members_sweep", {1, 2, 4}}}},
      {"paths",
       {{"data", s.path("data.bin")}, {"checkpoint", s.path("det.ckpt")},
        {"log", s.path("det_log.csv")}, {"out_dir", s.path("out")}}}};
}

}  // namespace

TEST_CASE("cli: generate-data is reproducible byte for byte") {
  Scratch s;
  json cfg = tiny_config(s);
  s.write("cfg.json", cfg.dump());

  CmdResult r = s.run("generate-data --config " + s.path("cfg.json"));
  INFO(r.output);
  REQUIRE(r.code == 0);
  CHECK_THAT(r.output, ContainsSubstring("20 trajectories"));
  CHECK_THAT(r.output, ContainsSubstring("train 16 / val 2 / test 2"));

  CmdResult r2 = s.run("generate-data --config " + s.path("cfg.json") +
                       " --out " + s.path("data2.bin"));
  REQUIRE(r2.code == 0);
  CHECK(slurp(s.path("data.bin")) == slurp(s.path("data2.bin")));

  const TrajectoryDataset ds = read_dataset(s.path("data.bin"));
  CHECK(ds.n_trajectories() == 20);
  CHECK(ds.n_steps() == 24);
}

TEST_CASE("cli: unstable heat settings are refused with the violated bound") {
  Scratch s;
  json cfg = tiny_config(s);
  cfg["system"]["kappa"] = 1.0;  // kappa*dt/dx^2 = 3.2 on the 8x8 grid
  s.write("cfg.json", cfg.dump());

  CmdResult r = s.run("generate-data --config " + s.path("cfg.json"));
  CHECK(r.code == 2);
  CHECK_THAT(r.output, ContainsSubstring("stability violated"));
  CHECK_THAT(r.output, ContainsSubstring("0.25"));
}

TEST_CASE("cli: config mistakes exit 2, missing inputs exit 4") {
  Scratch s;
  s.write("typo.json", R"({"trian": {"epochs": 2}})");
  CmdResult r = s.run("train-det --config " + s.path("typo.json"));
  CHECK(r.code == 2);
  CHECK_THAT(r.output, ContainsSubstring("unknown key"));

  s.write("broken.json", "{\"seed\": ");
  r = s.run("train-det --config " + s.path("broken.json"));
  CHECK(r.code == 2);
  CHECK_THAT(r.output, ContainsSubstring("not valid JSON"));

  json cfg = tiny_config(s);
  s.write("cfg.json", cfg.dump());
  r = s.run("train-det --config " + s.path("cfg.json"));  // no dataset yet
  CHECK(r.code == 4);
  CHECK_THAT(r.output, ContainsSubstring("generate-data"));

  r = s.run("evaluate --config " + s.path("cfg.json") + " --model " +
            s.path("nope.ckpt"));
  CHECK(r.code == 4);

  r = s.run("retrofit-crps --config " + s.path("cfg.json"));
  CHECK(r.code == 2);  // no --base and paths.base is empty
  CHECK_THAT(r.output, ContainsSubstring("base checkpoint"));

  r = s.run("no-such-command");
  CHECK(r.code == 2);
}

TEST_CASE("cli: the full pipeline produces coherent artifacts") {
  Scratch s;
  const json cfg = tiny_config(s);
  s.write("cfg.json", cfg.dump());
  const std::string c = " --config " + s.path("cfg.json");

  REQUIRE(s.run("generate-data" + c).code == 0);

  // deterministic pretraining
  CmdResult r = s.run("train-det" + c);
  INFO(r.output);
  REQUIRE(r.code == 0);
  const ModelBundle det = load_checkpoint(s.path("det.ckpt"));
  CHECK_FALSE(det.noise.has_value());
  CHECK(det.config_hash ==
        config_hash(load_run_config(s.path("cfg.json"))));
  const std::string log = slurp(s.path("det_log.csv"));
  CHECK(log.rfind("epoch,step,lr_backbone,lr_noise,train_loss,val_loss,"
                  "grad_norm,seconds\n", 0) == 0);
  CHECK(count_lines(log) == 1 + 1 + 2);  // header + epoch 0 + two epochs

  // retrofit on top of the deterministic checkpoint
  json rcfg = cfg;
  rcfg["train"]["loss"] = "fair_crps";
  rcfg["paths"]["checkpoint"] = s.path("retro.ckpt");
  rcfg["paths"]["log"] = s.path("retro_log.csv");
  s.write("retro.json", rcfg.dump());
  r = s.run("retrofit-crps --config " + s.path("retro.json") + " --base " +
            s.path("det.ckpt"));
  INFO(r.output);
  REQUIRE(r.code == 0);
  const ModelBundle retro = load_checkpoint(s.path("retro.ckpt"));
  REQUIRE(retro.noise.has_value());
  CHECK(retro.noise->d_noise == 4);
  CHECK(retro.noise->use_delta_gate == retro.backbone.long_skips);

  // evaluation of the retrofitted model against the deterministic baseline
  r = s.run("evaluate --config " + s.path("retro.json") + " --model " +
            s.path("retro.ckpt") + " --baseline " + s.path("det.ckpt"));
  INFO(r.output);
  REQUIRE(r.code == 0);
  CHECK_THAT(r.output, ContainsSubstring("improvement over baseline"));

  const json metrics = json::parse(slurp(s.path("out/metrics.json")));
  CHECK(metrics.at("records").size() == 2);  // test split of 20 trajectories
  CHECK(metrics.at("m_eval") == 4);
  CHECK(metrics.at("horizon") == 5);
  CHECK(metrics.at("aggregates").at("fcrps").at("median").is_number());
  const json baseline =
      json::parse(slurp(s.path("out/metrics_baseline.json")));
  CHECK(baseline.at("m_eval") == 1);

  const std::string mcsv = slurp(s.path("out/metrics.csv"));
  CHECK(mcsv.rfind("trajectory,fcrps,vrmse,skill,spread,ssr_corrected,"
                   "diverged_fraction\n", 0) == 0);
  CHECK(count_lines(mcsv) == 3);

  const json imp = json::parse(slurp(s.path("out/metrics_improvement.json")));
  CHECK(imp.at("fcrps").at("median_percent").is_number());
  CHECK(imp.at("vrmse").at("ci95").size() == 2);

  // a model evaluated against itself improves by exactly nothing
  json scfg = rcfg;
  scfg["paths"]["out_dir"] = s.path("self");
  s.write("self.json", scfg.dump());
  r = s.run("evaluate --config " + s.path("self.json") + " --model " +
            s.path("retro.ckpt") + " --baseline " + s.path("retro.ckpt"));
  REQUIRE(r.code == 0);
  const json self =
      json::parse(slurp(s.path("self/metrics_improvement.json")));
  CHECK(self.at("fcrps").at("median_percent").get<double>() == 0.0);
  CHECK(self.at("fcrps").at("ci95").at(0).get<double>() == 0.0);
  CHECK(self.at("fcrps").at("ci95").at(1).get<double>() == 0.0);

  // ensemble scaling: the curve is normalised by the single-member point
  r = s.run("ensemble-scaling --config " + s.path("retro.json") +
            " --model " + s.path("retro.ckpt"));
  INFO(r.output);
  REQUIRE(r.code == 0);
  const std::string scsv = slurp(s.path("out/scaling.csv"));
  CHECK(scsv.rfind("members,median_vrmse,normalised\n", 0) == 0);
  CHECK(count_lines(scsv) == 4);
  CHECK_THAT(scsv, ContainsSubstring("\n1,"));
  const json scaling = json::parse(slurp(s.path("out/scaling.json")));
  CHECK(scaling.at("rows").at(0).at("normalised").get<double>() == 1.0);

  r = s.run("ensemble-scaling --config " + s.path("cfg.json") + " --model " +
            s.path("det.ckpt"));
  CHECK(r.code == 2);  // no noise branch to sample from
  CHECK_THAT(r.output, ContainsSubstring("noise branch"));

  // report merges everything recorded in the manifest
  r = s.run("report --runs " + s.path("out"));
  INFO(r.output);
  REQUIRE(r.code == 0);
  const std::string merged = slurp(s.path("out/merged.csv"));
  CHECK(merged.rfind("run,trajectory,fcrps,vrmse,", 0) == 0);
  CHECK(count_lines(merged) == 1 + 2);  // one evaluate entry, two trajectories

  const json runs = json::parse(slurp(s.path("out/runs.json")));
  REQUIRE(runs.size() == 4);  // train-det, retrofit, evaluate, scaling
  const std::string run_id = runs.at(2).at("run").get<std::string>();
  const std::string dat = slurp(s.path("out/" + run_id + "_scaling.dat"));
  CHECK(dat.rfind("# members normalised_vrmse\n", 0) == 0);
  CHECK_THAT(dat, ContainsSubstring("\n1 1\n"));
  CHECK(fs::exists(s.path("out/" + run_id + "_fcrps.dat")));
}

TEST_CASE("cli: --match refuses mismatched compute budgets") {
  Scratch s;
  const json cfg = tiny_config(s);
  s.write("cfg.json", cfg.dump());
  REQUIRE(s.run("generate-data --config " + s.path("cfg.json")).code == 0);
  REQUIRE(s.run("train-det --config " + s.path("cfg.json")).code == 0);

  json peer = cfg;
  peer["train"]["epochs"] = 3;
  s.write("peer.json", peer.dump());

  json rcfg = cfg;
  rcfg["train"]["loss"] = "fair_crps";
  rcfg["paths"]["checkpoint"] = s.path("retro.ckpt");
  s.write("retro.json", rcfg.dump());

  CmdResult r = s.run("retrofit-crps --config " + s.path("retro.json") +
                      " --base " + s.path("det.ckpt") + " --match " +
                      s.path("peer.json"));
  CHECK(r.code == 2);
  CHECK_THAT(r.output, ContainsSubstring("member-forwards"));

  // an aligned peer passes, and the matched budgets are equal on both sides
  r = s.run("retrofit-crps --config " + s.path("retro.json") + " --base " +
            s.path("det.ckpt") + " --match " + s.path("cfg.json"));
  INFO(r.output);
  CHECK(r.code == 0);
  CHECK_THAT(r.output, ContainsSubstring("96 member-forwards"));
}

TEST_CASE("cli: report handles empty, conflicting and missing inputs") {
  Scratch s;
  CmdResult r = s.run("report --runs " + s.path("none"));
  REQUIRE(r.code == 0);
  const std::string merged = slurp(s.path("none/merged.csv"));
  CHECK(merged ==
        "run,trajectory,fcrps,vrmse,skill,spread,ssr_corrected,"
        "diverged_fraction\n");

  fs::create_directories(s.path("conflict"));
  s.write("conflict/runs.json", json::array(
      {{{"run", "aa"}, {"command", "evaluate"}, {"dataset_hash", "11"},
        {"artifacts", json::object()}},
       {{"run", "aa"}, {"command", "evaluate"}, {"dataset_hash", "22"},
        {"artifacts", json::object()}}}).dump());
  r = s.run("report --runs " + s.path("conflict"));
  CHECK(r.code == 2);
  CHECK_THAT(r.output, ContainsSubstring("conflicting dataset hashes"));

  fs::create_directories(s.path("gone"));
  s.write("gone/runs.json", json::array(
      {{{"run", "bb"}, {"command", "evaluate"}, {"dataset_hash", "11"},
        {"artifacts", {{"metrics_csv", s.path("gone/absent.csv")}}}}}).dump());
  r = s.run("report --runs " + s.path("gone"));
  CHECK(r.code == 4);
  CHECK_THAT(r.output, ContainsSubstring("missing artifact"));
}
