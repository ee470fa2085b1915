#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "crpsrft/checkpoint.hpp"
#include "crpsrft/config.hpp"
#include "crpsrft/dynamics.hpp"
#include "crpsrft/evaluation.hpp"
#include "crpsrft/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace crpsrft;

namespace {

void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot open " + path + " for writing");
  f << text;
  if (!f) throw IoError("write failed for " + path);
}

void write_json(const std::string& path, const json& j) {
  write_text(path, j.dump(2) + "\n");
}

json read_json(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open " + path);
  json j;
  try {
    f >> j;
  } catch (const json::exception& e) {
    throw IoError(path + " is not valid JSON: " + std::string(e.what()));
  }
  return j;
}

std::string out_path(const RunConfig& cfg, const std::string& name) {
  fs::create_directories(cfg.paths.out_dir);
  return (fs::path(cfg.paths.out_dir) / name).string();
}

// --------------------------------------------------------------------------
// Run manifest: every producing command appends one entry; `report` merges.
// --------------------------------------------------------------------------

std::string manifest_path(const std::string& dir) {
  return (fs::path(dir) / "runs.json").string();
}

void append_manifest(const RunConfig& cfg, const std::string& command,
                     std::uint64_t dataset_hash, const json& artifacts) {
  fs::create_directories(cfg.paths.out_dir);
  const std::string path = manifest_path(cfg.paths.out_dir);
  json runs = json::array();
  if (fs::exists(path)) runs = read_json(path);
  runs.push_back({{"run", hash_hex(config_hash(cfg))},
                  {"command", command},
                  {"dataset_hash", hash_hex(dataset_hash)},
                  {"artifacts", artifacts}});
  write_json(path, runs);
}

TrajectoryDataset load_data(const std::string& path) {
  if (!fs::exists(path))
    throw IoError("dataset " + path + " does not exist; run generate-data");
  return read_dataset(path);
}

void check_geometry(const RunConfig& cfg, const TrajectoryDataset& ds) {
  if (cfg.backbone.spatial != ds.spec.grid)
    throw ConfigError("config backbone.spatial does not match the dataset grid");
  if (cfg.backbone.channels != ds.n_channels())
    throw ConfigError("config backbone.channels does not match the dataset");
}

std::uint64_t member_forward_budget(const RunConfig& cfg) {
  return static_cast<std::uint64_t>(cfg.train.epochs) *
         cfg.train.steps_per_epoch * cfg.train.batch_size * cfg.train.m_train;
}

void enforce_match(const RunConfig& cfg, const std::string& peer_path) {
  const RunConfig peer = load_run_config(peer_path);
  const std::uint64_t ours = member_forward_budget(cfg);
  const std::uint64_t theirs = member_forward_budget(peer);
  if (ours != theirs)
    throw ConfigError(
        "--match: compute budgets differ (" + std::to_string(ours) +
        " member-forwards here vs " + std::to_string(theirs) + " in " +
        peer_path + "); align epochs*steps_per_epoch*batch_size*m_train");
}

void print_train_summary(const char* what, const TrainResult& res) {
  std::printf("%s: best val %.6g at epoch %zu (%zu member-forwards)\n", what,
              res.best_val, res.best_epoch, res.member_forwards);
}

void save_train_artifacts(RunConfig& cfg, const std::string& command,
                          TrainResult& res, const std::string& data_path) {
  res.model.config_hash = config_hash(cfg);
  save_checkpoint(res.model, cfg.paths.checkpoint);
  res.log.save_csv(cfg.paths.log);
  append_manifest(cfg, command, file_hash(data_path),
                  {{"checkpoint", cfg.paths.checkpoint},
                   {"log", cfg.paths.log}});
}

// --------------------------------------------------------------------------
// Commands
// --------------------------------------------------------------------------

void cmd_generate_data(const RunConfig& cfg, const std::string& out) {
  const std::string path = out.empty() ? cfg.paths.data : out;
  const TrajectoryDataset ds = generate_dataset(cfg.system);
  write_dataset(ds, path);
  std::printf("wrote %s: %s, %zu trajectories x %zu frames, grid",
              path.c_str(), system_name(ds.spec.system).c_str(),
              ds.n_trajectories(), ds.n_steps());
  for (std::size_t e : ds.spec.grid) std::printf(" %zu", e);
  std::printf("\nsplits: train %zu / val %zu / test %zu\n",
              ds.indices_of(Split::train).size(),
              ds.indices_of(Split::val).size(),
              ds.indices_of(Split::test).size());
  for (std::size_t c = 0; c < ds.n_channels(); ++c)
    std::printf("channel %zu: mean %.6g stddev %.6g (train split)\n", c,
                ds.stats.mean[c], ds.stats.stddev[c]);
}

void cmd_train_det(RunConfig& cfg, const std::string& data) {
  if (!data.empty()) cfg.paths.data = data;
  const TrajectoryDataset ds = load_data(cfg.paths.data);
  check_geometry(cfg, ds);
  TrainResult res = train_deterministic(ds, cfg.backbone, cfg.train);
  save_train_artifacts(cfg, "train-det", res, cfg.paths.data);
  print_train_summary("train-det", res);
}

void cmd_retrofit(RunConfig& cfg, const std::string& base,
                  const std::string& data, const std::string& match) {
  if (!base.empty()) cfg.paths.base = base;
  if (!data.empty()) cfg.paths.data = data;
  if (cfg.paths.base.empty())
    throw ConfigError("retrofit-crps needs a base checkpoint (--base)");
  if (!match.empty()) enforce_match(cfg, match);
  const TrajectoryDataset ds = load_data(cfg.paths.data);
  const ModelBundle det = load_checkpoint(cfg.paths.base);
  cfg.train.loss = LossKind::fair_crps;
  // the delta gate exists exactly where the base network has long skips
  cfg.noise.use_delta_gate = det.backbone.long_skips;
  TrainResult res = retrofit_crps(ds, det, cfg.noise, cfg.train);
  save_train_artifacts(cfg, "retrofit-crps", res, cfg.paths.data);
  print_train_summary("retrofit-crps", res);
}

void cmd_finetune_det(RunConfig& cfg, const std::string& base,
                      const std::string& data, const std::string& match) {
  if (!base.empty()) cfg.paths.base = base;
  if (!data.empty()) cfg.paths.data = data;
  if (cfg.paths.base.empty())
    throw ConfigError("finetune-det needs a base checkpoint (--base)");
  if (!match.empty()) enforce_match(cfg, match);
  const TrajectoryDataset ds = load_data(cfg.paths.data);
  ModelBundle det = load_checkpoint(cfg.paths.base);
  if (det.noise)
    throw ConfigError(
        "finetune-det expects a deterministic checkpoint, this one has a "
        "noise branch");
  if (cfg.train.loss == LossKind::fair_crps) cfg.train.loss = LossKind::mae;
  // optimiser state starts fresh; only the parameters carry over
  TrainResult res = train_deterministic(ds, std::move(det), cfg.train);
  save_train_artifacts(cfg, "finetune-det", res, cfg.paths.data);
  print_train_summary("finetune-det", res);
}

json eval_one(const RunConfig& cfg, const ModelBundle& model,
              const TrajectoryDataset& ds, const std::string& prefix,
              MetricsReport* out_rep) {
  std::vector<TrajectoryRecord> records =
      evaluate_split(model, ds, Split::test, cfg.eval);
  MetricsReport rep =
      aggregate_records(std::move(records), cfg.eval.n_boot, cfg.eval.seed);
  rep.m_eval = model.noise ? cfg.eval.m_eval : 1;
  rep.horizon = cfg.eval.resolve_horizon(ds, model.backbone.history_len);
  json j = report_to_json(rep);
  j["config_hash"] = hash_hex(config_hash(cfg));
  j["model_hash"] = hash_hex(model.config_hash);
  write_json(prefix + ".json", j);
  write_text(prefix + ".csv", report_to_csv(rep));
  if (out_rep) *out_rep = std::move(rep);
  return j;
}

void cmd_evaluate(RunConfig& cfg, const std::string& model_path,
                  const std::string& baseline_path, const std::string& data,
                  std::size_t m_override) {
  if (!data.empty()) cfg.paths.data = data;
  if (m_override > 0) cfg.eval.m_eval = m_override;
  const TrajectoryDataset ds = load_data(cfg.paths.data);
  const ModelBundle model = load_checkpoint(model_path);

  const std::string prefix = out_path(cfg, "metrics");
  MetricsReport rep;
  eval_one(cfg, model, ds, prefix, &rep);
  std::printf("fcrps median %.6g  ci95 [%.6g, %.6g]  (%zu trajectories)\n",
              rep.fcrps.median, rep.fcrps.lo95, rep.fcrps.hi95,
              rep.records.size());

  json artifacts = {{"metrics_json", prefix + ".json"},
                    {"metrics_csv", prefix + ".csv"}};

  if (!baseline_path.empty()) {
    const ModelBundle baseline = load_checkpoint(baseline_path);
    MetricsReport base_rep;
    eval_one(cfg, baseline, ds, prefix + "_baseline", &base_rep);
    for (std::size_t i = 0; i < rep.records.size(); ++i)
      if (rep.records[i].trajectory != base_rep.records[i].trajectory)
        throw ValueError("evaluate: baseline records are not paired");

    auto column = [](const MetricsReport& r, auto getter) {
      std::vector<double> v;
      for (const TrajectoryRecord& rec : r.records) v.push_back(getter(rec));
      return v;
    };
    const ImprovementStats fcrps_gain = paired_improvement(
        column(base_rep, [](const TrajectoryRecord& r) { return r.fcrps; }),
        column(rep, [](const TrajectoryRecord& r) { return r.fcrps; }),
        cfg.eval.n_boot, cfg.eval.seed);
    const ImprovementStats vrmse_gain = paired_improvement(
        column(base_rep, [](const TrajectoryRecord& r) { return r.vrmse; }),
        column(rep, [](const TrajectoryRecord& r) { return r.vrmse; }),
        cfg.eval.n_boot, cfg.eval.seed);
    auto stats_json = [](const ImprovementStats& s) {
      return json{{"median_percent", s.median},
                  {"ci95", {s.lo95, s.hi95}},
                  {"ci68", {s.lo68, s.hi68}},
                  {"n_boot", s.n_boot}};
    };
    const json imp = {{"fcrps", stats_json(fcrps_gain)},
                      {"vrmse", stats_json(vrmse_gain)},
                      {"config_hash", hash_hex(config_hash(cfg))}};
    write_json(prefix + "_improvement.json", imp);
    artifacts["improvement_json"] = prefix + "_improvement.json";
    std::printf(
        "fcrps improvement over baseline: %.3f%%  ci95 [%.3f%%, %.3f%%]  "
        "ci68 [%.3f%%, %.3f%%]\n",
        fcrps_gain.median, fcrps_gain.lo95, fcrps_gain.hi95, fcrps_gain.lo68,
        fcrps_gain.hi68);
  }
  append_manifest(cfg, "evaluate", file_hash(cfg.paths.data), artifacts);
}

void cmd_ensemble_scaling(RunConfig& cfg, const std::string& model_path,
                          const std::string& data) {
  if (!data.empty()) cfg.paths.data = data;
  const TrajectoryDataset ds = load_data(cfg.paths.data);
  const ModelBundle model = load_checkpoint(model_path);
  const std::vector<ScalingRow> rows =
      ensemble_scaling_sweep(model, ds, cfg.members_sweep, cfg.eval);

  std::string csv = "members,median_vrmse,normalised\n";
  json jrows = json::array();
  char buf[128];
  for (const ScalingRow& r : rows) {
    std::snprintf(buf, sizeof buf, "%zu,%.12g,%.12g\n", r.members,
                  r.median_vrmse, r.normalised);
    csv += buf;
    jrows.push_back({{"members", r.members},
                     {"median_vrmse", r.median_vrmse},
                     {"normalised", r.normalised}});
    std::printf("M=%zu  median VRMSE %.6g  normalised %.4f\n", r.members,
                r.median_vrmse, r.normalised);
  }
  const std::string prefix = out_path(cfg, "scaling");
  write_text(prefix + ".csv", csv);
  write_json(prefix + ".json",
             {{"rows", jrows}, {"config_hash", hash_hex(config_hash(cfg))}});
  append_manifest(cfg, "ensemble-scaling", file_hash(cfg.paths.data),
                  {{"scaling_csv", prefix + ".csv"},
                   {"scaling_json", prefix + ".json"}});
}

void cmd_report(const std::string& runs_dir, const std::string& out_dir) {
  fs::create_directories(out_dir);
  const std::string merged_path = (fs::path(out_dir) / "merged.csv").string();
  const std::string header =
      "run,trajectory,fcrps,vrmse,skill,spread,ssr_corrected,"
      "diverged_fraction\n";

  const std::string mpath = manifest_path(runs_dir);
  if (!fs::exists(mpath)) {
    write_text(merged_path, header);
    std::printf("no runs manifest at %s; wrote empty %s\n", mpath.c_str(),
                merged_path.c_str());
    return;
  }
  const json runs = read_json(mpath);

  // a run id must always refer to the same dataset
  std::map<std::string, std::string> dataset_of;
  for (const json& r : runs) {
    const std::string id = r.at("run").get<std::string>();
    const std::string dh = r.at("dataset_hash").get<std::string>();
    auto it = dataset_of.find(id);
    if (it != dataset_of.end() && it->second != dh)
      throw ConfigError("report: run " + id +
                        " appears with conflicting dataset hashes (" +
                        it->second + " vs " + dh + ")");
    dataset_of[id] = dh;
  }

  std::string merged = header;
  std::size_t rows = 0;
  for (const json& r : runs) {
    const std::string id = r.at("run").get<std::string>();
    const json& artifacts = r.at("artifacts");
    if (artifacts.contains("metrics_csv")) {
      const std::string path = artifacts.at("metrics_csv").get<std::string>();
      std::ifstream f(path);
      if (!f) throw IoError("report: missing artifact " + path);
      std::string line;
      std::getline(f, line);  // per-trajectory header
      while (std::getline(f, line)) {
        if (line.empty()) continue;
        merged += id + "," + line + "\n";
        ++rows;
      }
      // gnuplot series: trajectory index vs fcrps
      std::ifstream g(path);
      std::getline(g, line);
      std::string dat = "# trajectory fcrps\n";
      while (std::getline(g, line)) {
        const std::size_t c1 = line.find(',');
        const std::size_t c2 = line.find(',', c1 + 1);
        if (c1 == std::string::npos || c2 == std::string::npos) continue;
        dat += line.substr(0, c1) + " " + line.substr(c1 + 1, c2 - c1 - 1) +
               "\n";
      }
      write_text((fs::path(out_dir) / (id + "_fcrps.dat")).string(), dat);
    }
    if (artifacts.contains("scaling_csv")) {
      const std::string path = artifacts.at("scaling_csv").get<std::string>();
      std::ifstream f(path);
      if (!f) throw IoError("report: missing artifact " + path);
      std::string line;
      std::getline(f, line);
      std::string dat = "# members normalised_vrmse\n";
      while (std::getline(f, line)) {
        const std::size_t c1 = line.find(',');
        const std::size_t c2 = line.find(',', c1 + 1);
        if (c1 == std::string::npos || c2 == std::string::npos) continue;
        dat += line.substr(0, c1) + " " + line.substr(c2 + 1) + "\n";
      }
      write_text((fs::path(out_dir) / (id + "_scaling.dat")).string(), dat);
    }
  }
  write_text(merged_path, merged);
  std::printf("merged %zu rows from %zu runs into %s\n", rows, runs.size(),
              merged_path.c_str());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "probabilistic retrofitting of deterministic surrogates: data "
      "generation, training, CRPS retrofit, evaluation and reporting"};
  app.require_subcommand(1);

  std::string config_path, out, data, base, match, model_path, baseline_path;
  std::string runs_dir = ".", report_out;
  std::size_t m_override = 0;

  CLI::App* gen = app.add_subcommand("generate-data", "simulate a dataset");
  gen->add_option("--config", config_path, "run config JSON")->required();
  gen->add_option("--out", out, "dataset path (default paths.data)");

  CLI::App* tdet = app.add_subcommand("train-det", "deterministic pretraining");
  tdet->add_option("--config", config_path)->required();
  tdet->add_option("--data", data, "dataset path override");

  CLI::App* retro = app.add_subcommand(
      "retrofit-crps", "attach a noise branch and train under fair CRPS");
  retro->add_option("--config", config_path)->required();
  retro->add_option("--base", base, "deterministic base checkpoint");
  retro->add_option("--data", data);
  retro->add_option("--match", match,
                    "peer config; refuse if compute budgets differ");

  CLI::App* ft = app.add_subcommand(
      "finetune-det", "compute-matched deterministic fine-tuning baseline");
  ft->add_option("--config", config_path)->required();
  ft->add_option("--base", base);
  ft->add_option("--data", data);
  ft->add_option("--match", match);

  CLI::App* ev = app.add_subcommand("evaluate", "rollout metrics on the test split");
  ev->add_option("--config", config_path)->required();
  ev->add_option("--model", model_path)->required();
  ev->add_option("--baseline", baseline_path,
                 "second checkpoint for the paired improvement table");
  ev->add_option("--data", data);
  ev->add_option("--M", m_override, "ensemble size override");

  CLI::App* sc = app.add_subcommand("ensemble-scaling",
                                    "rollout VRMSE vs ensemble size");
  sc->add_option("--config", config_path)->required();
  sc->add_option("--model", model_path)->required();
  sc->add_option("--data", data);

  CLI::App* rp = app.add_subcommand("report",
                                    "merge recorded runs into plot-ready files");
  rp->add_option("--runs", runs_dir, "directory holding runs.json");
  rp->add_option("--out", report_out, "output directory (default --runs)");

  try {
    app.parse(argc, argv);
    RunConfig cfg;
    if (!config_path.empty()) cfg = load_run_config(config_path);
    if (gen->parsed()) cmd_generate_data(cfg, out);
    if (tdet->parsed()) cmd_train_det(cfg, data);
    if (retro->parsed()) cmd_retrofit(cfg, base, data, match);
    if (ft->parsed()) cmd_finetune_det(cfg, base, data, match);
    if (ev->parsed())
      cmd_evaluate(cfg, model_path, baseline_path, data, m_override);
    if (sc->parsed()) cmd_ensemble_scaling(cfg, model_path, data);
    if (rp->parsed())
      cmd_report(runs_dir, report_out.empty() ? runs_dir : report_out);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const ValueError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const ShapeError& e) {
    std::fprintf(stderr, "shape error: %s\n", e.what());
    return 2;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numeric failure: %s\n", e.what());
    return 3;
  } catch (const IoError& e) {
    std::fprintf(stderr, "i/o error: %s\n", e.what());
    return 4;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "unexpected error: %s\n", e.what());
    return 1;
  }
  return 0;
}
