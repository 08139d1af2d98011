#pragma once

// Command-line front end: run configuration, run directories and the six
// subcommands (generate, pretrain, train, evaluate, inspect, sweep).

#include <chrono>
#include <ctime>
#include <filesystem>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "step/data.hpp"
#include "step/error.hpp"
#include "step/forecaster.hpp"
#include "step/inspect.hpp"
#include "step/io.hpp"
#include "step/tsformer.hpp"

namespace step::cli {

namespace fs = std::filesystem;

/// Bad invocation or a missing prerequisite; exit code 2.
class UsageError : public Error {
 public:
  using Error::Error;
};

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

inline json synthetic_to_json(const data::SyntheticSpec& s) {
  return {{"seed", s.seed},
          {"nodes", s.nodes},
          {"days", s.days},
          {"steps_per_day", s.steps_per_day},
          {"k_planted", s.k_planted},
          {"noise_sd", s.noise_sd},
          {"coupling", s.coupling},
          {"weekend_factor", s.weekend_factor},
          {"offset", s.offset},
          {"amplitude", s.amplitude},
          {"harmonics", s.harmonics},
          {"phase_jitter", s.phase_jitter}};
}

inline data::SyntheticSpec synthetic_from_json(const json& j) {
  const std::string where = "data.synthetic";
  io::check_keys(j, {"seed", "nodes", "days", "steps_per_day", "k_planted", "noise_sd", "coupling", "weekend_factor",
                     "offset", "amplitude", "harmonics", "phase_jitter"},
                 where);
  data::SyntheticSpec s;
  io::read_key(j, "seed", s.seed, where);
  io::read_key(j, "nodes", s.nodes, where);
  io::read_key(j, "days", s.days, where);
  io::read_key(j, "steps_per_day", s.steps_per_day, where);
  io::read_key(j, "k_planted", s.k_planted, where);
  io::read_key(j, "noise_sd", s.noise_sd, where);
  io::read_key(j, "coupling", s.coupling, where);
  io::read_key(j, "weekend_factor", s.weekend_factor, where);
  io::read_key(j, "offset", s.offset, where);
  io::read_key(j, "amplitude", s.amplitude, where);
  io::read_key(j, "harmonics", s.harmonics, where);
  io::read_key(j, "phase_jitter", s.phase_jitter, where);
  return s;
}

struct DataConfig {
  std::string path;  ///< STSF or CSV file; empty = generate from `synthetic`
  std::size_t csv_steps_per_day = 288;
  data::SyntheticSpec synthetic;
  double train = 0.7, val = 0.1, test = 0.2;
  /// Window placement for validation and test samples: "within_split" or "end_in_split".
  std::string window_policy = "within_split";

  data::WindowPolicy policy() const {
    if (window_policy == "within_split") return data::WindowPolicy::kWithinSplit;
    if (window_policy == "end_in_split") return data::WindowPolicy::kEndInSplit;
    throw ConfigError("data.window_policy: expected 'within_split' or 'end_in_split', got '" + window_policy + "'");
  }

  json to_json() const {
    return {{"path", path},
            {"csv_steps_per_day", csv_steps_per_day},
            {"synthetic", synthetic_to_json(synthetic)},
            {"split", {{"train", train}, {"val", val}, {"test", test}}},
            {"window_policy", window_policy}};
  }

  static DataConfig from_json(const json& j) {
    const std::string where = "data";
    io::check_keys(j, {"path", "csv_steps_per_day", "synthetic", "split", "window_policy"}, where);
    DataConfig d;
    io::read_key(j, "path", d.path, where);
    io::read_key(j, "csv_steps_per_day", d.csv_steps_per_day, where);
    io::read_key(j, "window_policy", d.window_policy, where);
    if (j.contains("synthetic")) d.synthetic = synthetic_from_json(j.at("synthetic"));
    if (j.contains("split")) {
      const auto& s = j.at("split");
      io::check_keys(s, {"train", "val", "test"}, "data.split");
      io::read_key(s, "train", d.train, "data.split");
      io::read_key(s, "val", d.val, "data.split");
      io::read_key(s, "test", d.test, "data.split");
    }
    return d;
  }
};

struct InspectSettings {
  std::size_t node = 0;
  std::size_t start = 0;  ///< window start (time index)
  std::uint64_t mask_seed = 1;

  json to_json() const { return {{"node", node}, {"start", start}, {"mask_seed", mask_seed}}; }
  static InspectSettings from_json(const json& j) {
    io::check_keys(j, {"node", "start", "mask_seed"}, "inspect");
    InspectSettings s;
    io::read_key(j, "node", s.node, "inspect");
    io::read_key(j, "start", s.start, "inspect");
    io::read_key(j, "mask_seed", s.mask_seed, "inspect");
    return s;
  }
};

struct SweepSettings {
  std::string axis = "r";  ///< "r" (masking ratio) or "k" (kNN degree)
  std::vector<double> values;
  std::string split = "val";

  json to_json() const { return {{"axis", axis}, {"values", values}, {"split", split}}; }
  static SweepSettings from_json(const json& j) {
    io::check_keys(j, {"axis", "values", "split"}, "sweep");
    SweepSettings s;
    io::read_key(j, "axis", s.axis, "sweep");
    io::read_key(j, "values", s.values, "sweep");
    io::read_key(j, "split", s.split, "sweep");
    return s;
  }
};

/// Everything a command needs. Serialized verbatim into each run directory.
struct RunConfig {
  std::uint64_t seed = 0;
  std::string out = "runs";
  DataConfig data;
  tsformer::TSFormerConfig tsformer;
  tsformer::PretrainSettings pretrain;
  forecast::ForecasterConfig forecaster;
  std::string pretrained;  ///< TSFormer checkpoint consumed by train, evaluate and sweep
  std::string checkpoint;  ///< checkpoint under study: forecaster (evaluate) or TSFormer (inspect)
  std::string eval_split = "test";
  InspectSettings inspect;
  SweepSettings sweep;

  void validate() const {
    tsformer.validate();
    forecaster.validate();
    (void)data.policy();
    if (eval_split != "train" && eval_split != "val" && eval_split != "test")
      throw ConfigError("eval_split: expected train, val or test");
    if (sweep.axis != "r" && sweep.axis != "k") throw ConfigError("sweep.axis: expected 'r' or 'k'");
  }

  json to_json() const {
    return {{"seed", seed},
            {"out", out},
            {"data", data.to_json()},
            {"tsformer", tsformer.to_json()},
            {"pretrain", pretrain.to_json()},
            {"forecaster", forecaster.to_json()},
            {"pretrained", pretrained},
            {"checkpoint", checkpoint},
            {"eval_split", eval_split},
            {"inspect", inspect.to_json()},
            {"sweep", sweep.to_json()}};
  }

  static RunConfig from_json(const json& j) {
    const std::string where = "run config";
    io::check_keys(j, {"seed", "out", "data", "tsformer", "pretrain", "forecaster", "pretrained", "checkpoint",
                       "eval_split", "inspect", "sweep"},
                   where);
    RunConfig c;
    io::read_key(j, "seed", c.seed, where);
    io::read_key(j, "out", c.out, where);
    io::read_key(j, "pretrained", c.pretrained, where);
    io::read_key(j, "checkpoint", c.checkpoint, where);
    io::read_key(j, "eval_split", c.eval_split, where);
    if (j.contains("data")) c.data = DataConfig::from_json(j.at("data"));
    if (j.contains("tsformer")) c.tsformer = tsformer::TSFormerConfig::from_json(j.at("tsformer"));
    if (j.contains("pretrain")) c.pretrain = tsformer::PretrainSettings::from_json(j.at("pretrain"));
    if (j.contains("forecaster")) c.forecaster = forecast::ForecasterConfig::from_json(j.at("forecaster"));
    if (j.contains("inspect")) c.inspect = InspectSettings::from_json(j.at("inspect"));
    if (j.contains("sweep")) c.sweep = SweepSettings::from_json(j.at("sweep"));
    return c;
  }

  static RunConfig load(const fs::path& path) {
    if (!fs::exists(path)) throw UsageError("--config: file '" + path.string() + "' does not exist");
    json j;
    try {
      j = json::parse(io::read_text(path));
    } catch (const json::parse_error& e) {
      throw ConfigError("--config: '" + path.string() + "' is not valid JSON: " + e.what());
    }
    return from_json(j);
  }

  std::string dump() const { return to_json().dump(2) + "\n"; }
  std::uint64_t hash() const { return io::fnv1a64(to_json().dump()); }
};

// ---------------------------------------------------------------------------
// Run directories
// ---------------------------------------------------------------------------

inline std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y%m%dT%H%M%SZ", &tm);
  return buf;
}

/// Creates `<out>/<command>-<hash8>-<timestamp>` (with a -N suffix on collision)
/// and writes config.json into it.
inline fs::path make_run_dir(const RunConfig& cfg, const std::string& command, const std::string& stamp) {
  const std::string base = command + "-" + io::hex64(cfg.hash()).substr(0, 8) + "-" + stamp;
  fs::create_directories(cfg.out);
  fs::path dir = fs::path(cfg.out) / base;
  for (int n = 2; !fs::create_directory(dir); ++n) dir = fs::path(cfg.out) / (base + "-" + std::to_string(n));
  io::write_text_atomic(dir / "config.json", cfg.dump());
  return dir;
}

// ---------------------------------------------------------------------------
// Shared plumbing
// ---------------------------------------------------------------------------

inline void require_file(const std::string& path, const std::string& flag, const std::string& what) {
  if (path.empty()) throw UsageError(what + " is required: pass " + flag + " PATH");
  if (!fs::exists(path)) throw UsageError(what + " '" + path + "' does not exist (" + flag + ")");
}

inline data::RawDataset load_data(const DataConfig& d) {
  if (d.path.empty()) return data::generate_synthetic(d.synthetic).dataset;
  require_file(d.path, "--data", "dataset");
  return data::load_dataset(d.path, d.csv_steps_per_day);
}

struct Prepared {
  std::shared_ptr<const data::RawDataset> normalized;
  data::SplitSpec split;
};

inline Prepared prepare(const DataConfig& d) {
  data::RawDataset raw = load_data(d);
  auto split = data::SplitSpec::resolve(raw.T, d.train, d.val, d.test);
  return {std::make_shared<const data::RawDataset>(data::fit_apply_zscore(raw, split)), split};
}

inline std::string pretrain_log_csv(const std::vector<tsformer::EpochLog>& log) {
  std::string s = "epoch,lr,train_loss,val_loss\n";
  for (const auto& e : log)
    s += std::to_string(e.epoch) + "," + io::fmt_double(e.lr) + "," + io::fmt_double(e.train_loss) + "," +
         (e.val_loss ? io::fmt_double(*e.val_loss) : "") + "\n";
  return s;
}

inline std::string train_log_csv(const std::vector<forecast::TrainLog>& log) {
  std::string s = "epoch,lr,lambda,horizon,train_loss,val_mae,val_rmse,val_mape\n";
  for (const auto& e : log)
    s += std::to_string(e.epoch) + "," + io::fmt_double(e.lr) + "," + io::fmt_double(e.lambda) + "," +
         std::to_string(e.horizon) + "," + io::fmt_double(e.train_loss) + "," + io::fmt_double(e.val_mae) + "," +
         io::fmt_double(e.val_rmse) + "," + io::fmt_double(e.val_mape) + "\n";
  return s;
}

inline std::unique_ptr<tsformer::TSFormer> pretrain_model(const RunConfig& cfg, const Prepared& p,
                                                          const tsformer::TSFormerConfig& tcfg,
                                                          std::ostream& log, tsformer::PretrainResult* result = nullptr) {
  Rng init = Rng(cfg.seed).split(100);
  auto model = std::make_unique<tsformer::TSFormer>(tcfg, init);
  auto r = tsformer::pretrain(*model, *p.normalized, p.split, cfg.pretrain, cfg.seed, [&](const tsformer::EpochLog& e) {
    log << "pretrain epoch " << e.epoch << " train " << e.train_loss;
    if (e.val_loss) log << " val " << *e.val_loss;
    log << "\n";
  });
  if (result) *result = std::move(r);
  return model;
}

/// Forecasting data with representations attached when the configuration needs them.
struct Stage {
  forecast::ForecastData fd;
  std::shared_ptr<const tsformer::TSFormer> encoder;
};

inline Stage forecasting_stage(const RunConfig& cfg, const Prepared& p, const forecast::ForecasterConfig& fcfg,
                               std::shared_ptr<const tsformer::TSFormer> encoder, bool use_bank) {
  std::size_t P = cfg.tsformer.P, L = cfg.tsformer.L;
  if (encoder) P = encoder->config().P, L = encoder->config().L;
  Stage st{forecast::prepare_data(p.normalized, p.split, P, L, fcfg.horizon, cfg.data.policy()), encoder};
  if (fcfg.needs_representations()) {
    if (!encoder) throw UsageError("this forecaster configuration needs a pre-trained encoder: pass --pretrained PATH");
    if (use_bank) {
      auto bank = std::make_shared<const tsformer::RepresentationBank>(
          tsformer::precompute_representations(*encoder, *p.normalized, st.fd.all_starts()));
      forecast::attach_representations(st.fd, forecast::from_bank(bank), encoder->config().d);
    } else {
      forecast::attach_representations(st.fd, forecast::from_encoder(encoder, p.normalized), encoder->config().d);
    }
  }
  if (fcfg.graph_mode != forecast::GraphMode::kNone) forecast::build_knn(st.fd, fcfg.graph);
  return st;
}

inline std::shared_ptr<const tsformer::TSFormer> load_encoder(const std::string& path) {
  require_file(path, "--pretrained", "pre-trained TSFormer checkpoint");
  return tsformer::load_checkpoint(path);
}

struct Trained {
  std::unique_ptr<forecast::Forecaster> model;
  forecast::TrainResult result;
  Stage stage;
};

inline Trained train_forecaster(const RunConfig& cfg, const Prepared& p, const forecast::ForecasterConfig& fcfg,
                                std::shared_ptr<const tsformer::TSFormer> encoder, std::ostream& log) {
  Stage st = forecasting_stage(cfg, p, fcfg, encoder, true);
  Rng init = Rng(cfg.seed).split(200);
  auto model = std::make_unique<forecast::Forecaster>(fcfg, forecast::ModelShape::of(st.fd), init);
  auto r = forecast::train(*model, st.fd, cfg.seed, [&](const forecast::TrainLog& e) {
    log << "train epoch " << e.epoch << " horizon " << e.horizon << " loss " << e.train_loss << " val_mae "
              << e.val_mae << "\n";
  });
  return {std::move(model), std::move(r), std::move(st)};
}

// ---------------------------------------------------------------------------
// Commands. Each returns the run directory it wrote.
// ---------------------------------------------------------------------------

inline fs::path cmd_generate(const RunConfig& cfg, const std::string& stamp) {
  auto syn = data::generate_synthetic(cfg.data.synthetic);
  const fs::path dir = make_run_dir(cfg, "generate", stamp);
  data::save_dataset(syn.dataset, dir / "dataset.stsf");
  io::write_text_atomic(dir / "planted_graph.csv", data::adjacency_to_csv(syn.planted));
  return dir;
}

inline fs::path cmd_pretrain(const RunConfig& cfg, const std::string& stamp, std::ostream& log = std::cerr) {
  Prepared p = prepare(cfg.data);
  tsformer::TSFormerConfig tcfg = cfg.tsformer;
  tcfg.C = p.normalized->C;
  tsformer::PretrainResult r;
  auto model = pretrain_model(cfg, p, tcfg, log, &r);
  const fs::path dir = make_run_dir(cfg, "pretrain", stamp);
  tsformer::save_checkpoint(dir / "tsformer.stck", *model, cfg.seed, r.best_epoch);
  io::write_text_atomic(dir / "pretrain_log.csv", pretrain_log_csv(r.log));
  return dir;
}

inline fs::path cmd_train(const RunConfig& cfg, const std::string& stamp, std::ostream& log = std::cerr) {
  Prepared p = prepare(cfg.data);
  std::shared_ptr<const tsformer::TSFormer> encoder;
  if (cfg.forecaster.needs_representations() || !cfg.pretrained.empty()) encoder = load_encoder(cfg.pretrained);
  Trained t = train_forecaster(cfg, p, cfg.forecaster, encoder, log);
  const fs::path dir = make_run_dir(cfg, "train", stamp);
  json extra = {{"pretrained", cfg.pretrained}};
  if (encoder) extra["pretrained_params_hash"] = io::hex64(checkpoint::params_hash(encoder->params()));
  forecast::save_checkpoint(dir / "forecaster.stck", *t.model, extra);
  io::write_text_atomic(dir / "train_log.csv", train_log_csv(t.result.log));
  for (const std::string split : {"val", "test"})
    if (!t.stage.fd.starts(split).empty())
      io::write_text_atomic(dir / ("report_" + split + ".csv"), forecast::evaluate(*t.model, t.stage.fd, split).to_csv());
  if (cfg.forecaster.graph_mode == forecast::GraphMode::kLearned)
    io::write_text_atomic(dir / "learned_graph.csv",
                          graph::matrix_to_edge_csv(forecast::mean_edge_probabilities(*t.model, t.stage.fd), false));
  return dir;
}

inline fs::path cmd_evaluate(const RunConfig& cfg, const std::string& stamp) {
  require_file(cfg.checkpoint, "--checkpoint", "forecaster checkpoint");
  auto loaded = forecast::load_checkpoint(cfg.checkpoint);
  const auto& fcfg = loaded.model->config();
  Prepared p = prepare(cfg.data);
  std::shared_ptr<const tsformer::TSFormer> encoder;
  if (fcfg.needs_representations()) {
    std::string path = cfg.pretrained.empty() ? loaded.meta.value("pretrained", "") : cfg.pretrained;
    encoder = load_encoder(path);
    const std::string want = loaded.meta.value("pretrained_params_hash", "");
    if (!want.empty() && want != io::hex64(checkpoint::params_hash(encoder->params())))
      throw UsageError("pre-trained encoder '" + path + "' is not the one this forecaster was trained with");
  }
  Stage st = forecasting_stage(cfg, p, fcfg, encoder, false);
  if (forecast::ModelShape::of(st.fd) != loaded.model->shape())
    throw UsageError("dataset does not match the shape the forecaster was trained on");
  const auto rep = forecast::evaluate(*loaded.model, st.fd, cfg.eval_split);
  const fs::path dir = make_run_dir(cfg, "evaluate", stamp);
  io::write_text_atomic(dir / "report.csv", rep.to_csv());
  io::write_text_atomic(dir / "report.json", rep.to_json().dump(2) + "\n");
  return dir;
}

inline fs::path cmd_inspect(const RunConfig& cfg, const std::string& stamp) {
  require_file(cfg.checkpoint, "--checkpoint", "TSFormer checkpoint");
  auto model = tsformer::load_checkpoint(cfg.checkpoint);
  const auto& tc = model->config();
  Prepared p = prepare(cfg.data);
  const auto& ds = *p.normalized;
  const auto& in = cfg.inspect;
  if (in.node >= ds.N) throw ConfigError("inspect.node: dataset has only " + std::to_string(ds.N) + " nodes");
  if (in.start + tc.P * tc.L > ds.T) throw ConfigError("inspect.start: window runs past the end of the series");

  Tensor pos = inspect::posemb_similarity(*model);
  Tensor block = tsformer::represent_window(*model, ds, in.start);
  Tensor patch = inspect::patch_similarity(block, in.node);
  auto overlay = inspect::reconstruction_dump(*model, ds, in.node, in.start, in.mask_seed);

  json summary = {{"node", in.node}, {"start", in.start}, {"masked_mae", overlay.masked_mae()}};
  if (ds.steps_per_day % tc.L == 0) {
    const std::size_t day = ds.steps_per_day / tc.L, half = day / 2;
    if (half >= 1 && day < tc.P) {
      summary["lag_patches"] = {{"day", day}, {"half_day", half}};
      summary["patch_similarity"] = {{"day", inspect::mean_lag_similarity(patch, day)},
                                     {"half_day", inspect::mean_lag_similarity(patch, half)}};
      summary["posemb_similarity"] = {{"day", inspect::mean_lag_similarity(pos, day)},
                                      {"half_day", inspect::mean_lag_similarity(pos, half)}};
      std::size_t hits = 0;
      for (std::size_t j = 0; j < tc.P; ++j)
        for (std::size_t i : inspect::top_k_similar(patch, j, 3))
          if ((i > j ? i - j : j - i) % day == 0) {
            ++hits;
            break;
          }
      summary["top3_day_lag_rate"] = static_cast<double>(hits) / static_cast<double>(tc.P);
    }
  }

  const fs::path dir = make_run_dir(cfg, "inspect", stamp);
  io::write_text_atomic(dir / "posemb_similarity.csv", inspect::matrix_csv(pos));
  io::write_text_atomic(dir / "posemb_similarity.svg", inspect::heatmap_svg(pos, "positional embedding similarity"));
  io::write_text_atomic(dir / "patch_similarity.csv", inspect::matrix_csv(patch));
  io::write_text_atomic(dir / "patch_similarity.svg", inspect::heatmap_svg(patch, "patch representation similarity"));
  io::write_text_atomic(dir / "reconstruction.csv", overlay.to_csv());
  io::write_text_atomic(dir / "reconstruction.svg", overlay.to_svg());
  io::write_text_atomic(dir / "summary.json", summary.dump(2) + "\n");
  return dir;
}

inline fs::path cmd_sweep(const RunConfig& cfg, const std::string& stamp, std::ostream& log = std::cerr) {
  const auto& sw = cfg.sweep;
  if (sw.values.empty()) throw UsageError("sweep needs at least one value: pass --values V1,V2,...");
  Prepared p = prepare(cfg.data);
  std::shared_ptr<const tsformer::TSFormer> shared;
  if (sw.axis == "k" && cfg.forecaster.needs_representations()) {
    if (!cfg.pretrained.empty()) {
      shared = load_encoder(cfg.pretrained);
    } else {
      tsformer::TSFormerConfig tcfg = cfg.tsformer;
      tcfg.C = p.normalized->C;
      shared = pretrain_model(cfg, p, tcfg, log);
    }
  }
  std::string csv = sw.axis + ",mae,rmse,mape\n";
  for (double v : sw.values) {
    forecast::ForecasterConfig fcfg = cfg.forecaster;
    std::shared_ptr<const tsformer::TSFormer> encoder = shared;
    if (sw.axis == "r") {
      tsformer::TSFormerConfig tcfg = cfg.tsformer;
      tcfg.C = p.normalized->C;
      tcfg.r = v;
      tcfg.validate();
      encoder = pretrain_model(cfg, p, tcfg, log);
    } else {
      if (v < 1 || v != std::floor(v)) throw ConfigError("sweep: k values must be positive integers");
      fcfg.graph.k = static_cast<std::size_t>(v);
    }
    Trained t = train_forecaster(cfg, p, fcfg, encoder, log);
    const auto& row = forecast::evaluate(*t.model, t.stage.fd, sw.split).at("mean");
    csv += io::fmt_double(v) + "," + io::fmt_double(row.mae) + "," + io::fmt_double(row.rmse) + "," +
           io::fmt_double(row.mape) + "\n";
  }
  const fs::path dir = make_run_dir(cfg, "sweep", stamp);
  io::write_text_atomic(dir / "sweep.csv", csv);
  return dir;
}

// ---------------------------------------------------------------------------
// Entry point
// ---------------------------------------------------------------------------

inline std::vector<double> parse_values(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw UsageError("--values: '" + item + "' is not a number");
    }
  }
  return out;
}

/// Parses argv, runs one command and maps failures to exit codes
/// (0 ok, 1 runtime failure, 2 usage). The run directory goes to `out`.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Pre-training enhanced spatiotemporal forecasting"};
  app.require_subcommand(1);
  app.fallthrough();
  std::string config_path, out_dir, data_path, pretrained, checkpoint, split, axis, values;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> node, start;
  app.add_option("--config", config_path, "JSON run configuration");
  app.add_option("--seed", seed, "random seed (overrides the config)");
  app.add_option("--out", out_dir, "root directory for run directories");

  auto* gen = app.add_subcommand("generate", "write a synthetic dataset and its planted graph");
  auto* pre = app.add_subcommand("pretrain", "pre-train the TSFormer");
  auto* trn = app.add_subcommand("train", "train the forecaster");
  auto* evl = app.add_subcommand("evaluate", "evaluate a forecaster checkpoint");
  auto* ins = app.add_subcommand("inspect", "similarity and reconstruction artifacts of a TSFormer checkpoint");
  auto* swp = app.add_subcommand("sweep", "sweep the masking ratio r or the kNN degree k");
  (void)gen;
  for (auto* c : {pre, trn, evl, ins, swp}) c->add_option("--data", data_path, "dataset file (STSF or CSV)");
  for (auto* c : {trn, evl, swp}) c->add_option("--pretrained", pretrained, "pre-trained TSFormer checkpoint");
  for (auto* c : {evl, ins}) c->add_option("--checkpoint", checkpoint, "checkpoint to evaluate or inspect");
  evl->add_option("--split", split, "train, val or test");
  ins->add_option("--node", node, "node to inspect");
  ins->add_option("--start", start, "window start");
  swp->add_option("--axis", axis, "r or k");
  swp->add_option("--values", values, "comma-separated values");
  swp->add_option("--split", split, "split scored by the sweep");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    app.exit(e, out, err);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return kExitUsage;
  }

  try {
    RunConfig cfg = config_path.empty() ? RunConfig{} : RunConfig::load(config_path);
    if (seed) cfg.seed = *seed;
    if (!out_dir.empty()) cfg.out = out_dir;
    if (!data_path.empty()) cfg.data.path = data_path;
    if (!pretrained.empty()) cfg.pretrained = pretrained;
    if (!checkpoint.empty()) cfg.checkpoint = checkpoint;
    if (node) cfg.inspect.node = *node;
    if (start) cfg.inspect.start = *start;
    if (!axis.empty()) cfg.sweep.axis = axis;
    if (!values.empty()) cfg.sweep.values = parse_values(values);
    if (!split.empty()) (swp->parsed() ? cfg.sweep.split : cfg.eval_split) = split;
    cfg.validate();

    const std::string stamp = utc_timestamp();
    fs::path dir;
    if (gen->parsed()) dir = cmd_generate(cfg, stamp);
    if (pre->parsed()) dir = cmd_pretrain(cfg, stamp, err);
    if (trn->parsed()) dir = cmd_train(cfg, stamp, err);
    if (evl->parsed()) dir = cmd_evaluate(cfg, stamp);
    if (ins->parsed()) dir = cmd_inspect(cfg, stamp);
    if (swp->parsed()) dir = cmd_sweep(cfg, stamp, err);
    out << dir.string() << "\n";
    return kExitOk;
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
}

}  // namespace step::cli
