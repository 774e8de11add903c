#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "w2vlab/config.hpp"
#include "w2vlab/dataset.hpp"
#include "w2vlab/evalkit.hpp"
#include "w2vlab/forecaster.hpp"
#include "w2vlab/grid.hpp"
#include "w2vlab/pca.hpp"
#include "w2vlab/powerflow.hpp"
#include "w2vlab/w2v.hpp"
#include "w2vlab/weather.hpp"

namespace w2vlab::pipeline {

namespace fs = std::filesystem;

class MissingArtifactError : public std::runtime_error {
 public:
  MissingArtifactError(const std::string& artifact, const std::string& command)
      : std::runtime_error("missing artifact '" + artifact + "'; run `w2vlab " + command +
                           " <config>` first") {}
};

struct RunPaths {
  std::string run_dir, data_dir, models_dir, eval_dir, report_dir;
};

inline RunPaths run_paths(const cfg::ExperimentConfig& c) {
  RunPaths p;
  p.run_dir = c.out_dir + "/" + c.run_name;
  p.data_dir = p.run_dir + "/data";
  p.models_dir = p.run_dir + "/models";
  p.eval_dir = p.run_dir + "/eval";
  p.report_dir = p.run_dir + "/report";
  return p;
}

inline void require_file(const std::string& path, const std::string& command) {
  if (!fs::exists(path)) throw MissingArtifactError(path, command);
}

inline std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.12g", v);
  return buf;
}

// ---- run manifest: every artifact with a content hash ----

inline std::uint64_t file_hash(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  std::uint64_t h = 1469598103934665603ull;
  char buf[65536];
  while (is) {
    is.read(buf, sizeof(buf));
    h = fnv1a64_bytes(buf, static_cast<std::size_t>(is.gcount()), h);
  }
  return h;
}

inline void update_manifest(const cfg::ExperimentConfig& c, const RunPaths& paths,
                            const std::vector<std::string>& artifacts) {
  const std::string manifest_path = paths.run_dir + "/manifest.json";
  nlohmann::json j;
  if (fs::exists(manifest_path)) {
    std::ifstream is(manifest_path);
    is >> j;
  }
  j["seed"] = c.seed;
  j["config_hash"] = fnv1a64(cfg::config_to_json(c).dump());
  if (!j.contains("artifacts")) j["artifacts"] = nlohmann::json::object();
  for (const std::string& a : artifacts)
    j["artifacts"][fs::relative(a, paths.run_dir).string()] = file_hash(a);
  std::ofstream os(manifest_path);
  os << j.dump(2) << "\n";
}

// ---- scenario assembly ----

struct Scenario {
  grid::GridModel grid;
  std::vector<std::array<double, 2>> locations;
  std::vector<int> bus_to_location;
};

inline Scenario build_scenario(const cfg::ExperimentConfig& c) {
  Scenario sc;
  sc.locations = weather::random_locations(static_cast<std::size_t>(c.weather_locations),
                                           c.area_km, c.seed);
  if (!c.grid_file.empty()) {
    sc.grid = grid::load_grid(c.grid_file);
  } else {
    sc.grid = grid::make_synthetic_grid(c.grid, c.seed);
  }
  std::vector<std::array<double, 2>> bus_coords;
  for (const auto& b : sc.grid.buses) bus_coords.push_back({b.x_km, b.y_km});
  sc.bus_to_location = weather::nearest_location_mapping(bus_coords, sc.locations);
  for (auto& gen : sc.grid.generators)
    if (gen.kind != grid::GenKind::conventional)
      gen.weather_location =
          sc.bus_to_location[static_cast<std::size_t>(sc.grid.bus_index(gen.bus))];
  sc.grid.validate(static_cast<int>(sc.locations.size()));
  return sc;
}

// ---- generate-data ----

inline int cmd_generate_data(const cfg::ExperimentConfig& c, bool overwrite = false,
                             std::ostream& out = std::cout) {
  c.validate();
  const RunPaths paths = run_paths(c);
  if (fs::exists(paths.data_dir + "/metadata.json") && !overwrite)
    throw cfg::ConfigError("dataset already exists under '" + paths.data_dir +
                           "'; pass --overwrite to regenerate");
  fs::create_directories(paths.data_dir);

  Scenario sc = build_scenario(c);
  const auto series =
      weather::generate_synthetic_series(c.weather, sc.locations, c.hours, c.seed);
  data::DatasetOptions opt = c.dataset;
  opt.seed = c.seed;
  const auto ds = data::generate_dataset(sc.grid, series, c.renewables, sc.bus_to_location, opt);

  grid::save_grid(sc.grid, paths.data_dir + "/grid.json");
  data::save_dataset(ds, paths.data_dir);
  {
    nlohmann::json j;
    j["locations_km"] = nlohmann::json::array();
    for (const auto& l : sc.locations) j["locations_km"].push_back({l[0], l[1]});
    j["bus_to_location"] = sc.bus_to_location;
    std::ofstream os(paths.data_dir + "/scenario.json");
    os << j.dump(2) << "\n";
  }
  update_manifest(c, paths,
                  {paths.data_dir + "/grid.json", paths.data_dir + "/weather.csv",
                   paths.data_dir + "/voltage.csv", paths.data_dir + "/metadata.json",
                   paths.data_dir + "/scenario.json"});

  out << "generated " << ds.size() << " of " << c.hours << " samples ("
      << ds.filter_log.size() << " filtered";
  long over = 0, nonconv = 0;
  for (const auto& e : ds.filter_log) (e.reason == "overvoltage" ? over : nonconv) += 1;
  out << ": " << over << " overvoltage, " << nonconv << " nonconvergence)\n";
  return 0;
}

inline data::NexusDataset load_run_dataset(const cfg::ExperimentConfig& c) {
  const RunPaths paths = run_paths(c);
  require_file(paths.data_dir + "/metadata.json", "generate-data");
  return data::load_dataset(paths.data_dir);
}

// ---- train-w2v ----

inline std::vector<pca::BlockSpec> weather_blocks(const data::NexusDataset& ds) {
  std::vector<pca::BlockSpec> specs;
  for (int f = 0; f < weather::kNumFeatures; ++f)
    specs.push_back({weather::feature_name(f), f * ds.n_locations, ds.n_locations});
  return specs;
}

inline pca::PcaModel fit_run_pca(const data::NexusDataset& ds, double recon_error) {
  const auto train_rows = ds.random_split.train;
  ad::RowMat train(static_cast<Eigen::Index>(train_rows.size()), ds.weather_norm.cols());
  for (std::size_t i = 0; i < train_rows.size(); ++i)
    train.row(static_cast<Eigen::Index>(i)) = ds.weather_norm.row(train_rows[i]);
  auto model = pca::fit_pca(train, weather_blocks(ds));
  pca::choose_all_components(model, recon_error);
  return model;
}

inline w2v::TrainConfig w2v_train_config(const cfg::ExperimentConfig& c) {
  w2v::TrainConfig t = c.w2v.train;
  t.seed = derive_seed(c.seed, "stage.w2v");
  return t;
}

inline void write_epoch_csv(const std::vector<w2v::EpochLog>& epochs, const std::string& path) {
  std::ofstream os(path);
  os << "epoch,train_total,train_lv,train_lw,val_total,val_lv,val_lw,lr\n";
  for (std::size_t i = 0; i < epochs.size(); ++i) {
    const auto& e = epochs[i];
    os << i + 1 << "," << fmt(e.train_total) << "," << fmt(e.train_lv) << ","
       << fmt(e.train_lw) << "," << fmt(e.val_total) << "," << fmt(e.val_lv) << ","
       << fmt(e.val_lw) << "," << fmt(e.lr) << "\n";
  }
}

inline int cmd_train_w2v(const cfg::ExperimentConfig& c, std::ostream& out = std::cout) {
  c.validate();
  const RunPaths paths = run_paths(c);
  const auto ds = load_run_dataset(c);
  fs::create_directories(paths.models_dir);

  auto pca_model = fit_run_pca(ds, c.w2v.pca_recon_error);
  w2v::W2VArch arch;
  arch.input_w = ds.weather_width();
  arch.latent_k = pca_model.latent_width();
  arch.output_b = ds.n_buses;
  arch.decoder_hidden = c.w2v.decoder_hidden;
  arch.output_act = ad::activation_from_name(c.w2v.output_activation);

  auto model = w2v::build_w2v(arch, &pca_model, c.w2v.lambda, w2v_train_config(c).seed);
  const auto report = w2v::train_surrogate(model, ds, w2v_train_config(c));

  ArrayStore store;
  model.store(store);
  pca_model.store(store);
  store.put_scalar("seed", static_cast<double>(w2v_train_config(c).seed));
  store.save(paths.models_dir + "/w2v.store");
  write_epoch_csv(report.epochs, paths.models_dir + "/w2v_epochs.csv");
  {
    const std::string ledger = paths.models_dir + "/results_ledger.csv";
    const bool fresh = !fs::exists(ledger);
    std::ofstream os(ledger, std::ios::app);
    if (fresh)
      os << "model,seed,epochs,best_epoch,best_val,test_rmse_pu,test_mae_pu,wall_seconds\n";
    os << "w2v," << report.seed << "," << report.epochs_run << "," << report.best_epoch << ","
       << fmt(report.best_val_total) << "," << fmt(report.test.rmse_pu) << ","
       << fmt(report.test.mae_pu) << "," << fmt(report.wall_seconds) << "\n";
  }
  update_manifest(c, paths, {paths.models_dir + "/w2v.store", paths.models_dir + "/w2v_epochs.csv"});
  out << "w2v: K=" << arch.latent_k << ", best epoch " << report.best_epoch << "/"
      << report.epochs_run << ", test RMSE " << fmt(report.test.rmse_pu) << " p.u.\n";
  return 0;
}

inline w2v::W2VModel load_run_w2v(const cfg::ExperimentConfig& c) {
  const RunPaths paths = run_paths(c);
  require_file(paths.models_dir + "/w2v.store", "train-w2v");
  return w2v::W2VModel::restore(ArrayStore::load(paths.models_dir + "/w2v.store"));
}

// ---- forecaster training ----

inline forecast::BranchConfig branch_config(const cfg::ExperimentConfig& c) {
  forecast::BranchConfig bc;
  bc.kind = forecast::branch_kind_from_name(c.forecaster.branch);
  bc.d_model = c.forecaster.d_model;
  bc.hidden = c.forecaster.hidden;
  bc.heads = c.forecaster.heads;
  bc.layers = c.forecaster.layers;
  bc.ff_dim = c.forecaster.ff_dim;
  bc.dropout = c.forecaster.dropout;
  return bc;
}

inline forecast::ForecastTrainConfig fc_train_config(const cfg::ExperimentConfig& c, long horizon) {
  forecast::ForecastTrainConfig t = c.forecaster.train;
  t.seed = derive_seed(c.seed, "stage.forecaster.h" + std::to_string(horizon));
  return t;
}

inline std::string fc_store_path(const RunPaths& paths, forecast::ForecastMode mode, long h) {
  return paths.models_dir + "/fc_" +
         (mode == forecast::ForecastMode::gu ? std::string("gu") : std::string("ga")) + "_h" +
         std::to_string(h) + ".store";
}

inline void write_fc_epoch_csv(const forecast::ForecastRun& run, const std::string& path) {
  std::ofstream os(path);
  os << "epoch,stage,train_lw,train_lv,train_total,val_lw,val_lv,val_total,lr\n";
  for (std::size_t i = 0; i < run.epochs.size(); ++i) {
    const auto& e = run.epochs[i];
    os << i + 1 << "," << e.stage << "," << fmt(e.train_lw) << "," << fmt(e.train_lv) << ","
       << fmt(e.train_total) << "," << fmt(e.val_lw) << "," << fmt(e.val_lv) << ","
       << fmt(e.val_total) << "," << fmt(e.lr) << "\n";
  }
}

inline double resolve_gamma(const cfg::ExperimentConfig& c, const RunPaths& paths, long horizon) {
  if (c.forecaster.gamma > 0.0) return c.forecaster.gamma;
  const std::string sel_path = paths.models_dir + "/gamma_h" + std::to_string(horizon) + ".json";
  if (fs::exists(sel_path)) {
    std::ifstream is(sel_path);
    nlohmann::json j;
    is >> j;
    return j.at("gamma").get<double>();
  }
  throw cfg::ConfigError(
      "no gamma available for horizon " + std::to_string(horizon) +
      ": set forecaster.gamma in the config or run `w2vlab sweep --kind gamma <config>` first");
}

inline int cmd_train_forecaster(const cfg::ExperimentConfig& c, forecast::ForecastMode mode,
                                std::ostream& out = std::cout) {
  c.validate();
  const RunPaths paths = run_paths(c);
  const auto ds = load_run_dataset(c);
  fs::create_directories(paths.models_dir);

  w2v::W2VModel surrogate;
  if (mode == forecast::ForecastMode::ga) surrogate = load_run_w2v(c);

  for (const auto& hs : c.forecaster.horizons) {
    forecast::WindowGeometry geom{c.forecaster.k, hs.lead, hs.horizon};
    const auto train_ws = forecast::make_windows(ds, geom, forecast::Split::train);
    const auto val_ws = forecast::make_windows(ds, geom, forecast::Split::val);
    const double gamma =
        mode == forecast::ForecastMode::ga ? resolve_gamma(c, paths, hs.horizon) : 0.0;
    auto model = forecast::build_forecaster(weather::kNumFeatures, ds.n_locations, ds.n_buses,
                                            geom, branch_config(c), gamma,
                                            fc_train_config(c, hs.horizon).seed);
    const auto run = forecast::train_forecaster(
        model, train_ws, val_ws, mode,
        mode == forecast::ForecastMode::ga ? &surrogate : nullptr,
        fc_train_config(c, hs.horizon));

    ArrayStore store;
    model.store(store);
    store.put_scalar("seed", static_cast<double>(run.seed));
    store.put_scalar("stage_boundary", run.stage_boundary);
    store.save(fc_store_path(paths, mode, hs.horizon));
    write_fc_epoch_csv(run, paths.models_dir + "/fc_" +
                                (mode == forecast::ForecastMode::gu ? "gu" : "ga") + "_h" +
                                std::to_string(hs.horizon) + "_epochs.csv");
    update_manifest(c, paths, {fc_store_path(paths, mode, hs.horizon)});
    out << "forecaster " << (mode == forecast::ForecastMode::gu ? "gu" : "ga") << " h="
        << hs.horizon << ": " << run.epochs_run << " epochs (stage boundary "
        << run.stage_boundary << "), best val " << fmt(run.best_val) << "\n";
  }
  return 0;
}

// ---- sweeps ----

inline int cmd_sweep(const cfg::ExperimentConfig& c, const std::string& kind,
                     std::ostream& out = std::cout) {
  c.validate();
  const RunPaths paths = run_paths(c);
  const auto ds = load_run_dataset(c);
  fs::create_directories(paths.eval_dir);
  fs::create_directories(paths.models_dir);

  if (kind == "lambda") {
    auto pca_model = fit_run_pca(ds, c.w2v.pca_recon_error);
    w2v::W2VArch arch;
    arch.input_w = ds.weather_width();
    arch.latent_k = pca_model.latent_width();
    arch.output_b = ds.n_buses;
    arch.decoder_hidden = c.w2v.decoder_hidden;
    arch.output_act = ad::activation_from_name(c.w2v.output_activation);
    const auto tcfg = w2v_train_config(c);

    auto train_eval = [&](double lambda) {
      auto model = w2v::build_w2v(arch, &pca_model, lambda, tcfg.seed);
      auto report = w2v::train_surrogate(model, ds, tcfg);
      // validation losses at the restored best parameters
      const auto val_w = w2v::detail::gather_rows(ds.weather_norm, ds.random_split.val);
      const auto val_v = w2v::detail::gather_rows(ds.voltage_norm, ds.random_split.val);
      const auto l = w2v::detail::eval_losses(model, val_w, val_v);
      return std::make_pair(l[1], l[2]);  // (L_v, L_w)
    };
    const auto baseline = train_eval(0.0);
    const auto res =
        eval::run_sweep("lambda", c.w2v.lambda_grid, train_eval, baseline, c.w2v.lv_cap_pct);

    std::ofstream os(paths.eval_dir + "/lambda_sweep.csv");
    os << "lambda,lv,lw,delta_lv_pct,delta_lw_pct,failed\n";
    os << "0," << fmt(res.baseline_lv) << "," << fmt(res.baseline_lw) << ",0,0,0\n";
    for (const auto& cand : res.candidates)
      os << fmt(cand.weight) << "," << fmt(cand.lv) << "," << fmt(cand.lw) << ","
         << fmt(cand.delta_lv_pct) << "," << fmt(cand.delta_lw_pct) << "," << cand.failed
         << "\n";
    nlohmann::json j{{"selected", res.has_selection ? res.selected : 0.0},
                     {"rationale", res.rationale}};
    std::ofstream js(paths.models_dir + "/lambda.json");
    js << j.dump(2) << "\n";
    update_manifest(c, paths, {paths.eval_dir + "/lambda_sweep.csv"});
    out << "lambda sweep: selected " << (res.has_selection ? fmt(res.selected) : "0")
        << " (" << res.rationale << ")\n";
    return 0;
  }

  if (kind == "gamma") {
    auto surrogate = load_run_w2v(c);
    for (const auto& hs : c.forecaster.horizons) {
      forecast::WindowGeometry geom{c.forecaster.k, hs.lead, hs.horizon};
      const auto train_ws = forecast::make_windows(ds, geom, forecast::Split::train);
      const auto val_ws = forecast::make_windows(ds, geom, forecast::Split::val);
      forecast::GammaSweepConfig gcfg;
      gcfg.lo = c.forecaster.gamma_lo;
      gcfg.hi = c.forecaster.gamma_hi;
      gcfg.coarse = c.forecaster.gamma_coarse;
      gcfg.refine = c.forecaster.gamma_refine;
      gcfg.weather_cap_pct = c.forecaster.lw_cap_pct;
      gcfg.train = fc_train_config(c, hs.horizon);
      auto sel = forecast::select_gamma(train_ws, val_ws, surrogate, ds.voltage_scaler,
                                        branch_config(c), gcfg);

      std::ofstream os(paths.eval_dir + "/gamma_sweep_h" + std::to_string(hs.horizon) + ".csv");
      os << "gamma,val_voltage_rmse_pu,val_weather_rmse_norm,delta_voltage_pct,"
            "delta_weather_pct,failed\n";
      for (const auto& cand : sel.candidates)
        os << fmt(cand.gamma) << "," << fmt(cand.val_voltage_rmse) << ","
           << fmt(cand.val_weather_rmse) << "," << fmt(cand.delta_voltage_pct) << ","
           << fmt(cand.delta_weather_pct) << "," << cand.failed << "\n";

      nlohmann::json j{{"gamma", sel.gamma}, {"fell_back_to_gu", sel.fell_back_to_gu}};
      std::ofstream js(paths.models_dir + "/gamma_h" + std::to_string(hs.horizon) + ".json");
      js << j.dump(2) << "\n";

      // the selected candidate's trained model doubles as the GA artifact
      ArrayStore store;
      sel.best_model.store(store);
      store.put_scalar("seed", static_cast<double>(gcfg.train.seed));
      store.put_scalar("stage_boundary", sel.best_run.stage_boundary);
      store.save(fc_store_path(paths, forecast::ForecastMode::ga, hs.horizon));
      update_manifest(c, paths,
                      {paths.eval_dir + "/gamma_sweep_h" + std::to_string(hs.horizon) + ".csv",
                       fc_store_path(paths, forecast::ForecastMode::ga, hs.horizon)});
      if (sel.fell_back_to_gu)
        out << "gamma sweep h=" << hs.horizon
            << ": warning: no candidate met the weather cap; falling back to gamma=0\n";
      else
        out << "gamma sweep h=" << hs.horizon << ": selected gamma=" << fmt(sel.gamma) << "\n";
    }
    return 0;
  }
  throw cfg::ConfigError("unknown sweep kind '" + kind + "' (expected lambda or gamma)");
}

// ---- evaluate ----

struct HorizonEval {
  long horizon = 0, lead = 0;
  eval::MetricReport gu, ga;
  forecast::WindowSet test_ws;
  ad::RowMat gu_forecasts, ga_forecasts, target_weather;
  ad::RowMat gu_voltage, ga_voltage, target_voltage;
};

inline HorizonEval evaluate_horizon(const cfg::ExperimentConfig& c,
                                    const data::NexusDataset& ds, w2v::W2VModel& surrogate,
                                    const cfg::HorizonSpec& hs) {
  const RunPaths paths = run_paths(c);
  HorizonEval he;
  he.horizon = hs.horizon;
  he.lead = hs.lead;
  forecast::WindowGeometry geom{c.forecaster.k, hs.lead, hs.horizon};
  he.test_ws = forecast::make_windows(ds, geom, forecast::Split::test);

  const std::string gu_path = fc_store_path(paths, forecast::ForecastMode::gu, hs.horizon);
  const std::string ga_path = fc_store_path(paths, forecast::ForecastMode::ga, hs.horizon);
  require_file(gu_path, "train-forecaster --mode gu");
  if (!fs::exists(ga_path))
    throw MissingArtifactError(ga_path, "sweep --kind gamma (or train-forecaster --mode ga)");
  auto gu_model = forecast::ForecasterModel::restore(ArrayStore::load(gu_path));
  auto ga_model = forecast::ForecasterModel::restore(ArrayStore::load(ga_path));

  he.gu_forecasts = forecast::forecast_all(gu_model, he.test_ws);
  he.ga_forecasts = forecast::forecast_all(ga_model, he.test_ws);
  he.target_weather = forecast::targets_all(he.test_ws);
  he.target_voltage = forecast::voltage_targets_all(he.test_ws);
  const long w = ds.weather_width();
  he.gu_voltage = eval::surrogate_voltages(surrogate, he.gu_forecasts, w, hs.horizon);
  he.ga_voltage = eval::surrogate_voltages(surrogate, he.ga_forecasts, w, hs.horizon);
  he.gu = eval::compute_metrics(he.gu_forecasts, he.target_weather, he.gu_voltage,
                                he.target_voltage, ds.weather_scaler, ds.voltage_scaler,
                                ds.n_locations, hs.horizon);
  he.ga = eval::compute_metrics(he.ga_forecasts, he.target_weather, he.ga_voltage,
                                he.target_voltage, ds.weather_scaler, ds.voltage_scaler,
                                ds.n_locations, hs.horizon);
  return he;
}

inline int cmd_evaluate(const cfg::ExperimentConfig& c, std::ostream& out = std::cout) {
  c.validate();
  const RunPaths paths = run_paths(c);
  const auto ds = load_run_dataset(c);
  auto surrogate = load_run_w2v(c);
  fs::create_directories(paths.eval_dir);

  // surrogate accuracy on its own test split
  {
    const auto rows = ds.random_split.test;
    ad::RowMat w = w2v::detail::gather_rows(ds.weather_norm, rows);
    ad::RowMat v = w2v::detail::gather_rows(ds.voltage_norm, rows);
    ad::Tape tape;
    auto f = surrogate.forward(tape, tape.constant(w));
    const ad::ConstMatMap pred(f.v_hat.value().data(), w.rows(), ds.n_buses);
    const ad::RowMat pred_m = pred;
    const auto bus_rmse = eval::per_bus_rmse(pred_m, v, ds.voltage_scaler, ds.n_buses, 1);
    const auto hist = eval::bus_error_histogram(bus_rmse, c.eval.hist_bins);
    std::ofstream os(paths.eval_dir + "/w2v_bus_hist.csv");
    os << "bin_lo,bin_hi,count\n";
    for (std::size_t i = 0; i < hist.counts.size(); ++i)
      os << fmt(hist.edges[i]) << "," << fmt(hist.edges[i + 1]) << "," << hist.counts[i] << "\n";
    os << "# mean," << fmt(hist.mean) << "\n# median," << fmt(hist.median) << "\n# p95,"
       << fmt(hist.p95) << "\n";
    std::ofstream ps(paths.eval_dir + "/w2v_bus_hist.plot");
    ps << "# x y\n";
    for (std::size_t i = 0; i < hist.counts.size(); ++i)
      ps << fmt((hist.edges[i] + hist.edges[i + 1]) / 2.0) << " " << hist.counts[i] << "\n";
  }

  std::ofstream os(paths.eval_dir + "/metrics.csv");
  os << "horizon,lead,model,temp_rmse_f,wind_rmse_mph,ghi_rmse_wm2,weather_rmse_norm,"
        "voltage_rmse_pu,voltage_mae_pu\n";
  for (const auto& hs : c.forecaster.horizons) {
    const auto he = evaluate_horizon(c, ds, surrogate, hs);
    for (const auto* rep : {&he.gu, &he.ga}) {
      os << hs.horizon << "," << hs.lead << "," << (rep == &he.gu ? "gu" : "ga") << ","
         << fmt(rep->weather_rmse_phys[0]) << "," << fmt(rep->weather_rmse_phys[1]) << ","
         << fmt(rep->weather_rmse_phys[2]) << "," << fmt(rep->weather_rmse_norm) << ","
         << fmt(rep->voltage_rmse_pu) << "," << fmt(rep->voltage_mae_pu) << "\n";
    }
    out << "h=" << hs.horizon << ": gu voltage RMSE " << fmt(he.gu.voltage_rmse_pu)
        << " p.u., ga " << fmt(he.ga.voltage_rmse_pu) << " p.u.\n";
  }
  update_manifest(c, paths, {paths.eval_dir + "/metrics.csv",
                             paths.eval_dir + "/w2v_bus_hist.csv"});
  return 0;
}

// ---- hybrid ----

inline int cmd_hybrid(const cfg::ExperimentConfig& c, std::ostream& out = std::cout) {
  c.validate();
  const RunPaths paths = run_paths(c);
  const auto ds = load_run_dataset(c);
  auto surrogate = load_run_w2v(c);
  fs::create_directories(paths.eval_dir);

  for (const auto& hs : c.forecaster.horizons) {
    const auto he = evaluate_horizon(c, ds, surrogate, hs);
    const auto rows =
        eval::hybrid_input_analysis(he.gu_forecasts, he.ga_forecasts, surrogate,
                                    he.target_voltage, ds.voltage_scaler, ds.n_locations,
                                    hs.horizon);
    std::ofstream os(paths.eval_dir + "/hybrid_h" + std::to_string(hs.horizon) + ".csv");
    os << "substituted,voltage_rmse_pu,delta_pct\n";
    for (const auto& r : rows)
      os << r.substituted << "," << fmt(r.voltage_rmse_pu) << "," << fmt(r.delta_pct) << "\n";
    update_manifest(c, paths, {paths.eval_dir + "/hybrid_h" + std::to_string(hs.horizon) + ".csv"});
    out << "hybrid h=" << hs.horizon << ": wrote " << rows.size() << " rows\n";
  }
  return 0;
}

// ---- report ----

inline int cmd_report(const cfg::ExperimentConfig& c, std::ostream& out = std::cout) {
  c.validate();
  const RunPaths paths = run_paths(c);
  const auto ds = load_run_dataset(c);
  auto surrogate = load_run_w2v(c);
  fs::create_directories(paths.report_dir);

  std::ofstream os(paths.report_dir + "/report.csv");
  os << "horizon,lead,row,temp_rmse_f,wind_rmse_mph,ghi_rmse_wm2,voltage_rmse_pu\n";
  std::vector<std::string> artifacts{paths.report_dir + "/report.csv"};

  for (const auto& hs : c.forecaster.horizons) {
    const auto he = evaluate_horizon(c, ds, surrogate, hs);
    os << hs.horizon << "," << hs.lead << ",gu," << fmt(he.gu.weather_rmse_phys[0]) << ","
       << fmt(he.gu.weather_rmse_phys[1]) << "," << fmt(he.gu.weather_rmse_phys[2]) << ","
       << fmt(he.gu.voltage_rmse_pu) << "\n";
    os << hs.horizon << "," << hs.lead << ",ga," << fmt(he.ga.weather_rmse_phys[0]) << ","
       << fmt(he.ga.weather_rmse_phys[1]) << "," << fmt(he.ga.weather_rmse_phys[2]) << ","
       << fmt(he.ga.voltage_rmse_pu) << "\n";
    os << hs.horizon << "," << hs.lead << ",delta_pct";
    for (int f = 0; f < weather::kNumFeatures; ++f)
      os << ","
         << fmt(100.0 * (he.ga.weather_rmse_phys[static_cast<std::size_t>(f)] -
                         he.gu.weather_rmse_phys[static_cast<std::size_t>(f)]) /
                he.gu.weather_rmse_phys[static_cast<std::size_t>(f)]);
    os << ","
       << fmt(100.0 * (he.ga.voltage_rmse_pu - he.gu.voltage_rmse_pu) / he.gu.voltage_rmse_pu)
       << "\n";

    // weather-bin comparison
    const auto bins = eval::weather_bin_analysis(he.gu_forecasts, he.ga_forecasts,
                                                 he.target_weather, ds.weather_scaler,
                                                 ds.n_locations, hs.horizon, c.eval.bins);
    const std::string bins_path =
        paths.report_dir + "/bins_h" + std::to_string(hs.horizon) + ".csv";
    std::ofstream bs(bins_path);
    bs << "feature,bin_lo,bin_hi,count,rmse_gu,rmse_ga,ratio\n";
    for (const auto& fb : bins.features) {
      for (std::size_t i = 0; i < fb.counts.size(); ++i)
        bs << fb.feature << "," << fmt(fb.edges[i]) << "," << fmt(fb.edges[i + 1]) << ","
           << fb.counts[i] << "," << fmt(fb.rmse_gu[i]) << "," << fmt(fb.rmse_ga[i]) << ","
           << fmt(fb.ratio[i]) << "\n";
      std::ofstream ps(paths.report_dir + "/bins_h" + std::to_string(hs.horizon) + "_" +
                       fb.feature + ".plot");
      ps << "# x y\n";
      for (std::size_t i = 0; i < fb.counts.size(); ++i)
        ps << fmt((fb.edges[i] + fb.edges[i + 1]) / 2.0) << " " << fmt(fb.ratio[i]) << "\n";
    }
    artifacts.push_back(bins_path);

    // large-error isolation
    const auto per_sample =
        eval::per_sample_voltage_rmse(he.gu_voltage, he.target_voltage, ds.voltage_scaler);
    const auto ler = eval::large_error_analysis(
        per_sample, c.eval.large_error_fraction, he.gu_forecasts, he.ga_forecasts,
        he.target_weather, he.gu_voltage, he.ga_voltage, he.target_voltage, ds.weather_scaler,
        ds.voltage_scaler, ds.n_locations, hs.horizon, c.eval.bins);
    const std::string ler_path =
        paths.report_dir + "/large_error_h" + std::to_string(hs.horizon) + ".csv";
    std::ofstream ls(ler_path);
    ls << "quantity,value\n";
    ls << "selected_samples," << ler.selected.size() << "\n";
    ls << "gu_voltage_rmse_pu," << fmt(ler.gu_subset.voltage_rmse_pu) << "\n";
    ls << "ga_voltage_rmse_pu," << fmt(ler.ga_subset.voltage_rmse_pu) << "\n";
    ls << "delta_voltage_pct," << fmt(ler.delta_voltage_pct) << "\n";
    ls << "gu_temp_rmse_f," << fmt(ler.gu_subset.weather_rmse_phys[0]) << "\n";
    ls << "ga_temp_rmse_f," << fmt(ler.ga_subset.weather_rmse_phys[0]) << "\n";
    ls << "gu_wind_rmse_mph," << fmt(ler.gu_subset.weather_rmse_phys[1]) << "\n";
    ls << "ga_wind_rmse_mph," << fmt(ler.ga_subset.weather_rmse_phys[1]) << "\n";
    ls << "gu_ghi_rmse_wm2," << fmt(ler.gu_subset.weather_rmse_phys[2]) << "\n";
    ls << "ga_ghi_rmse_wm2," << fmt(ler.ga_subset.weather_rmse_phys[2]) << "\n";
    ls << "daytime_fraction," << fmt(ler.daytime_fraction) << "\n";
    ls << "low_temp_fraction," << fmt(ler.low_temp_fraction) << "\n";
    ls << "low_temp_threshold_f," << fmt(ler.low_temp_threshold_phys) << "\n";
    ls << "subset_wind_median_mph," << fmt(ler.subset_wind_median) << "\n";
    ls << "subset_wind_iqr_mph," << fmt(ler.subset_wind_iqr) << "\n";
    ls << "full_wind_median_mph," << fmt(ler.full_wind_median) << "\n";
    ls << "full_wind_iqr_mph," << fmt(ler.full_wind_iqr) << "\n";
    artifacts.push_back(ler_path);

    out << "report h=" << hs.horizon << ": voltage delta "
        << fmt(100.0 * (he.ga.voltage_rmse_pu - he.gu.voltage_rmse_pu) /
               he.gu.voltage_rmse_pu)
        << "%\n";
  }
  os.close();
  update_manifest(c, paths, artifacts);
  return 0;
}

// full pipeline for one seed; used by --parallel-seeds and the determinism checks
inline int run_all(cfg::ExperimentConfig c, bool overwrite, std::ostream& out) {
  cmd_generate_data(c, overwrite, out);
  cmd_train_w2v(c, out);
  cmd_train_forecaster(c, forecast::ForecastMode::gu, out);
  cmd_sweep(c, "gamma", out);
  cmd_evaluate(c, out);
  cmd_hybrid(c, out);
  cmd_report(c, out);
  return 0;
}

}  // namespace w2vlab::pipeline
