#pragma once

#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "w2vlab/dataset.hpp"
#include "w2vlab/forecaster.hpp"
#include "w2vlab/grid.hpp"
#include "w2vlab/renewables.hpp"
#include "w2vlab/w2v.hpp"
#include "w2vlab/weather.hpp"

namespace w2vlab::cfg {

class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct HorizonSpec {
  long horizon = 1;
  long lead = 1;
};

struct ExperimentConfig {
  std::string run_name = "desk";
  std::uint64_t seed = 1;
  std::string out_dir = "out";

  // scenario
  long hours = 2000;
  long weather_locations = 25;
  double area_km = 300.0;
  grid::SynthGridConfig grid;
  std::string grid_file;  // optional; generated when empty
  weather::SynthWeatherConfig weather;
  grid::RenewableModelConfig renewables;
  data::DatasetOptions dataset;

  struct W2vSection {
    double pca_recon_error = 0.08;
    double lambda = 0.8;
    std::vector<double> lambda_grid = {0.2, 0.4, 0.8, 1.6, 3.2};
    double lv_cap_pct = 5.0;
    long decoder_hidden = 64;
    std::string output_activation = "identity";
    w2v::TrainConfig train;
  } w2v;

  struct ForecasterSection {
    std::string branch = "feedforward";
    long d_model = 16;
    long hidden = 64;
    long heads = 4;
    long layers = 2;
    long ff_dim = 64;
    double dropout = 0.2;
    long k = 24;
    std::vector<HorizonSpec> horizons = {{1, 1}, {3, 2}, {6, 4}};
    double gamma = 0.0;  // 0 means: take the sweep's selection
    double gamma_lo = 1.0;
    double gamma_hi = 10.0;
    int gamma_coarse = 5;
    int gamma_refine = 4;
    double lw_cap_pct = 5.0;
    forecast::ForecastTrainConfig train;
  } forecaster;

  struct EvalSection {
    int bins = 6;
    double large_error_fraction = 0.05;
    int hist_bins = 20;
  } eval;

  void validate() const {
    if (run_name.empty()) throw ConfigError("run_name must not be empty");
    if (hours < 1) throw ConfigError("hours must be at least 1");
    if (weather_locations < 1) throw ConfigError("weather_locations must be at least 1");
    if (!grid_file.empty() && !std::ifstream(grid_file).good())
      throw ConfigError("grid_file '" + grid_file + "' does not exist");
    try {
      weather.validate();
      renewables.validate();
    } catch (const std::exception& e) {
      throw ConfigError(e.what());
    }
    if (w2v.lambda < 0.0) throw ConfigError("w2v.lambda must be non-negative");
    if (!(w2v.pca_recon_error > 0.0 && w2v.pca_recon_error <= 1.0))
      throw ConfigError("w2v.pca_recon_error must be in (0, 1]");
    if (forecaster.gamma < 0.0) throw ConfigError("forecaster.gamma must be non-negative");
    if (forecaster.train.stage1_fraction < 2.0 / 3.0 - 1e-12)
      throw ConfigError("forecaster.train.stage1_fraction must be at least 2/3");
    if (forecaster.horizons.empty()) throw ConfigError("at least one horizon is required");
    for (const auto& h : forecaster.horizons)
      if (h.horizon < 1 || h.lead < 1)
        throw ConfigError("horizon and lead must be at least 1");
    if (!(eval.large_error_fraction > 0.0 && eval.large_error_fraction <= 1.0))
      throw ConfigError("eval.large_error_fraction must be in (0, 1]");
  }
};

namespace detail {

inline w2v::TrainConfig train_from_json(const nlohmann::json& j, w2v::TrainConfig base) {
  base.max_epochs = j.value("epochs", base.max_epochs);
  base.batch_size = j.value("batch", base.batch_size);
  base.lr = j.value("lr", base.lr);
  base.stop_patience = j.value("stop_patience", base.stop_patience);
  base.sched_patience = j.value("sched_patience", base.sched_patience);
  base.decay_factor = j.value("decay_factor", base.decay_factor);
  if (j.contains("optimizer"))
    base.optimizer = ad::optimizer_from_name(j.at("optimizer").get<std::string>());
  return base;
}

inline nlohmann::json train_to_json(const w2v::TrainConfig& t) {
  return {{"epochs", t.max_epochs},
          {"batch", t.batch_size},
          {"lr", t.lr},
          {"stop_patience", t.stop_patience},
          {"sched_patience", t.sched_patience},
          {"decay_factor", t.decay_factor},
          {"optimizer", t.optimizer == ad::OptimizerKind::radam ? "radam" : "adam"}};
}

inline forecast::ForecastTrainConfig ftrain_from_json(const nlohmann::json& j,
                                                      forecast::ForecastTrainConfig base) {
  base.max_epochs = j.value("epochs", base.max_epochs);
  base.batch_size = j.value("batch", base.batch_size);
  base.lr = j.value("lr", base.lr);
  base.stop_patience = j.value("stop_patience", base.stop_patience);
  base.sched_patience = j.value("sched_patience", base.sched_patience);
  base.decay_factor = j.value("decay_factor", base.decay_factor);
  base.stage1_fraction = j.value("stage1_fraction", base.stage1_fraction);
  if (j.contains("optimizer"))
    base.optimizer = ad::optimizer_from_name(j.at("optimizer").get<std::string>());
  return base;
}

inline nlohmann::json ftrain_to_json(const forecast::ForecastTrainConfig& t) {
  return {{"epochs", t.max_epochs},
          {"batch", t.batch_size},
          {"lr", t.lr},
          {"stop_patience", t.stop_patience},
          {"sched_patience", t.sched_patience},
          {"decay_factor", t.decay_factor},
          {"stage1_fraction", t.stage1_fraction},
          {"optimizer", t.optimizer == ad::OptimizerKind::radam ? "radam" : "adam"}};
}

}  // namespace detail

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  ExperimentConfig c;
  c.run_name = j.value("run_name", c.run_name);
  c.seed = j.value("seed", c.seed);
  c.out_dir = j.value("out_dir", c.out_dir);
  c.hours = j.value("hours", c.hours);
  c.weather_locations = j.value("weather_locations", c.weather_locations);
  c.area_km = j.value("area_km", c.area_km);
  c.grid_file = j.value("grid_file", c.grid_file);

  if (j.contains("grid")) {
    const auto& g = j.at("grid");
    c.grid.n_buses = g.value("buses", c.grid.n_buses);
    c.grid.n_conventional = g.value("conventional", c.grid.n_conventional);
    c.grid.n_wind = g.value("wind_farms", c.grid.n_wind);
    c.grid.n_solar = g.value("solar_farms", c.grid.n_solar);
    c.grid.load_mw_min = g.value("load_mw_min", c.grid.load_mw_min);
    c.grid.load_mw_max = g.value("load_mw_max", c.grid.load_mw_max);
    c.grid.wind_capacity_min = g.value("wind_capacity_min", c.grid.wind_capacity_min);
    c.grid.wind_capacity_max = g.value("wind_capacity_max", c.grid.wind_capacity_max);
    c.grid.solar_capacity_min = g.value("solar_capacity_min", c.grid.solar_capacity_min);
    c.grid.solar_capacity_max = g.value("solar_capacity_max", c.grid.solar_capacity_max);
    c.grid.x_per_km = g.value("x_per_km", c.grid.x_per_km);
    c.grid.mesh_degree = g.value("mesh_degree", c.grid.mesh_degree);
  }
  c.grid.area_km = c.area_km;

  if (j.contains("weather")) {
    const auto& w = j.at("weather");
    c.weather.length_scale_km = w.value("length_scale_km", c.weather.length_scale_km);
    c.weather.temp_base_f = w.value("temp_base_f", c.weather.temp_base_f);
    c.weather.temp_seasonal_amp_f = w.value("temp_seasonal_amp_f", c.weather.temp_seasonal_amp_f);
    c.weather.temp_diurnal_amp_f = w.value("temp_diurnal_amp_f", c.weather.temp_diurnal_amp_f);
    c.weather.temp_noise_sd_f = w.value("temp_noise_sd_f", c.weather.temp_noise_sd_f);
    c.weather.ghi_max_wm2 = w.value("ghi_max_wm2", c.weather.ghi_max_wm2);
    c.weather.cloud_ar = w.value("cloud_ar", c.weather.cloud_ar);
    c.weather.cloud_sd = w.value("cloud_sd", c.weather.cloud_sd);
    c.weather.wind_mean_mph = w.value("wind_mean_mph", c.weather.wind_mean_mph);
    c.weather.wind_site_sd_mph = w.value("wind_site_sd_mph", c.weather.wind_site_sd_mph);
    c.weather.wind_ar = w.value("wind_ar", c.weather.wind_ar);
    c.weather.wind_noise_sd_mph = w.value("wind_noise_sd_mph", c.weather.wind_noise_sd_mph);
    c.weather.ramp_rate_per_hour = w.value("ramp_rate_per_hour", c.weather.ramp_rate_per_hour);
    c.weather.ramp_depth = w.value("ramp_depth", c.weather.ramp_depth);
  }

  if (j.contains("renewables")) {
    const auto& r = j.at("renewables");
    c.renewables.wind_cut_in_mph = r.value("wind_cut_in_mph", c.renewables.wind_cut_in_mph);
    c.renewables.wind_rated_mph = r.value("wind_rated_mph", c.renewables.wind_rated_mph);
    c.renewables.wind_cut_out_mph = r.value("wind_cut_out_mph", c.renewables.wind_cut_out_mph);
    c.renewables.pv_rated_ghi_wm2 = r.value("pv_rated_ghi_wm2", c.renewables.pv_rated_ghi_wm2);
    c.renewables.comfort_low_f = r.value("comfort_low_f", c.renewables.comfort_low_f);
    c.renewables.comfort_high_f = r.value("comfort_high_f", c.renewables.comfort_high_f);
    c.renewables.load_per_deg_cold = r.value("load_per_deg_cold", c.renewables.load_per_deg_cold);
    c.renewables.load_per_deg_hot = r.value("load_per_deg_hot", c.renewables.load_per_deg_hot);
  }

  if (j.contains("dataset")) {
    const auto& d = j.at("dataset");
    c.dataset.tol = d.value("tol", c.dataset.tol);
    c.dataset.max_iter = d.value("max_iter", c.dataset.max_iter);
    c.dataset.v_max_pu = d.value("v_max_pu", c.dataset.v_max_pu);
    c.dataset.scaler_fit_on_full = d.value("scaler_fit_on_full", c.dataset.scaler_fit_on_full);
    c.dataset.threads = d.value("threads", c.dataset.threads);
  }

  if (j.contains("w2v")) {
    const auto& w = j.at("w2v");
    c.w2v.pca_recon_error = w.value("pca_recon_error", c.w2v.pca_recon_error);
    c.w2v.lambda = w.value("lambda", c.w2v.lambda);
    if (w.contains("lambda_grid"))
      c.w2v.lambda_grid = w.at("lambda_grid").get<std::vector<double>>();
    c.w2v.lv_cap_pct = w.value("lv_cap_pct", c.w2v.lv_cap_pct);
    c.w2v.decoder_hidden = w.value("decoder_hidden", c.w2v.decoder_hidden);
    c.w2v.output_activation = w.value("output_activation", c.w2v.output_activation);
    c.w2v.train = detail::train_from_json(w, c.w2v.train);
  }

  if (j.contains("forecaster")) {
    const auto& f = j.at("forecaster");
    c.forecaster.branch = f.value("branch", c.forecaster.branch);
    c.forecaster.d_model = f.value("d_model", c.forecaster.d_model);
    c.forecaster.hidden = f.value("hidden", c.forecaster.hidden);
    c.forecaster.heads = f.value("heads", c.forecaster.heads);
    c.forecaster.layers = f.value("layers", c.forecaster.layers);
    c.forecaster.ff_dim = f.value("ff_dim", c.forecaster.ff_dim);
    c.forecaster.dropout = f.value("dropout", c.forecaster.dropout);
    c.forecaster.k = f.value("k", c.forecaster.k);
    if (f.contains("horizons")) {
      c.forecaster.horizons.clear();
      for (const auto& h : f.at("horizons"))
        c.forecaster.horizons.push_back(
            {h.at("h").get<long>(), h.at("lead").get<long>()});
    }
    c.forecaster.gamma = f.value("gamma", c.forecaster.gamma);
    c.forecaster.gamma_lo = f.value("gamma_lo", c.forecaster.gamma_lo);
    c.forecaster.gamma_hi = f.value("gamma_hi", c.forecaster.gamma_hi);
    c.forecaster.gamma_coarse = f.value("gamma_coarse", c.forecaster.gamma_coarse);
    c.forecaster.gamma_refine = f.value("gamma_refine", c.forecaster.gamma_refine);
    c.forecaster.lw_cap_pct = f.value("lw_cap_pct", c.forecaster.lw_cap_pct);
    c.forecaster.train = detail::ftrain_from_json(f, c.forecaster.train);
  }

  if (j.contains("eval")) {
    const auto& e = j.at("eval");
    c.eval.bins = e.value("bins", c.eval.bins);
    c.eval.large_error_fraction = e.value("large_error_fraction", c.eval.large_error_fraction);
    c.eval.hist_bins = e.value("hist_bins", c.eval.hist_bins);
  }
  return c;
}

inline nlohmann::json config_to_json(const ExperimentConfig& c) {
  nlohmann::json j;
  j["run_name"] = c.run_name;
  j["seed"] = c.seed;
  j["out_dir"] = c.out_dir;
  j["hours"] = c.hours;
  j["weather_locations"] = c.weather_locations;
  j["area_km"] = c.area_km;
  if (!c.grid_file.empty()) j["grid_file"] = c.grid_file;
  j["grid"] = {{"buses", c.grid.n_buses},
               {"conventional", c.grid.n_conventional},
               {"wind_farms", c.grid.n_wind},
               {"solar_farms", c.grid.n_solar},
               {"load_mw_min", c.grid.load_mw_min},
               {"load_mw_max", c.grid.load_mw_max},
               {"wind_capacity_min", c.grid.wind_capacity_min},
               {"wind_capacity_max", c.grid.wind_capacity_max},
               {"solar_capacity_min", c.grid.solar_capacity_min},
               {"solar_capacity_max", c.grid.solar_capacity_max},
               {"x_per_km", c.grid.x_per_km},
               {"mesh_degree", c.grid.mesh_degree}};
  j["weather"] = {{"length_scale_km", c.weather.length_scale_km},
                  {"temp_base_f", c.weather.temp_base_f},
                  {"temp_seasonal_amp_f", c.weather.temp_seasonal_amp_f},
                  {"temp_diurnal_amp_f", c.weather.temp_diurnal_amp_f},
                  {"temp_noise_sd_f", c.weather.temp_noise_sd_f},
                  {"ghi_max_wm2", c.weather.ghi_max_wm2},
                  {"cloud_ar", c.weather.cloud_ar},
                  {"cloud_sd", c.weather.cloud_sd},
                  {"wind_mean_mph", c.weather.wind_mean_mph},
                  {"wind_site_sd_mph", c.weather.wind_site_sd_mph},
                  {"wind_ar", c.weather.wind_ar},
                  {"wind_noise_sd_mph", c.weather.wind_noise_sd_mph},
                  {"ramp_rate_per_hour", c.weather.ramp_rate_per_hour},
                  {"ramp_depth", c.weather.ramp_depth}};
  j["renewables"] = {{"wind_cut_in_mph", c.renewables.wind_cut_in_mph},
                     {"wind_rated_mph", c.renewables.wind_rated_mph},
                     {"wind_cut_out_mph", c.renewables.wind_cut_out_mph},
                     {"pv_rated_ghi_wm2", c.renewables.pv_rated_ghi_wm2},
                     {"comfort_low_f", c.renewables.comfort_low_f},
                     {"comfort_high_f", c.renewables.comfort_high_f},
                     {"load_per_deg_cold", c.renewables.load_per_deg_cold},
                     {"load_per_deg_hot", c.renewables.load_per_deg_hot}};
  j["dataset"] = {{"tol", c.dataset.tol},
                  {"max_iter", c.dataset.max_iter},
                  {"v_max_pu", c.dataset.v_max_pu},
                  {"scaler_fit_on_full", c.dataset.scaler_fit_on_full},
                  {"threads", c.dataset.threads}};
  j["w2v"] = detail::train_to_json(c.w2v.train);
  j["w2v"]["pca_recon_error"] = c.w2v.pca_recon_error;
  j["w2v"]["lambda"] = c.w2v.lambda;
  j["w2v"]["lambda_grid"] = c.w2v.lambda_grid;
  j["w2v"]["lv_cap_pct"] = c.w2v.lv_cap_pct;
  j["w2v"]["decoder_hidden"] = c.w2v.decoder_hidden;
  j["w2v"]["output_activation"] = c.w2v.output_activation;
  j["forecaster"] = detail::ftrain_to_json(c.forecaster.train);
  j["forecaster"]["branch"] = c.forecaster.branch;
  j["forecaster"]["d_model"] = c.forecaster.d_model;
  j["forecaster"]["hidden"] = c.forecaster.hidden;
  j["forecaster"]["heads"] = c.forecaster.heads;
  j["forecaster"]["layers"] = c.forecaster.layers;
  j["forecaster"]["ff_dim"] = c.forecaster.ff_dim;
  j["forecaster"]["dropout"] = c.forecaster.dropout;
  j["forecaster"]["k"] = c.forecaster.k;
  j["forecaster"]["horizons"] = nlohmann::json::array();
  for (const auto& h : c.forecaster.horizons)
    j["forecaster"]["horizons"].push_back({{"h", h.horizon}, {"lead", h.lead}});
  j["forecaster"]["gamma"] = c.forecaster.gamma;
  j["forecaster"]["gamma_lo"] = c.forecaster.gamma_lo;
  j["forecaster"]["gamma_hi"] = c.forecaster.gamma_hi;
  j["forecaster"]["gamma_coarse"] = c.forecaster.gamma_coarse;
  j["forecaster"]["gamma_refine"] = c.forecaster.gamma_refine;
  j["forecaster"]["lw_cap_pct"] = c.forecaster.lw_cap_pct;
  j["eval"] = {{"bins", c.eval.bins},
               {"large_error_fraction", c.eval.large_error_fraction},
               {"hist_bins", c.eval.hist_bins}};
  return j;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file '" + path + "'");
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config '" + path + "' is not valid JSON: " + e.what());
  }
  try {
    return config_from_json(j);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config '" + path + "': " + e.what());
  }
}

inline void save_config(const ExperimentConfig& c, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw ConfigError("cannot write config file '" + path + "'");
  os << config_to_json(c).dump(2) << "\n";
}

}  // namespace w2vlab::cfg
