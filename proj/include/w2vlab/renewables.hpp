#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "w2vlab/grid.hpp"
#include "w2vlab/weather.hpp"

namespace w2vlab::grid {

// First-order weather coupling models: piecewise wind power curve, linear PV
// conversion with clipping, and a V-shaped load-temperature factor with a
// flat comfort band.
struct RenewableModelConfig {
  double wind_cut_in_mph = 7.0;
  double wind_rated_mph = 25.0;
  double wind_cut_out_mph = 55.0;
  double pv_rated_ghi_wm2 = 1000.0;
  double comfort_low_f = 65.0;
  double comfort_high_f = 75.0;
  double load_per_deg_cold = 0.008;  // factor increase per degF below the band
  double load_per_deg_hot = 0.012;   // per degF above the band

  void validate() const {
    if (!(wind_cut_in_mph < wind_rated_mph && wind_rated_mph < wind_cut_out_mph))
      throw GridError("wind curve needs cut-in < rated < cut-out");
    if (pv_rated_ghi_wm2 <= 0.0) throw GridError("pv rated irradiance must be positive");
    if (comfort_low_f >= comfort_high_f) throw GridError("comfort band is empty");
    if (load_per_deg_cold < 0.0 || load_per_deg_hot < 0.0)
      throw GridError("load-temperature slopes must be non-negative");
  }
};

// fraction of capacity produced at a given wind speed; cubic ramp between
// cut-in and rated, zero outside [cut-in, cut-out]
inline double wind_power_fraction(const RenewableModelConfig& cfg, double speed_mph) {
  if (speed_mph < cfg.wind_cut_in_mph || speed_mph > cfg.wind_cut_out_mph) return 0.0;
  if (speed_mph >= cfg.wind_rated_mph) return 1.0;
  const double v3 = speed_mph * speed_mph * speed_mph;
  const double ci3 = cfg.wind_cut_in_mph * cfg.wind_cut_in_mph * cfg.wind_cut_in_mph;
  const double vr3 = cfg.wind_rated_mph * cfg.wind_rated_mph * cfg.wind_rated_mph;
  return (v3 - ci3) / (vr3 - ci3);
}

inline double pv_power_fraction(const RenewableModelConfig& cfg, double ghi_wm2) {
  return std::min(1.0, std::max(0.0, ghi_wm2 / cfg.pv_rated_ghi_wm2));
}

inline double load_temperature_factor(const RenewableModelConfig& cfg, double temp_f) {
  if (temp_f < cfg.comfort_low_f)
    return 1.0 + cfg.load_per_deg_cold * (cfg.comfort_low_f - temp_f);
  if (temp_f > cfg.comfort_high_f)
    return 1.0 + cfg.load_per_deg_hot * (temp_f - cfg.comfort_high_f);
  return 1.0;
}

// Builds net bus injections for one weather sample. Loads scale with local
// temperature; renewables follow their curves; conventional units (except
// the slack's) are dispatched proportionally to capacity against the net
// load, with the slack absorbing the residual and losses.
inline InjectionProfile weather_to_injections(const GridModel& g,
                                              const weather::WeatherSample& sample,
                                              const RenewableModelConfig& cfg,
                                              const std::vector<int>& bus_to_location) {
  cfg.validate();
  const std::size_t n = g.n_buses();
  if (bus_to_location.size() != n)
    throw std::invalid_argument("bus-to-location map has " +
                                std::to_string(bus_to_location.size()) + " entries for " +
                                std::to_string(n) + " buses");
  const auto s = sample.n_locations();
  auto check_loc = [&](int loc) {
    if (loc < 0 || static_cast<std::size_t>(loc) >= s)
      throw std::invalid_argument("weather location " + std::to_string(loc) +
                                  " out of range (S=" + std::to_string(s) + ")");
  };
  for (std::size_t i = 0; i < s; ++i) {
    if (sample.wind_mph[i] < 0.0 || sample.ghi_wm2[i] < 0.0)
      throw std::invalid_argument("negative wind or irradiance at location " +
                                  std::to_string(i));
  }

  InjectionProfile inj;
  inj.p_mw.assign(n, 0.0);
  inj.q_mvar.assign(n, 0.0);
  inj.v_setpoint.assign(n, 1.0);

  double total_load = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const Bus& b = g.buses[i];
    inj.v_setpoint[i] = b.v_setpoint;
    const int loc = bus_to_location[i];
    check_loc(loc);
    const double f = load_temperature_factor(cfg, sample.temperature_f[static_cast<std::size_t>(loc)]);
    inj.p_mw[i] -= b.load_mw * f;
    inj.q_mvar[i] -= b.load_mvar * f;
    total_load += b.load_mw * f;
  }

  double total_renewable = 0.0;
  for (const Generator& gen : g.generators) {
    if (gen.kind == GenKind::conventional) continue;
    check_loc(gen.weather_location);
    const auto loc = static_cast<std::size_t>(gen.weather_location);
    double p = 0.0;
    if (gen.kind == GenKind::wind)
      p = gen.capacity_mw * wind_power_fraction(cfg, sample.wind_mph[loc]);
    else
      p = gen.capacity_mw * pv_power_fraction(cfg, sample.ghi_wm2[loc]);
    inj.p_mw[static_cast<std::size_t>(g.bus_index(gen.bus))] += p;
    total_renewable += p;
  }

  const int slack = g.slack_index();
  double dispatchable_capacity = 0.0;
  for (const Generator& gen : g.generators) {
    if (gen.kind != GenKind::conventional) continue;
    if (g.bus_index(gen.bus) == slack) continue;
    dispatchable_capacity += gen.capacity_mw;
  }
  const double need = std::max(0.0, total_load - total_renewable);
  const double ratio =
      dispatchable_capacity > 0.0 ? std::min(1.0, need / dispatchable_capacity) : 0.0;
  for (const Generator& gen : g.generators) {
    if (gen.kind != GenKind::conventional) continue;
    if (g.bus_index(gen.bus) == slack) continue;
    inj.p_mw[static_cast<std::size_t>(g.bus_index(gen.bus))] += ratio * gen.capacity_mw;
  }
  return inj;
}

}  // namespace w2vlab::grid
