#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "w2vlab/rng.hpp"

namespace w2vlab::weather {

class WeatherError : public std::runtime_error {
 public:
  explicit WeatherError(const std::string& msg) : std::runtime_error(msg) {}
};

constexpr int kNumFeatures = 3;  // temperature, wind speed, GHI
constexpr int kFeatTemp = 0;
constexpr int kFeatWind = 1;
constexpr int kFeatGhi = 2;

inline const char* feature_name(int f) {
  switch (f) {
    case kFeatTemp: return "temperature";
    case kFeatWind: return "wind";
    case kFeatGhi: return "ghi";
  }
  return "?";
}

struct WeatherSample {
  std::vector<double> temperature_f;
  std::vector<double> wind_mph;
  std::vector<double> ghi_wm2;

  std::size_t n_locations() const { return temperature_f.size(); }

  double feature(int f, std::size_t loc) const {
    switch (f) {
      case kFeatTemp: return temperature_f[loc];
      case kFeatWind: return wind_mph[loc];
      default: return ghi_wm2[loc];
    }
  }
};

// Hourly samples at S fixed locations. Flattening is feature-major: the W
// entries of a sample are [temp at all S, wind at all S, ghi at all S].
struct WeatherSeries {
  std::vector<std::array<double, 2>> locations_km;  // may be empty for loaded CSVs
  std::vector<WeatherSample> samples;
  long start_hour = 0;

  std::size_t size() const { return samples.size(); }
  std::size_t n_locations() const {
    return samples.empty() ? locations_km.size() : samples[0].n_locations();
  }
  std::size_t flat_width() const { return kNumFeatures * n_locations(); }

  std::vector<double> flatten(std::size_t t) const {
    const std::size_t s = n_locations();
    std::vector<double> out(flat_width());
    for (std::size_t i = 0; i < s; ++i) {
      out[i] = samples[t].temperature_f[i];
      out[s + i] = samples[t].wind_mph[i];
      out[2 * s + i] = samples[t].ghi_wm2[i];
    }
    return out;
  }
};

struct SynthWeatherConfig {
  double length_scale_km = 80.0;

  double temp_base_f = 58.0;
  double temp_gradient_per_km = 0.02;  // north-south deterministic gradient
  double temp_seasonal_amp_f = 16.0;
  double temp_diurnal_amp_f = 8.0;
  double temp_noise_sd_f = 3.5;

  double ghi_max_wm2 = 950.0;
  double cloud_ar = 0.92;      // AR(1) coefficient of the cloud driver
  double cloud_sd = 0.9;       // innovation scale of the cloud driver

  double wind_mean_mph = 15.0;
  double wind_site_sd_mph = 2.5;
  double wind_ar = 0.85;
  double wind_noise_sd_mph = 3.0;
  double ramp_rate_per_hour = 1.0 / 150.0;  // Poisson rate of ramp events
  double ramp_depth = 0.75;                 // fractional dip at the bottom

  void validate() const {
    if (!(length_scale_km > 0.0)) throw WeatherError("length scale must be positive");
    if (wind_ar < 0.0 || wind_ar >= 1.0) throw WeatherError("wind AR coefficient must be in [0,1)");
    if (cloud_ar < 0.0 || cloud_ar >= 1.0) throw WeatherError("cloud AR coefficient must be in [0,1)");
    if (ramp_depth < 0.0 || ramp_depth > 1.0) throw WeatherError("ramp depth must be in [0,1]");
  }
};

// Clear-sky envelope on a fixed 24-hour schedule: positive for the 12 hourly
// steps sampled mid-hour between 06:00 and 18:00, exactly zero otherwise.
inline double clear_sky_envelope(long hour_of_day) {
  const double h = static_cast<double>(hour_of_day) + 0.5;
  if (h <= 6.0 || h >= 18.0) return 0.0;
  return std::sin(M_PI * (h - 6.0) / 12.0);
}

// System-wide wind ramp profile: dip to (1 - depth), hold, overshoot, settle.
inline double ramp_multiplier(long hours_since_start, double depth) {
  const double t = static_cast<double>(hours_since_start);
  if (t < 0.0 || t >= 12.0) return 1.0;
  if (t < 3.0) return 1.0 - depth * (t / 3.0);
  if (t < 5.0) return 1.0 - depth;
  if (t < 9.0) return 1.0 - depth + (depth + 0.25) * ((t - 5.0) / 4.0);
  return 1.25 - 0.25 * ((t - 9.0) / 3.0);
}

namespace detail {

// Cholesky factor of the exponential spatial kernel exp(-d/l), with jitter.
inline Eigen::MatrixXd spatial_factor(const std::vector<std::array<double, 2>>& locs,
                                      double length_scale) {
  const auto s = static_cast<Eigen::Index>(locs.size());
  Eigen::MatrixXd cov(s, s);
  for (Eigen::Index i = 0; i < s; ++i) {
    for (Eigen::Index j = 0; j < s; ++j) {
      const double dx = locs[static_cast<std::size_t>(i)][0] - locs[static_cast<std::size_t>(j)][0];
      const double dy = locs[static_cast<std::size_t>(i)][1] - locs[static_cast<std::size_t>(j)][1];
      cov(i, j) = std::exp(-std::sqrt(dx * dx + dy * dy) / length_scale);
    }
    cov(i, i) += 1e-10;
  }
  Eigen::LLT<Eigen::MatrixXd> llt(cov);
  if (llt.info() != Eigen::Success)
    throw WeatherError("spatial kernel is not positive definite");
  return llt.matrixL();
}

inline Eigen::VectorXd correlated_draw(const Eigen::MatrixXd& factor, Rng& rng) {
  Eigen::VectorXd eps(factor.rows());
  for (Eigen::Index i = 0; i < eps.size(); ++i) eps(i) = rng.normal();
  return factor * eps;
}

}  // namespace detail

inline WeatherSeries generate_synthetic_series(const SynthWeatherConfig& cfg,
                                               const std::vector<std::array<double, 2>>& locations,
                                               long t_steps, std::uint64_t seed) {
  cfg.validate();
  if (t_steps < 1) throw WeatherError("series length must be at least 1");
  if (locations.empty()) throw WeatherError("at least one location is required");

  const std::size_t s = locations.size();
  Rng rng(derive_seed(seed, "weatherfield.synthetic"));
  const Eigen::MatrixXd factor = detail::spatial_factor(locations, cfg.length_scale_km);

  double mean_y = 0.0;
  for (const auto& loc : locations) mean_y += loc[1];
  mean_y /= static_cast<double>(s);

  // persistent per-location states
  Eigen::VectorXd wind_mean = detail::correlated_draw(factor, rng) * cfg.wind_site_sd_mph;
  for (Eigen::Index i = 0; i < wind_mean.size(); ++i)
    wind_mean(i) = std::max(4.0, cfg.wind_mean_mph + wind_mean(i));
  Eigen::VectorXd wind_state = wind_mean;
  Eigen::VectorXd cloud_state = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(s));

  long ramp_started = -1000;  // hour index of the active ramp event

  WeatherSeries series;
  series.locations_km = locations;
  series.samples.reserve(static_cast<std::size_t>(t_steps));

  for (long t = 0; t < t_steps; ++t) {
    const long hod = t % 24;
    const double seasonal =
        cfg.temp_seasonal_amp_f * std::sin(2.0 * M_PI * static_cast<double>(t) / 8760.0 - M_PI / 2.0);
    const double diurnal =
        cfg.temp_diurnal_amp_f * std::sin(2.0 * M_PI * (static_cast<double>(hod) - 9.0) / 24.0);

    const Eigen::VectorXd temp_noise = detail::correlated_draw(factor, rng) * cfg.temp_noise_sd_f;
    const Eigen::VectorXd cloud_innov = detail::correlated_draw(factor, rng);
    const Eigen::VectorXd wind_innov = detail::correlated_draw(factor, rng);

    // Poisson scheduling: at most one active event at a time
    const bool ramp_active = t - ramp_started < 12;
    const double u = rng.uniform();
    if (!ramp_active && u < cfg.ramp_rate_per_hour) ramp_started = t;
    const double ramp = ramp_multiplier(t - ramp_started, cfg.ramp_depth);

    WeatherSample sample;
    sample.temperature_f.resize(s);
    sample.wind_mph.resize(s);
    sample.ghi_wm2.resize(s);

    const double envelope = clear_sky_envelope(hod);
    for (std::size_t i = 0; i < s; ++i) {
      const auto ei = static_cast<Eigen::Index>(i);
      sample.temperature_f[i] = cfg.temp_base_f +
                                cfg.temp_gradient_per_km * (locations[i][1] - mean_y) +
                                seasonal + diurnal + temp_noise(ei);

      cloud_state(ei) = cfg.cloud_ar * cloud_state(ei) +
                        std::sqrt(1.0 - cfg.cloud_ar * cfg.cloud_ar) * cfg.cloud_sd *
                            cloud_innov(ei);
      const double clearness = 1.0 - 0.75 / (1.0 + std::exp(-2.0 * cloud_state(ei)));
      sample.ghi_wm2[i] = cfg.ghi_max_wm2 * envelope * clearness;

      wind_state(ei) = wind_mean(ei) + cfg.wind_ar * (wind_state(ei) - wind_mean(ei)) +
                       std::sqrt(1.0 - cfg.wind_ar * cfg.wind_ar) * cfg.wind_noise_sd_mph *
                           wind_innov(ei);
      sample.wind_mph[i] = std::max(0.0, wind_state(ei) * ramp);
    }
    series.samples.push_back(std::move(sample));
  }
  return series;
}

// ---- weather.csv ----
// header: time,location,temperature_f,wind_mph,ghi_wm2
// or:     time,location,temperature_f,wind_u_mph,wind_v_mph,ghi_wm2

inline void save_weather_csv(const WeatherSeries& series, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw WeatherError("cannot write '" + path + "'");
  os << "time,location,temperature_f,wind_mph,ghi_wm2\n";
  char buf[256];
  for (std::size_t t = 0; t < series.size(); ++t) {
    const WeatherSample& smp = series.samples[t];
    for (std::size_t i = 0; i < smp.n_locations(); ++i) {
      std::snprintf(buf, sizeof(buf), "%ld,%zu,%.17g,%.17g,%.17g\n",
                    series.start_hour + static_cast<long>(t), i, smp.temperature_f[i],
                    smp.wind_mph[i], smp.ghi_wm2[i]);
      os << buf;
    }
  }
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

inline WeatherSeries load_weather_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw WeatherError("cannot open '" + path + "'");
  std::string line;
  if (!std::getline(is, line)) throw WeatherError("'" + path + "' is empty");
  const auto header = split_csv_line(line);
  std::map<std::string, int> col;
  for (std::size_t i = 0; i < header.size(); ++i) col[header[i]] = static_cast<int>(i);
  for (const char* req : {"time", "location", "temperature_f", "ghi_wm2"})
    if (!col.count(req)) throw WeatherError("'" + path + "' is missing column '" + req + "'");
  const bool has_speed = col.count("wind_mph") > 0;
  const bool has_uv = col.count("wind_u_mph") > 0 && col.count("wind_v_mph") > 0;
  if (!has_speed && !has_uv)
    throw WeatherError("'" + path + "' needs wind_mph or wind_u_mph/wind_v_mph columns");

  struct Row {
    int loc;
    double temp, wind, ghi;
  };
  std::map<long, std::vector<Row>> by_time;
  long lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto f = split_csv_line(line);
    if (f.size() != header.size())
      throw WeatherError(path + ":" + std::to_string(lineno) + ": expected " +
                         std::to_string(header.size()) + " fields");
    Row row;
    const long t = std::stol(f[static_cast<std::size_t>(col["time"])]);
    row.loc = std::stoi(f[static_cast<std::size_t>(col["location"])]);
    row.temp = std::stod(f[static_cast<std::size_t>(col["temperature_f"])]);
    row.ghi = std::stod(f[static_cast<std::size_t>(col["ghi_wm2"])]);
    if (has_speed) {
      row.wind = std::stod(f[static_cast<std::size_t>(col["wind_mph"])]);
    } else {
      const double u = std::stod(f[static_cast<std::size_t>(col["wind_u_mph"])]);
      const double v = std::stod(f[static_cast<std::size_t>(col["wind_v_mph"])]);
      row.wind = std::hypot(u, v);
    }
    by_time[t].push_back(row);
  }
  if (by_time.empty()) throw WeatherError("'" + path + "' has no data rows");

  std::set<int> loc_set;
  for (const Row& r : by_time.begin()->second) loc_set.insert(r.loc);
  const std::size_t s = loc_set.size();
  if (s == 0) throw WeatherError("'" + path + "' has no locations");
  std::map<int, std::size_t> loc_pos;
  for (int id : loc_set) loc_pos[id] = loc_pos.size();

  WeatherSeries series;
  series.start_hour = by_time.begin()->first;
  long expected = series.start_hour;
  for (const auto& [t, rows] : by_time) {
    if (t != expected)
      throw WeatherError("'" + path + "': time steps are not uniform near index " +
                         std::to_string(t));
    ++expected;
    if (rows.size() != s)
      throw WeatherError("'" + path + "': time index " + std::to_string(t) + " has " +
                         std::to_string(rows.size()) + " locations, expected " +
                         std::to_string(s));
    WeatherSample smp;
    smp.temperature_f.assign(s, 0.0);
    smp.wind_mph.assign(s, 0.0);
    smp.ghi_wm2.assign(s, 0.0);
    std::set<int> seen;
    for (const Row& r : rows) {
      auto it = loc_pos.find(r.loc);
      if (it == loc_pos.end() || !seen.insert(r.loc).second)
        throw WeatherError("'" + path + "': inconsistent location set at time index " +
                           std::to_string(t));
      smp.temperature_f[it->second] = r.temp;
      smp.wind_mph[it->second] = r.wind;
      smp.ghi_wm2[it->second] = r.ghi;
    }
    series.samples.push_back(std::move(smp));
  }
  return series;
}

// Nearest weather location per bus, Euclidean; ties go to the lowest id.
inline std::vector<int> nearest_location_mapping(
    const std::vector<std::array<double, 2>>& bus_coords,
    const std::vector<std::array<double, 2>>& location_coords) {
  if (bus_coords.empty() || location_coords.empty())
    throw WeatherError("nearest-location mapping needs non-empty coordinate sets");
  std::vector<int> map(bus_coords.size(), 0);
  for (std::size_t b = 0; b < bus_coords.size(); ++b) {
    double best = std::numeric_limits<double>::infinity();
    int pick = 0;
    for (std::size_t l = 0; l < location_coords.size(); ++l) {
      const double dx = bus_coords[b][0] - location_coords[l][0];
      const double dy = bus_coords[b][1] - location_coords[l][1];
      const double d2 = dx * dx + dy * dy;
      if (d2 < best) {
        best = d2;
        pick = static_cast<int>(l);
      }
    }
    map[b] = pick;
  }
  return map;
}

inline std::vector<std::array<double, 2>> random_locations(std::size_t count, double area_km,
                                                           std::uint64_t seed) {
  Rng rng(derive_seed(seed, "weatherfield.locations"));
  std::vector<std::array<double, 2>> locs(count);
  for (auto& l : locs) l = {rng.uniform(0.0, area_km), rng.uniform(0.0, area_km)};
  return locs;
}

}  // namespace w2vlab::weather
