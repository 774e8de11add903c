#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "w2vlab/powerflow.hpp"
#include "w2vlab/renewables.hpp"
#include "w2vlab/scaler.hpp"
#include "w2vlab/weather.hpp"

namespace w2vlab::data {

class DatasetError : public std::runtime_error {
 public:
  explicit DatasetError(const std::string& msg) : std::runtime_error(msg) {}
};

struct FilterEntry {
  long time = 0;
  std::string reason;  // "overvoltage" or "nonconvergence"
  double value = 0.0;  // max |V| or max mismatch at exit
};

struct SplitIndices {
  std::vector<long> train, val, test;  // row indices into the retained tensors
};

// Paired, normalized weather/voltage samples plus everything needed to get
// back to physical units: scalers, the filter log, and the seed.
struct NexusDataset {
  long n_locations = 0;
  long n_buses = 0;
  std::vector<long> orig_time;  // retained row -> original time index
  ad::RowMat weather_raw;       // [n x W], feature-major blocks of S columns
  ad::RowMat voltage_raw;       // [n x B], p.u.
  ad::RowMat weather_norm;
  ad::RowMat voltage_norm;
  MinMaxScaler weather_scaler;
  MinMaxScaler voltage_scaler;
  std::vector<FilterEntry> filter_log;
  SplitIndices random_split;  // sample-wise tasks
  SplitIndices chrono_split;  // forecasting tasks
  bool scaler_fit_on_full = false;
  std::uint64_t seed = 0;

  long size() const { return weather_raw.rows(); }
  long weather_width() const { return weather_raw.cols(); }

  std::pair<long, long> feature_block(int feature) const {
    return {static_cast<long>(feature) * n_locations,
            (static_cast<long>(feature) + 1) * n_locations};
  }
};

struct DatasetOptions {
  double tol = 1e-8;
  int max_iter = 20;
  double v_max_pu = 1.20;
  double train_fraction = 0.70;
  double val_fraction = 0.20;
  bool scaler_fit_on_full = false;  // default guards against leakage
  int threads = 0;                  // 0 = hardware concurrency
  std::uint64_t seed = 0;
};

namespace detail {

inline SplitIndices chronological_split(long n, double train_frac, double val_frac) {
  SplitIndices s;
  const long n_train = static_cast<long>(train_frac * static_cast<double>(n));
  const long n_val = static_cast<long>(val_frac * static_cast<double>(n));
  for (long i = 0; i < n; ++i) {
    if (i < n_train)
      s.train.push_back(i);
    else if (i < n_train + n_val)
      s.val.push_back(i);
    else
      s.test.push_back(i);
  }
  return s;
}

inline SplitIndices random_split(long n, double train_frac, double val_frac,
                                 std::uint64_t seed) {
  std::vector<long> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(derive_seed(seed, "dataset.random_split"));
  rng.shuffle(idx);
  const long n_train = static_cast<long>(train_frac * static_cast<double>(n));
  const long n_val = static_cast<long>(val_frac * static_cast<double>(n));
  SplitIndices s;
  for (long i = 0; i < n; ++i) {
    if (i < n_train)
      s.train.push_back(idx[static_cast<std::size_t>(i)]);
    else if (i < n_train + n_val)
      s.val.push_back(idx[static_cast<std::size_t>(i)]);
    else
      s.test.push_back(idx[static_cast<std::size_t>(i)]);
  }
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.val.begin(), s.val.end());
  std::sort(s.test.begin(), s.test.end());
  return s;
}

}  // namespace detail

// One AC power flow per time step. Steps are independent, so they are solved
// in parallel and merged back in time order; the result does not depend on
// the thread count.
inline NexusDataset generate_dataset(const grid::GridModel& g,
                                     const weather::WeatherSeries& series,
                                     const grid::RenewableModelConfig& renew,
                                     const std::vector<int>& bus_to_location,
                                     const DatasetOptions& opt = {}) {
  g.validate(static_cast<int>(series.n_locations()));
  renew.validate();
  const long t_steps = static_cast<long>(series.size());
  if (t_steps < 1) throw DatasetError("weather series is empty");
  const auto n_buses = static_cast<long>(g.n_buses());

  std::vector<grid::PowerFlowSolution> sols(static_cast<std::size_t>(t_steps));
  const int hw = static_cast<int>(std::thread::hardware_concurrency());
  const int n_threads = std::max(1, opt.threads > 0 ? opt.threads : hw);
  auto worker = [&](long lo, long hi) {
    for (long t = lo; t < hi; ++t) {
      const auto inj = grid::weather_to_injections(
          g, series.samples[static_cast<std::size_t>(t)], renew, bus_to_location);
      sols[static_cast<std::size_t>(t)] =
          grid::solve_ac_power_flow(g, inj, opt.tol, opt.max_iter);
    }
  };
  if (n_threads <= 1 || t_steps < 8) {
    worker(0, t_steps);
  } else {
    std::vector<std::thread> pool;
    const long chunk = (t_steps + n_threads - 1) / n_threads;
    for (int w = 0; w < n_threads; ++w) {
      const long lo = w * chunk;
      const long hi = std::min(t_steps, lo + chunk);
      if (lo < hi) pool.emplace_back(worker, lo, hi);
    }
    for (auto& th : pool) th.join();
  }

  NexusDataset ds;
  ds.n_locations = static_cast<long>(series.n_locations());
  ds.n_buses = n_buses;
  ds.seed = opt.seed;
  ds.scaler_fit_on_full = opt.scaler_fit_on_full;

  std::vector<long> keep;
  for (long t = 0; t < t_steps; ++t) {
    const auto& sol = sols[static_cast<std::size_t>(t)];
    if (!sol.converged) {
      ds.filter_log.push_back({t, "nonconvergence", sol.max_mismatch});
      continue;
    }
    const double vmax = *std::max_element(sol.v_mag.begin(), sol.v_mag.end());
    if (vmax > opt.v_max_pu) {
      ds.filter_log.push_back({t, "overvoltage", vmax});
      continue;
    }
    keep.push_back(t);
  }
  if (keep.size() * 2 < static_cast<std::size_t>(t_steps))
    throw DatasetError("more than half of the samples were dropped (" +
                       std::to_string(t_steps - static_cast<long>(keep.size())) + " of " +
                       std::to_string(t_steps) + "); the scenario configuration is ill-posed");

  const auto n = static_cast<long>(keep.size());
  const long w_width = 3 * ds.n_locations;
  ds.orig_time = keep;
  ds.weather_raw.resize(n, w_width);
  ds.voltage_raw.resize(n, n_buses);
  for (long r = 0; r < n; ++r) {
    const long t = keep[static_cast<std::size_t>(r)];
    const auto flat = series.flatten(static_cast<std::size_t>(t));
    for (long c = 0; c < w_width; ++c) ds.weather_raw(r, c) = flat[static_cast<std::size_t>(c)];
    const auto& sol = sols[static_cast<std::size_t>(t)];
    for (long b = 0; b < n_buses; ++b)
      ds.voltage_raw(r, b) = sol.v_mag[static_cast<std::size_t>(b)];
  }

  ds.chrono_split = detail::chronological_split(n, opt.train_fraction, opt.val_fraction);
  ds.random_split = detail::random_split(n, opt.train_fraction, opt.val_fraction, opt.seed);

  // scaler groups: one per weather feature across all locations, one for all
  // voltages; fit on the chronological training window unless overridden
  std::vector<std::pair<std::string, std::vector<int>>> wgroups;
  for (int f = 0; f < weather::kNumFeatures; ++f) {
    std::vector<int> cols;
    for (long c = 0; c < ds.n_locations; ++c)
      cols.push_back(static_cast<int>(f * ds.n_locations + c));
    wgroups.emplace_back(weather::feature_name(f), std::move(cols));
  }
  std::vector<int> vcols;
  for (long c = 0; c < n_buses; ++c) vcols.push_back(static_cast<int>(c));

  std::vector<long> fit_rows;
  if (opt.scaler_fit_on_full) {
    fit_rows.resize(static_cast<std::size_t>(n));
    std::iota(fit_rows.begin(), fit_rows.end(), 0);
  } else {
    fit_rows = ds.chrono_split.train;
  }
  const auto n_fit = static_cast<long>(fit_rows.size());
  ad::RowMat wfit(n_fit, w_width), vfit(n_fit, n_buses);
  for (long i = 0; i < n_fit; ++i) {
    const long r = fit_rows[static_cast<std::size_t>(i)];
    wfit.row(i) = ds.weather_raw.row(r);
    vfit.row(i) = ds.voltage_raw.row(r);
  }
  ds.weather_scaler = MinMaxScaler::fit(wfit, wgroups);
  ds.voltage_scaler = MinMaxScaler::fit(vfit, {{"voltage", vcols}});
  ds.weather_norm = ds.weather_scaler.apply(ds.weather_raw);
  ds.voltage_norm = ds.voltage_scaler.apply(ds.voltage_raw);
  return ds;
}

// ---- dataset files: weather.csv, voltage.csv, metadata.json ----

inline void save_voltage_csv(const NexusDataset& ds, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw DatasetError("cannot write '" + path + "'");
  os << "time,bus,v_pu\n";
  char buf[128];
  for (long r = 0; r < ds.size(); ++r) {
    for (long b = 0; b < ds.n_buses; ++b) {
      std::snprintf(buf, sizeof(buf), "%ld,%ld,%.17g\n", ds.orig_time[static_cast<std::size_t>(r)],
                    b, ds.voltage_raw(r, b));
      os << buf;
    }
  }
}

inline void save_retained_weather_csv(const NexusDataset& ds, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw DatasetError("cannot write '" + path + "'");
  os << "time,location,temperature_f,wind_mph,ghi_wm2\n";
  char buf[256];
  const long s = ds.n_locations;
  for (long r = 0; r < ds.size(); ++r) {
    for (long i = 0; i < s; ++i) {
      std::snprintf(buf, sizeof(buf), "%ld,%ld,%.17g,%.17g,%.17g\n",
                    ds.orig_time[static_cast<std::size_t>(r)], i, ds.weather_raw(r, i),
                    ds.weather_raw(r, s + i), ds.weather_raw(r, 2 * s + i));
      os << buf;
    }
  }
}

inline nlohmann::json split_to_json(const SplitIndices& s) {
  return {{"train", s.train}, {"val", s.val}, {"test", s.test}};
}

inline SplitIndices split_from_json(const nlohmann::json& j) {
  SplitIndices s;
  s.train = j.at("train").get<std::vector<long>>();
  s.val = j.at("val").get<std::vector<long>>();
  s.test = j.at("test").get<std::vector<long>>();
  return s;
}

inline void save_metadata(const NexusDataset& ds, const std::string& path) {
  nlohmann::json j;
  j["seed"] = ds.seed;
  j["n_locations"] = ds.n_locations;
  j["n_buses"] = ds.n_buses;
  j["scaler_fit_on_full"] = ds.scaler_fit_on_full;
  j["weather_scaler"] = ds.weather_scaler.to_json();
  j["voltage_scaler"] = ds.voltage_scaler.to_json();
  j["filter_log"] = nlohmann::json::array();
  for (const FilterEntry& e : ds.filter_log)
    j["filter_log"].push_back({{"time", e.time}, {"reason", e.reason}, {"value", e.value}});
  j["random_split"] = split_to_json(ds.random_split);
  j["chrono_split"] = split_to_json(ds.chrono_split);
  std::ofstream os(path);
  if (!os) throw DatasetError("cannot write '" + path + "'");
  os << j.dump(2) << "\n";
}

inline void save_dataset(const NexusDataset& ds, const std::string& dir) {
  std::filesystem::create_directories(dir);
  save_retained_weather_csv(ds, dir + "/weather.csv");
  save_voltage_csv(ds, dir + "/voltage.csv");
  save_metadata(ds, dir + "/metadata.json");
}

inline NexusDataset load_dataset(const std::string& dir) {
  std::ifstream ms(dir + "/metadata.json");
  if (!ms) throw DatasetError("cannot open '" + dir + "/metadata.json'");
  nlohmann::json j;
  ms >> j;

  NexusDataset ds;
  ds.seed = j.at("seed").get<std::uint64_t>();
  ds.n_locations = j.at("n_locations").get<long>();
  ds.n_buses = j.at("n_buses").get<long>();
  ds.scaler_fit_on_full = j.value("scaler_fit_on_full", false);
  ds.weather_scaler = MinMaxScaler::from_json(j.at("weather_scaler"));
  ds.voltage_scaler = MinMaxScaler::from_json(j.at("voltage_scaler"));
  for (const auto& je : j.at("filter_log"))
    ds.filter_log.push_back({je.at("time").get<long>(), je.at("reason").get<std::string>(),
                             je.at("value").get<double>()});
  ds.random_split = split_from_json(j.at("random_split"));
  ds.chrono_split = split_from_json(j.at("chrono_split"));

  // Retained samples may have gaps where steps were filtered out, so this
  // reader only requires a constant location set per time index.
  std::ifstream ws(dir + "/weather.csv");
  if (!ws) throw DatasetError("cannot open '" + dir + "/weather.csv'");
  std::string line;
  std::getline(ws, line);
  std::map<long, std::vector<std::array<double, 4>>> by_time;
  while (std::getline(ws, line)) {
    if (line.empty()) continue;
    const auto f = weather::split_csv_line(line);
    if (f.size() != 5)
      throw DatasetError("weather.csv row has " + std::to_string(f.size()) + " fields");
    by_time[std::stol(f[0])].push_back(
        {std::stod(f[1]), std::stod(f[2]), std::stod(f[3]), std::stod(f[4])});
  }
  const auto n = static_cast<long>(by_time.size());
  const long s = ds.n_locations;
  const long w = 3 * s;
  ds.weather_raw.resize(n, w);
  long wr = 0;
  for (const auto& [t, rows] : by_time) {
    if (static_cast<long>(rows.size()) != s)
      throw DatasetError("weather.csv time index " + std::to_string(t) + " has " +
                         std::to_string(rows.size()) + " locations, expected " +
                         std::to_string(s));
    for (const auto& r : rows) {
      const auto loc = static_cast<long>(r[0]);
      if (loc < 0 || loc >= s)
        throw DatasetError("weather.csv location id out of range at time " + std::to_string(t));
      ds.weather_raw(wr, loc) = r[1];
      ds.weather_raw(wr, s + loc) = r[2];
      ds.weather_raw(wr, 2 * s + loc) = r[3];
    }
    ++wr;
  }

  // voltage.csv rows are grouped by time in write order
  std::ifstream vs(dir + "/voltage.csv");
  if (!vs) throw DatasetError("cannot open '" + dir + "/voltage.csv'");
  std::getline(vs, line);
  ds.voltage_raw.resize(n, ds.n_buses);
  ds.orig_time.assign(static_cast<std::size_t>(n), 0);
  long row = -1;
  long last_time = std::numeric_limits<long>::min();
  while (std::getline(vs, line)) {
    if (line.empty()) continue;
    const auto f = weather::split_csv_line(line);
    const long t = std::stol(f[0]);
    const long b = std::stol(f[1]);
    if (t != last_time) {
      ++row;
      last_time = t;
      if (row >= n) throw DatasetError("voltage.csv has more time steps than weather.csv");
      ds.orig_time[static_cast<std::size_t>(row)] = t;
    }
    ds.voltage_raw(row, b) = std::stod(f[2]);
  }
  if (row + 1 != n) throw DatasetError("voltage.csv and weather.csv disagree on sample count");

  ds.weather_norm = ds.weather_scaler.apply(ds.weather_raw);
  ds.voltage_norm = ds.voltage_scaler.apply(ds.voltage_raw);
  return ds;
}

}  // namespace w2vlab::data
