#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "w2vlab/forecaster.hpp"
#include "w2vlab/scaler.hpp"
#include "w2vlab/w2v.hpp"
#include "w2vlab/weather.hpp"

namespace w2vlab::eval {

class EvalError : public std::runtime_error {
 public:
  explicit EvalError(const std::string& msg) : std::runtime_error(msg) {}
};

// All RMSE values use one aggregation order: square, mean over every axis
// (samples, horizon steps, locations or buses), then root.
struct MetricReport {
  long n_samples = 0;
  long horizon = 0;
  std::vector<double> weather_rmse_phys;  // per feature, physical units
  std::vector<double> weather_mae_phys;
  double weather_rmse_norm = 0.0;         // pooled over features, normalized
  double voltage_rmse_pu = 0.0;
  double voltage_mae_pu = 0.0;
  std::vector<double> per_step_voltage_rmse_pu;
};

// pushes each horizon step of a forecast matrix [n x h*W] through the frozen
// surrogate; returns [n x h*B] normalized voltage predictions
inline ad::RowMat surrogate_voltages(w2v::W2VModel& surrogate, const ad::RowMat& weather,
                                     long w, long h) {
  const long b = surrogate.arch.output_b;
  if (weather.cols() != h * w) throw EvalError("forecast width does not match h*W");
  ad::RowMat out(weather.rows(), h * b);
  for (long j = 0; j < h; ++j) {
    ad::Tape tape;
    ad::Tensor x = tape.constant(weather.middleCols(j * w, w).eval());
    ad::Tensor v = surrogate.forward_voltage(tape, x);
    out.middleCols(j * b, b) =
        ad::ConstMatMap(v.value().data(), weather.rows(), b);
  }
  return out;
}

inline MetricReport compute_metrics(const ad::RowMat& pred_weather,
                                    const ad::RowMat& target_weather,
                                    const ad::RowMat& pred_voltage,
                                    const ad::RowMat& target_voltage,
                                    const MinMaxScaler& weather_scaler,
                                    const MinMaxScaler& voltage_scaler, long s_locations,
                                    long horizon) {
  if (pred_weather.rows() != target_weather.rows() ||
      pred_weather.cols() != target_weather.cols())
    throw EvalError("weather prediction/target shapes differ");
  if (pred_voltage.rows() != target_voltage.rows() ||
      pred_voltage.cols() != target_voltage.cols())
    throw EvalError("voltage prediction/target shapes differ");

  MetricReport rep;
  rep.n_samples = pred_weather.rows();
  rep.horizon = horizon;
  const long w = weather::kNumFeatures * s_locations;
  const long b = pred_voltage.cols() / horizon;

  rep.weather_rmse_norm = std::sqrt((pred_weather - target_weather).squaredNorm() /
                                    static_cast<double>(pred_weather.size()));

  for (int f = 0; f < weather::kNumFeatures; ++f) {
    // normalized errors scale to physical units by the feature group span
    const double span = weather_scaler.span(static_cast<int>(f * s_locations));
    double sq = 0.0, ab = 0.0;
    long count = 0;
    for (long j = 0; j < horizon; ++j) {
      const long c0 = j * w + f * s_locations;
      for (long r = 0; r < pred_weather.rows(); ++r)
        for (long c = 0; c < s_locations; ++c) {
          const double d = (pred_weather(r, c0 + c) - target_weather(r, c0 + c)) * span;
          sq += d * d;
          ab += std::abs(d);
          ++count;
        }
    }
    rep.weather_rmse_phys.push_back(std::sqrt(sq / static_cast<double>(count)));
    rep.weather_mae_phys.push_back(ab / static_cast<double>(count));
  }

  const double vspan = voltage_scaler.span(0);
  double sq = 0.0, ab = 0.0;
  for (long j = 0; j < horizon; ++j) {
    double step_sq = 0.0;
    for (long r = 0; r < pred_voltage.rows(); ++r)
      for (long c = 0; c < b; ++c) {
        const double d = (pred_voltage(r, j * b + c) - target_voltage(r, j * b + c)) * vspan;
        step_sq += d * d;
        ab += std::abs(d);
      }
    sq += step_sq;
    rep.per_step_voltage_rmse_pu.push_back(
        std::sqrt(step_sq / (static_cast<double>(pred_voltage.rows()) * static_cast<double>(b))));
  }
  const auto vcount = static_cast<double>(pred_voltage.size());
  rep.voltage_rmse_pu = std::sqrt(sq / vcount);
  rep.voltage_mae_pu = ab / vcount;
  return rep;
}

// ---- hyperparameter sweeps ----

struct SweepCandidate {
  double weight = 0.0;
  bool failed = false;
  double lv = 0.0;  // voltage-side metric
  double lw = 0.0;  // weather-side metric
  double delta_lv_pct = 0.0;
  double delta_lw_pct = 0.0;
};

struct SweepResult {
  std::string kind;  // "lambda" or "gamma"
  double baseline_lv = 0.0;
  double baseline_lw = 0.0;
  std::vector<SweepCandidate> candidates;
  bool has_selection = false;
  double selected = 0.0;
  std::string rationale;
};

// Generic trade-off sweep against a weight-zero baseline. For lambda the
// selection maximizes the weather-reconstruction reduction subject to a cap
// on voltage degradation; for gamma the roles swap.
inline SweepResult run_sweep(const std::string& kind, const std::vector<double>& candidates,
                             const std::function<std::pair<double, double>(double)>& train_eval,
                             std::pair<double, double> baseline_lv_lw,
                             double degradation_cap_pct = 5.0) {
  if (kind != "lambda" && kind != "gamma") throw EvalError("sweep kind must be lambda or gamma");
  SweepResult res;
  res.kind = kind;
  res.baseline_lv = baseline_lv_lw.first;
  res.baseline_lw = baseline_lv_lw.second;
  for (double wgt : candidates) {
    SweepCandidate cand;
    cand.weight = wgt;
    try {
      const auto [lv, lw] = train_eval(wgt);
      cand.lv = lv;
      cand.lw = lw;
      cand.delta_lv_pct = 100.0 * (lv - res.baseline_lv) / res.baseline_lv;
      cand.delta_lw_pct = 100.0 * (lw - res.baseline_lw) / res.baseline_lw;
    } catch (const std::exception&) {
      cand.failed = true;
    }
    res.candidates.push_back(cand);
  }

  // order-invariant selection: scan a copy sorted by weight
  std::vector<const SweepCandidate*> sorted;
  for (const auto& c : res.candidates)
    if (!c.failed) sorted.push_back(&c);
  std::sort(sorted.begin(), sorted.end(),
            [](const SweepCandidate* a, const SweepCandidate* b) { return a->weight < b->weight; });
  const SweepCandidate* best = nullptr;
  for (const SweepCandidate* c : sorted) {
    const double gain = kind == "lambda" ? c->delta_lw_pct : c->delta_lv_pct;
    const double cost = kind == "lambda" ? c->delta_lv_pct : c->delta_lw_pct;
    if (cost > degradation_cap_pct) continue;
    if (best == nullptr) {
      best = c;
      continue;
    }
    const double best_gain = kind == "lambda" ? best->delta_lw_pct : best->delta_lv_pct;
    if (gain < best_gain) best = c;
  }
  if (best != nullptr) {
    res.has_selection = true;
    res.selected = best->weight;
    res.rationale = kind == "lambda"
                        ? "largest weather-reconstruction reduction within the voltage cap"
                        : "largest voltage reduction within the weather cap";
  } else {
    res.rationale = "no candidate met the degradation cap; keeping weight 0";
  }
  return res;
}

// ---- hybrid input analysis ----

struct HybridRow {
  std::string substituted;  // "none", a feature name, or "all"
  double voltage_rmse_pu = 0.0;
  double delta_pct = 0.0;  // vs the all-GU baseline
};

// Replaces one feature's forecasts with the grid-aware counterpart while
// keeping the others unchanged, then maps through the surrogate.
inline std::vector<HybridRow> hybrid_input_analysis(const ad::RowMat& gu_forecasts,
                                                    const ad::RowMat& ga_forecasts,
                                                    w2v::W2VModel& surrogate,
                                                    const ad::RowMat& voltage_targets,
                                                    const MinMaxScaler& voltage_scaler,
                                                    long s_locations, long horizon) {
  if (gu_forecasts.rows() != ga_forecasts.rows() ||
      gu_forecasts.cols() != ga_forecasts.cols())
    throw EvalError("grid-aware and grid-unaware forecast sets are misaligned");
  const long w = weather::kNumFeatures * s_locations;
  const long b = surrogate.arch.output_b;

  auto voltage_rmse = [&](const ad::RowMat& weather) {
    const ad::RowMat v = surrogate_voltages(surrogate, weather, w, horizon);
    const ad::RowMat v_pu = voltage_scaler.invert(v);
    const ad::RowMat s_pu = voltage_scaler.invert(voltage_targets);
    return std::sqrt((v_pu - s_pu).squaredNorm() / static_cast<double>(v.size()));
  };

  std::vector<HybridRow> rows;
  const double base = voltage_rmse(gu_forecasts);
  rows.push_back({"none", base, 0.0});
  for (int f = 0; f < weather::kNumFeatures; ++f) {
    ad::RowMat hybrid = gu_forecasts;
    for (long j = 0; j < horizon; ++j)
      hybrid.middleCols(j * w + f * s_locations, s_locations) =
          ga_forecasts.middleCols(j * w + f * s_locations, s_locations);
    const double rmse = voltage_rmse(hybrid);
    rows.push_back({weather::feature_name(f), rmse, 100.0 * (rmse - base) / base});
  }
  const double all = voltage_rmse(ga_forecasts);
  rows.push_back({"all", all, 100.0 * (all - base) / base});
  (void)b;
  return rows;
}

// ---- per-weather-bin comparison ----

struct FeatureBins {
  std::string feature;
  std::vector<double> edges;      // n_bins + 1
  std::vector<long> counts;       // points per bin
  std::vector<double> rmse_gu;    // physical units
  std::vector<double> rmse_ga;
  std::vector<double> ratio;      // ga / gu; NaN for empty bins
};

struct BinAnalysis {
  std::vector<FeatureBins> features;
};

// Equal-width bins over the observed range of the actual (target) values.
// Points on an interior edge fall into the right bin; the top edge closes.
inline BinAnalysis weather_bin_analysis(const ad::RowMat& gu_forecasts,
                                        const ad::RowMat& ga_forecasts,
                                        const ad::RowMat& target_weather,
                                        const MinMaxScaler& weather_scaler, long s_locations,
                                        long horizon, int n_bins = 6) {
  const long w = weather::kNumFeatures * s_locations;
  BinAnalysis out;
  for (int f = 0; f < weather::kNumFeatures; ++f) {
    const double span = weather_scaler.span(static_cast<int>(f * s_locations));
    double lo = std::numeric_limits<double>::infinity();
    double hi = -lo;
    for (long j = 0; j < horizon; ++j) {
      const long c0 = j * w + f * s_locations;
      for (long r = 0; r < target_weather.rows(); ++r)
        for (long c = 0; c < s_locations; ++c) {
          lo = std::min(lo, target_weather(r, c0 + c));
          hi = std::max(hi, target_weather(r, c0 + c));
        }
    }
    FeatureBins fb;
    fb.feature = weather::feature_name(f);
    const double width = (hi - lo) / static_cast<double>(n_bins);
    for (int i = 0; i <= n_bins; ++i)
      fb.edges.push_back(weather_scaler.invert_value(lo + width * i, static_cast<int>(f * s_locations)));
    fb.counts.assign(static_cast<std::size_t>(n_bins), 0);
    std::vector<double> sq_gu(static_cast<std::size_t>(n_bins), 0.0);
    std::vector<double> sq_ga(static_cast<std::size_t>(n_bins), 0.0);
    for (long j = 0; j < horizon; ++j) {
      const long c0 = j * w + f * s_locations;
      for (long r = 0; r < target_weather.rows(); ++r)
        for (long c = 0; c < s_locations; ++c) {
          const double actual = target_weather(r, c0 + c);
          int bin = width > 0.0 ? static_cast<int>((actual - lo) / width) : 0;
          bin = std::clamp(bin, 0, n_bins - 1);
          const double dgu = (gu_forecasts(r, c0 + c) - actual) * span;
          const double dga = (ga_forecasts(r, c0 + c) - actual) * span;
          ++fb.counts[static_cast<std::size_t>(bin)];
          sq_gu[static_cast<std::size_t>(bin)] += dgu * dgu;
          sq_ga[static_cast<std::size_t>(bin)] += dga * dga;
        }
    }
    for (int i = 0; i < n_bins; ++i) {
      const auto cnt = static_cast<double>(fb.counts[static_cast<std::size_t>(i)]);
      if (cnt > 0) {
        fb.rmse_gu.push_back(std::sqrt(sq_gu[static_cast<std::size_t>(i)] / cnt));
        fb.rmse_ga.push_back(std::sqrt(sq_ga[static_cast<std::size_t>(i)] / cnt));
        fb.ratio.push_back(fb.rmse_gu.back() > 0.0 ? fb.rmse_ga.back() / fb.rmse_gu.back()
                                                   : std::numeric_limits<double>::quiet_NaN());
      } else {
        fb.rmse_gu.push_back(std::numeric_limits<double>::quiet_NaN());
        fb.rmse_ga.push_back(std::numeric_limits<double>::quiet_NaN());
        fb.ratio.push_back(std::numeric_limits<double>::quiet_NaN());
      }
    }
    out.features.push_back(std::move(fb));
  }
  return out;
}

// ---- large-error isolation ----

struct LargeErrorReport {
  std::vector<long> selected;  // sample indices, worst first
  double fraction = 0.05;
  MetricReport gu_subset;
  MetricReport ga_subset;
  double delta_voltage_pct = 0.0;
  double daytime_fraction = 0.0;       // mean target GHI > 0 over the window
  double low_temp_fraction = 0.0;      // sample mean below the bottom-two-bin edge
  double low_temp_threshold_phys = 0.0;
  double subset_wind_median = 0.0;     // physical units, sample means
  double subset_wind_iqr = 0.0;
  double full_wind_median = 0.0;
  double full_wind_iqr = 0.0;
};

inline double quantile_linear(std::vector<double> v, double q) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const double h = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(h);
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (h - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

// per-sample voltage RMSE (p.u.) used for ranking
inline std::vector<double> per_sample_voltage_rmse(const ad::RowMat& pred_voltage,
                                                   const ad::RowMat& target_voltage,
                                                   const MinMaxScaler& voltage_scaler) {
  std::vector<double> out;
  const double span = voltage_scaler.span(0);
  for (long r = 0; r < pred_voltage.rows(); ++r) {
    const double sq = (pred_voltage.row(r) - target_voltage.row(r)).squaredNorm();
    out.push_back(std::sqrt(sq / static_cast<double>(pred_voltage.cols())) * span);
  }
  return out;
}

inline LargeErrorReport large_error_analysis(
    const std::vector<double>& gu_voltage_rmse_per_sample, double fraction,
    const ad::RowMat& gu_forecasts, const ad::RowMat& ga_forecasts,
    const ad::RowMat& target_weather, const ad::RowMat& gu_voltage,
    const ad::RowMat& ga_voltage, const ad::RowMat& target_voltage,
    const MinMaxScaler& weather_scaler, const MinMaxScaler& voltage_scaler,
    long s_locations, long horizon, int n_temp_bins = 6) {
  if (!(fraction > 0.0 && fraction <= 1.0))
    throw EvalError("selection fraction must be in (0, 1]");
  const auto n = static_cast<long>(gu_voltage_rmse_per_sample.size());
  if (n == 0) throw EvalError("no samples to rank");
  const long take = static_cast<long>(
      std::ceil(fraction * static_cast<double>(n) - 1e-12));

  std::vector<long> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](long a, long b) {
    const double ra = gu_voltage_rmse_per_sample[static_cast<std::size_t>(a)];
    const double rb = gu_voltage_rmse_per_sample[static_cast<std::size_t>(b)];
    if (ra != rb) return ra > rb;
    return a < b;  // ties break to the earlier time index
  });
  idx.resize(static_cast<std::size_t>(take));

  LargeErrorReport rep;
  rep.fraction = fraction;
  rep.selected = idx;

  auto gather = [&](const ad::RowMat& src) {
    ad::RowMat out(take, src.cols());
    for (long i = 0; i < take; ++i) out.row(i) = src.row(idx[static_cast<std::size_t>(i)]);
    return out;
  };
  const ad::RowMat gu_w = gather(gu_forecasts);
  const ad::RowMat ga_w = gather(ga_forecasts);
  const ad::RowMat tw = gather(target_weather);
  const ad::RowMat gu_v = gather(gu_voltage);
  const ad::RowMat ga_v = gather(ga_voltage);
  const ad::RowMat tv = gather(target_voltage);

  rep.gu_subset = compute_metrics(gu_w, tw, gu_v, tv, weather_scaler, voltage_scaler,
                                  s_locations, horizon);
  rep.ga_subset = compute_metrics(ga_w, tw, ga_v, tv, weather_scaler, voltage_scaler,
                                  s_locations, horizon);
  rep.delta_voltage_pct = 100.0 *
                          (rep.ga_subset.voltage_rmse_pu - rep.gu_subset.voltage_rmse_pu) /
                          rep.gu_subset.voltage_rmse_pu;

  // composition statistics on sample-mean actual weather
  const long w = weather::kNumFeatures * s_locations;
  auto sample_mean_feature = [&](const ad::RowMat& weather, long row, int feature) {
    double acc = 0.0;
    for (long j = 0; j < horizon; ++j) {
      const long c0 = j * w + feature * s_locations;
      for (long c = 0; c < s_locations; ++c) acc += weather(row, c0 + c);
    }
    return acc / static_cast<double>(horizon * s_locations);
  };

  std::vector<double> full_temp, full_wind, sub_wind;
  for (long r = 0; r < target_weather.rows(); ++r) {
    full_temp.push_back(sample_mean_feature(target_weather, r, weather::kFeatTemp));
    full_wind.push_back(weather_scaler.invert_value(
        sample_mean_feature(target_weather, r, weather::kFeatWind),
        static_cast<int>(weather::kFeatWind * s_locations)));
  }
  const double temp_lo = *std::min_element(full_temp.begin(), full_temp.end());
  const double temp_hi = *std::max_element(full_temp.begin(), full_temp.end());
  const double low_edge =
      temp_lo + (temp_hi - temp_lo) * 2.0 / static_cast<double>(n_temp_bins);
  rep.low_temp_threshold_phys =
      weather_scaler.invert_value(low_edge, static_cast<int>(weather::kFeatTemp * s_locations));

  long daytime = 0, low_temp = 0;
  for (long i = 0; i < take; ++i) {
    const long r = idx[static_cast<std::size_t>(i)];
    if (sample_mean_feature(target_weather, r, weather::kFeatGhi) > 0.0) ++daytime;
    if (full_temp[static_cast<std::size_t>(r)] < low_edge) ++low_temp;
    sub_wind.push_back(full_wind[static_cast<std::size_t>(r)]);
  }
  rep.daytime_fraction = static_cast<double>(daytime) / static_cast<double>(take);
  rep.low_temp_fraction = static_cast<double>(low_temp) / static_cast<double>(take);
  rep.subset_wind_median = quantile_linear(sub_wind, 0.5);
  rep.subset_wind_iqr = quantile_linear(sub_wind, 0.75) - quantile_linear(sub_wind, 0.25);
  rep.full_wind_median = quantile_linear(full_wind, 0.5);
  rep.full_wind_iqr = quantile_linear(full_wind, 0.75) - quantile_linear(full_wind, 0.25);
  return rep;
}

// ---- bus-level error histogram ----

struct BusErrorHistogram {
  std::vector<double> edges;   // n_bins + 1
  std::vector<long> counts;
  double mean = 0.0;
  double median = 0.0;
  double p95 = 0.0;
};

inline BusErrorHistogram bus_error_histogram(const std::vector<double>& per_bus_rmse,
                                             int n_bins = 20) {
  if (per_bus_rmse.empty()) throw EvalError("no per-bus values");
  BusErrorHistogram h;
  const double lo = *std::min_element(per_bus_rmse.begin(), per_bus_rmse.end());
  const double hi = *std::max_element(per_bus_rmse.begin(), per_bus_rmse.end());
  const double width = (hi - lo) / static_cast<double>(n_bins);
  for (int i = 0; i <= n_bins; ++i) h.edges.push_back(lo + width * i);
  h.counts.assign(static_cast<std::size_t>(n_bins), 0);
  for (double v : per_bus_rmse) {
    int bin = width > 0.0 ? static_cast<int>((v - lo) / width) : 0;
    bin = std::clamp(bin, 0, n_bins - 1);
    ++h.counts[static_cast<std::size_t>(bin)];
  }
  h.mean = std::accumulate(per_bus_rmse.begin(), per_bus_rmse.end(), 0.0) /
           static_cast<double>(per_bus_rmse.size());
  h.median = quantile_linear(per_bus_rmse, 0.5);
  h.p95 = quantile_linear(per_bus_rmse, 0.95);
  return h;
}

// per-bus RMSE in p.u. from normalized predictions
inline std::vector<double> per_bus_rmse(const ad::RowMat& pred_voltage,
                                        const ad::RowMat& target_voltage,
                                        const MinMaxScaler& voltage_scaler, long n_buses,
                                        long horizon) {
  std::vector<double> out(static_cast<std::size_t>(n_buses), 0.0);
  const double span = voltage_scaler.span(0);
  for (long bus = 0; bus < n_buses; ++bus) {
    double sq = 0.0;
    long count = 0;
    for (long j = 0; j < horizon; ++j) {
      const long c = j * n_buses + bus;
      for (long r = 0; r < pred_voltage.rows(); ++r) {
        const double d = (pred_voltage(r, c) - target_voltage(r, c)) * span;
        sq += d * d;
        ++count;
      }
    }
    out[static_cast<std::size_t>(bus)] = std::sqrt(sq / static_cast<double>(count));
  }
  return out;
}

}  // namespace w2vlab::eval
