#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "w2vlab/rng.hpp"

namespace w2vlab::grid {

class GridError : public std::runtime_error {
 public:
  explicit GridError(const std::string& msg) : std::runtime_error(msg) {}
};

enum class BusKind { slack, pv, pq };
enum class GenKind { conventional, wind, solar };

inline const char* bus_kind_name(BusKind k) {
  switch (k) {
    case BusKind::slack: return "slack";
    case BusKind::pv: return "pv";
    case BusKind::pq: return "pq";
  }
  return "?";
}

inline BusKind bus_kind_from_name(const std::string& s) {
  if (s == "slack") return BusKind::slack;
  if (s == "pv") return BusKind::pv;
  if (s == "pq") return BusKind::pq;
  throw GridError("unknown bus kind: " + s);
}

inline const char* gen_kind_name(GenKind k) {
  switch (k) {
    case GenKind::conventional: return "conventional";
    case GenKind::wind: return "wind";
    case GenKind::solar: return "solar";
  }
  return "?";
}

inline GenKind gen_kind_from_name(const std::string& s) {
  if (s == "conventional") return GenKind::conventional;
  if (s == "wind") return GenKind::wind;
  if (s == "solar") return GenKind::solar;
  throw GridError("unknown generator kind: " + s);
}

struct Bus {
  int id = 0;
  BusKind kind = BusKind::pq;
  double load_mw = 0.0;
  double load_mvar = 0.0;
  double v_setpoint = 1.0;  // held at slack and PV buses
  double x_km = 0.0;
  double y_km = 0.0;
};

struct Branch {
  int from = 0;
  int to = 0;
  double r = 0.0;        // p.u.
  double x = 0.0;        // p.u.
  double b = 0.0;        // total shunt susceptance, p.u.
  double rating_mva = 0.0;
  bool in_service = true;
};

struct Generator {
  int bus = 0;
  GenKind kind = GenKind::conventional;
  double capacity_mw = 0.0;
  int weather_location = -1;  // required for wind/solar
};

struct GridModel {
  double base_mva = 100.0;
  std::vector<Bus> buses;
  std::vector<Branch> branches;
  std::vector<Generator> generators;

  std::size_t n_buses() const { return buses.size(); }

  int bus_index(int id) const {
    for (std::size_t i = 0; i < buses.size(); ++i)
      if (buses[i].id == id) return static_cast<int>(i);
    throw GridError("unknown bus id " + std::to_string(id));
  }

  int slack_index() const {
    for (std::size_t i = 0; i < buses.size(); ++i)
      if (buses[i].kind == BusKind::slack) return static_cast<int>(i);
    throw GridError("grid has no slack bus");
  }

  void validate(int n_weather_locations = -1) const {
    if (buses.empty()) throw GridError("grid has no buses");
    int slack_count = 0;
    std::map<int, int> index_of;
    for (std::size_t i = 0; i < buses.size(); ++i) {
      if (index_of.count(buses[i].id))
        throw GridError("duplicate bus id " + std::to_string(buses[i].id));
      index_of[buses[i].id] = static_cast<int>(i);
      if (buses[i].kind == BusKind::slack) ++slack_count;
    }
    if (slack_count != 1)
      throw GridError("grid must have exactly one slack bus, found " +
                      std::to_string(slack_count));
    for (const Branch& br : branches) {
      if (!index_of.count(br.from) || !index_of.count(br.to))
        throw GridError("branch references unknown bus " + std::to_string(br.from) +
                        "-" + std::to_string(br.to));
      if (br.r < 0.0 || br.x <= 0.0)
        throw GridError("branch " + std::to_string(br.from) + "-" + std::to_string(br.to) +
                        " needs r >= 0 and x > 0");
    }
    for (const Generator& g : generators) {
      if (!index_of.count(g.bus))
        throw GridError("generator references unknown bus " + std::to_string(g.bus));
      if (g.kind != GenKind::conventional) {
        if (g.weather_location < 0)
          throw GridError("renewable generator at bus " + std::to_string(g.bus) +
                          " missing weather location");
        if (n_weather_locations >= 0 && g.weather_location >= n_weather_locations)
          throw GridError("generator at bus " + std::to_string(g.bus) +
                          " references weather location " +
                          std::to_string(g.weather_location) + " beyond " +
                          std::to_string(n_weather_locations));
      }
    }
    if (!connected()) throw GridError("grid is not connected over in-service branches");
  }

  bool connected() const {
    if (buses.empty()) return false;
    std::map<int, int> index_of;
    for (std::size_t i = 0; i < buses.size(); ++i) index_of[buses[i].id] = static_cast<int>(i);
    std::vector<std::vector<int>> adj(buses.size());
    for (const Branch& br : branches) {
      if (!br.in_service) continue;
      const int a = index_of.at(br.from), b = index_of.at(br.to);
      adj[a].push_back(b);
      adj[b].push_back(a);
    }
    std::vector<char> seen(buses.size(), 0);
    std::vector<int> stack{0};
    seen[0] = 1;
    std::size_t reached = 1;
    while (!stack.empty()) {
      const int u = stack.back();
      stack.pop_back();
      for (int v : adj[static_cast<std::size_t>(u)])
        if (!seen[static_cast<std::size_t>(v)]) {
          seen[static_cast<std::size_t>(v)] = 1;
          ++reached;
          stack.push_back(v);
        }
    }
    return reached == buses.size();
  }
};

// Net bus injections handed to the solver. Dimensions match the bus list.
struct InjectionProfile {
  std::vector<double> p_mw;
  std::vector<double> q_mvar;
  std::vector<double> v_setpoint;  // respected at PV and slack buses
};

// ---- grid file schema (JSON, documented in the README) ----

inline nlohmann::json grid_to_json(const GridModel& g) {
  nlohmann::json j;
  j["base_mva"] = g.base_mva;
  for (const Bus& b : g.buses) {
    j["buses"].push_back({{"id", b.id},
                          {"kind", bus_kind_name(b.kind)},
                          {"load_mw", b.load_mw},
                          {"load_mvar", b.load_mvar},
                          {"v_setpoint", b.v_setpoint},
                          {"x_km", b.x_km},
                          {"y_km", b.y_km}});
  }
  j["branches"] = nlohmann::json::array();
  for (const Branch& br : g.branches) {
    j["branches"].push_back({{"from", br.from},
                             {"to", br.to},
                             {"r", br.r},
                             {"x", br.x},
                             {"b", br.b},
                             {"rating_mva", br.rating_mva},
                             {"in_service", br.in_service}});
  }
  j["generators"] = nlohmann::json::array();
  for (const Generator& gen : g.generators) {
    j["generators"].push_back({{"bus", gen.bus},
                               {"kind", gen_kind_name(gen.kind)},
                               {"capacity_mw", gen.capacity_mw},
                               {"weather_location", gen.weather_location}});
  }
  return j;
}

inline GridModel grid_from_json(const nlohmann::json& j) {
  GridModel g;
  g.base_mva = j.value("base_mva", 100.0);
  for (const auto& jb : j.at("buses")) {
    Bus b;
    b.id = jb.at("id").get<int>();
    b.kind = bus_kind_from_name(jb.at("kind").get<std::string>());
    b.load_mw = jb.value("load_mw", 0.0);
    b.load_mvar = jb.value("load_mvar", 0.0);
    b.v_setpoint = jb.value("v_setpoint", 1.0);
    b.x_km = jb.value("x_km", 0.0);
    b.y_km = jb.value("y_km", 0.0);
    g.buses.push_back(b);
  }
  for (const auto& jb : j.value("branches", nlohmann::json::array())) {
    Branch br;
    br.from = jb.at("from").get<int>();
    br.to = jb.at("to").get<int>();
    br.r = jb.at("r").get<double>();
    br.x = jb.at("x").get<double>();
    br.b = jb.value("b", 0.0);
    br.rating_mva = jb.value("rating_mva", 0.0);
    br.in_service = jb.value("in_service", true);
    g.branches.push_back(br);
  }
  for (const auto& jg : j.value("generators", nlohmann::json::array())) {
    Generator gen;
    gen.bus = jg.at("bus").get<int>();
    gen.kind = gen_kind_from_name(jg.at("kind").get<std::string>());
    gen.capacity_mw = jg.at("capacity_mw").get<double>();
    gen.weather_location = jg.value("weather_location", -1);
    g.generators.push_back(gen);
  }
  return g;
}

inline void save_grid(const GridModel& g, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw GridError("cannot write grid file '" + path + "'");
  os << grid_to_json(g).dump(2) << "\n";
}

inline GridModel load_grid(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw GridError("cannot open grid file '" + path + "'");
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw GridError("grid file '" + path + "' is not valid JSON: " + e.what());
  }
  return grid_from_json(j);
}

// ---- synthetic grid construction ----

struct SynthGridConfig {
  int n_buses = 100;
  int n_conventional = 10;
  int n_wind = 12;
  int n_solar = 8;
  double area_km = 300.0;
  double mesh_degree = 2.8;        // average branch endpoints per bus
  double load_mw_min = 2.0;
  double load_mw_max = 8.0;
  double load_power_factor = 0.95;
  double x_per_km = 0.0012;        // p.u. reactance per km
  double x_over_r = 4.0;
  double shunt_b_per_km = 3e-5;
  double wind_capacity_min = 8.0;
  double wind_capacity_max = 25.0;
  double solar_capacity_min = 4.0;
  double solar_capacity_max = 14.0;
  double conventional_capacity_min = 25.0;
  double conventional_capacity_max = 70.0;
};

// Meshed grid: random placement, minimum spanning tree for connectivity,
// then nearest-neighbor edges until the target mesh degree is reached.
inline GridModel make_synthetic_grid(const SynthGridConfig& cfg, std::uint64_t seed) {
  if (cfg.n_buses < 2) throw GridError("synthetic grid needs at least 2 buses");
  if (cfg.n_conventional + cfg.n_wind + cfg.n_solar > cfg.n_buses)
    throw GridError("more generators than buses");
  Rng rng(derive_seed(seed, "gridsim.synthetic"));
  const int n = cfg.n_buses;

  GridModel g;
  g.buses.resize(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    Bus& b = g.buses[static_cast<std::size_t>(i)];
    b.id = i;
    b.kind = BusKind::pq;
    b.x_km = rng.uniform(0.0, cfg.area_km);
    b.y_km = rng.uniform(0.0, cfg.area_km);
    b.load_mw = rng.uniform(cfg.load_mw_min, cfg.load_mw_max);
    const double tan_phi = std::tan(std::acos(cfg.load_power_factor));
    b.load_mvar = b.load_mw * tan_phi;
  }

  auto dist = [&](int a, int b) {
    const double dx = g.buses[a].x_km - g.buses[b].x_km;
    const double dy = g.buses[a].y_km - g.buses[b].y_km;
    return std::sqrt(dx * dx + dy * dy);
  };

  // Prim's MST
  std::vector<char> in_tree(static_cast<std::size_t>(n), 0);
  std::vector<double> best_d(static_cast<std::size_t>(n),
                             std::numeric_limits<double>::infinity());
  std::vector<int> best_from(static_cast<std::size_t>(n), -1);
  std::vector<std::pair<int, int>> edges;
  in_tree[0] = 1;
  for (int j = 1; j < n; ++j) {
    best_d[j] = dist(0, j);
    best_from[j] = 0;
  }
  for (int it = 1; it < n; ++it) {
    int pick = -1;
    double dmin = std::numeric_limits<double>::infinity();
    for (int j = 0; j < n; ++j)
      if (!in_tree[j] && best_d[j] < dmin) {
        dmin = best_d[j];
        pick = j;
      }
    in_tree[pick] = 1;
    edges.emplace_back(best_from[pick], pick);
    for (int j = 0; j < n; ++j)
      if (!in_tree[j]) {
        const double d = dist(pick, j);
        if (d < best_d[j]) {
          best_d[j] = d;
          best_from[j] = pick;
        }
      }
  }

  auto has_edge = [&](int a, int b) {
    for (const auto& [u, v] : edges)
      if ((u == a && v == b) || (u == b && v == a)) return true;
    return false;
  };

  // extra nearest-neighbor edges for meshing
  const std::size_t target_edges =
      static_cast<std::size_t>(cfg.mesh_degree * n / 2.0);
  std::vector<int> order(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
  rng.shuffle(order);
  for (int a : order) {
    if (edges.size() >= target_edges) break;
    int best = -1;
    double dmin = std::numeric_limits<double>::infinity();
    for (int b = 0; b < n; ++b) {
      if (b == a || has_edge(a, b)) continue;
      const double d = dist(a, b);
      if (d < dmin) {
        dmin = d;
        best = b;
      }
    }
    if (best >= 0) edges.emplace_back(a, best);
  }

  for (const auto& [u, v] : edges) {
    Branch br;
    br.from = u;
    br.to = v;
    const double d = std::max(dist(u, v), 5.0);
    br.x = cfg.x_per_km * d;
    br.r = br.x / cfg.x_over_r;
    br.b = cfg.shunt_b_per_km * d;
    br.rating_mva = 0.0;  // filled after a nominal flow estimate by callers if needed
    g.branches.push_back(br);
  }

  // generator placement: distinct buses, slack at the first conventional site
  std::vector<int> sites(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) sites[static_cast<std::size_t>(i)] = i;
  rng.shuffle(sites);
  std::size_t cursor = 0;
  for (int i = 0; i < cfg.n_conventional; ++i) {
    const int bus = sites[cursor++];
    Generator gen;
    gen.bus = bus;
    gen.kind = GenKind::conventional;
    gen.capacity_mw =
        rng.uniform(cfg.conventional_capacity_min, cfg.conventional_capacity_max);
    g.generators.push_back(gen);
    Bus& b = g.buses[static_cast<std::size_t>(bus)];
    b.kind = i == 0 ? BusKind::slack : BusKind::pv;
    b.v_setpoint = 1.0 + rng.uniform(0.0, 0.03);
  }
  for (int i = 0; i < cfg.n_wind; ++i) {
    Generator gen;
    gen.bus = sites[cursor++];
    gen.kind = GenKind::wind;
    gen.capacity_mw = rng.uniform(cfg.wind_capacity_min, cfg.wind_capacity_max);
    gen.weather_location = 0;  // reattached once weather locations exist
    g.generators.push_back(gen);
  }
  for (int i = 0; i < cfg.n_solar; ++i) {
    Generator gen;
    gen.bus = sites[cursor++];
    gen.kind = GenKind::solar;
    gen.capacity_mw = rng.uniform(cfg.solar_capacity_min, cfg.solar_capacity_max);
    gen.weather_location = 0;
    g.generators.push_back(gen);
  }
  return g;
}

}  // namespace w2vlab::grid
