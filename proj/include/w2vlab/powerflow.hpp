#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <complex>
#include <stdexcept>
#include <string>
#include <vector>

#include "w2vlab/grid.hpp"

namespace w2vlab::grid {

struct PowerFlowSolution {
  std::vector<double> v_mag;          // p.u.
  std::vector<double> v_ang;          // rad, slack pinned at 0
  std::vector<double> branch_flow_mw; // sending-end real power
  bool converged = false;
  int iterations = 0;
  double max_mismatch = 0.0;          // p.u., at exit
  std::string failure;                // set when converged == false
};

using Cplx = std::complex<double>;
using CplxMat = Eigen::Matrix<Cplx, Eigen::Dynamic, Eigen::Dynamic>;

inline CplxMat build_ybus(const GridModel& g) {
  const auto n = static_cast<Eigen::Index>(g.n_buses());
  CplxMat y = CplxMat::Zero(n, n);
  for (const Branch& br : g.branches) {
    if (!br.in_service) continue;
    const int a = g.bus_index(br.from);
    const int b = g.bus_index(br.to);
    const Cplx ys = 1.0 / Cplx(br.r, br.x);
    const Cplx ysh(0.0, br.b / 2.0);
    y(a, a) += ys + ysh;
    y(b, b) += ys + ysh;
    y(a, b) -= ys;
    y(b, a) -= ys;
  }
  return y;
}

// Full Newton-Raphson in polar form. Unknowns are angles at non-slack buses
// and magnitudes at PQ buses; PV reactive limits are not enforced.
inline PowerFlowSolution solve_ac_power_flow(const GridModel& g,
                                             const InjectionProfile& inj,
                                             double tol = 1e-8, int max_iter = 20) {
  const std::size_t n = g.n_buses();
  if (inj.p_mw.size() != n || inj.q_mvar.size() != n)
    throw std::invalid_argument("injection profile has " + std::to_string(inj.p_mw.size()) +
                                " entries for " + std::to_string(n) + " buses");

  const CplxMat y = build_ybus(g);
  std::vector<double> p_spec(n), q_spec(n);
  for (std::size_t i = 0; i < n; ++i) {
    p_spec[i] = inj.p_mw[i] / g.base_mva;
    q_spec[i] = inj.q_mvar[i] / g.base_mva;
  }

  PowerFlowSolution sol;
  sol.v_mag.assign(n, 1.0);
  sol.v_ang.assign(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const Bus& b = g.buses[i];
    if (b.kind != BusKind::pq) {
      sol.v_mag[i] = inj.v_setpoint.empty() ? b.v_setpoint : inj.v_setpoint[i];
    }
  }

  // unknown ordering: [theta at non-slack..., v at PQ...]
  std::vector<int> ang_idx, mag_idx;
  for (std::size_t i = 0; i < n; ++i) {
    if (g.buses[i].kind != BusKind::slack) ang_idx.push_back(static_cast<int>(i));
    if (g.buses[i].kind == BusKind::pq) mag_idx.push_back(static_cast<int>(i));
  }
  const auto n_ang = static_cast<Eigen::Index>(ang_idx.size());
  const auto n_mag = static_cast<Eigen::Index>(mag_idx.size());
  const Eigen::Index m = n_ang + n_mag;

  std::vector<double> p_calc(n), q_calc(n);
  auto eval_injections = [&]() {
    for (std::size_t i = 0; i < n; ++i) {
      double pi = 0.0, qi = 0.0;
      for (std::size_t k = 0; k < n; ++k) {
        const Cplx yik = y(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k));
        if (yik == Cplx(0.0, 0.0)) continue;
        const double th = sol.v_ang[i] - sol.v_ang[k];
        const double vv = sol.v_mag[i] * sol.v_mag[k];
        pi += vv * (yik.real() * std::cos(th) + yik.imag() * std::sin(th));
        qi += vv * (yik.real() * std::sin(th) - yik.imag() * std::cos(th));
      }
      p_calc[i] = pi;
      q_calc[i] = qi;
    }
  };

  Eigen::VectorXd mism(m);
  auto fill_mismatch = [&]() {
    double worst = 0.0;
    for (Eigen::Index r = 0; r < n_ang; ++r) {
      const int i = ang_idx[static_cast<std::size_t>(r)];
      mism(r) = p_spec[static_cast<std::size_t>(i)] - p_calc[static_cast<std::size_t>(i)];
      worst = std::max(worst, std::abs(mism(r)));
    }
    for (Eigen::Index r = 0; r < n_mag; ++r) {
      const int i = mag_idx[static_cast<std::size_t>(r)];
      mism(n_ang + r) = q_spec[static_cast<std::size_t>(i)] - q_calc[static_cast<std::size_t>(i)];
      worst = std::max(worst, std::abs(mism(n_ang + r)));
    }
    return worst;
  };

  for (int iter = 0; iter <= max_iter; ++iter) {
    eval_injections();
    sol.max_mismatch = fill_mismatch();
    if (sol.max_mismatch <= tol) {
      sol.converged = true;
      sol.iterations = iter;
      break;
    }
    if (iter == max_iter) {
      sol.failure = "no convergence after " + std::to_string(max_iter) + " iterations";
      break;
    }

    Eigen::MatrixXd jac = Eigen::MatrixXd::Zero(m, m);
    for (Eigen::Index r = 0; r < n_ang; ++r) {
      const auto i = static_cast<std::size_t>(ang_idx[static_cast<std::size_t>(r)]);
      for (Eigen::Index c = 0; c < n_ang; ++c) {
        const auto k = static_cast<std::size_t>(ang_idx[static_cast<std::size_t>(c)]);
        const Cplx yik = y(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k));
        if (i == k) {
          jac(r, c) = -q_calc[i] - yik.imag() * sol.v_mag[i] * sol.v_mag[i];
        } else {
          const double th = sol.v_ang[i] - sol.v_ang[k];
          const double vv = sol.v_mag[i] * sol.v_mag[k];
          jac(r, c) = vv * (yik.real() * std::sin(th) - yik.imag() * std::cos(th));
        }
      }
      for (Eigen::Index c = 0; c < n_mag; ++c) {
        const auto k = static_cast<std::size_t>(mag_idx[static_cast<std::size_t>(c)]);
        const Cplx yik = y(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k));
        if (i == k) {
          jac(r, n_ang + c) = p_calc[i] / sol.v_mag[i] + yik.real() * sol.v_mag[i];
        } else {
          const double th = sol.v_ang[i] - sol.v_ang[k];
          jac(r, n_ang + c) =
              sol.v_mag[i] * (yik.real() * std::cos(th) + yik.imag() * std::sin(th));
        }
      }
    }
    for (Eigen::Index r = 0; r < n_mag; ++r) {
      const auto i = static_cast<std::size_t>(mag_idx[static_cast<std::size_t>(r)]);
      for (Eigen::Index c = 0; c < n_ang; ++c) {
        const auto k = static_cast<std::size_t>(ang_idx[static_cast<std::size_t>(c)]);
        const Cplx yik = y(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k));
        if (i == k) {
          jac(n_ang + r, c) = p_calc[i] - yik.real() * sol.v_mag[i] * sol.v_mag[i];
        } else {
          const double th = sol.v_ang[i] - sol.v_ang[k];
          const double vv = sol.v_mag[i] * sol.v_mag[k];
          jac(n_ang + r, c) = -vv * (yik.real() * std::cos(th) + yik.imag() * std::sin(th));
        }
      }
      for (Eigen::Index c = 0; c < n_mag; ++c) {
        const auto k = static_cast<std::size_t>(mag_idx[static_cast<std::size_t>(c)]);
        const Cplx yik = y(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k));
        if (i == k) {
          jac(n_ang + r, n_ang + c) = q_calc[i] / sol.v_mag[i] - yik.imag() * sol.v_mag[i];
        } else {
          const double th = sol.v_ang[i] - sol.v_ang[k];
          jac(n_ang + r, n_ang + c) =
              sol.v_mag[i] * (yik.real() * std::sin(th) - yik.imag() * std::cos(th));
        }
      }
    }

    Eigen::FullPivLU<Eigen::MatrixXd> lu(jac);
    if (!lu.isInvertible()) {
      sol.failure = "singular Jacobian at iteration " + std::to_string(iter);
      break;
    }
    const Eigen::VectorXd dx = lu.solve(mism);
    if (!dx.allFinite()) {
      sol.failure = "non-finite Newton step at iteration " + std::to_string(iter);
      break;
    }
    for (Eigen::Index r = 0; r < n_ang; ++r)
      sol.v_ang[static_cast<std::size_t>(ang_idx[static_cast<std::size_t>(r)])] += dx(r);
    for (Eigen::Index r = 0; r < n_mag; ++r)
      sol.v_mag[static_cast<std::size_t>(mag_idx[static_cast<std::size_t>(r)])] += dx(n_ang + r);
  }

  // sending-end branch real power
  sol.branch_flow_mw.reserve(g.branches.size());
  for (const Branch& br : g.branches) {
    if (!br.in_service) {
      sol.branch_flow_mw.push_back(0.0);
      continue;
    }
    const auto a = static_cast<std::size_t>(g.bus_index(br.from));
    const auto b = static_cast<std::size_t>(g.bus_index(br.to));
    const Cplx va = std::polar(sol.v_mag[a], sol.v_ang[a]);
    const Cplx vb = std::polar(sol.v_mag[b], sol.v_ang[b]);
    const Cplx ys = 1.0 / Cplx(br.r, br.x);
    const Cplx i_from = ys * (va - vb) + Cplx(0.0, br.b / 2.0) * va;
    sol.branch_flow_mw.push_back((va * std::conj(i_from)).real() * g.base_mva);
  }
  return sol;
}

struct DcFlowResult {
  std::vector<double> flow_mw;      // per branch, from -> to
  std::vector<double> loading_pct;  // |flow| / rating * 100 where rated
  std::vector<double> overload_pct; // max(0, |flow| - rating) / rating * 100
  std::vector<double> theta;        // rad, slack = 0
};

// Linear B-theta solve on real injections; the slack absorbs any imbalance.
inline DcFlowResult solve_dc_power_flow(const GridModel& g,
                                        const std::vector<double>& p_mw) {
  const std::size_t n = g.n_buses();
  if (p_mw.size() != n)
    throw std::invalid_argument("injection vector has " + std::to_string(p_mw.size()) +
                                " entries for " + std::to_string(n) + " buses");
  if (!g.connected()) throw GridError("dc power flow requires a connected grid");

  const int slack = g.slack_index();
  std::vector<int> red;  // non-slack bus indices
  std::vector<int> pos(n, -1);
  for (std::size_t i = 0; i < n; ++i)
    if (static_cast<int>(i) != slack) {
      pos[i] = static_cast<int>(red.size());
      red.push_back(static_cast<int>(i));
    }
  const auto m = static_cast<Eigen::Index>(red.size());
  Eigen::MatrixXd bmat = Eigen::MatrixXd::Zero(m, m);
  for (const Branch& br : g.branches) {
    if (!br.in_service) continue;
    const int a = g.bus_index(br.from);
    const int b = g.bus_index(br.to);
    const double w = 1.0 / br.x;
    if (a != slack) bmat(pos[a], pos[a]) += w;
    if (b != slack) bmat(pos[b], pos[b]) += w;
    if (a != slack && b != slack) {
      bmat(pos[a], pos[b]) -= w;
      bmat(pos[b], pos[a]) -= w;
    }
  }
  Eigen::VectorXd rhs(m);
  for (Eigen::Index r = 0; r < m; ++r)
    rhs(r) = p_mw[static_cast<std::size_t>(red[static_cast<std::size_t>(r)])] / g.base_mva;

  const Eigen::VectorXd th = bmat.fullPivLu().solve(rhs);

  DcFlowResult res;
  res.theta.assign(n, 0.0);
  for (Eigen::Index r = 0; r < m; ++r)
    res.theta[static_cast<std::size_t>(red[static_cast<std::size_t>(r)])] = th(r);
  for (const Branch& br : g.branches) {
    if (!br.in_service) {
      res.flow_mw.push_back(0.0);
      res.loading_pct.push_back(0.0);
      res.overload_pct.push_back(0.0);
      continue;
    }
    const auto a = static_cast<std::size_t>(g.bus_index(br.from));
    const auto b = static_cast<std::size_t>(g.bus_index(br.to));
    const double f = (res.theta[a] - res.theta[b]) / br.x * g.base_mva;
    res.flow_mw.push_back(f);
    if (br.rating_mva > 0.0) {
      res.loading_pct.push_back(std::abs(f) / br.rating_mva * 100.0);
      res.overload_pct.push_back(
          std::max(0.0, (std::abs(f) - br.rating_mva) / br.rating_mva * 100.0));
    } else {
      res.loading_pct.push_back(0.0);
      res.overload_pct.push_back(0.0);
    }
  }
  return res;
}

}  // namespace w2vlab::grid
