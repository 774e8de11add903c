#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "w2vlab/autodiff.hpp"

namespace w2vlab::ad {

class TrainingError : public std::runtime_error {
 public:
  explicit TrainingError(const std::string& msg) : std::runtime_error(msg) {}
};

enum class OptimizerKind { radam, adam };

inline OptimizerKind optimizer_from_name(const std::string& s) {
  if (s == "radam") return OptimizerKind::radam;
  if (s == "adam") return OptimizerKind::adam;
  throw std::invalid_argument("unknown optimizer: " + s);
}

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::radam;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// RAdam: while the variance-rectification length rho_t stays <= 4 the update
// degrades to plain bias-corrected momentum; once rho_t > 4 the adaptive term
// re-enters with the rectification factor r_t.
class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig cfg) : cfg_(cfg), lr_(cfg.lr) {}

  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }
  void decay_lr(double factor) { lr_ *= factor; }
  long step_count() const { return step_; }

  void step(std::span<Parameter* const> params) {
    if (slots_.empty()) {
      slots_.resize(params.size());
      for (std::size_t i = 0; i < params.size(); ++i) {
        slots_[i].m.assign(params[i]->value.size(), 0.0);
        slots_[i].v.assign(params[i]->value.size(), 0.0);
      }
      n_params_ = params.size();
    }
    if (params.size() != n_params_)
      throw TrainingError("optimizer bound to a different parameter list");
    ++step_;
    const double t = static_cast<double>(step_);
    const double b1t = std::pow(cfg_.beta1, t);
    const double b2t = std::pow(cfg_.beta2, t);
    const double rho_inf = 2.0 / (1.0 - cfg_.beta2) - 1.0;
    const double rho_t = rho_inf - 2.0 * t * b2t / (1.0 - b2t);
    const bool rectified = rho_t > 4.0;
    double rect = 0.0;
    if (rectified) {
      rect = std::sqrt(((rho_t - 4.0) * (rho_t - 2.0) * rho_inf) /
                       ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t));
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
      Parameter& p = *params[i];
      Slot& s = slots_[i];
      for (std::size_t j = 0; j < p.value.size(); ++j) {
        const double g = p.grad[j];
        if (!std::isfinite(g))
          throw TrainingError("non-finite gradient in parameter '" + p.name + "'");
        s.m[j] = cfg_.beta1 * s.m[j] + (1.0 - cfg_.beta1) * g;
        s.v[j] = cfg_.beta2 * s.v[j] + (1.0 - cfg_.beta2) * g * g;
        const double m_hat = s.m[j] / (1.0 - b1t);
        if (cfg_.kind == OptimizerKind::adam) {
          const double v_hat = std::sqrt(s.v[j] / (1.0 - b2t));
          p.value[j] -= lr_ * m_hat / (v_hat + cfg_.eps);
        } else if (rectified) {
          const double v_hat = std::sqrt(s.v[j] / (1.0 - b2t));
          p.value[j] -= lr_ * rect * m_hat / (v_hat + cfg_.eps);
        } else {
          p.value[j] -= lr_ * m_hat;
        }
      }
    }
  }

  // flat state dump for checkpointing: per-parameter m then v, in order
  std::vector<std::vector<double>> state_arrays() const {
    std::vector<std::vector<double>> out;
    for (const Slot& s : slots_) {
      out.push_back(s.m);
      out.push_back(s.v);
    }
    return out;
  }

  void restore_state(const std::vector<std::vector<double>>& arrays, long step,
                     double lr) {
    slots_.clear();
    slots_.resize(arrays.size() / 2);
    for (std::size_t i = 0; i < slots_.size(); ++i) {
      slots_[i].m = arrays[2 * i];
      slots_[i].v = arrays[2 * i + 1];
    }
    n_params_ = slots_.size();
    step_ = step;
    lr_ = lr;
  }

 private:
  struct Slot {
    std::vector<double> m, v;
  };
  OptimizerConfig cfg_;
  double lr_;
  long step_ = 0;
  std::size_t n_params_ = 0;
  std::vector<Slot> slots_;
};

enum class ControlAction { proceed, decay_lr, stop };

struct ControllerConfig {
  int stop_patience = 30;
  int sched_patience = 10;
  double decay_factor = 0.5;
  double min_delta = 1e-6;
};

// Plateau LR scheduling plus early stopping on the validation loss.
// An epoch improves iff val < best - min_delta.
class TrainingController {
 public:
  explicit TrainingController(ControllerConfig cfg) : cfg_(cfg) {}

  ControlAction on_epoch(double val_loss) {
    ++epoch_;
    if (val_loss < best_ - cfg_.min_delta) {
      best_ = val_loss;
      best_epoch_ = epoch_;
      since_improve_ = 0;
      since_decay_ = 0;
      return ControlAction::proceed;
    }
    ++since_improve_;
    ++since_decay_;
    if (since_improve_ >= cfg_.stop_patience) {
      stopped_ = true;
      return ControlAction::stop;
    }
    if (since_decay_ >= cfg_.sched_patience) {
      since_decay_ = 0;
      return ControlAction::decay_lr;
    }
    return ControlAction::proceed;
  }

  double best() const { return best_; }
  int best_epoch() const { return best_epoch_; }
  int epoch() const { return epoch_; }
  bool stopped() const { return stopped_; }
  double decay_factor() const { return cfg_.decay_factor; }

 private:
  ControllerConfig cfg_;
  double best_ = std::numeric_limits<double>::infinity();
  int best_epoch_ = 0;
  int epoch_ = 0;
  int since_improve_ = 0;
  int since_decay_ = 0;
  bool stopped_ = false;
};

}  // namespace w2vlab::ad
