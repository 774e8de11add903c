#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "w2vlab/autodiff.hpp"
#include "w2vlab/checkpoint.hpp"
#include "w2vlab/dataset.hpp"
#include "w2vlab/optim.hpp"
#include "w2vlab/pca.hpp"

namespace w2vlab::w2v {

using ad::Activation;
using ad::Parameter;
using ad::Tape;
using ad::Tensor;

class BuildError : public std::runtime_error {
 public:
  explicit BuildError(const std::string& msg) : std::runtime_error(msg) {}
};

struct DenseLayer {
  Parameter w;  // [out x in]
  Parameter b;  // [out]

  DenseLayer() = default;
  DenseLayer(const std::string& name, long out, long in)
      : w(name + ".w", {out, in}), b(name + ".b", {out}) {}

  Tensor apply(Tape& tape, Tensor x, bool frozen) {
    return tape.linear(x, tape.param(w, frozen), tape.param(b, frozen));
  }
};

struct W2VArch {
  long input_w = 0;
  long latent_k = 0;
  long output_b = 0;
  long decoder_hidden = 64;
  Activation decoder_hidden_act = Activation::relu;
  Activation output_act = Activation::identity;  // sigmoid selectable for [0,1] targets
};

// Single encoder, dual decoders. The latent layer is linear so a PCA-based
// warm start is exactly representable; the decoders carry the nonlinearity.
struct W2VModel {
  W2VArch arch;
  double lambda = 0.8;
  DenseLayer enc, dw_hidden, dw_out, dv_hidden, dv_out;

  std::vector<Parameter*> params() {
    return {&enc.w,       &enc.b,       &dw_hidden.w, &dw_hidden.b, &dw_out.w,
            &dw_out.b,    &dv_hidden.w, &dv_hidden.b, &dv_out.w,    &dv_out.b};
  }

  long param_count() {
    long n = 0;
    for (Parameter* p : params()) n += p->size();
    return n;
  }

  struct Fwd {
    Tensor z, w_hat, v_hat;
  };

  Fwd forward(Tape& tape, Tensor x, bool frozen = false) {
    Tensor z = enc.apply(tape, x, frozen);
    Tensor hw = tape.activation(dw_hidden.apply(tape, z, frozen), arch.decoder_hidden_act);
    Tensor w_hat = tape.activation(dw_out.apply(tape, hw, frozen), arch.output_act);
    Tensor hv = tape.activation(dv_hidden.apply(tape, z, frozen), arch.decoder_hidden_act);
    Tensor v_hat = tape.activation(dv_out.apply(tape, hv, frozen), arch.output_act);
    return {z, w_hat, v_hat};
  }

  // voltage head only; used when the model acts as a frozen surrogate
  Tensor forward_voltage(Tape& tape, Tensor x, bool frozen = true) {
    Tensor z = enc.apply(tape, x, frozen);
    Tensor hv = tape.activation(dv_hidden.apply(tape, z, frozen), arch.decoder_hidden_act);
    return tape.activation(dv_out.apply(tape, hv, frozen), arch.output_act);
  }

  struct LossNodes {
    Tensor total, lv, lw;
  };

  LossNodes loss_on(Tape& tape, Tensor x, Tensor w_target, Tensor v_target) {
    auto f = forward(tape, x);
    Tensor lv = tape.mse(f.v_hat, v_target);
    Tensor lw = tape.mse(f.w_hat, w_target);
    Tensor total = tape.add_scaled(lv, lw, lambda);
    return {total, lv, lw};
  }

  void store(ArrayStore& st, const std::string& prefix = "w2v") const {
    st.put(prefix + ".arch", {6},
           {static_cast<double>(arch.input_w), static_cast<double>(arch.latent_k),
            static_cast<double>(arch.output_b), static_cast<double>(arch.decoder_hidden),
            static_cast<double>(static_cast<int>(arch.decoder_hidden_act)),
            static_cast<double>(static_cast<int>(arch.output_act))});
    st.put_scalar(prefix + ".lambda", lambda);
    for (const Parameter* p :
         {&enc.w, &enc.b, &dw_hidden.w, &dw_hidden.b, &dw_out.w, &dw_out.b, &dv_hidden.w,
          &dv_hidden.b, &dv_out.w, &dv_out.b})
      st.put(prefix + "." + p->name, p->dims, p->value);
  }

  static W2VModel restore(const ArrayStore& st, const std::string& prefix = "w2v") {
    const auto& a = st.get(prefix + ".arch").data;
    W2VArch arch;
    arch.input_w = static_cast<long>(a[0]);
    arch.latent_k = static_cast<long>(a[1]);
    arch.output_b = static_cast<long>(a[2]);
    arch.decoder_hidden = static_cast<long>(a[3]);
    arch.decoder_hidden_act = static_cast<Activation>(static_cast<int>(a[4]));
    arch.output_act = static_cast<Activation>(static_cast<int>(a[5]));
    W2VModel m = make_skeleton(arch);
    m.lambda = st.get_scalar(prefix + ".lambda");
    for (Parameter* p : m.params()) p->value = st.get(prefix + "." + p->name).data;
    return m;
  }

  static W2VModel make_skeleton(const W2VArch& arch) {
    W2VModel m;
    m.arch = arch;
    m.enc = DenseLayer("enc", arch.latent_k, arch.input_w);
    m.dw_hidden = DenseLayer("dw_hidden", arch.decoder_hidden, arch.latent_k);
    m.dw_out = DenseLayer("dw_out", arch.input_w, arch.decoder_hidden);
    m.dv_hidden = DenseLayer("dv_hidden", arch.decoder_hidden, arch.latent_k);
    m.dv_out = DenseLayer("dv_out", arch.output_b, arch.decoder_hidden);
    return m;
  }
};

// PCA warm start sets the encoder to z = P^T w - P^T mu; decoders always
// start random. Without a PCA model everything is cold-started.
inline W2VModel build_w2v(const W2VArch& arch, const pca::PcaModel* pca_init,
                          double lambda, std::uint64_t seed) {
  if (arch.input_w < 1 || arch.latent_k < 1 || arch.output_b < 1)
    throw BuildError("w2v architecture dimensions must be positive");
  if (pca_init != nullptr) {
    if (pca_init->input_width() != arch.input_w || pca_init->latent_width() != arch.latent_k)
      throw BuildError("PCA model is " + std::to_string(pca_init->input_width()) + "->" +
                       std::to_string(pca_init->latent_width()) + " but arch wants " +
                       std::to_string(arch.input_w) + "->" + std::to_string(arch.latent_k));
  }
  W2VModel m = W2VModel::make_skeleton(arch);
  m.lambda = lambda;
  Rng rng(derive_seed(seed, "w2v.init"));
  if (pca_init != nullptr) {
    const Eigen::MatrixXd p = pca_init->projection();   // [W x K]
    const Eigen::VectorXd mu = pca_init->mean();
    ad::MatMap wmap(m.enc.w.value.data(), arch.latent_k, arch.input_w);
    wmap = p.transpose();
    const Eigen::VectorXd b = -p.transpose() * mu;
    for (long i = 0; i < arch.latent_k; ++i) m.enc.b.value[static_cast<std::size_t>(i)] = b(i);
  } else {
    ad::init_fan_in(m.enc.w, arch.input_w, rng);
    ad::init_fan_in(m.enc.b, arch.input_w, rng);
  }
  ad::init_fan_in(m.dw_hidden.w, arch.latent_k, rng);
  ad::init_fan_in(m.dw_hidden.b, arch.latent_k, rng);
  ad::init_fan_in(m.dw_out.w, arch.decoder_hidden, rng);
  ad::init_fan_in(m.dw_out.b, arch.decoder_hidden, rng);
  ad::init_fan_in(m.dv_hidden.w, arch.latent_k, rng);
  ad::init_fan_in(m.dv_hidden.b, arch.latent_k, rng);
  ad::init_fan_in(m.dv_out.w, arch.decoder_hidden, rng);
  ad::init_fan_in(m.dv_out.b, arch.decoder_hidden, rng);
  return m;
}

// Direct W -> hidden x3 -> B map; hidden width solved so the parameter count
// lands within 10% of a reference count.
struct MlpModel {
  long input_w = 0, output_b = 0, hidden = 0;
  double lambda = 0.0;  // no reconstruction head
  DenseLayer l1, l2, l3, head;

  std::vector<Parameter*> params() {
    return {&l1.w, &l1.b, &l2.w, &l2.b, &l3.w, &l3.b, &head.w, &head.b};
  }

  long param_count() {
    long n = 0;
    for (Parameter* p : params()) n += p->size();
    return n;
  }

  Tensor forward(Tape& tape, Tensor x, bool frozen = false) {
    Tensor h1 = tape.activation(l1.apply(tape, x, frozen), Activation::relu);
    Tensor h2 = tape.activation(l2.apply(tape, h1, frozen), Activation::relu);
    Tensor h3 = tape.activation(l3.apply(tape, h2, frozen), Activation::relu);
    return head.apply(tape, h3, frozen);
  }

  struct LossNodes {
    Tensor total, lv, lw;
  };

  LossNodes loss_on(Tape& tape, Tensor x, Tensor /*w_target*/, Tensor v_target) {
    Tensor lv = tape.mse(forward(tape, x), v_target);
    const double zero = 0.0;
    Tensor lw = tape.constant({1}, std::span<const double>(&zero, 1));
    return {lv, lv, lw};
  }
};

inline long mlp_param_count(long w, long b, long h) {
  return (w + 1) * h + 2 * (h + 1) * h + (h + 1) * b;
}

inline MlpModel build_mlp_baseline(long input_w, long output_b, long target_params,
                                   std::uint64_t seed) {
  long best_h = -1;
  long best_diff = std::numeric_limits<long>::max();
  for (long h = 1; h <= 8192; ++h) {
    const long diff = std::labs(mlp_param_count(input_w, output_b, h) - target_params);
    if (diff < best_diff) {
      best_diff = diff;
      best_h = h;
    }
    if (mlp_param_count(input_w, output_b, h) > 2 * target_params) break;
  }
  if (best_h < 0 ||
      static_cast<double>(best_diff) > 0.10 * static_cast<double>(target_params))
    throw BuildError("no hidden width matches the target parameter count within 10%; "
                     "closest is h=" + std::to_string(best_h));
  MlpModel m;
  m.input_w = input_w;
  m.output_b = output_b;
  m.hidden = best_h;
  m.l1 = DenseLayer("mlp.l1", best_h, input_w);
  m.l2 = DenseLayer("mlp.l2", best_h, best_h);
  m.l3 = DenseLayer("mlp.l3", best_h, best_h);
  m.head = DenseLayer("mlp.head", output_b, best_h);
  Rng rng(derive_seed(seed, "mlp.init"));
  ad::init_fan_in(m.l1.w, input_w, rng);
  ad::init_fan_in(m.l1.b, input_w, rng);
  ad::init_fan_in(m.l2.w, best_h, rng);
  ad::init_fan_in(m.l2.b, best_h, rng);
  ad::init_fan_in(m.l3.w, best_h, rng);
  ad::init_fan_in(m.l3.b, best_h, rng);
  ad::init_fan_in(m.head.w, best_h, rng);
  ad::init_fan_in(m.head.b, best_h, rng);
  return m;
}

// ---- training ----

struct TrainConfig {
  int max_epochs = 150;
  int batch_size = 64;
  double lr = 1e-3;
  int stop_patience = 30;
  int sched_patience = 10;
  double decay_factor = 0.5;
  ad::OptimizerKind optimizer = ad::OptimizerKind::radam;
  std::uint64_t seed = 0;
};

struct EpochLog {
  double train_total = 0, train_lv = 0, train_lw = 0;
  double val_total = 0, val_lv = 0, val_lw = 0;
  double lr = 0;
};

struct TestMetrics {
  double rmse_norm = 0, mae_norm = 0, rmse_pu = 0, mae_pu = 0;
};

struct TrainReport {
  std::vector<EpochLog> epochs;
  int best_epoch = 0;  // 1-based; 0 means the initial parameters were best
  double best_val_total = 0;
  TestMetrics test;
  int epochs_run = 0;
  std::uint64_t seed = 0;
  double wall_seconds = 0;  // informational; excluded from determinism contracts
};

namespace detail {

inline ad::RowMat gather_rows(const ad::RowMat& src, const std::vector<long>& rows) {
  ad::RowMat out(static_cast<Eigen::Index>(rows.size()), src.cols());
  for (std::size_t i = 0; i < rows.size(); ++i)
    out.row(static_cast<Eigen::Index>(i)) = src.row(rows[i]);
  return out;
}

template <class Model>
inline std::array<double, 3> eval_losses(Model& model, const ad::RowMat& w,
                                         const ad::RowMat& v) {
  Tape tape;
  Tensor x = tape.constant(w);
  auto parts = model.loss_on(tape, x, x, tape.constant(v));
  return {parts.total.scalar(), parts.lv.scalar(), parts.lw.scalar()};
}

template <class Model>
inline TestMetrics eval_test(Model& model, const data::NexusDataset& ds,
                             const std::vector<long>& rows) {
  const ad::RowMat w = gather_rows(ds.weather_norm, rows);
  const ad::RowMat v = gather_rows(ds.voltage_norm, rows);
  Tape tape;
  Tensor x = tape.constant(w);
  ad::RowMat pred(v.rows(), v.cols());
  if constexpr (requires { model.forward(tape, x, false).v_hat; }) {
    const auto f = model.forward(tape, x, false);
    pred = Eigen::Map<const ad::RowMat>(f.v_hat.value().data(), v.rows(), v.cols());
  } else {
    Tensor out = model.forward(tape, x, false);
    pred = Eigen::Map<const ad::RowMat>(out.value().data(), v.rows(), v.cols());
  }
  TestMetrics m;
  const auto count = static_cast<double>(v.size());
  m.rmse_norm = std::sqrt((pred - v).squaredNorm() / count);
  m.mae_norm = (pred - v).cwiseAbs().sum() / count;
  const ad::RowMat pred_pu = ds.voltage_scaler.invert(pred);
  const ad::RowMat v_pu = ds.voltage_scaler.invert(v);
  m.rmse_pu = std::sqrt((pred_pu - v_pu).squaredNorm() / count);
  m.mae_pu = (pred_pu - v_pu).cwiseAbs().sum() / count;
  return m;
}

}  // namespace detail

// Mini-batch loop with seeded shuffling, plateau LR decay, early stopping,
// and best-epoch parameter restore. Deterministic for a fixed seed.
template <class Model>
TrainReport train_surrogate(Model& model, const data::NexusDataset& ds,
                            const TrainConfig& cfg) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto& split = ds.random_split;
  if (split.train.empty() || split.val.empty() || split.test.empty())
    throw ad::TrainingError("dataset split is empty");

  Rng rng(derive_seed(cfg.seed, "train.shuffle"));
  ad::Optimizer opt({cfg.optimizer, cfg.lr});
  ad::TrainingController controller(
      {cfg.stop_patience, cfg.sched_patience, cfg.decay_factor, 1e-6});
  const auto params = model.params();

  const ad::RowMat val_w = detail::gather_rows(ds.weather_norm, split.val);
  const ad::RowMat val_v = detail::gather_rows(ds.voltage_norm, split.val);

  TrainReport report;
  report.seed = cfg.seed;

  std::vector<std::vector<double>> best_params;
  double best_val = std::numeric_limits<double>::infinity();
  auto snapshot = [&]() {
    best_params.clear();
    for (Parameter* p : params) best_params.push_back(p->value);
  };
  snapshot();
  {
    const auto v0 = detail::eval_losses(model, val_w, val_v);
    best_val = v0[0];
    report.best_val_total = v0[0];
  }

  std::vector<long> order = split.train;
  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    rng.shuffle(order);
    double tr_total = 0, tr_lv = 0, tr_lw = 0;
    for (std::size_t off = 0; off < order.size(); off += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t hi = std::min(order.size(), off + static_cast<std::size_t>(cfg.batch_size));
      const std::vector<long> batch(order.begin() + static_cast<long>(off),
                                    order.begin() + static_cast<long>(hi));
      const ad::RowMat wb = detail::gather_rows(ds.weather_norm, batch);
      const ad::RowMat vb = detail::gather_rows(ds.voltage_norm, batch);
      Tape tape;
      Tensor x = tape.constant(wb);
      auto parts = model.loss_on(tape, x, x, tape.constant(vb));
      for (Parameter* p : params) p->zero_grad();
      tape.backward(parts.total);
      opt.step(params);
      const double wgt = static_cast<double>(batch.size()) / static_cast<double>(order.size());
      tr_total += parts.total.scalar() * wgt;
      tr_lv += parts.lv.scalar() * wgt;
      tr_lw += parts.lw.scalar() * wgt;
      if (!std::isfinite(parts.total.scalar()))
        throw ad::TrainingError("training loss became non-finite at epoch " +
                                std::to_string(epoch));
    }

    const auto val = detail::eval_losses(model, val_w, val_v);
    EpochLog log;
    log.train_total = tr_total;
    log.train_lv = tr_lv;
    log.train_lw = tr_lw;
    log.val_total = val[0];
    log.val_lv = val[1];
    log.val_lw = val[2];
    log.lr = opt.lr();
    report.epochs.push_back(log);
    report.epochs_run = epoch;

    if (val[0] < best_val) {
      best_val = val[0];
      report.best_epoch = epoch;
      report.best_val_total = val[0];
      snapshot();
    }
    const auto action = controller.on_epoch(val[0]);
    if (action == ad::ControlAction::decay_lr) {
      opt.decay_lr(cfg.decay_factor);
    } else if (action == ad::ControlAction::stop) {
      break;
    }
  }

  for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = best_params[i];
  report.test = detail::eval_test(model, ds, split.test);
  report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

}  // namespace w2vlab::w2v
