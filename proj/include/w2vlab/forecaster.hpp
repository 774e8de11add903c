#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "w2vlab/autodiff.hpp"
#include "w2vlab/dataset.hpp"
#include "w2vlab/optim.hpp"
#include "w2vlab/w2v.hpp"

namespace w2vlab::forecast {

using ad::Activation;
using ad::Parameter;
using ad::Tape;
using ad::Tensor;
using w2v::DenseLayer;

class ForecastError : public std::runtime_error {
 public:
  explicit ForecastError(const std::string& msg) : std::runtime_error(msg) {}
};

struct WindowGeometry {
  long k = 24;       // input length
  long lead = 1;     // gap before the first predicted step
  long horizon = 1;  // predicted steps

  void validate() const {
    if (k < 1 || lead < 1 || horizon < 1)
      throw ForecastError("window geometry requires k, lead, horizon >= 1");
  }
  long min_length() const { return k + lead + horizon - 1; }
};

// One training sample: history x, target weather y, target voltages s.
// Rows of s align one-to-one with rows of y.
struct ForecastWindow {
  long anchor = 0;   // original time index t of the last input step
  ad::RowMat x;      // [k x W]
  ad::RowMat y;      // [h x W]
  ad::RowMat s;      // [h x B]
};

struct WindowSet {
  WindowGeometry geom;
  long n_features = 0;
  long n_locations = 0;
  long n_buses = 0;
  std::vector<ForecastWindow> windows;
  long skipped_dropped = 0;  // candidate anchors lost to filtered-out steps
};

enum class Split { train, val, test };

inline const std::vector<long>& split_rows(const data::SplitIndices& s, Split which) {
  switch (which) {
    case Split::train: return s.train;
    case Split::val: return s.val;
    default: return s.test;
  }
}

// Windows over a chronological split. A window is emitted for every anchor
// whose full time span lies inside the split's original-time range and hits
// no dropped step; anchors that fit the range but touch a dropped step are
// counted in skipped_dropped.
inline WindowSet make_windows(const data::NexusDataset& ds, const WindowGeometry& geom,
                              Split which) {
  geom.validate();
  const auto& rows = split_rows(ds.chrono_split, which);
  if (static_cast<long>(rows.size()) < geom.min_length())
    throw ForecastError("split has " + std::to_string(rows.size()) +
                        " samples but the geometry needs at least " +
                        std::to_string(geom.min_length()) + " (k + lead + horizon - 1)");

  std::map<long, long> row_of;  // original time -> retained row
  for (long r = 0; r < ds.size(); ++r) row_of[ds.orig_time[static_cast<std::size_t>(r)]] = r;

  const long span_lo = ds.orig_time[static_cast<std::size_t>(rows.front())];
  const long span_hi = ds.orig_time[static_cast<std::size_t>(rows.back())];
  const long w = ds.weather_width();

  WindowSet set;
  set.geom = geom;
  set.n_features = weather::kNumFeatures;
  set.n_locations = ds.n_locations;
  set.n_buses = ds.n_buses;

  for (long row : rows) {
    const long t = ds.orig_time[static_cast<std::size_t>(row)];
    if (t - geom.k + 1 < span_lo || t + geom.lead + geom.horizon - 1 > span_hi) continue;
    bool complete = true;
    for (long tau = t - geom.k + 1; tau <= t && complete; ++tau)
      complete = row_of.count(tau) > 0;
    for (long j = 0; j < geom.horizon && complete; ++j)
      complete = row_of.count(t + geom.lead + j) > 0;
    if (!complete) {
      ++set.skipped_dropped;
      continue;
    }
    ForecastWindow win;
    win.anchor = t;
    win.x.resize(geom.k, w);
    win.y.resize(geom.horizon, w);
    win.s.resize(geom.horizon, ds.n_buses);
    for (long i = 0; i < geom.k; ++i)
      win.x.row(i) = ds.weather_norm.row(row_of.at(t - geom.k + 1 + i));
    for (long j = 0; j < geom.horizon; ++j) {
      const long rr = row_of.at(t + geom.lead + j);
      win.y.row(j) = ds.weather_norm.row(rr);
      win.s.row(j) = ds.voltage_norm.row(rr);
    }
    set.windows.push_back(std::move(win));
  }
  return set;
}

// ---- model ----

enum class BranchKind { feedforward, attention };

inline BranchKind branch_kind_from_name(const std::string& s) {
  if (s == "feedforward") return BranchKind::feedforward;
  if (s == "attention") return BranchKind::attention;
  throw ForecastError("unknown branch kind: " + s);
}

struct BranchConfig {
  BranchKind kind = BranchKind::feedforward;
  long d_model = 16;
  long hidden = 64;    // feedforward trunk width
  long heads = 4;      // attention
  long layers = 2;     // attention encoder depth
  long ff_dim = 64;    // attention feed-forward width
  double dropout = 0.2;  // attention only; the feedforward branch is dropout-free
};

// linear projection S -> d, learnable temporal embedding, two hidden layers
// over the flattened sequence, linear head to h*S
struct FeedForwardBranch {
  long s = 0, k = 0, d = 0, h = 0;
  DenseLayer proj, fc1, fc2, head;
  Parameter embed;  // [k x d]

  static FeedForwardBranch make(const std::string& name, long s, long k, long d, long hidden,
                                long h) {
    FeedForwardBranch br;
    br.s = s;
    br.k = k;
    br.d = d;
    br.h = h;
    br.proj = DenseLayer(name + ".proj", d, s);
    br.embed = Parameter(name + ".embed", {k, d});
    br.fc1 = DenseLayer(name + ".fc1", hidden, k * d);
    br.fc2 = DenseLayer(name + ".fc2", hidden, hidden);
    br.head = DenseLayer(name + ".head", h * s, hidden);
    return br;
  }

  void init(Rng& rng) {
    ad::init_fan_in(proj.w, s, rng);
    ad::init_fan_in(proj.b, s, rng);
    ad::init_fan_in(embed, d, rng);
    ad::init_fan_in(fc1.w, k * d, rng);
    ad::init_fan_in(fc1.b, k * d, rng);
    ad::init_fan_in(fc2.w, fc1.w.dims[0], rng);
    ad::init_fan_in(fc2.b, fc1.w.dims[0], rng);
    ad::init_fan_in(head.w, fc2.w.dims[0], rng);
    ad::init_fan_in(head.b, fc2.w.dims[0], rng);
  }

  std::vector<Parameter*> params() {
    return {&proj.w, &proj.b, &embed, &fc1.w, &fc1.b, &fc2.w, &fc2.b, &head.w, &head.b};
  }

  // x: [batch*k x S] -> [batch x h*S]
  Tensor forward(Tape& tape, Tensor x, long batch, bool /*training*/, Rng* /*rng*/) {
    Tensor p = proj.apply(tape, x, false);
    Tensor seq = tape.reshape(p, {batch, k * d});
    seq = tape.add_row(seq, tape.param(embed));
    Tensor h1 = tape.activation(fc1.apply(tape, seq, false), Activation::relu);
    Tensor h2 = tape.activation(fc2.apply(tape, h1, false), Activation::relu);
    return head.apply(tape, h2, false);
  }
};

// vanilla post-norm encoder blocks (self-attention + FFN with residuals and
// layer norm) followed by a linear decoder over the flattened sequence
struct AttentionBranch {
  struct Block {
    DenseLayer wq, wk, wv, wo, ff1, ff2;
    Parameter ln1_g, ln1_b, ln2_g, ln2_b;
  };

  long s = 0, k = 0, d = 0, h = 0, heads = 0;
  double dropout = 0.0;
  DenseLayer proj, head;
  Parameter embed;
  std::vector<Block> blocks;

  static AttentionBranch make(const std::string& name, long s, long k, long d, long heads,
                              long layers, long ff_dim, double dropout, long h) {
    if (d % heads != 0) throw ForecastError("d_model must be divisible by the head count");
    AttentionBranch br;
    br.s = s;
    br.k = k;
    br.d = d;
    br.h = h;
    br.heads = heads;
    br.dropout = dropout;
    br.proj = DenseLayer(name + ".proj", d, s);
    br.embed = Parameter(name + ".embed", {k, d});
    for (long l = 0; l < layers; ++l) {
      const std::string ln = name + ".block" + std::to_string(l);
      Block blk;
      blk.wq = DenseLayer(ln + ".wq", d, d);
      blk.wk = DenseLayer(ln + ".wk", d, d);
      blk.wv = DenseLayer(ln + ".wv", d, d);
      blk.wo = DenseLayer(ln + ".wo", d, d);
      blk.ff1 = DenseLayer(ln + ".ff1", ff_dim, d);
      blk.ff2 = DenseLayer(ln + ".ff2", d, ff_dim);
      blk.ln1_g = Parameter(ln + ".ln1.g", {d});
      blk.ln1_b = Parameter(ln + ".ln1.b", {d});
      blk.ln2_g = Parameter(ln + ".ln2.g", {d});
      blk.ln2_b = Parameter(ln + ".ln2.b", {d});
      br.blocks.push_back(std::move(blk));
    }
    br.head = DenseLayer(name + ".head", h * s, k * d);
    return br;
  }

  void init(Rng& rng) {
    ad::init_fan_in(proj.w, s, rng);
    ad::init_fan_in(proj.b, s, rng);
    ad::init_fan_in(embed, d, rng);
    for (Block& blk : blocks) {
      for (DenseLayer* l : {&blk.wq, &blk.wk, &blk.wv, &blk.wo}) {
        ad::init_fan_in(l->w, d, rng);
        ad::init_fan_in(l->b, d, rng);
      }
      ad::init_fan_in(blk.ff1.w, d, rng);
      ad::init_fan_in(blk.ff1.b, d, rng);
      ad::init_fan_in(blk.ff2.w, blk.ff1.w.dims[0], rng);
      ad::init_fan_in(blk.ff2.b, blk.ff1.w.dims[0], rng);
      std::fill(blk.ln1_g.value.begin(), blk.ln1_g.value.end(), 1.0);
      std::fill(blk.ln2_g.value.begin(), blk.ln2_g.value.end(), 1.0);
    }
    ad::init_fan_in(head.w, k * d, rng);
    ad::init_fan_in(head.b, k * d, rng);
  }

  std::vector<Parameter*> params() {
    std::vector<Parameter*> out{&proj.w, &proj.b, &embed};
    for (Block& blk : blocks) {
      for (DenseLayer* l : {&blk.wq, &blk.wk, &blk.wv, &blk.wo, &blk.ff1, &blk.ff2}) {
        out.push_back(&l->w);
        out.push_back(&l->b);
      }
      out.push_back(&blk.ln1_g);
      out.push_back(&blk.ln1_b);
      out.push_back(&blk.ln2_g);
      out.push_back(&blk.ln2_b);
    }
    out.push_back(&head.w);
    out.push_back(&head.b);
    return out;
  }

  Tensor forward(Tape& tape, Tensor x, long batch, bool training, Rng* rng) {
    const long dh = d / heads;
    Tensor t = proj.apply(tape, x, false);  // [batch*k x d]
    {
      Tensor seq = tape.reshape(t, {batch, k * d});
      seq = tape.add_row(seq, tape.param(embed));
      t = tape.reshape(seq, {batch * k, d});
    }
    for (Block& blk : blocks) {
      Tensor q = tape.split_heads(blk.wq.apply(tape, t, false), batch, k, heads);
      Tensor kk = tape.split_heads(blk.wk.apply(tape, t, false), batch, k, heads);
      Tensor v = tape.split_heads(blk.wv.apply(tape, t, false), batch, k, heads);
      Tensor scores = tape.scale(tape.bmm_t(q, kk), 1.0 / std::sqrt(static_cast<double>(dh)));
      Tensor attn = tape.softmax_rows(scores);
      if (training && dropout > 0.0) attn = tape.dropout(attn, dropout, *rng);
      Tensor ctx = tape.merge_heads(tape.bmm(attn, v), batch, k, heads);
      Tensor proj_out = blk.wo.apply(tape, ctx, false);
      if (training && dropout > 0.0) proj_out = tape.dropout(proj_out, dropout, *rng);
      t = tape.layer_norm(tape.add(t, proj_out), tape.param(blk.ln1_g), tape.param(blk.ln1_b));
      Tensor ff = blk.ff2.apply(
          tape, tape.activation(blk.ff1.apply(tape, t, false), Activation::relu), false);
      if (training && dropout > 0.0) ff = tape.dropout(ff, dropout, *rng);
      t = tape.layer_norm(tape.add(t, ff), tape.param(blk.ln2_g), tape.param(blk.ln2_b));
    }
    Tensor seq = tape.reshape(t, {batch, k * d});
    return head.apply(tape, seq, false);
  }
};

using Branch = std::variant<FeedForwardBranch, AttentionBranch>;

enum class ForecastMode { gu, ga };

struct ForecasterModel;
inline ForecasterModel build_forecaster(long n_features, long s_locations, long n_buses,
                                        const WindowGeometry& geom, const BranchConfig& cfg,
                                        double gamma, std::uint64_t seed);

// N channel-independent branches, one per weather feature; branch n never
// sees another feature's data or parameters.
struct ForecasterModel {
  long n_features = 0, s_locations = 0, n_buses = 0;
  WindowGeometry geom;
  BranchConfig branch_cfg;
  double gamma = 0.0;
  std::vector<Branch> branches;

  std::vector<Parameter*> params() {
    std::vector<Parameter*> out;
    for (Branch& br : branches) {
      auto sub = std::visit([](auto& b) { return b.params(); }, br);
      out.insert(out.end(), sub.begin(), sub.end());
    }
    return out;
  }

  long param_count() {
    long n = 0;
    for (Parameter* p : params()) n += p->size();
    return n;
  }

  void store(ArrayStore& st, const std::string& prefix = "forecaster") {
    st.put(prefix + ".meta", {14},
           {static_cast<double>(n_features), static_cast<double>(s_locations),
            static_cast<double>(n_buses), static_cast<double>(geom.k),
            static_cast<double>(geom.lead), static_cast<double>(geom.horizon),
            static_cast<double>(static_cast<int>(branch_cfg.kind)),
            static_cast<double>(branch_cfg.d_model), static_cast<double>(branch_cfg.hidden),
            static_cast<double>(branch_cfg.heads), static_cast<double>(branch_cfg.layers),
            static_cast<double>(branch_cfg.ff_dim), branch_cfg.dropout, gamma});
    for (Parameter* p : params()) st.put(prefix + "." + p->name, p->dims, p->value);
  }

  static ForecasterModel restore(const ArrayStore& st, const std::string& prefix = "forecaster") {
    const auto& m = st.get(prefix + ".meta").data;
    WindowGeometry geom{static_cast<long>(m[3]), static_cast<long>(m[4]),
                        static_cast<long>(m[5])};
    BranchConfig bc;
    bc.kind = static_cast<BranchKind>(static_cast<int>(m[6]));
    bc.d_model = static_cast<long>(m[7]);
    bc.hidden = static_cast<long>(m[8]);
    bc.heads = static_cast<long>(m[9]);
    bc.layers = static_cast<long>(m[10]);
    bc.ff_dim = static_cast<long>(m[11]);
    bc.dropout = m[12];
    ForecasterModel model = build_forecaster(static_cast<long>(m[0]), static_cast<long>(m[1]),
                                             static_cast<long>(m[2]), geom, bc, m[13], 0);
    for (Parameter* p : model.params()) p->value = st.get(prefix + "." + p->name).data;
    return model;
  }

  // per-feature outputs, each [batch x h*S]
  std::vector<Tensor> forward(Tape& tape, const std::vector<Tensor>& x_per_feature,
                              long batch, bool training = false, Rng* rng = nullptr) {
    if (static_cast<long>(x_per_feature.size()) != n_features)
      throw ForecastError("expected " + std::to_string(n_features) + " feature inputs");
    std::vector<Tensor> out;
    out.reserve(x_per_feature.size());
    for (std::size_t n = 0; n < branches.size(); ++n)
      out.push_back(std::visit(
          [&](auto& b) { return b.forward(tape, x_per_feature[n], batch, training, rng); },
          branches[n]));
    return out;
  }
};

inline ForecasterModel build_forecaster(long n_features, long s_locations, long n_buses,
                                        const WindowGeometry& geom, const BranchConfig& cfg,
                                        double gamma, std::uint64_t seed) {
  geom.validate();
  ForecasterModel m;
  m.n_features = n_features;
  m.s_locations = s_locations;
  m.n_buses = n_buses;
  m.geom = geom;
  m.branch_cfg = cfg;
  m.gamma = gamma;
  Rng rng(derive_seed(seed, "forecaster.init"));
  for (long n = 0; n < n_features; ++n) {
    const std::string name = "branch" + std::to_string(n);
    if (cfg.kind == BranchKind::feedforward) {
      auto br = FeedForwardBranch::make(name, s_locations, geom.k, cfg.d_model, cfg.hidden,
                                        geom.horizon);
      br.init(rng);
      m.branches.emplace_back(std::move(br));
    } else {
      auto br = AttentionBranch::make(name, s_locations, geom.k, cfg.d_model, cfg.heads,
                                      cfg.layers, cfg.ff_dim, cfg.dropout, geom.horizon);
      br.init(rng);
      m.branches.emplace_back(std::move(br));
    }
  }
  return m;
}

// ---- batch assembly ----

struct BatchInputs {
  long batch = 0;
  std::vector<ad::RowMat> x_per_feature;  // each [batch*k x S]
  std::vector<ad::RowMat> y_per_feature;  // each [batch x h*S]
  ad::RowMat s_all;                       // [batch x h*B]
};

inline BatchInputs assemble_batch(const WindowSet& ws, const std::vector<long>& idx) {
  const auto& geom = ws.geom;
  const long s = ws.n_locations;
  BatchInputs out;
  out.batch = static_cast<long>(idx.size());
  out.x_per_feature.assign(static_cast<std::size_t>(ws.n_features),
                           ad::RowMat(out.batch * geom.k, s));
  out.y_per_feature.assign(static_cast<std::size_t>(ws.n_features),
                           ad::RowMat(out.batch, geom.horizon * s));
  out.s_all.resize(out.batch, geom.horizon * ws.n_buses);
  for (long b = 0; b < out.batch; ++b) {
    const ForecastWindow& win = ws.windows[static_cast<std::size_t>(idx[static_cast<std::size_t>(b)])];
    for (long f = 0; f < ws.n_features; ++f) {
      auto& xf = out.x_per_feature[static_cast<std::size_t>(f)];
      for (long t = 0; t < geom.k; ++t)
        xf.row(b * geom.k + t) = win.x.block(t, f * s, 1, s);
      auto& yf = out.y_per_feature[static_cast<std::size_t>(f)];
      for (long j = 0; j < geom.horizon; ++j)
        yf.block(b, j * s, 1, s) = win.y.block(j, f * s, 1, s);
    }
    for (long j = 0; j < geom.horizon; ++j)
      out.s_all.block(b, j * ws.n_buses, 1, ws.n_buses) = win.s.row(j);
  }
  return out;
}

inline std::vector<long> all_indices(const WindowSet& ws) {
  std::vector<long> idx(ws.windows.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<long>(i);
  return idx;
}

// ---- losses ----

struct FcastLossNodes {
  Tensor total;               // L_w + gamma * L_v (GU: just L_w)
  Tensor lw;                  // weather forecast MSE
  std::optional<Tensor> lv;   // voltage MSE through the frozen surrogate
};

// L_w as the mean of the per-feature MSEs; features have equal element
// counts, so this equals the MSE over the concatenated tensor.
inline Tensor weather_loss(Tape& tape, const std::vector<Tensor>& y_hat,
                           const std::vector<Tensor>& y_target) {
  Tensor acc = tape.mse(y_hat[0], y_target[0]);
  for (std::size_t n = 1; n < y_hat.size(); ++n)
    acc = tape.add(acc, tape.mse(y_hat[n], y_target[n]));
  return tape.scale(acc, 1.0 / static_cast<double>(y_hat.size()));
}

// Voltage loss per Eq.-style per-step mean: each horizon step's forecast is
// flattened to a W-wide sample, pushed through the frozen surrogate, and the
// per-step MSEs are averaged.
inline Tensor voltage_loss(Tape& tape, const std::vector<Tensor>& y_hat, Tensor s_all,
                           w2v::W2VModel& surrogate, long s_locations, long horizon,
                           long n_buses) {
  Tensor acc{};
  for (long j = 0; j < horizon; ++j) {
    std::vector<Tensor> step_parts;
    step_parts.reserve(y_hat.size());
    for (const Tensor& yf : y_hat)
      step_parts.push_back(tape.slice_cols(yf, j * s_locations, (j + 1) * s_locations));
    Tensor w_step = tape.concat_cols(step_parts);
    Tensor v_hat = surrogate.forward_voltage(tape, w_step, /*frozen=*/true);
    Tensor s_step = tape.slice_cols(s_all, j * n_buses, (j + 1) * n_buses);
    Tensor l = tape.mse(v_hat, s_step);
    acc = j == 0 ? l : tape.add(acc, l);
  }
  return tape.scale(acc, 1.0 / static_cast<double>(horizon));
}

inline FcastLossNodes forecast_loss(Tape& tape, ForecasterModel& model,
                                    const BatchInputs& batch, ForecastMode mode,
                                    w2v::W2VModel* surrogate, bool training, Rng* rng,
                                    bool stage1_gu = false) {
  std::vector<Tensor> x_nodes, y_nodes;
  for (const auto& xf : batch.x_per_feature) x_nodes.push_back(tape.constant(xf));
  for (const auto& yf : batch.y_per_feature) y_nodes.push_back(tape.constant(yf));
  auto y_hat = model.forward(tape, x_nodes, batch.batch, training, rng);
  Tensor lw = weather_loss(tape, y_hat, y_nodes);
  FcastLossNodes out;
  out.lw = lw;
  if (mode == ForecastMode::ga && !stage1_gu) {
    if (surrogate == nullptr)
      throw ForecastError("grid-aware training requires a trained surrogate model");
    Tensor lv = voltage_loss(tape, y_hat, tape.constant(batch.s_all), *surrogate,
                             model.s_locations, model.geom.horizon, model.n_buses);
    out.lv = lv;
    out.total = tape.add_scaled(lw, lv, model.gamma);
  } else {
    out.total = lw;
  }
  return out;
}

// full prediction matrix [n_windows x h*W]; step-major columns, each step a
// feature-major W-wide block (the same layout the surrogate consumes)
inline ad::RowMat forecast_all(ForecasterModel& model, const WindowSet& ws) {
  const long s = ws.n_locations;
  const long w = ws.n_features * s;
  const long h = ws.geom.horizon;
  const auto idx = all_indices(ws);
  const auto batch = assemble_batch(ws, idx);
  Tape tape;
  std::vector<Tensor> x_nodes;
  for (const auto& xf : batch.x_per_feature) x_nodes.push_back(tape.constant(xf));
  const auto y_hat = model.forward(tape, x_nodes, batch.batch, false, nullptr);
  ad::RowMat out(batch.batch, h * w);
  for (long f = 0; f < ws.n_features; ++f) {
    ad::ConstMatMap yf(y_hat[static_cast<std::size_t>(f)].value().data(), batch.batch, h * s);
    for (long j = 0; j < h; ++j)
      out.middleCols(j * w + f * s, s) = yf.middleCols(j * s, s);
  }
  return out;
}

// targets in the same layout as forecast_all
inline ad::RowMat targets_all(const WindowSet& ws) {
  const long w = ws.n_features * ws.n_locations;
  const long h = ws.geom.horizon;
  ad::RowMat out(static_cast<Eigen::Index>(ws.windows.size()), h * w);
  for (std::size_t i = 0; i < ws.windows.size(); ++i)
    for (long j = 0; j < h; ++j)
      out.block(static_cast<Eigen::Index>(i), j * w, 1, w) = ws.windows[i].y.row(j);
  return out;
}

inline ad::RowMat voltage_targets_all(const WindowSet& ws) {
  const long h = ws.geom.horizon;
  ad::RowMat out(static_cast<Eigen::Index>(ws.windows.size()), h * ws.n_buses);
  for (std::size_t i = 0; i < ws.windows.size(); ++i)
    for (long j = 0; j < h; ++j)
      out.block(static_cast<Eigen::Index>(i), j * ws.n_buses, 1, ws.n_buses) =
          ws.windows[i].s.row(j);
  return out;
}

// ---- training ----

struct ForecastTrainConfig {
  int max_epochs = 60;
  int batch_size = 64;
  double lr = 1e-3;
  int stop_patience = 12;
  int sched_patience = 6;
  double decay_factor = 0.5;
  double stage1_fraction = 2.0 / 3.0;  // of max_epochs; must stay >= 2/3
  ad::OptimizerKind optimizer = ad::OptimizerKind::radam;
  std::uint64_t seed = 0;

  void validate(ForecastMode mode) const {
    if (mode == ForecastMode::ga && stage1_fraction < 2.0 / 3.0 - 1e-12)
      throw ForecastError("stage-1 fraction must be at least 2/3 for grid-aware training");
  }
  int stage1_epochs() const {
    return static_cast<int>(
        std::ceil(stage1_fraction * static_cast<double>(max_epochs) - 1e-9));
  }
};

struct FcastEpochLog {
  int stage = 1;
  double train_lw = 0, train_lv = 0, train_total = 0;
  double val_lw = 0, val_lv = 0, val_total = 0;
  double lr = 0;
};

struct ForecastRun {
  ForecastMode mode = ForecastMode::gu;
  WindowGeometry geom;
  double gamma = 0.0;
  std::vector<FcastEpochLog> epochs;
  int stage_boundary = 0;  // epochs spent in stage 1 (GU mode: all of them)
  int best_epoch = 0;
  double best_val = 0.0;
  int epochs_run = 0;
  std::uint64_t seed = 0;
};

namespace detail {

// validation losses at the current parameters; lv only when a surrogate is given
inline std::array<double, 2> eval_val(ForecasterModel& model, const BatchInputs& val,
                                      w2v::W2VModel* surrogate) {
  Tape tape;
  std::vector<Tensor> x_nodes, y_nodes;
  for (const auto& xf : val.x_per_feature) x_nodes.push_back(tape.constant(xf));
  for (const auto& yf : val.y_per_feature) y_nodes.push_back(tape.constant(yf));
  auto y_hat = model.forward(tape, x_nodes, val.batch, false, nullptr);
  const double lw = weather_loss(tape, y_hat, y_nodes).scalar();
  double lv = 0.0;
  if (surrogate != nullptr)
    lv = voltage_loss(tape, y_hat, tape.constant(val.s_all), *surrogate, model.s_locations,
                      model.geom.horizon, model.n_buses)
             .scalar();
  return {lw, lv};
}

}  // namespace detail

// Two-stage schedule for grid-aware training. Stage 1 follows the exact
// grid-unaware code path (loss, metric, controller), so its trajectory is
// bit-identical to a grid-unaware run under the same seed. At the boundary
// the controller and best-parameter bookkeeping are re-baselined by replaying
// the stage-1 values of the stage-2 metric, which keeps a gamma = 0 run
// equal to a grid-unaware run of the same schedule.
inline ForecastRun train_forecaster(ForecasterModel& model, const WindowSet& train_ws,
                                    const WindowSet& val_ws, ForecastMode mode,
                                    w2v::W2VModel* surrogate,
                                    const ForecastTrainConfig& cfg) {
  cfg.validate(mode);
  if (mode == ForecastMode::ga && surrogate == nullptr)
    throw ForecastError("grid-aware training requires a surrogate checkpoint; train one first");
  if (train_ws.windows.empty() || val_ws.windows.empty())
    throw ForecastError("empty window set");

  Rng rng(derive_seed(cfg.seed, "forecaster.shuffle"));
  ad::Optimizer opt({cfg.optimizer, cfg.lr});
  const auto params = model.params();
  const BatchInputs val = assemble_batch(val_ws, all_indices(val_ws));

  ForecastRun run;
  run.mode = mode;
  run.geom = model.geom;
  run.gamma = model.gamma;
  run.seed = cfg.seed;

  const int stage1_sched = mode == ForecastMode::ga ? cfg.stage1_epochs() : cfg.max_epochs;
  ad::ControllerConfig ctrl_cfg{cfg.stop_patience, cfg.sched_patience, cfg.decay_factor, 1e-6};
  ad::TrainingController ctrl_gu(ctrl_cfg);

  std::vector<std::vector<double>> best_params;
  double best_metric = std::numeric_limits<double>::infinity();
  auto snapshot = [&]() {
    best_params.clear();
    for (Parameter* p : params) best_params.push_back(p->value);
  };
  snapshot();

  std::optional<ad::TrainingController> ctrl_ga;
  bool in_stage2 = mode == ForecastMode::gu ? false : stage1_sched == 0;
  std::vector<double> stage1_track_metrics;

  // The stage-2 controller is rebuilt by replaying the stage-1 series of the
  // stage-2 metric through a fresh controller; replay actions are ignored
  // because stage-1 decay/stop already followed the grid-unaware controller.
  auto enter_stage2 = [&]() {
    in_stage2 = true;
    run.stage_boundary = run.epochs_run;
    ctrl_ga.emplace(ctrl_cfg);
    for (double v : stage1_track_metrics) ctrl_ga->on_epoch(v);
  };
  if (in_stage2) enter_stage2();

  std::vector<long> order = all_indices(train_ws);
  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const bool stage1 = !in_stage2;
    rng.shuffle(order);
    double tr_lw = 0, tr_lv = 0, tr_total = 0;
    for (std::size_t off = 0; off < order.size();
         off += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t hi =
          std::min(order.size(), off + static_cast<std::size_t>(cfg.batch_size));
      const std::vector<long> idx(order.begin() + static_cast<long>(off),
                                  order.begin() + static_cast<long>(hi));
      const BatchInputs batch = assemble_batch(train_ws, idx);
      Tape tape;
      auto loss = forecast_loss(tape, model, batch, mode, surrogate, true, &rng, stage1);
      for (Parameter* p : params) p->zero_grad();
      tape.backward(loss.total);
      opt.step(params);
      const double wgt = static_cast<double>(idx.size()) / static_cast<double>(order.size());
      tr_lw += loss.lw.scalar() * wgt;
      tr_lv += loss.lv ? loss.lv->scalar() * wgt : 0.0;
      tr_total += loss.total.scalar() * wgt;
      if (!std::isfinite(loss.total.scalar()))
        throw ad::TrainingError("forecaster loss became non-finite at epoch " +
                                std::to_string(epoch));
    }

    const auto val_losses =
        detail::eval_val(model, val, mode == ForecastMode::ga ? surrogate : nullptr);
    const double val_lw = val_losses[0];
    const double val_lv = val_losses[1];
    const double gu_metric = val_lw;
    const double ga_metric = val_lw + model.gamma * val_lv;
    // snapshots always track the final objective; only the stage-1 controller
    // is pinned to the grid-unaware metric
    const double track_metric = mode == ForecastMode::ga ? ga_metric : gu_metric;

    FcastEpochLog log;
    log.stage = stage1 ? 1 : 2;
    log.train_lw = tr_lw;
    log.train_lv = tr_lv;
    log.train_total = tr_total;
    log.val_lw = val_lw;
    log.val_lv = val_lv;
    log.val_total = mode == ForecastMode::ga ? ga_metric : gu_metric;
    log.lr = opt.lr();
    run.epochs.push_back(log);
    run.epochs_run = epoch;

    if (stage1) {
      stage1_track_metrics.push_back(track_metric);
      if (track_metric < best_metric) {
        best_metric = track_metric;
        run.best_epoch = epoch;
        snapshot();
      }
      const auto action = ctrl_gu.on_epoch(gu_metric);
      if (action == ad::ControlAction::decay_lr) {
        opt.decay_lr(cfg.decay_factor);
      } else if (action == ad::ControlAction::stop) {
        if (mode == ForecastMode::gu) break;
        enter_stage2();
        if (ctrl_ga->stopped()) break;
        continue;
      }
      if (mode == ForecastMode::ga && epoch >= stage1_sched) {
        enter_stage2();
        if (ctrl_ga->stopped()) break;
      }
    } else {
      if (track_metric < best_metric) {
        best_metric = track_metric;
        run.best_epoch = epoch;
        snapshot();
      }
      const auto action = ctrl_ga->on_epoch(ga_metric);
      if (action == ad::ControlAction::decay_lr) {
        opt.decay_lr(cfg.decay_factor);
      } else if (action == ad::ControlAction::stop) {
        break;
      }
    }
  }

  for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = best_params[i];
  run.best_val = best_metric;
  if (mode == ForecastMode::gu) run.stage_boundary = run.epochs_run;
  return run;
}

// ---- gamma selection ----

struct GammaCandidate {
  double gamma = 0.0;
  bool failed = false;
  double val_voltage_rmse = 0.0;  // p.u., through the frozen surrogate
  double val_weather_rmse = 0.0;  // normalized, pooled over features
  double delta_voltage_pct = 0.0;
  double delta_weather_pct = 0.0;
};

struct GammaSelection {
  double gamma = 0.0;            // 0 means no candidate met the cap
  bool fell_back_to_gu = false;
  std::vector<GammaCandidate> candidates;
  ForecasterModel best_model;    // trained model at the selected gamma (or GU fallback)
  ForecastRun best_run;
};

inline std::vector<double> log_spaced(double lo, double hi, int count) {
  std::vector<double> out;
  if (count == 1) {
    out.push_back(std::sqrt(lo * hi));
    return out;
  }
  const double llo = std::log(lo);
  const double lhi = std::log(hi);
  for (int i = 0; i < count; ++i)
    out.push_back(std::exp(llo + (lhi - llo) * static_cast<double>(i) /
                                     static_cast<double>(count - 1)));
  return out;
}

struct ValMetrics {
  double weather_rmse_norm = 0.0;  // pooled over all features, normalized scale
  double voltage_rmse_pu = 0.0;    // through the frozen surrogate
};

inline ValMetrics eval_forecast_metrics(ForecasterModel& model, const WindowSet& ws,
                                        w2v::W2VModel& surrogate,
                                        const MinMaxScaler& voltage_scaler) {
  const ad::RowMat pred = forecast_all(model, ws);
  const ad::RowMat target = targets_all(ws);
  const ad::RowMat s_target = voltage_targets_all(ws);
  ValMetrics m;
  m.weather_rmse_norm =
      std::sqrt((pred - target).squaredNorm() / static_cast<double>(pred.size()));

  const long w = ws.n_features * ws.n_locations;
  const long h = ws.geom.horizon;
  const long b = ws.n_buses;
  double acc = 0.0;
  for (long j = 0; j < h; ++j) {
    Tape tape;
    Tensor x = tape.constant(pred.middleCols(j * w, w).eval());
    Tensor v_hat = surrogate.forward_voltage(tape, x);
    const ad::ConstMatMap vh(v_hat.value().data(), pred.rows(), b);
    const ad::RowMat v_pu = voltage_scaler.invert(vh);
    const ad::RowMat s_pu = voltage_scaler.invert(s_target.middleCols(j * b, b).eval());
    acc += (v_pu - s_pu).squaredNorm();
  }
  m.voltage_rmse_pu =
      std::sqrt(acc / (static_cast<double>(pred.rows()) * static_cast<double>(h * b)));
  return m;
}

struct GammaSweepConfig {
  double lo = 1.0;
  double hi = 10.0;
  int coarse = 5;
  int refine = 4;
  double weather_cap_pct = 5.0;  // largest tolerated validation weather-RMSE increase
  ForecastTrainConfig train;
};

// Coarse log scan over [lo, hi] followed by a refined log scan around the
// best region. Every candidate trains the full two-stage schedule from the
// same seed; selection picks the largest validation voltage-RMSE reduction
// whose weather degradation stays under the cap.
inline GammaSelection select_gamma(const WindowSet& train_ws, const WindowSet& val_ws,
                                   w2v::W2VModel& surrogate,
                                   const MinMaxScaler& voltage_scaler,
                                   const BranchConfig& branch_cfg,
                                   const GammaSweepConfig& cfg) {
  GammaSelection sel;
  auto build = [&](double gamma) {
    return build_forecaster(train_ws.n_features, train_ws.n_locations, train_ws.n_buses,
                            train_ws.geom, branch_cfg, gamma, cfg.train.seed);
  };

  // gamma = 0 baseline
  ForecasterModel gu_model = build(0.0);
  ForecastRun gu_run =
      train_forecaster(gu_model, train_ws, val_ws, ForecastMode::gu, nullptr, cfg.train);
  const ValMetrics base = eval_forecast_metrics(gu_model, val_ws, surrogate, voltage_scaler);

  bool have_best = false;
  double best_gamma = 0.0, best_dv = 0.0;

  auto run_candidate = [&](double gamma) {
    GammaCandidate cand;
    cand.gamma = gamma;
    try {
      ForecasterModel model = build(gamma);
      ForecastRun run =
          train_forecaster(model, train_ws, val_ws, ForecastMode::ga, &surrogate, cfg.train);
      const ValMetrics m = eval_forecast_metrics(model, val_ws, surrogate, voltage_scaler);
      cand.val_voltage_rmse = m.voltage_rmse_pu;
      cand.val_weather_rmse = m.weather_rmse_norm;
      cand.delta_voltage_pct =
          100.0 * (m.voltage_rmse_pu - base.voltage_rmse_pu) / base.voltage_rmse_pu;
      cand.delta_weather_pct =
          100.0 * (m.weather_rmse_norm - base.weather_rmse_norm) / base.weather_rmse_norm;
      const bool qualifies = cand.delta_weather_pct <= cfg.weather_cap_pct;
      const bool better = qualifies && (!have_best || cand.delta_voltage_pct < best_dv ||
                                        (cand.delta_voltage_pct == best_dv && gamma < best_gamma));
      if (better) {
        have_best = true;
        best_gamma = gamma;
        best_dv = cand.delta_voltage_pct;
        sel.best_model = model;
        sel.best_run = run;
      }
    } catch (const std::exception&) {
      cand.failed = true;
    }
    sel.candidates.push_back(cand);
  };

  for (double g : log_spaced(cfg.lo, cfg.hi, cfg.coarse)) run_candidate(g);

  if (have_best && cfg.refine > 0) {
    const auto coarse = log_spaced(cfg.lo, cfg.hi, cfg.coarse);
    double lo = cfg.lo, hi = cfg.hi;
    for (std::size_t i = 0; i < coarse.size(); ++i) {
      if (coarse[i] == best_gamma) {
        if (i > 0) lo = coarse[i - 1];
        if (i + 1 < coarse.size()) hi = coarse[i + 1];
        break;
      }
    }
    const auto fine = log_spaced(lo, hi, cfg.refine + 2);
    for (std::size_t i = 1; i + 1 < fine.size(); ++i) run_candidate(fine[i]);
  }

  if (!have_best) {
    sel.gamma = 0.0;
    sel.fell_back_to_gu = true;
    sel.best_model = gu_model;
    sel.best_run = gu_run;
  } else {
    sel.gamma = best_gamma;
  }
  return sel;
}

}  // namespace w2vlab::forecast
