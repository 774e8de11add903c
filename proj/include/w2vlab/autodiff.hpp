#pragma once

// Reverse-mode automatic differentiation over dense row-major double tensors.
// A Tape owns the nodes of one forward pass; backward() walks them in reverse
// creation order, which is a valid topological order because an op may only
// reference earlier nodes. Reduction order is fixed, so gradients are
// bit-reproducible run to run.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "w2vlab/rng.hpp"

namespace w2vlab::ad {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

using Dims = std::vector<long>;

inline long numel(const Dims& d) {
  long n = 1;
  for (long e : d) n *= e;
  return n;
}

inline std::string dims_str(const Dims& d) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < d.size(); ++i) os << (i ? "x" : "") << d[i];
  os << "]";
  return os.str();
}

class ShapeError : public std::invalid_argument {
 public:
  ShapeError(const std::string& op, const Dims& a, const Dims& b)
      : std::invalid_argument(op + ": incompatible shapes " + dims_str(a) +
                              " vs " + dims_str(b)) {}
  ShapeError(const std::string& op, const std::string& msg)
      : std::invalid_argument(op + ": " + msg) {}
};

class TapeError : public std::logic_error {
 public:
  explicit TapeError(const std::string& msg) : std::logic_error(msg) {}
};

enum class Activation { identity, relu, sigmoid, tanh };

inline const char* activation_name(Activation a) {
  switch (a) {
    case Activation::identity: return "identity";
    case Activation::relu: return "relu";
    case Activation::sigmoid: return "sigmoid";
    case Activation::tanh: return "tanh";
  }
  return "?";
}

inline Activation activation_from_name(const std::string& s) {
  if (s == "identity") return Activation::identity;
  if (s == "relu") return Activation::relu;
  if (s == "sigmoid") return Activation::sigmoid;
  if (s == "tanh") return Activation::tanh;
  throw std::invalid_argument("unknown activation: " + s);
}

// A trainable array. Lives outside any tape; a forward pass binds it as a
// leaf node, and backward accumulates into `grad`.
struct Parameter {
  std::string name;
  Dims dims;
  std::vector<double> value;
  std::vector<double> grad;

  Parameter() = default;
  Parameter(std::string n, Dims d)
      : name(std::move(n)), dims(std::move(d)) {
    value.assign(static_cast<std::size_t>(numel(dims)), 0.0);
    grad.assign(value.size(), 0.0);
  }

  long size() const { return static_cast<long>(value.size()); }
  long rows() const { return dims.empty() ? 1 : dims[0]; }
  long cols() const { return rows() == 0 ? 0 : size() / rows(); }
  void zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }

  MatMap mat() { return MatMap(value.data(), rows(), cols()); }
  ConstMatMap mat() const { return ConstMatMap(value.data(), rows(), cols()); }
};

class Tape;

struct Tensor {
  Tape* tape = nullptr;
  int id = -1;

  bool valid() const { return tape != nullptr && id >= 0; }
  const Dims& dims() const;
  long rows() const { return dims().empty() ? 1 : dims()[0]; }
  long cols() const;
  long size() const { return numel(dims()); }
  const std::vector<double>& value() const;
  const std::vector<double>& grad() const;
  double scalar() const;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  std::size_t size() const { return nodes_.size(); }

  void reset() {
    nodes_.clear();
    backward_done_ = false;
  }

  // ---- leaves ----

  Tensor constant(Dims dims, std::span<const double> vals) {
    return make_leaf(std::move(dims), vals, false, nullptr);
  }

  Tensor constant(const RowMat& m) {
    return make_leaf({m.rows(), m.cols()},
                     std::span<const double>(m.data(), static_cast<std::size_t>(m.size())),
                     false, nullptr);
  }

  // input leaf whose gradient is retained (queried via Tensor::grad())
  Tensor input(Dims dims, std::span<const double> vals) {
    return make_leaf(std::move(dims), vals, true, nullptr);
  }

  Tensor input(const RowMat& m) {
    return make_leaf({m.rows(), m.cols()},
                     std::span<const double>(m.data(), static_cast<std::size_t>(m.size())),
                     true, nullptr);
  }

  // Binds a parameter. frozen=true treats it as a constant: gradients flow
  // through ops that consume it, but nothing accumulates into p.grad.
  Tensor param(Parameter& p, bool frozen = false) {
    Tensor t = make_leaf(p.dims,
                         std::span<const double>(p.value.data(), p.value.size()),
                         !frozen, frozen ? nullptr : &p);
    return t;
  }

  // ---- ops ----

  Tensor matmul(Tensor a, Tensor b) {
    require_rank2("matmul", a);
    require_rank2("matmul", b);
    if (a.cols() != b.rows()) throw ShapeError("matmul", node(a).dims, node(b).dims);
    const long m = a.rows(), k = a.cols(), n = b.cols();
    Tensor out = fresh({m, n}, {a.id, b.id});
    map(out) = cmap(a) * cmap(b);
    set_back(out, [this, a, b, out]() {
      if (wants(a)) gmap(a).noalias() += gcmap(out) * cmap(b).transpose();
      if (wants(b)) gmap(b).noalias() += cmap(a).transpose() * gcmap(out);
    });
    return out;
  }

  // y = x * W^T .rowwise() + b    with x [n x in], w [out x in], b [out]
  Tensor linear(Tensor x, Tensor w, Tensor b) {
    require_rank2("linear", x);
    require_rank2("linear", w);
    if (x.cols() != w.cols()) throw ShapeError("linear", node(x).dims, node(w).dims);
    if (b.size() != w.rows()) throw ShapeError("linear", node(w).dims, node(b).dims);
    const long n = x.rows(), out_w = w.rows();
    Tensor out = fresh({n, out_w}, {x.id, w.id, b.id});
    ConstMatMap bv(node(b).val.data(), 1, out_w);
    map(out).noalias() = cmap(x) * cmap(w).transpose();
    map(out).rowwise() += bv.row(0);
    set_back(out, [this, x, w, b, out]() {
      if (wants(x)) gmap(x).noalias() += gcmap(out) * cmap(w);
      if (wants(w)) gmap(w).noalias() += gcmap(out).transpose() * cmap(x);
      if (wants(b)) {
        MatMap gb(node(b).grad.data(), 1, b.size());
        gb.row(0) += gcmap(out).colwise().sum();
      }
    });
    return out;
  }

  Tensor add(Tensor a, Tensor b) { return binary_ew("add", a, b, 1.0); }
  Tensor sub(Tensor a, Tensor b) { return binary_ew("sub", a, b, -1.0); }

  // a + beta * b
  Tensor add_scaled(Tensor a, Tensor b, double beta) {
    return binary_ew("add_scaled", a, b, beta);
  }

  Tensor hadamard(Tensor a, Tensor b) {
    require_same("hadamard", a, b);
    Tensor out = fresh(node(a).dims, {a.id, b.id});
    map(out) = cmap(a).cwiseProduct(cmap(b));
    set_back(out, [this, a, b, out]() {
      if (wants(a)) gmap(a) += gcmap(out).cwiseProduct(cmap(b));
      if (wants(b)) gmap(b) += gcmap(out).cwiseProduct(cmap(a));
    });
    return out;
  }

  Tensor scale(Tensor a, double c) {
    Tensor out = fresh(node(a).dims, {a.id});
    map(out) = cmap(a) * c;
    set_back(out, [this, a, out, c]() {
      if (wants(a)) gmap(a) += gcmap(out) * c;
    });
    return out;
  }

  // broadcast add of a row vector across all rows
  Tensor add_row(Tensor a, Tensor row) {
    require_rank2("add_row", a);
    if (row.size() != a.cols()) throw ShapeError("add_row", node(a).dims, node(row).dims);
    Tensor out = fresh(node(a).dims, {a.id, row.id});
    ConstMatMap rv(node(row).val.data(), 1, row.size());
    map(out) = cmap(a);
    map(out).rowwise() += rv.row(0);
    set_back(out, [this, a, row, out]() {
      if (wants(a)) gmap(a) += gcmap(out);
      if (wants(row)) {
        MatMap gr(node(row).grad.data(), 1, row.size());
        gr.row(0) += gcmap(out).colwise().sum();
      }
    });
    return out;
  }

  Tensor activation(Tensor a, Activation kind) {
    Tensor out = fresh(node(a).dims, {a.id});
    const auto& x = node(a).val;
    auto& y = node(out).val;
    switch (kind) {
      case Activation::identity:
        y = x;
        break;
      case Activation::relu:
        for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
        break;
      case Activation::sigmoid:
        for (std::size_t i = 0; i < x.size(); ++i) y[i] = 1.0 / (1.0 + std::exp(-x[i]));
        break;
      case Activation::tanh:
        for (std::size_t i = 0; i < x.size(); ++i) y[i] = std::tanh(x[i]);
        break;
    }
    set_back(out, [this, a, out, kind]() {
      if (!wants(a)) return;
      const auto& xi = node(a).val;
      const auto& yo = node(out).val;
      const auto& go = node(out).grad;
      auto& ga = node(a).grad;
      switch (kind) {
        case Activation::identity:
          for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += go[i];
          break;
        case Activation::relu:
          for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += xi[i] > 0.0 ? go[i] : 0.0;
          break;
        case Activation::sigmoid:
          for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += go[i] * yo[i] * (1.0 - yo[i]);
          break;
        case Activation::tanh:
          for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += go[i] * (1.0 - yo[i] * yo[i]);
          break;
      }
    });
    return out;
  }

  // mean of squared differences over all elements
  Tensor mse(Tensor pred, Tensor target) {
    require_same("mse", pred, target);
    const double inv_n = 1.0 / static_cast<double>(pred.size());
    Tensor out = fresh({1}, {pred.id, target.id});
    double acc = 0.0;
    const auto& p = node(pred).val;
    const auto& t = node(target).val;
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double d = p[i] - t[i];
      acc += d * d;
    }
    node(out).val[0] = acc * inv_n;
    set_back(out, [this, pred, target, out, inv_n]() {
      const double g = node(out).grad[0] * 2.0 * inv_n;
      const auto& p = node(pred).val;
      const auto& t = node(target).val;
      if (wants(pred)) {
        auto& gp = node(pred).grad;
        for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += g * (p[i] - t[i]);
      }
      if (wants(target)) {
        auto& gt = node(target).grad;
        for (std::size_t i = 0; i < gt.size(); ++i) gt[i] -= g * (p[i] - t[i]);
      }
    });
    return out;
  }

  Tensor sum_all(Tensor a) {
    Tensor out = fresh({1}, {a.id});
    const auto& x = node(a).val;
    double acc = 0.0;
    for (double v : x) acc += v;
    node(out).val[0] = acc;
    set_back(out, [this, a, out]() {
      if (!wants(a)) return;
      const double g = node(out).grad[0];
      for (auto& v : node(a).grad) v += g;
    });
    return out;
  }

  Tensor mean_all(Tensor a) { return scale(sum_all(a), 1.0 / static_cast<double>(a.size())); }

  Tensor reshape(Tensor a, Dims dims) {
    if (numel(dims) != a.size())
      throw ShapeError("reshape", node(a).dims, dims);
    Tensor out = fresh(std::move(dims), {a.id});
    node(out).val = node(a).val;
    set_back(out, [this, a, out]() {
      if (!wants(a)) return;
      const auto& go = node(out).grad;
      auto& ga = node(a).grad;
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += go[i];
    });
    return out;
  }

  Tensor transpose(Tensor a) {
    require_rank2("transpose", a);
    Tensor out = fresh({a.cols(), a.rows()}, {a.id});
    map(out) = cmap(a).transpose();
    set_back(out, [this, a, out]() {
      if (wants(a)) gmap(a) += gcmap(out).transpose();
    });
    return out;
  }

  Tensor slice_cols(Tensor a, long c0, long c1) {
    require_rank2("slice_cols", a);
    if (c0 < 0 || c1 > a.cols() || c0 >= c1)
      throw ShapeError("slice_cols", "bad column range [" + std::to_string(c0) + "," +
                                         std::to_string(c1) + ") for " + dims_str(node(a).dims));
    Tensor out = fresh({a.rows(), c1 - c0}, {a.id});
    map(out) = cmap(a).middleCols(c0, c1 - c0);
    set_back(out, [this, a, out, c0, c1]() {
      if (wants(a)) gmap(a).middleCols(c0, c1 - c0) += gcmap(out);
    });
    return out;
  }

  Tensor concat_cols(std::span<const Tensor> parts) {
    if (parts.empty()) throw ShapeError("concat_cols", "no tensors to concatenate");
    const long rows = parts[0].rows();
    long total = 0;
    std::vector<int> ids;
    for (const Tensor& p : parts) {
      require_rank2("concat_cols", p);
      if (p.rows() != rows) throw ShapeError("concat_cols", node(parts[0]).dims, node(p).dims);
      total += p.cols();
      ids.push_back(p.id);
    }
    Tensor out = fresh({rows, total}, ids);
    long off = 0;
    for (const Tensor& p : parts) {
      map(out).middleCols(off, p.cols()) = cmap(p);
      off += p.cols();
    }
    std::vector<Tensor> held(parts.begin(), parts.end());
    set_back(out, [this, held = std::move(held), out]() {
      long off2 = 0;
      for (const Tensor& p : held) {
        if (wants(p)) gmap(p) += gcmap(out).middleCols(off2, p.cols());
        off2 += p.cols();
      }
    });
    return out;
  }

  // batched matmul on rank-3 operands: [B,m,k] x [B,k,n] -> [B,m,n]
  Tensor bmm(Tensor a, Tensor b) {
    const Dims& da = node(a).dims;
    const Dims& db = node(b).dims;
    if (da.size() != 3 || db.size() != 3 || da[0] != db[0] || da[2] != db[1])
      throw ShapeError("bmm", da, db);
    const long batch = da[0], m = da[1], k = da[2], n = db[2];
    Tensor out = fresh({batch, m, n}, {a.id, b.id});
    for (long i = 0; i < batch; ++i) {
      ConstMatMap ma(node(a).val.data() + i * m * k, m, k);
      ConstMatMap mb(node(b).val.data() + i * k * n, k, n);
      MatMap mo(node(out).val.data() + i * m * n, m, n);
      mo.noalias() = ma * mb;
    }
    set_back(out, [this, a, b, out, batch, m, k, n]() {
      for (long i = 0; i < batch; ++i) {
        ConstMatMap ma(node(a).val.data() + i * m * k, m, k);
        ConstMatMap mb(node(b).val.data() + i * k * n, k, n);
        ConstMatMap go(node(out).grad.data() + i * m * n, m, n);
        if (wants(a)) {
          MatMap ga(node(a).grad.data() + i * m * k, m, k);
          ga.noalias() += go * mb.transpose();
        }
        if (wants(b)) {
          MatMap gb(node(b).grad.data() + i * k * n, k, n);
          gb.noalias() += ma.transpose() * go;
        }
      }
    });
    return out;
  }

  // batched a * b^T on rank-3 operands: [B,m,d] x [B,n,d] -> [B,m,n]
  Tensor bmm_t(Tensor a, Tensor b) {
    const Dims& da = node(a).dims;
    const Dims& db = node(b).dims;
    if (da.size() != 3 || db.size() != 3 || da[0] != db[0] || da[2] != db[2])
      throw ShapeError("bmm_t", da, db);
    const long batch = da[0], m = da[1], d = da[2], n = db[1];
    Tensor out = fresh({batch, m, n}, {a.id, b.id});
    for (long i = 0; i < batch; ++i) {
      ConstMatMap ma(node(a).val.data() + i * m * d, m, d);
      ConstMatMap mb(node(b).val.data() + i * n * d, n, d);
      MatMap mo(node(out).val.data() + i * m * n, m, n);
      mo.noalias() = ma * mb.transpose();
    }
    set_back(out, [this, a, b, out, batch, m, d, n]() {
      for (long i = 0; i < batch; ++i) {
        ConstMatMap ma(node(a).val.data() + i * m * d, m, d);
        ConstMatMap mb(node(b).val.data() + i * n * d, n, d);
        ConstMatMap go(node(out).grad.data() + i * m * n, m, n);
        if (wants(a)) {
          MatMap ga(node(a).grad.data() + i * m * d, m, d);
          ga.noalias() += go * mb;
        }
        if (wants(b)) {
          MatMap gb(node(b).grad.data() + i * n * d, n, d);
          gb.noalias() += go.transpose() * ma;
        }
      }
    });
    return out;
  }

  // [batch*seq, heads*dh] -> [batch*heads, seq, dh]
  Tensor split_heads(Tensor x, long batch, long seq, long heads) {
    if (node(x).dims.size() != 2 || x.rows() != batch * seq || x.cols() % heads != 0)
      throw ShapeError("split_heads", "input " + dims_str(node(x).dims) +
                                          " does not factor as batch*seq x heads*dh");
    const long dh = x.cols() / heads;
    Tensor out = fresh({batch * heads, seq, dh}, {x.id});
    const auto& xv = node(x).val;
    auto& yv = node(out).val;
    for (long b = 0; b < batch; ++b)
      for (long t = 0; t < seq; ++t)
        for (long h = 0; h < heads; ++h)
          for (long c = 0; c < dh; ++c)
            yv[static_cast<std::size_t>(((b * heads + h) * seq + t) * dh + c)] =
                xv[static_cast<std::size_t>((b * seq + t) * heads * dh + h * dh + c)];
    set_back(out, [this, x, out, batch, seq, heads, dh]() {
      if (!wants(x)) return;
      const auto& go = node(out).grad;
      auto& gx = node(x).grad;
      for (long b = 0; b < batch; ++b)
        for (long t = 0; t < seq; ++t)
          for (long h = 0; h < heads; ++h)
            for (long c = 0; c < dh; ++c)
              gx[static_cast<std::size_t>((b * seq + t) * heads * dh + h * dh + c)] +=
                  go[static_cast<std::size_t>(((b * heads + h) * seq + t) * dh + c)];
    });
    return out;
  }

  // inverse of split_heads: [batch*heads, seq, dh] -> [batch*seq, heads*dh]
  Tensor merge_heads(Tensor x, long batch, long seq, long heads) {
    const Dims& d = node(x).dims;
    if (d.size() != 3 || d[0] != batch * heads || d[1] != seq)
      throw ShapeError("merge_heads", "input " + dims_str(d) + " does not match geometry");
    const long dh = d[2];
    Tensor out = fresh({batch * seq, heads * dh}, {x.id});
    const auto& xv = node(x).val;
    auto& yv = node(out).val;
    for (long b = 0; b < batch; ++b)
      for (long t = 0; t < seq; ++t)
        for (long h = 0; h < heads; ++h)
          for (long c = 0; c < dh; ++c)
            yv[static_cast<std::size_t>((b * seq + t) * heads * dh + h * dh + c)] =
                xv[static_cast<std::size_t>(((b * heads + h) * seq + t) * dh + c)];
    set_back(out, [this, x, out, batch, seq, heads, dh]() {
      if (!wants(x)) return;
      const auto& go = node(out).grad;
      auto& gx = node(x).grad;
      for (long b = 0; b < batch; ++b)
        for (long t = 0; t < seq; ++t)
          for (long h = 0; h < heads; ++h)
            for (long c = 0; c < dh; ++c)
              gx[static_cast<std::size_t>(((b * heads + h) * seq + t) * dh + c)] +=
                  go[static_cast<std::size_t>((b * seq + t) * heads * dh + h * dh + c)];
    });
    return out;
  }

  // softmax over the last dimension, applied row-wise on the 2-D view
  Tensor softmax_rows(Tensor a) {
    const long last = node(a).dims.back();
    const long rows = a.size() / last;
    Tensor out = fresh(node(a).dims, {a.id});
    const auto& x = node(a).val;
    auto& y = node(out).val;
    for (long r = 0; r < rows; ++r) {
      const double* xr = x.data() + r * last;
      double* yr = y.data() + r * last;
      double mx = xr[0];
      for (long j = 1; j < last; ++j) mx = std::max(mx, xr[j]);
      double s = 0.0;
      for (long j = 0; j < last; ++j) {
        yr[j] = std::exp(xr[j] - mx);
        s += yr[j];
      }
      const double inv = 1.0 / s;
      for (long j = 0; j < last; ++j) yr[j] *= inv;
    }
    set_back(out, [this, a, out, rows, last]() {
      if (!wants(a)) return;
      const auto& y = node(out).val;
      const auto& go = node(out).grad;
      auto& ga = node(a).grad;
      for (long r = 0; r < rows; ++r) {
        const double* yr = y.data() + r * last;
        const double* gr = go.data() + r * last;
        double dot = 0.0;
        for (long j = 0; j < last; ++j) dot += yr[j] * gr[j];
        double* gar = ga.data() + r * last;
        for (long j = 0; j < last; ++j) gar[j] += yr[j] * (gr[j] - dot);
      }
    });
    return out;
  }

  // per-row layer norm with learned gain/bias over the last dimension
  Tensor layer_norm(Tensor a, Tensor gain, Tensor bias, double eps = 1e-5) {
    const long last = node(a).dims.back();
    if (gain.size() != last || bias.size() != last)
      throw ShapeError("layer_norm", node(a).dims, node(gain).dims);
    const long rows = a.size() / last;
    Tensor out = fresh(node(a).dims, {a.id, gain.id, bias.id});
    std::vector<double> inv_std(static_cast<std::size_t>(rows));
    std::vector<double> xhat(node(a).val.size());
    const auto& x = node(a).val;
    const auto& g = node(gain).val;
    const auto& b = node(bias).val;
    auto& y = node(out).val;
    for (long r = 0; r < rows; ++r) {
      const double* xr = x.data() + r * last;
      double mu = 0.0;
      for (long j = 0; j < last; ++j) mu += xr[j];
      mu /= static_cast<double>(last);
      double var = 0.0;
      for (long j = 0; j < last; ++j) {
        const double d = xr[j] - mu;
        var += d * d;
      }
      var /= static_cast<double>(last);
      const double is = 1.0 / std::sqrt(var + eps);
      inv_std[static_cast<std::size_t>(r)] = is;
      for (long j = 0; j < last; ++j) {
        const double xh = (xr[j] - mu) * is;
        xhat[static_cast<std::size_t>(r * last + j)] = xh;
        y[static_cast<std::size_t>(r * last + j)] = xh * g[static_cast<std::size_t>(j)] +
                                                    b[static_cast<std::size_t>(j)];
      }
    }
    set_back(out, [this, a, gain, bias, out, rows, last, inv_std = std::move(inv_std),
                   xhat = std::move(xhat)]() {
      const auto& go = node(out).grad;
      const auto& g = node(gain).val;
      for (long r = 0; r < rows; ++r) {
        const double* gor = go.data() + r * last;
        const double* xhr = xhat.data() + r * last;
        const double is = inv_std[static_cast<std::size_t>(r)];
        if (wants(gain)) {
          auto& gg = node(gain).grad;
          for (long j = 0; j < last; ++j) gg[static_cast<std::size_t>(j)] += gor[j] * xhr[j];
        }
        if (wants(bias)) {
          auto& gb = node(bias).grad;
          for (long j = 0; j < last; ++j) gb[static_cast<std::size_t>(j)] += gor[j];
        }
        if (wants(a)) {
          double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
          for (long j = 0; j < last; ++j) {
            const double dxh = gor[j] * g[static_cast<std::size_t>(j)];
            sum_dxhat += dxh;
            sum_dxhat_xhat += dxh * xhr[j];
          }
          auto& ga = node(a).grad;
          const double inv_n = 1.0 / static_cast<double>(last);
          for (long j = 0; j < last; ++j) {
            const double dxh = gor[j] * g[static_cast<std::size_t>(j)];
            ga[static_cast<std::size_t>(r * last + j)] +=
                is * (dxh - inv_n * sum_dxhat - xhr[j] * inv_n * sum_dxhat_xhat);
          }
        }
      }
    });
    return out;
  }

  // inverted dropout; identity when rate == 0
  Tensor dropout(Tensor a, double rate, Rng& rng) {
    if (rate <= 0.0) return a;
    if (rate >= 1.0) throw ShapeError("dropout", "rate must be < 1");
    const double keep = 1.0 - rate;
    std::vector<double> mask(node(a).val.size());
    for (auto& m : mask) m = rng.uniform() < keep ? 1.0 / keep : 0.0;
    Tensor out = fresh(node(a).dims, {a.id});
    const auto& x = node(a).val;
    auto& y = node(out).val;
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] * mask[i];
    set_back(out, [this, a, out, mask = std::move(mask)]() {
      if (!wants(a)) return;
      const auto& go = node(out).grad;
      auto& ga = node(a).grad;
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += go[i] * mask[i];
    });
    return out;
  }

  // ---- backward ----

  void backward(Tensor root) {
    if (backward_done_)
      throw TapeError("backward already ran on this tape; reset() before reuse");
    if (root.size() != 1)
      throw TapeError("backward root must be a scalar, got " + dims_str(node(root).dims));
    backward_done_ = true;
    node(root).grad.assign(1, 1.0);
    for (int i = root.id; i >= 0; --i) {
      Node& nd = nodes_[static_cast<std::size_t>(i)];
      if (nd.grad.empty()) continue;
      if (nd.back) nd.back();
      if (nd.bound != nullptr) {
        auto& pg = nd.bound->grad;
        for (std::size_t j = 0; j < pg.size(); ++j) pg[j] += nd.grad[j];
      }
    }
  }

  bool backward_done() const { return backward_done_; }

  // ---- node access ----

  struct Node {
    Dims dims;
    std::vector<double> val;
    std::vector<double> grad;
    bool needs_grad = false;
    Parameter* bound = nullptr;
    std::function<void()> back;
  };

  Node& node(Tensor t) { return nodes_.at(static_cast<std::size_t>(t.id)); }
  const Node& node(Tensor t) const { return nodes_.at(static_cast<std::size_t>(t.id)); }

 private:
  Tensor make_leaf(Dims dims, std::span<const double> vals, bool needs_grad, Parameter* bound) {
    if (static_cast<long>(vals.size()) != numel(dims))
      throw ShapeError("leaf", "value count " + std::to_string(vals.size()) +
                                   " does not match " + dims_str(dims));
    Node nd;
    nd.dims = std::move(dims);
    nd.val.assign(vals.begin(), vals.end());
    nd.needs_grad = needs_grad;
    nd.bound = bound;
    nodes_.push_back(std::move(nd));
    return Tensor{this, static_cast<int>(nodes_.size() - 1)};
  }

  Tensor fresh(Dims dims, std::initializer_list<int> parents) {
    return fresh(std::move(dims), std::vector<int>(parents));
  }

  Tensor fresh(Dims dims, const std::vector<int>& parents) {
    Node nd;
    nd.dims = std::move(dims);
    nd.val.assign(static_cast<std::size_t>(numel(nd.dims)), 0.0);
    for (int p : parents)
      nd.needs_grad |= nodes_[static_cast<std::size_t>(p)].needs_grad;
    nodes_.push_back(std::move(nd));
    return Tensor{this, static_cast<int>(nodes_.size() - 1)};
  }

  // grad is pulled lazily: a node only participates if some consumer pushed
  // gradient into it, and only needs a buffer if it tracks grads at all.
  bool wants(Tensor t) {
    Node& nd = node(t);
    if (!nd.needs_grad) return false;
    if (nd.grad.empty()) nd.grad.assign(nd.val.size(), 0.0);
    return true;
  }

  void set_back(Tensor t, std::function<void()> fn) {
    if (node(t).needs_grad) node(t).back = std::move(fn);
  }

  Tensor binary_ew(const char* name, Tensor a, Tensor b, double beta) {
    require_same(name, a, b);
    Tensor out = fresh(node(a).dims, {a.id, b.id});
    const auto& xa = node(a).val;
    const auto& xb = node(b).val;
    auto& y = node(out).val;
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = xa[i] + beta * xb[i];
    set_back(out, [this, a, b, out, beta]() {
      const auto& go = node(out).grad;
      if (wants(a)) {
        auto& ga = node(a).grad;
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += go[i];
      }
      if (wants(b)) {
        auto& gb = node(b).grad;
        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += beta * go[i];
      }
    });
    return out;
  }

  void require_rank2(const char* op, Tensor t) const {
    if (node(t).dims.size() != 2)
      throw ShapeError(op, "expected rank-2 tensor, got " + dims_str(node(t).dims));
  }

  void require_same(const char* op, Tensor a, Tensor b) const {
    if (node(a).dims != node(b).dims) throw ShapeError(op, node(a).dims, node(b).dims);
  }

  MatMap map(Tensor t) { return MatMap(node(t).val.data(), t.rows(), t.cols()); }
  ConstMatMap cmap(Tensor t) { return ConstMatMap(node(t).val.data(), t.rows(), t.cols()); }
  MatMap gmap(Tensor t) { return MatMap(node(t).grad.data(), t.rows(), t.cols()); }
  ConstMatMap gcmap(Tensor t) { return ConstMatMap(node(t).grad.data(), t.rows(), t.cols()); }

  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

inline const Dims& Tensor::dims() const { return tape->node(*this).dims; }
inline long Tensor::cols() const {
  const long r = rows();
  return r == 0 ? 0 : numel(dims()) / r;
}
inline const std::vector<double>& Tensor::value() const { return tape->node(*this).val; }
inline const std::vector<double>& Tensor::grad() const {
  const auto& g = tape->node(*this).grad;
  static const std::vector<double> empty;
  return g.empty() ? empty : g;
}
inline double Tensor::scalar() const {
  if (size() != 1) throw TapeError("scalar() on non-scalar tensor");
  return value()[0];
}

// uniform fan-in initialization, the default for non-warm-started layers
inline void init_fan_in(Parameter& p, long fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(std::max<long>(fan_in, 1)));
  for (auto& v : p.value) v = rng.uniform(-bound, bound);
}

}  // namespace w2vlab::ad
