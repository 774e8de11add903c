#pragma once

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "w2vlab/autodiff.hpp"
#include "w2vlab/checkpoint.hpp"

namespace w2vlab::pca {

class PcaError : public std::runtime_error {
 public:
  explicit PcaError(const std::string& msg) : std::runtime_error(msg) {}
};

struct FeatureBlock {
  std::string name;
  long col0 = 0;          // first column in the W-wide input
  long width = 0;         // columns in this feature block
  long n_components = 0;  // selected K_f (initially = width)
  Eigen::MatrixXd basis;  // [width x width], eigenvectors as columns, descending
  Eigen::VectorXd mean;   // [width]
  Eigen::VectorXd eigenvalues;        // descending, all of them
  Eigen::VectorXd explained_fraction; // eigenvalue / sum
};

// Per-feature principal components. The assembled projection is block
// diagonal: each feature is compressed independently of the others.
struct PcaModel {
  std::vector<FeatureBlock> blocks;

  long input_width() const {
    long w = 0;
    for (const auto& b : blocks) w += b.width;
    return w;
  }
  long latent_width() const {
    long k = 0;
    for (const auto& b : blocks) k += b.n_components;
    return k;
  }

  // assembled mean vector, length W
  Eigen::VectorXd mean() const {
    Eigen::VectorXd mu(input_width());
    for (const auto& b : blocks) mu.segment(b.col0, b.width) = b.mean;
    return mu;
  }

  // assembled [W x K] block-diagonal projection matrix
  Eigen::MatrixXd projection() const {
    Eigen::MatrixXd p = Eigen::MatrixXd::Zero(input_width(), latent_width());
    long k0 = 0;
    for (const auto& b : blocks) {
      p.block(b.col0, k0, b.width, b.n_components) = b.basis.leftCols(b.n_components);
      k0 += b.n_components;
    }
    return p;
  }

  // z = P^T w - P^T mu
  Eigen::VectorXd project(const Eigen::VectorXd& w) const {
    if (w.size() != input_width())
      throw PcaError("project: expected " + std::to_string(input_width()) +
                     " dims, got " + std::to_string(w.size()));
    Eigen::VectorXd z(latent_width());
    long k0 = 0;
    for (const auto& b : blocks) {
      z.segment(k0, b.n_components) = b.basis.leftCols(b.n_components).transpose() *
                                      (w.segment(b.col0, b.width) - b.mean);
      k0 += b.n_components;
    }
    return z;
  }

  Eigen::VectorXd reconstruct(const Eigen::VectorXd& z) const {
    if (z.size() != latent_width())
      throw PcaError("reconstruct: expected " + std::to_string(latent_width()) +
                     " dims, got " + std::to_string(z.size()));
    Eigen::VectorXd w(input_width());
    long k0 = 0;
    for (const auto& b : blocks) {
      w.segment(b.col0, b.width) =
          b.basis.leftCols(b.n_components) * z.segment(k0, b.n_components) + b.mean;
      k0 += b.n_components;
    }
    return w;
  }

  ad::RowMat project_rows(const ad::RowMat& data) const {
    ad::RowMat out(data.rows(), latent_width());
    for (Eigen::Index r = 0; r < data.rows(); ++r)
      out.row(r) = project(data.row(r).transpose()).transpose();
    return out;
  }

  ad::RowMat reconstruct_rows(const ad::RowMat& z) const {
    ad::RowMat out(z.rows(), input_width());
    for (Eigen::Index r = 0; r < z.rows(); ++r)
      out.row(r) = reconstruct(z.row(r).transpose()).transpose();
    return out;
  }

  void store(ArrayStore& st, const std::string& prefix = "pca") const {
    st.put_scalar(prefix + ".n_blocks", static_cast<double>(blocks.size()));
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      const auto& b = blocks[i];
      const std::string key = prefix + ".block" + std::to_string(i);
      st.put(key + ".meta", {4},
             {static_cast<double>(b.col0), static_cast<double>(b.width),
              static_cast<double>(b.n_components), 0.0});
      st.put(key + ".basis", {b.width, b.width},
             std::vector<double>(b.basis.data(), b.basis.data() + b.basis.size()));
      st.put(key + ".mean", {b.width},
             std::vector<double>(b.mean.data(), b.mean.data() + b.mean.size()));
      st.put(key + ".eigenvalues", {b.width},
             std::vector<double>(b.eigenvalues.data(),
                                 b.eigenvalues.data() + b.eigenvalues.size()));
    }
  }

  static PcaModel restore(const ArrayStore& st, const std::string& prefix = "pca") {
    PcaModel model;
    const auto n = static_cast<std::size_t>(st.get_scalar(prefix + ".n_blocks"));
    for (std::size_t i = 0; i < n; ++i) {
      const std::string key = prefix + ".block" + std::to_string(i);
      const auto& meta = st.get(key + ".meta").data;
      FeatureBlock b;
      b.name = "block" + std::to_string(i);
      b.col0 = static_cast<long>(meta[0]);
      b.width = static_cast<long>(meta[1]);
      b.n_components = static_cast<long>(meta[2]);
      const auto& basis = st.get(key + ".basis").data;
      b.basis = Eigen::Map<const Eigen::MatrixXd>(basis.data(), b.width, b.width);
      const auto& mean = st.get(key + ".mean").data;
      b.mean = Eigen::Map<const Eigen::VectorXd>(mean.data(), b.width);
      const auto& ev = st.get(key + ".eigenvalues").data;
      b.eigenvalues = Eigen::Map<const Eigen::VectorXd>(ev.data(), b.width);
      const double total = b.eigenvalues.sum();
      b.explained_fraction = total > 0.0 ? (b.eigenvalues / total).eval()
                                         : Eigen::VectorXd::Zero(b.width).eval();
      model.blocks.push_back(std::move(b));
    }
    return model;
  }
};

struct BlockSpec {
  std::string name;
  long col0 = 0;
  long width = 0;
};

// Covariance eigendecomposition per feature block (1/n normalization, so the
// discarded-eigenvalue reconstruction identity is exact). Eigenvector signs
// are fixed by making the largest-magnitude entry positive.
inline PcaModel fit_pca(const ad::RowMat& train, const std::vector<BlockSpec>& specs) {
  PcaModel model;
  long covered = 0;
  for (const BlockSpec& spec : specs) {
    if (spec.col0 != covered)
      throw PcaError("feature blocks must partition the columns in order");
    covered += spec.width;
    if (spec.col0 + spec.width > train.cols())
      throw PcaError("block '" + spec.name + "' exceeds data width");

    const long p = spec.width;
    const auto n = train.rows();
    Eigen::MatrixXd x = train.middleCols(spec.col0, p);
    Eigen::VectorXd mu = x.colwise().mean();
    x.rowwise() -= mu.transpose();
    Eigen::MatrixXd cov = (x.transpose() * x) / static_cast<double>(n);

    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
    if (eig.info() != Eigen::Success)
      throw PcaError("eigendecomposition failed for feature '" + spec.name + "'");

    FeatureBlock blk;
    blk.name = spec.name;
    blk.col0 = spec.col0;
    blk.width = p;
    blk.n_components = p;
    blk.basis.resize(p, p);
    blk.eigenvalues.resize(p);
    blk.mean = mu;
    for (long j = 0; j < p; ++j) {  // ascending -> descending
      blk.eigenvalues(j) = std::max(0.0, eig.eigenvalues()(p - 1 - j));
      blk.basis.col(j) = eig.eigenvectors().col(p - 1 - j);
      long arg = 0;
      double mx = 0.0;
      for (long i = 0; i < p; ++i) {
        const double a = std::abs(blk.basis(i, j));
        if (a > mx) {
          mx = a;
          arg = i;
        }
      }
      if (blk.basis(arg, j) < 0.0) blk.basis.col(j) = -blk.basis.col(j);
    }
    const double total = blk.eigenvalues.sum();
    if (!(total > 0.0))
      throw PcaError("feature '" + spec.name + "' is constant; PCA is degenerate");
    blk.explained_fraction = blk.eigenvalues / total;
    model.blocks.push_back(std::move(blk));
  }
  if (covered != train.cols())
    throw PcaError("feature blocks cover " + std::to_string(covered) + " of " +
                   std::to_string(train.cols()) + " columns");
  return model;
}

// Smallest K_f whose residual variance fraction is at most the error budget.
inline long choose_components(const PcaModel& model, std::size_t feature,
                              double max_recon_error) {
  if (!(max_recon_error > 0.0 && max_recon_error <= 1.0))
    throw PcaError("reconstruction error budget must be in (0, 1]");
  const FeatureBlock& b = model.blocks.at(feature);
  double cum = 0.0;
  for (long k = 1; k <= b.width; ++k) {
    cum += b.explained_fraction(k - 1);
    if (1.0 - cum <= max_recon_error) return k;
  }
  return b.width;
}

inline void set_components(PcaModel& model, const std::vector<long>& counts) {
  if (counts.size() != model.blocks.size())
    throw PcaError("component counts do not match block count");
  for (std::size_t i = 0; i < counts.size(); ++i) {
    if (counts[i] < 1 || counts[i] > model.blocks[i].width)
      throw PcaError("invalid component count for feature '" + model.blocks[i].name + "'");
    model.blocks[i].n_components = counts[i];
  }
}

inline void choose_all_components(PcaModel& model, double max_recon_error) {
  std::vector<long> counts;
  for (std::size_t i = 0; i < model.blocks.size(); ++i)
    counts.push_back(choose_components(model, i, max_recon_error));
  set_components(model, counts);
}

}  // namespace w2vlab::pca
