#pragma once

#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "w2vlab/autodiff.hpp"

namespace w2vlab {

class ScalerError : public std::runtime_error {
 public:
  explicit ScalerError(const std::string& msg) : std::runtime_error(msg) {}
};

// Min-max normalization to [0, 1], fitted per column group. Columns in one
// group share extremes so relative spatial structure survives scaling.
class MinMaxScaler {
 public:
  struct Group {
    std::string name;
    std::vector<int> columns;
    double min = 0.0;
    double max = 1.0;
  };

  MinMaxScaler() = default;

  static MinMaxScaler fit(const ad::RowMat& data,
                          std::vector<std::pair<std::string, std::vector<int>>> groups) {
    MinMaxScaler sc;
    sc.n_cols_ = data.cols();
    sc.col_group_.assign(static_cast<std::size_t>(data.cols()), -1);
    for (auto& [name, cols] : groups) {
      Group grp;
      grp.name = name;
      grp.columns = cols;
      grp.min = std::numeric_limits<double>::infinity();
      grp.max = -std::numeric_limits<double>::infinity();
      for (int c : cols) {
        if (c < 0 || c >= data.cols())
          throw ScalerError("group '" + name + "' references column " + std::to_string(c));
        if (sc.col_group_[static_cast<std::size_t>(c)] != -1)
          throw ScalerError("column " + std::to_string(c) + " assigned to two groups");
        sc.col_group_[static_cast<std::size_t>(c)] = static_cast<int>(sc.groups_.size());
        for (Eigen::Index r = 0; r < data.rows(); ++r) {
          grp.min = std::min(grp.min, data(r, c));
          grp.max = std::max(grp.max, data(r, c));
        }
      }
      if (!(grp.max > grp.min))
        throw ScalerError("group '" + name + "' is constant (min == max == " +
                          std::to_string(grp.min) + ")");
      sc.groups_.push_back(std::move(grp));
    }
    for (Eigen::Index c = 0; c < data.cols(); ++c)
      if (sc.col_group_[static_cast<std::size_t>(c)] == -1)
        throw ScalerError("column " + std::to_string(c) + " belongs to no group");
    sc.fitted_ = true;
    return sc;
  }

  bool fitted() const { return fitted_; }
  const std::vector<Group>& groups() const { return groups_; }

  double apply_value(double v, int column) const {
    const Group& g = group_of(column);
    return (v - g.min) / (g.max - g.min);
  }

  double invert_value(double v, int column) const {
    const Group& g = group_of(column);
    return g.min + v * (g.max - g.min);
  }

  // physical span of a column's group; converts normalized errors to units
  double span(int column) const {
    const Group& g = group_of(column);
    return g.max - g.min;
  }

  ad::RowMat apply(const ad::RowMat& data) const {
    check(data.cols());
    ad::RowMat out(data.rows(), data.cols());
    for (Eigen::Index c = 0; c < data.cols(); ++c) {
      const Group& g = group_of(static_cast<int>(c));
      const double inv = 1.0 / (g.max - g.min);
      for (Eigen::Index r = 0; r < data.rows(); ++r) out(r, c) = (data(r, c) - g.min) * inv;
    }
    return out;
  }

  ad::RowMat invert(const ad::RowMat& data) const {
    check(data.cols());
    ad::RowMat out(data.rows(), data.cols());
    for (Eigen::Index c = 0; c < data.cols(); ++c) {
      const Group& g = group_of(static_cast<int>(c));
      for (Eigen::Index r = 0; r < data.rows(); ++r)
        out(r, c) = g.min + data(r, c) * (g.max - g.min);
    }
    return out;
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["n_cols"] = n_cols_;
    j["groups"] = nlohmann::json::array();
    for (const Group& g : groups_)
      j["groups"].push_back(
          {{"name", g.name}, {"columns", g.columns}, {"min", g.min}, {"max", g.max}});
    return j;
  }

  static MinMaxScaler from_json(const nlohmann::json& j) {
    MinMaxScaler sc;
    sc.n_cols_ = j.at("n_cols").get<Eigen::Index>();
    sc.col_group_.assign(static_cast<std::size_t>(sc.n_cols_), -1);
    for (const auto& jg : j.at("groups")) {
      Group g;
      g.name = jg.at("name").get<std::string>();
      g.columns = jg.at("columns").get<std::vector<int>>();
      g.min = jg.at("min").get<double>();
      g.max = jg.at("max").get<double>();
      for (int c : g.columns)
        sc.col_group_[static_cast<std::size_t>(c)] = static_cast<int>(sc.groups_.size());
      sc.groups_.push_back(std::move(g));
    }
    sc.fitted_ = true;
    return sc;
  }

 private:
  const Group& group_of(int column) const {
    if (!fitted_) throw ScalerError("scaler is not fitted");
    if (column < 0 || column >= static_cast<int>(col_group_.size()))
      throw ScalerError("column " + std::to_string(column) + " out of range");
    return groups_[static_cast<std::size_t>(col_group_[static_cast<std::size_t>(column)])];
  }

  void check(Eigen::Index cols) const {
    if (!fitted_) throw ScalerError("scaler is not fitted");
    if (cols != n_cols_)
      throw ScalerError("scaler fitted on " + std::to_string(n_cols_) + " columns, got " +
                        std::to_string(cols));
  }

  bool fitted_ = false;
  Eigen::Index n_cols_ = 0;
  std::vector<Group> groups_;
  std::vector<int> col_group_;
};

}  // namespace w2vlab
