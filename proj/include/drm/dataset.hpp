#ifndef DRM_DATASET_HPP
#define DRM_DATASET_HPP

#include <cmath>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "drm/basis.hpp"
#include "drm/error.hpp"

namespace drm {

/// Observations (y_i, a_i, x_i) with treatment levels 1..K, grouped by level.
class Dataset {
 public:
  Dataset() = default;

  /// `a` holds levels in 1..K. Every level must be observed at least once.
  Dataset(Eigen::VectorXd y, std::vector<int> a, Eigen::MatrixXd x, int levels,
          std::vector<std::string> level_labels = {})
      : y_(std::move(y)), a_(std::move(a)), x_(std::move(x)), levels_(levels),
        labels_(std::move(level_labels)) {
    const auto n = y_.size();
    require(n >= 1, "dataset is empty");
    require(levels_ >= 1, "dataset needs at least one treatment level");
    require(static_cast<Eigen::Index>(a_.size()) == n, "treatment vector length differs from y");
    require(x_.rows() == n, "covariate matrix row count differs from y");
    require(y_.allFinite(), "outcomes must be finite");
    require(x_.allFinite(), "covariates must be finite");
    if (labels_.empty())
      for (int k = 1; k <= levels_; ++k) labels_.push_back(std::to_string(k));
    require(static_cast<int>(labels_.size()) == levels_, "one label per level required");

    groups_.assign(static_cast<std::size_t>(levels_), {});
    for (Eigen::Index i = 0; i < n; ++i) {
      const int k = a_[static_cast<std::size_t>(i)];
      require(k >= 1 && k <= levels_,
              "treatment level " + std::to_string(k) + " outside 1.." + std::to_string(levels_));
      groups_[static_cast<std::size_t>(k - 1)].push_back(static_cast<int>(i));
    }
    for (int k = 0; k < levels_; ++k)
      require(!groups_[static_cast<std::size_t>(k)].empty(),
              "treatment level " + labels_[static_cast<std::size_t>(k)] + " has no observations");
  }

  int n() const { return static_cast<int>(y_.size()); }
  int p() const { return static_cast<int>(x_.cols()); }
  int levels() const { return levels_; }

  const Eigen::VectorXd& y() const { return y_; }
  const std::vector<int>& a() const { return a_; }
  const Eigen::MatrixXd& x() const { return x_; }
  const std::vector<std::string>& level_labels() const { return labels_; }

  double y(int i) const { return y_[i]; }
  int level(int i) const { return a_[static_cast<std::size_t>(i)]; }
  Eigen::VectorXd x_row(int i) const { return x_.row(i).transpose(); }

  /// Row indices of level k (1-based level).
  const std::vector<int>& group(int k) const { return groups_[static_cast<std::size_t>(k - 1)]; }
  int group_size(int k) const { return static_cast<int>(group(k).size()); }

  /// 1-based level for a label, or -1.
  int level_of(const std::string& label) const {
    for (std::size_t k = 0; k < labels_.size(); ++k)
      if (labels_[k] == label) return static_cast<int>(k) + 1;
    return -1;
  }

  void validate_support(const BasisSpec& basis) const {
    for (Eigen::Index i = 0; i < y_.size(); ++i) {
      if (!basis.admits(y_[i]))
        fail(ErrorCode::support_domain,
             "observation " + std::to_string(i) + " has y = " + std::to_string(y_[i]) +
                 ", outside the support of basis " + basis.describe());
    }
  }

  friend bool operator==(const Dataset& l, const Dataset& r) {
    return l.levels_ == r.levels_ && l.a_ == r.a_ && l.labels_ == r.labels_ &&
           l.y_.size() == r.y_.size() && l.x_.rows() == r.x_.rows() &&
           l.x_.cols() == r.x_.cols() && l.y_ == r.y_ && l.x_ == r.x_;
  }

 private:
  Eigen::VectorXd y_;
  std::vector<int> a_;
  Eigen::MatrixXd x_;
  int levels_ = 0;
  std::vector<std::string> labels_;
  std::vector<std::vector<int>> groups_;
};

}  // namespace drm

#endif  // DRM_DATASET_HPP
