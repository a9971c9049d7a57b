#ifndef DRM_FEATURES_HPP
#define DRM_FEATURES_HPP

#include <string>
#include <vector>

#include <Eigen/Dense>

#include "drm/error.hpp"

namespace drm {

/// One covariate feature. Indices are 0-based covariate columns.
struct FeatureTerm {
  enum class Kind { intercept, raw, squared, interaction };

  Kind kind = Kind::intercept;
  int i = -1;
  int j = -1;

  static FeatureTerm intercept() { return {Kind::intercept, -1, -1}; }
  static FeatureTerm raw(int i) { return {Kind::raw, i, -1}; }
  static FeatureTerm squared(int i) { return {Kind::squared, i, -1}; }
  static FeatureTerm interaction(int i, int j) {
    if (j < i) std::swap(i, j);
    return {Kind::interaction, i, j};
  }

  int max_index() const { return kind == Kind::interaction ? j : i; }

  double eval(const Eigen::Ref<const Eigen::VectorXd>& x) const {
    switch (kind) {
      case Kind::intercept: return 1.0;
      case Kind::raw: return x[i];
      case Kind::squared: return x[i] * x[i];
      case Kind::interaction: return x[i] * x[j];
    }
    return 0.0;
  }

  /// Human label using 1-based covariate names (x1, x1^2, x1*x2).
  std::string label() const {
    switch (kind) {
      case Kind::intercept: return "1";
      case Kind::raw: return "x" + std::to_string(i + 1);
      case Kind::squared: return "x" + std::to_string(i + 1) + "^2";
      case Kind::interaction:
        return "x" + std::to_string(i + 1) + "*x" + std::to_string(j + 1);
    }
    return "?";
  }

  friend bool operator==(const FeatureTerm&, const FeatureTerm&) = default;
};

/// Ordered covariate feature map x -> phi(x), so that beta(x; theta) = theta' phi(x).
class FeatureMap {
 public:
  FeatureMap() = default;

  explicit FeatureMap(std::vector<FeatureTerm> terms) : terms_(std::move(terms)) {
    require(!terms_.empty(), "feature map must have at least one term");
    for (const auto& t : terms_) {
      require(t.kind == FeatureTerm::Kind::intercept || t.i >= 0,
              "feature term has a negative covariate index");
    }
    for (std::size_t a = 0; a < terms_.size(); ++a)
      for (std::size_t b = a + 1; b < terms_.size(); ++b)
        require(!(terms_[a] == terms_[b]),
                "feature terms must be pairwise distinct (duplicate '" +
                    terms_[a].label() + "')");
  }

  int dim() const { return static_cast<int>(terms_.size()); }
  const std::vector<FeatureTerm>& terms() const { return terms_; }

  bool has_intercept() const {
    for (const auto& t : terms_)
      if (t.kind == FeatureTerm::Kind::intercept) return true;
    return false;
  }

  /// Largest covariate index referenced, or -1 for an intercept-only map.
  int max_index() const {
    int m = -1;
    for (const auto& t : terms_) m = std::max(m, t.max_index());
    return m;
  }

  void validate(int p) const {
    if (max_index() >= p)
      fail(ErrorCode::invalid_input,
           "feature map references covariate index " + std::to_string(max_index()) +
               " but the data has p = " + std::to_string(p));
  }

  template <typename Out>
  void eval_into(const Eigen::Ref<const Eigen::VectorXd>& x, Out&& out) const {
    for (std::size_t f = 0; f < terms_.size(); ++f)
      out[static_cast<Eigen::Index>(f)] = terms_[f].eval(x);
  }

  Eigen::VectorXd eval(const Eigen::Ref<const Eigen::VectorXd>& x) const {
    Eigen::VectorXd phi(dim());
    eval_into(x, phi);
    return phi;
  }

  /// n x m design with one row phi(x_i) per row of `x`.
  Eigen::MatrixXd design(const Eigen::MatrixXd& x) const {
    validate(static_cast<int>(x.cols()));
    Eigen::MatrixXd out(x.rows(), dim());
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
      Eigen::VectorXd xr = x.row(r).transpose();
      for (int f = 0; f < dim(); ++f) out(r, f) = terms_[static_cast<std::size_t>(f)].eval(xr);
    }
    return out;
  }

  /// The same map with an intercept prepended unless one is present.
  FeatureMap with_intercept() const {
    if (has_intercept()) return *this;
    std::vector<FeatureTerm> t{FeatureTerm::intercept()};
    t.insert(t.end(), terms_.begin(), terms_.end());
    return FeatureMap(std::move(t));
  }

  /// The same map with any intercept removed (may be empty).
  std::vector<FeatureTerm> without_intercept() const {
    std::vector<FeatureTerm> t;
    for (const auto& term : terms_)
      if (term.kind != FeatureTerm::Kind::intercept) t.push_back(term);
    return t;
  }

  std::string describe() const {
    std::string s = "(";
    for (std::size_t f = 0; f < terms_.size(); ++f) {
      if (f) s += ", ";
      s += terms_[f].label();
    }
    return s + ")";
  }

  friend bool operator==(const FeatureMap&, const FeatureMap&) = default;

 private:
  std::vector<FeatureTerm> terms_;
};

/// beta(x; theta_k) = theta_k' phi(x), a d-vector.
inline Eigen::VectorXd eval_beta(const FeatureMap& features, const Eigen::MatrixXd& theta_k,
                                 const Eigen::Ref<const Eigen::VectorXd>& x) {
  require(theta_k.rows() == features.dim(), "theta_k must have one row per feature");
  features.validate(static_cast<int>(x.size()));
  return theta_k.transpose() * features.eval(x);
}

}  // namespace drm

#endif  // DRM_FEATURES_HPP
