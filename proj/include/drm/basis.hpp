#ifndef DRM_BASIS_HPP
#define DRM_BASIS_HPP

// Basis q(y) of the exponential tilt. The menu is closed so that support
// domains can be checked before any fit.

#include <algorithm>
#include <cmath>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "drm/error.hpp"

namespace drm {

enum class BasisTerm { identity, square, sqrt, log, sqrt_abs, log_abs };

inline std::string_view to_string(BasisTerm t) {
  switch (t) {
    case BasisTerm::identity: return "identity";
    case BasisTerm::square: return "square";
    case BasisTerm::sqrt: return "sqrt";
    case BasisTerm::log: return "log";
    case BasisTerm::sqrt_abs: return "sqrt_abs";
    case BasisTerm::log_abs: return "log_abs";
  }
  return "?";
}

inline BasisTerm parse_basis_term(std::string_view name) {
  for (auto t : {BasisTerm::identity, BasisTerm::square, BasisTerm::sqrt,
                 BasisTerm::log, BasisTerm::sqrt_abs, BasisTerm::log_abs}) {
    if (name == to_string(t)) return t;
  }
  if (name == "y") return BasisTerm::identity;
  if (name == "y2" || name == "y^2") return BasisTerm::square;
  if (name == "sqrt(y)") return BasisTerm::sqrt;
  if (name == "log(y)") return BasisTerm::log;
  fail(ErrorCode::invalid_input, "unknown basis term '" + std::string(name) + "'");
}

inline double eval_term(BasisTerm t, double y) {
  switch (t) {
    case BasisTerm::identity: return y;
    case BasisTerm::square: return y * y;
    case BasisTerm::sqrt: return std::sqrt(y);
    case BasisTerm::log: return std::log(y);
    case BasisTerm::sqrt_abs: return std::sqrt(std::abs(y));
    case BasisTerm::log_abs: return std::log(std::abs(y));
  }
  return 0.0;
}

/// True if `y` lies in the domain of term `t`.
inline bool term_admits(BasisTerm t, double y) {
  if (!std::isfinite(y)) return false;
  switch (t) {
    case BasisTerm::sqrt: return y >= 0.0;
    case BasisTerm::log: return y > 0.0;
    case BasisTerm::log_abs: return y != 0.0;
    default: return true;
  }
}

class BasisSpec {
 public:
  BasisSpec() = default;

  explicit BasisSpec(std::vector<BasisTerm> components)
      : components_(std::move(components)) {
    require(!components_.empty(), "basis must have at least one component");
    for (std::size_t i = 0; i < components_.size(); ++i)
      for (std::size_t j = i + 1; j < components_.size(); ++j)
        require(components_[i] != components_[j],
                "basis components must be pairwise distinct (duplicate '" +
                    std::string(to_string(components_[i])) + "')");
  }

  int dim() const { return static_cast<int>(components_.size()); }
  const std::vector<BasisTerm>& components() const { return components_; }

  bool has(BasisTerm t) const {
    return std::find(components_.begin(), components_.end(), t) != components_.end();
  }
  bool positive_only() const { return has(BasisTerm::log); }
  bool nonnegative_only() const { return has(BasisTerm::sqrt) && !positive_only(); }
  bool nonzero_only() const { return has(BasisTerm::log_abs); }

  bool admits(double y) const {
    return std::all_of(components_.begin(), components_.end(),
                       [y](BasisTerm t) { return term_admits(t, y); });
  }

  std::string describe() const {
    std::string s = "(";
    for (std::size_t i = 0; i < components_.size(); ++i) {
      if (i) s += ", ";
      s += to_string(components_[i]);
    }
    return s + ")";
  }

  friend bool operator==(const BasisSpec&, const BasisSpec&) = default;

 private:
  std::vector<BasisTerm> components_;
};

inline void check_support(const BasisSpec& basis, double y) {
  if (!basis.admits(y))
    fail(ErrorCode::support_domain, "y = " + std::to_string(y) +
                                        " is outside the support of basis " +
                                        basis.describe());
}

/// Writes q(y) into `out` (length d). Throws a support-domain error.
template <typename Out>
void eval_basis_into(const BasisSpec& basis, double y, Out&& out) {
  check_support(basis, y);
  const auto& c = basis.components();
  for (std::size_t l = 0; l < c.size(); ++l) out[static_cast<Eigen::Index>(l)] = eval_term(c[l], y);
}

inline Eigen::VectorXd eval_basis(const BasisSpec& basis, double y) {
  Eigen::VectorXd q(basis.dim());
  eval_basis_into(basis, y, q);
  return q;
}

}  // namespace drm

#endif  // DRM_BASIS_HPP
