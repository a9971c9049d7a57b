#ifndef DRM_MODEL_HPP
#define DRM_MODEL_HPP

#include <regex>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "drm/basis.hpp"
#include "drm/error.hpp"
#include "drm/features.hpp"

namespace drm {

using json = nlohmann::json;

/// Declarative DRM description: basis q(y), feature map phi(x) and K levels.
struct ModelSpec {
  BasisSpec basis;
  FeatureMap features;
  int levels = 2;
  /// Level labels in level order (optional; empty means "1".."K").
  std::vector<std::string> level_labels;
  /// Centre q at the pooled sample mean so that sum p q = 0 is attainable.
  bool center_basis = true;

  ModelSpec() = default;
  ModelSpec(BasisSpec b, FeatureMap f, int k, bool center = true)
      : basis(std::move(b)), features(std::move(f)), levels(k), center_basis(center) {
    validate();
  }

  int d() const { return basis.dim(); }
  int m() const { return features.dim(); }

  void validate() const {
    require(levels >= 1, "model needs at least one treatment level");
    require(level_labels.empty() || static_cast<int>(level_labels.size()) == levels,
            "level_labels must list every level");
  }
};

/// theta_k, k = 1..K, each an m x d matrix (stored 0-based).
struct ThetaParams {
  std::vector<Eigen::MatrixXd> theta;

  static ThetaParams zeros(int levels, int m, int d) {
    return {std::vector<Eigen::MatrixXd>(static_cast<std::size_t>(levels),
                                         Eigen::MatrixXd::Zero(m, d))};
  }

  int levels() const { return static_cast<int>(theta.size()); }
  const Eigen::MatrixXd& operator[](int k) const { return theta[static_cast<std::size_t>(k)]; }
  Eigen::MatrixXd& operator[](int k) { return theta[static_cast<std::size_t>(k)]; }

  Eigen::Index size() const {
    Eigen::Index s = 0;
    for (const auto& t : theta) s += t.size();
    return s;
  }

  /// Column-major concatenation of theta_1..theta_K.
  Eigen::VectorXd flatten() const {
    Eigen::VectorXd v(size());
    Eigen::Index off = 0;
    for (const auto& t : theta) {
      v.segment(off, t.size()) = Eigen::Map<const Eigen::VectorXd>(t.data(), t.size());
      off += t.size();
    }
    return v;
  }

  static ThetaParams unflatten(const Eigen::VectorXd& v, int levels, int m, int d) {
    require(v.size() == static_cast<Eigen::Index>(levels) * m * d, "theta vector has wrong length");
    ThetaParams out = zeros(levels, m, d);
    for (int k = 0; k < levels; ++k)
      out[k] = Eigen::Map<const Eigen::MatrixXd>(v.data() + static_cast<Eigen::Index>(k) * m * d, m, d);
    return out;
  }

  bool all_finite() const {
    for (const auto& t : theta)
      if (!t.allFinite()) return false;
    return true;
  }
};

// ---- JSON ----------------------------------------------------------------

/// Written as the 1-based shorthand ("intercept", "x1", "x1^2", "x1*x2").
inline json feature_to_json(const FeatureTerm& t) {
  if (t.kind == FeatureTerm::Kind::intercept) return "intercept";
  return t.label();
}

/// Accepts "intercept", the 1-based shorthands "x2", "x1^2", "x1*x2", or the
/// 0-based objects {"raw": i}, {"squared": i}, {"interaction": [i, j]}.
inline FeatureTerm feature_from_json(const json& j) {
  if (j.is_string()) {
    const std::string s = j.get<std::string>();
    if (s == "intercept" || s == "1") return FeatureTerm::intercept();
    std::smatch mt;
    static const std::regex raw_re(R"(x(\d+))"), sq_re(R"(x(\d+)\^2)"),
        int_re(R"(x(\d+)\*x(\d+))");
    if (std::regex_match(s, mt, raw_re)) return FeatureTerm::raw(std::stoi(mt[1]) - 1);
    if (std::regex_match(s, mt, sq_re)) return FeatureTerm::squared(std::stoi(mt[1]) - 1);
    if (std::regex_match(s, mt, int_re))
      return FeatureTerm::interaction(std::stoi(mt[1]) - 1, std::stoi(mt[2]) - 1);
    fail(ErrorCode::invalid_input, "unrecognised feature descriptor '" + s + "'");
  }
  if (j.is_object() && j.size() == 1) {
    if (j.contains("raw")) return FeatureTerm::raw(j["raw"].get<int>());
    if (j.contains("squared")) return FeatureTerm::squared(j["squared"].get<int>());
    if (j.contains("interaction")) {
      const auto& p = j["interaction"];
      require(p.is_array() && p.size() == 2, "interaction needs two indices");
      return FeatureTerm::interaction(p[0].get<int>(), p[1].get<int>());
    }
  }
  fail(ErrorCode::invalid_input, "unrecognised feature descriptor " + j.dump());
}

inline json to_json(const ModelSpec& spec) {
  json basis = json::array();
  for (auto t : spec.basis.components()) basis.push_back(std::string(to_string(t)));
  json features = json::array();
  for (const auto& t : spec.features.terms()) features.push_back(feature_to_json(t));
  json j{{"basis", basis}, {"features", features}, {"center_basis", spec.center_basis}};
  if (spec.level_labels.empty())
    j["treatment_levels"] = spec.levels;
  else
    j["treatment_levels"] = spec.level_labels;
  return j;
}

inline ModelSpec model_from_json(const json& j) {
  try {
    require(j.contains("basis") && j["basis"].is_array(), "model config needs a 'basis' list");
    require(j.contains("features") && j["features"].is_array(),
            "model config needs a 'features' list");
    std::vector<BasisTerm> basis;
    for (const auto& b : j["basis"]) basis.push_back(parse_basis_term(b.get<std::string>()));
    std::vector<FeatureTerm> features;
    for (const auto& f : j["features"]) features.push_back(feature_from_json(f));

    ModelSpec spec;
    spec.basis = BasisSpec(std::move(basis));
    spec.features = FeatureMap(std::move(features));
    spec.center_basis = j.value("center_basis", true);
    if (j.contains("treatment_levels")) {
      const auto& tl = j["treatment_levels"];
      if (tl.is_array()) {
        for (const auto& l : tl)
          spec.level_labels.push_back(l.is_string() ? l.get<std::string>() : l.dump());
        spec.levels = static_cast<int>(spec.level_labels.size());
      } else {
        spec.levels = tl.get<int>();
      }
    }
    spec.validate();
    return spec;
  } catch (const json::exception& e) {
    fail(ErrorCode::invalid_input, std::string("malformed model config: ") + e.what());
  }
}

inline json to_json(const Eigen::MatrixXd& m) {
  json rows = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(row);
  }
  return rows;
}

inline json to_json(const Eigen::VectorXd& v) {
  json a = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v[i]);
  return a;
}

}  // namespace drm

#endif  // DRM_MODEL_HPP
