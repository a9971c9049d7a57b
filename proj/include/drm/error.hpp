#ifndef DRM_ERROR_HPP
#define DRM_ERROR_HPP

#include <stdexcept>
#include <string>

namespace drm {

enum class ErrorCode {
  invalid_input,
  support_domain,
  infeasible_state,
  solver_failure,
  rank_deficient,
  separation,
  parse_error,
  unsupported,
};

inline const char* to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::invalid_input: return "invalid_input";
    case ErrorCode::support_domain: return "support_domain";
    case ErrorCode::infeasible_state: return "infeasible_state";
    case ErrorCode::solver_failure: return "solver_failure";
    case ErrorCode::rank_deficient: return "rank_deficient";
    case ErrorCode::separation: return "separation";
    case ErrorCode::parse_error: return "parse_error";
    case ErrorCode::unsupported: return "unsupported";
  }
  return "unknown";
}

/// Base of every error thrown by the library; carries a machine-readable code.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

/// Iterative procedure stopped without meeting its tolerance.
class SolverFailure : public Error {
 public:
  SolverFailure(const std::string& what, int iterations, double residual)
      : Error(ErrorCode::solver_failure, what),
        iterations_(iterations),
        residual_(residual) {}

  int iterations() const noexcept { return iterations_; }
  double residual() const noexcept { return residual_; }

 private:
  int iterations_;
  double residual_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) {
  throw Error(code, what);
}

inline void require(bool ok, const std::string& what) {
  if (!ok) fail(ErrorCode::invalid_input, what);
}

}  // namespace drm

#endif  // DRM_ERROR_HPP
