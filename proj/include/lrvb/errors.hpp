#pragma once

#include <stdexcept>
#include <string>

namespace lrvb {

/// Base of every error the library raises. kind() is the stable name the
/// CLI prints next to the message.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
  virtual const char* kind() const noexcept { return "Error"; }
};

#define LRVB_DEFINE_ERROR(Name)                                        \
  class Name : public Error {                                          \
   public:                                                             \
    explicit Name(const std::string& what) : Error(what) {}            \
    const char* kind() const noexcept override { return #Name; }       \
  };

LRVB_DEFINE_ERROR(DomainError)
LRVB_DEFINE_ERROR(DimensionMismatch)
LRVB_DEFINE_ERROR(NonConvergence)
LRVB_DEFINE_ERROR(DomainViolation)
LRVB_DEFINE_ERROR(SingularSystem)
LRVB_DEFINE_ERROR(NonDifferentiablePrior)
LRVB_DEFINE_ERROR(QuadratureFailure)
LRVB_DEFINE_ERROR(ZeroPriorDensity)
LRVB_DEFINE_ERROR(NormalizationFailure)
LRVB_DEFINE_ERROR(NotConjugate)
LRVB_DEFINE_ERROR(DegenerateChain)

#undef LRVB_DEFINE_ERROR

}  // namespace lrvb
