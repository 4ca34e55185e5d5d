#ifndef DIFFSPOT_COMMON_HPP_
#define DIFFSPOT_COMMON_HPP_

#include <stdexcept>
#include <string>

namespace diffspot {

// Base class for all library errors. Subclasses name the failure mode so
// callers can catch a specific condition or the whole family at once.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

#define DIFFSPOT_DEFINE_ERROR(NAME)                                \
  class NAME : public Error {                                      \
   public:                                                         \
    explicit NAME(const std::string& msg) : Error(#NAME ": " + msg) {} \
  }

DIFFSPOT_DEFINE_ERROR(DimensionMismatch);
DIFFSPOT_DEFINE_ERROR(NoCoverFound);
DIFFSPOT_DEFINE_ERROR(AlignmentFailed);
DIFFSPOT_DEFINE_ERROR(GenerationExhausted);
DIFFSPOT_DEFINE_ERROR(IdentityCollision);
DIFFSPOT_DEFINE_ERROR(EmptyRegion);
DIFFSPOT_DEFINE_ERROR(InvalidConfig);
DIFFSPOT_DEFINE_ERROR(InputTooSmall);
DIFFSPOT_DEFINE_ERROR(ShapeMismatch);
DIFFSPOT_DEFINE_ERROR(DivergenceDetected);
DIFFSPOT_DEFINE_ERROR(DegenerateLabels);
DIFFSPOT_DEFINE_ERROR(SquareTooLarge);
DIFFSPOT_DEFINE_ERROR(NoValidSamples);
DIFFSPOT_DEFINE_ERROR(ModelNotTrained);
DIFFSPOT_DEFINE_ERROR(IoError);

#undef DIFFSPOT_DEFINE_ERROR

inline void check(bool cond, const std::string& msg) {
  if (!cond) throw Error(msg);
}

}  // namespace diffspot

#endif  // DIFFSPOT_COMMON_HPP_
