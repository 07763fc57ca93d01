#pragma once

#include <stdexcept>
#include <string>

namespace egoman {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define EGOMAN_DEFINE_ERROR(Name)              \
  class Name : public Error {                  \
   public:                                     \
    using Error::Error;                        \
  }

// geometry
EGOMAN_DEFINE_ERROR(DegenerateRotation);
EGOMAN_DEFINE_ERROR(InvalidRotation);
EGOMAN_DEFINE_ERROR(BehindCamera);
// trajectory
EGOMAN_DEFINE_ERROR(TooShort);
// metrics
EGOMAN_DEFINE_ERROR(EmptyTrajectory);
EGOMAN_DEFINE_ERROR(NotEnoughSamples);
EGOMAN_DEFINE_ERROR(MissingWaypoint);
// losses
EGOMAN_DEFINE_ERROR(MissingIntrinsics);
// nn
EGOMAN_DEFINE_ERROR(NoGraph);
EGOMAN_DEFINE_ERROR(ShapeMismatch);
// flowmatch
EGOMAN_DEFINE_ERROR(BadTimestamp);
EGOMAN_DEFINE_ERROR(NumericalFailure);
// tokens
EGOMAN_DEFINE_ERROR(NoMotionOnset);
EGOMAN_DEFINE_ERROR(NoValidApproach);
// dataio
EGOMAN_DEFINE_ERROR(ParseError);
EGOMAN_DEFINE_ERROR(ValidationError);

#undef EGOMAN_DEFINE_ERROR

}  // namespace egoman
