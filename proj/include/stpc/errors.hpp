#pragma once

#include <stdexcept>
#include <string>

namespace stpc {

/// Base class of every error thrown by the library. The CLI maps the
/// concrete subclasses onto process exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define STPC_DEFINE_ERROR(Name)            \
  class Name : public Error {              \
   public:                                 \
    using Error::Error;                    \
  };

STPC_DEFINE_ERROR(EmptyEvent)
STPC_DEFINE_ERROR(InvalidPoint)
STPC_DEFINE_ERROR(ShapeError)
STPC_DEFINE_ERROR(RangeError)
STPC_DEFINE_ERROR(CheckpointError)
STPC_DEFINE_ERROR(LabelError)
STPC_DEFINE_ERROR(NumericsError)
STPC_DEFINE_ERROR(ConfigError)
STPC_DEFINE_ERROR(FormatError)
STPC_DEFINE_ERROR(TaskError)
STPC_DEFINE_ERROR(DegenerateData)
STPC_DEFINE_ERROR(UsageError)
STPC_DEFINE_ERROR(IoError)

#undef STPC_DEFINE_ERROR

}  // namespace stpc
