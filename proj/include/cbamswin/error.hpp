#pragma once

#include <stdexcept>
#include <string>

namespace cbamswin {

/// Base of every error thrown by the library.
///
/// `is_validation()` separates bad input (shapes, parameters, documents) from
/// failures that happen while running otherwise valid work. The CLI maps the
/// former to exit code 1 and the latter to exit code 2.
class Error : public std::runtime_error {
 public:
  Error(const std::string& kind, const std::string& what, bool validation)
      : std::runtime_error(kind + ": " + what), kind_(kind), validation_(validation) {}

  const std::string& kind() const noexcept { return kind_; }
  bool is_validation() const noexcept { return validation_; }

 private:
  std::string kind_;
  bool validation_;
};

#define CBAMSWIN_DEFINE_ERROR(Name, validation)                            \
  class Name : public Error {                                              \
   public:                                                                 \
    explicit Name(const std::string& what) : Error(#Name, what, validation) {} \
  };

CBAMSWIN_DEFINE_ERROR(ShapeMismatch, true)
CBAMSWIN_DEFINE_ERROR(InvalidParam, true)
CBAMSWIN_DEFINE_ERROR(IndivisibleInput, true)
CBAMSWIN_DEFINE_ERROR(ParseError, true)
CBAMSWIN_DEFINE_ERROR(DanglingReference, true)
CBAMSWIN_DEFINE_ERROR(MissingStats, true)
CBAMSWIN_DEFINE_ERROR(DatasetEmpty, true)
CBAMSWIN_DEFINE_ERROR(NotScalar, true)
CBAMSWIN_DEFINE_ERROR(NoTape, true)
CBAMSWIN_DEFINE_ERROR(NonFinite, false)
CBAMSWIN_DEFINE_ERROR(NonFiniteLoss, false)
CBAMSWIN_DEFINE_ERROR(IoError, false)

#undef CBAMSWIN_DEFINE_ERROR

}  // namespace cbamswin
