#pragma once

#include <stdexcept>
#include <string>

namespace oucovit {

/// Root of every error thrown by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

#define OUCOVIT_DEFINE_ERROR(Name)                 \
    class Name : public Error {                    \
    public:                                        \
        using Error::Error;                        \
    };

OUCOVIT_DEFINE_ERROR(DomainError)
OUCOVIT_DEFINE_ERROR(DegenerateCorrelation)
OUCOVIT_DEFINE_ERROR(DegenerateInput)
OUCOVIT_DEFINE_ERROR(ShapeMismatch)
OUCOVIT_DEFINE_ERROR(QuadratureNotConverged)
OUCOVIT_DEFINE_ERROR(NonFiniteLoss)
OUCOVIT_DEFINE_ERROR(IoError)
OUCOVIT_DEFINE_ERROR(FormatError)
OUCOVIT_DEFINE_ERROR(MissingSummary)

#undef OUCOVIT_DEFINE_ERROR

/// Bad user-supplied configuration. Carries the offending field/flag name.
class ValidationError : public Error {
public:
    ValidationError(std::string field, const std::string& what)
        : Error(field + ": " + what), field_(std::move(field)) {}

    const std::string& field() const noexcept { return field_; }

private:
    std::string field_;
};

}  // namespace oucovit
