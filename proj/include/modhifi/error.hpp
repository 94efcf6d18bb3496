#pragma once

#include <stdexcept>
#include <string>

namespace modhifi {

/// Coarse error category; the CLI maps these onto exit codes.
enum class ErrorKind { Config, Numerical, Format };

class Error : public std::runtime_error {
public:
    Error(std::string name, ErrorKind kind, const std::string& what)
        : std::runtime_error(name + ": " + what), name_(std::move(name)), kind_(kind) {}

    const std::string& name() const noexcept { return name_; }
    ErrorKind kind() const noexcept { return kind_; }

private:
    std::string name_;
    ErrorKind kind_;
};

#define MODHIFI_DEFINE_ERROR(Name, Kind)                                        \
    struct Name : Error {                                                       \
        explicit Name(const std::string& what) : Error(#Name, Kind, what) {}    \
    }

// numerics
MODHIFI_DEFINE_ERROR(NotPositiveDefinite, ErrorKind::Numerical);
MODHIFI_DEFINE_ERROR(DegenerateInput, ErrorKind::Numerical);
// model
MODHIFI_DEFINE_ERROR(ShapeMismatch, ErrorKind::Config);
MODHIFI_DEFINE_ERROR(NonFiniteActivation, ErrorKind::Numerical);
MODHIFI_DEFINE_ERROR(Divergence, ErrorKind::Numerical);
MODHIFI_DEFINE_ERROR(FormatError, ErrorKind::Format);
// data
MODHIFI_DEFINE_ERROR(UnknownClass, ErrorKind::Config);
// fidelity
MODHIFI_DEFINE_ERROR(TapMismatch, ErrorKind::Config);
MODHIFI_DEFINE_ERROR(EmptyAccumulator, ErrorKind::Config);
// selection
MODHIFI_DEFINE_ERROR(BudgetExceeded, ErrorKind::Config);
// modify
MODHIFI_DEFINE_ERROR(DegenerateLayer, ErrorKind::Numerical);
MODHIFI_DEFINE_ERROR(WrongClassData, ErrorKind::Config);
MODHIFI_DEFINE_ERROR(InconsistentCoupling, ErrorKind::Config);
// analysis
MODHIFI_DEFINE_ERROR(MissingRadius, ErrorKind::Config);
MODHIFI_DEFINE_ERROR(ZeroRadius, ErrorKind::Numerical);
// shared argument validation
MODHIFI_DEFINE_ERROR(InvalidArgument, ErrorKind::Config);

#undef MODHIFI_DEFINE_ERROR

} // namespace modhifi
