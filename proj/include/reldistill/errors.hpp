#pragma once

#include <stdexcept>
#include <string>

namespace rd {

// Base of every error raised by the toolkit. Commands map any of these to a
// nonzero exit code.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& what) : std::runtime_error(what) {}
    virtual const char* kind() const noexcept { return "Error"; }
};

#define RD_DEFINE_ERROR(Name)                                              \
    class Name : public Error {                                            \
    public:                                                                \
        explicit Name(const std::string& what) : Error(what) {}            \
        const char* kind() const noexcept override { return #Name; }       \
    };

// numerical preconditions
RD_DEFINE_ERROR(ZeroVectorError)
RD_DEFINE_ERROR(BatchTooSmallError)
RD_DEFINE_ERROR(InvalidTemperatureError)
RD_DEFINE_ERROR(ShapeMismatchError)
RD_DEFINE_ERROR(ShapeError)
RD_DEFINE_ERROR(NoPositivePairsError)
RD_DEFINE_ERROR(NonFiniteError)
RD_DEFINE_ERROR(DivergenceError)

// configuration and data
RD_DEFINE_ERROR(ConfigError)
RD_DEFINE_ERROR(FormatError)
RD_DEFINE_ERROR(IntegrityError)
RD_DEFINE_ERROR(IOError)
RD_DEFINE_ERROR(MissingSampleError)
RD_DEFINE_ERROR(MissingCovariateError)
RD_DEFINE_ERROR(UnknownSubgroupError)

// statistics
RD_DEFINE_ERROR(DegenerateLabelsError)
RD_DEFINE_ERROR(NoComparablePairsError)
RD_DEFINE_ERROR(NoEventsError)
RD_DEFINE_ERROR(DegenerateCovariateError)
RD_DEFINE_ERROR(NonConvergenceError)
RD_DEFINE_ERROR(EmptyInputError)

#undef RD_DEFINE_ERROR

}  // namespace rd
