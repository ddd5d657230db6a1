#pragma once

#include <stdexcept>
#include <string>

namespace dsfwsi {

// Every failure surfaced by the library is one of these; `kind()` is the
// stable machine-readable tag the CLI prints.
class Error : public std::runtime_error {
public:
    Error(std::string kind, const std::string& what)
        : std::runtime_error(what), kind_(std::move(kind)) {}
    const std::string& kind() const noexcept { return kind_; }

private:
    std::string kind_;
};

#define DSFWSI_DEFINE_ERROR(Name, tag)                                           \
    class Name : public Error {                                                  \
    public:                                                                      \
        explicit Name(const std::string& what) : Error(tag, what) {}             \
    };

DSFWSI_DEFINE_ERROR(PreconditionError, "precondition")
DSFWSI_DEFINE_ERROR(ArgumentError, "argument")
DSFWSI_DEFINE_ERROR(ConfigError, "config")
DSFWSI_DEFINE_ERROR(FormatError, "format")
DSFWSI_DEFINE_ERROR(IoError, "io")
DSFWSI_DEFINE_ERROR(ParseError, "parse")
DSFWSI_DEFINE_ERROR(ValidationError, "validation")
DSFWSI_DEFINE_ERROR(NumericalError, "numerical")
DSFWSI_DEFINE_ERROR(IntegrityError, "integrity")
DSFWSI_DEFINE_ERROR(VersionError, "version")
DSFWSI_DEFINE_ERROR(ShapeMismatchError, "shape_mismatch")
DSFWSI_DEFINE_ERROR(UndefinedMetricError, "undefined_metric")

#undef DSFWSI_DEFINE_ERROR

}  // namespace dsfwsi
