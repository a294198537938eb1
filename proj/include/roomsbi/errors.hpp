#ifndef ROOMSBI_ERRORS_HPP
#define ROOMSBI_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace roomsbi {

/// Base of every error thrown by the library. `category()` is a short stable
/// tag the CLI uses to pick an exit code.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
    virtual const char* category() const noexcept { return "error"; }
};

#define ROOMSBI_DEFINE_ERROR(Name, tag)                                  \
    class Name : public Error {                                         \
    public:                                                             \
        using Error::Error;                                             \
        const char* category() const noexcept override { return tag; }  \
    }

ROOMSBI_DEFINE_ERROR(DomainError, "domain");
ROOMSBI_DEFINE_ERROR(ValidationError, "validation");
ROOMSBI_DEFINE_ERROR(ResourceError, "resource");
ROOMSBI_DEFINE_ERROR(InfeasibleError, "infeasible");
ROOMSBI_DEFINE_ERROR(SolverError, "solver");
ROOMSBI_DEFINE_ERROR(SupportError, "support");
ROOMSBI_DEFINE_ERROR(TrainingError, "training");
ROOMSBI_DEFINE_ERROR(ArtifactError, "artifact");
ROOMSBI_DEFINE_ERROR(DiagnosticError, "diagnostic");

#undef ROOMSBI_DEFINE_ERROR

} // namespace roomsbi

#endif // ROOMSBI_ERRORS_HPP
