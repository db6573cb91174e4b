#pragma once

#include <stdexcept>
#include <string>

namespace attnlab {

// Base of every error thrown by the library. Subclasses name the failure
// class; the CLI maps ConfigError-like failures to exit code 1 and the rest
// to exit code 2.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

#define ATTNLAB_ERROR(Name)                  \
    class Name : public Error {              \
    public:                                  \
        using Error::Error;                  \
    }

ATTNLAB_ERROR(InvalidLayout);
ATTNLAB_ERROR(IndexOutOfRange);
ATTNLAB_ERROR(EmptyScope);
ATTNLAB_ERROR(InvalidScope);
ATTNLAB_ERROR(InvalidSpec);
ATTNLAB_ERROR(ShapeError);
ATTNLAB_ERROR(NumericalError);
ATTNLAB_ERROR(SchemaError);
ATTNLAB_ERROR(ConfigError);
ATTNLAB_ERROR(SpecError);
ATTNLAB_ERROR(TrainingDiverged);
ATTNLAB_ERROR(EmptyInput);
ATTNLAB_ERROR(PairingError);
ATTNLAB_ERROR(DegenerateGroundTruth);
ATTNLAB_ERROR(FormatError);
ATTNLAB_ERROR(IoError);

#undef ATTNLAB_ERROR

}  // namespace attnlab
