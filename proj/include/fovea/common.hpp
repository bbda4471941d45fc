#pragma once

#include <stdexcept>
#include <string>

namespace fovea {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class InvalidArgument : public Error {
public:
    using Error::Error;
};

/// A point was evaluated outside the unit disk of an expansion.
class OutsideAperture : public Error {
public:
    using Error::Error;
};

/// Least-squares problem with a rank-deficient design.
class DegenerateFit : public Error {
public:
    using Error::Error;
};

class CatalogError : public Error {
public:
    using Error::Error;
};

/// Optimization aborted (divergence, wrong basin, ...).
class OptimizationFailed : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

}  // namespace fovea
