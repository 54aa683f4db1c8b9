#pragma once

#include <stdexcept>
#include <string>

namespace mialab {

/// Base class for every error raised by the library. The CLI maps each
/// subclass onto a process exit code.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Caller passed a value outside an operation's precondition.
class InputError : public Error {
public:
    using Error::Error;
};

/// Inconsistent or invalid configuration (including model/mode mismatches).
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Non-finite value in an activation, loss or gradient.
class NumericError : public Error {
public:
    using Error::Error;
};

/// Malformed file contents (checkpoints, JSONL, CSV).
class FormatError : public Error {
public:
    using Error::Error;
};

/// Filesystem failure.
class IoError : public Error {
public:
    using Error::Error;
};

/// A pipeline stage was run before the stage it depends on.
class PrerequisiteError : public Error {
public:
    using Error::Error;
};

}  // namespace mialab
