// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace dprobe {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Invalid configuration value or malformed config file (CLI exit code 2).
class ConfigError : public Error {
public:
    using Error::Error;
};

class ShapeError : public Error {
public:
    using Error::Error;
};

class IndexError : public Error {
public:
    using Error::Error;
};

/// A caller broke an API contract, e.g. a backward call with a context from another layer.
class ContractError : public Error {
public:
    using Error::Error;
};

class NumericError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

class DataError : public Error {
public:
    using Error::Error;
};

/// A pipeline stage failed; carries the stage name (CLI exit code 3).
class StageError : public Error {
public:
    StageError(std::string stage, const std::string& what)
        : Error("stage '" + stage + "' failed: " + what), stage_(std::move(stage)) {}
    const std::string& stage() const noexcept { return stage_; }

private:
    std::string stage_;
};

}  // namespace dprobe
