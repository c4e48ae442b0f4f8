#pragma once

#include <stdexcept>
#include <string>

namespace nesbs {

// Error hierarchy shared by all modules. exit_code() gives the process exit
// status the CLI maps each category to: 2 config/contract, 3 prerequisite,
// 4 numeric.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
    virtual int exit_code() const { return 2; }
};

class ConfigError : public Error {
public:
    using Error::Error;
};

// Malformed external file (bad magic, truncation, inconsistent counts).
class FormatError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

// Shape mismatches and other caller contract violations.
class DimensionError : public Error {
public:
    using Error::Error;
};

class ContractError : public Error {
public:
    using Error::Error;
};

class IndexError : public Error {
public:
    using Error::Error;
};

// Illegal object state transitions (double backward, training a frozen net).
class StateError : public Error {
public:
    using Error::Error;
};

class CapacityError : public Error {
public:
    using Error::Error;
};

class NumericError : public Error {
public:
    using Error::Error;
    int exit_code() const override { return 4; }
};

// A pipeline phase was invoked before the phases it depends on.
class PrerequisiteError : public Error {
public:
    using Error::Error;
    int exit_code() const override { return 3; }
};

// Artifacts on disk were produced under a different configuration.
class StalenessError : public PrerequisiteError {
public:
    using PrerequisiteError::PrerequisiteError;
};

} // namespace nesbs
