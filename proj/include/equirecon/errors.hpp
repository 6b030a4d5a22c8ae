#pragma once

#include <stdexcept>
#include <string>

namespace equirecon {

// Exception hierarchy. Each category maps to one CLI exit code.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
    virtual int exit_code() const noexcept { return 1; }
};

class ConfigError : public Error {
public:
    using Error::Error;
    int exit_code() const noexcept override { return 2; }
};

class DimensionError : public ConfigError {
public:
    using ConfigError::ConfigError;
};

class DomainError : public ConfigError {
public:
    using ConfigError::ConfigError;
};

class DataError : public Error {
public:
    using Error::Error;
    int exit_code() const noexcept override { return 3; }
};

class ParseError : public DataError {
public:
    ParseError(const std::string& what, std::size_t offset)
        : DataError(what + " (at byte offset " + std::to_string(offset) + ")"), message_(what), offset_(offset) {}
    std::size_t offset() const noexcept { return offset_; }
    const std::string& message() const noexcept { return message_; }

private:
    std::string message_;
    std::size_t offset_;
};

class ValidationError : public DataError {
public:
    using DataError::DataError;
};

class GenerationError : public DataError {
public:
    GenerationError(const std::string& what, double best)
        : DataError(what + " (best achieved factor " + std::to_string(best) + ")"), best_(best) {}
    double best_achieved() const noexcept { return best_; }

private:
    double best_;
};

class NumericError : public Error {
public:
    using Error::Error;
    int exit_code() const noexcept override { return 4; }
};

class StateError : public Error {
public:
    using Error::Error;
};

} // namespace equirecon
