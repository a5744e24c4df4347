#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace color {

// Process exit codes used by the CLI. Each error family maps to one code.
enum class ExitCode : int {
    ok = 0,
    config = 2,
    data = 3,
    numeric = 4,
    io = 5,
};

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
    virtual ExitCode exit_code() const noexcept { return ExitCode::config; }
};

// Violated precondition of a library call (bad rank, empty router, ...).
class ContractError : public Error {
public:
    using Error::Error;
};

class ShapeError : public ContractError {
public:
    using ContractError::ContractError;
};

class AdapterError : public ShapeError {
public:
    using ShapeError::ShapeError;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class DataError : public Error {
public:
    using Error::Error;
    ExitCode exit_code() const noexcept override { return ExitCode::data; }
};

class NumericError : public Error {
public:
    using Error::Error;
    ExitCode exit_code() const noexcept override { return ExitCode::numeric; }
};

class IoError : public Error {
public:
    using Error::Error;
    ExitCode exit_code() const noexcept override { return ExitCode::io; }
};

// Malformed or truncated checkpoint; carries the byte offset where parsing failed.
class FormatError : public IoError {
public:
    FormatError(const std::string& what, std::uint64_t offset)
        : IoError(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}
    std::uint64_t offset() const noexcept { return offset_; }

private:
    std::uint64_t offset_;
};

class VersionError : public IoError {
public:
    using IoError::IoError;
};

}  // namespace color
