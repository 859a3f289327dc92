#pragma once

#include <stdexcept>
#include <string>

namespace vehids {

// Broad failure classes. The CLI maps them onto process exit codes:
// usage/config -> 1, data -> 2, numeric -> 3.
enum class ErrorKind {
    config,
    data,
    numeric,
};

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

struct ConfigError : Error {
    explicit ConfigError(const std::string& what) : Error(ErrorKind::config, what) {}
};

// Malformed input files, schema mismatches, parse failures.
struct DataError : Error {
    explicit DataError(const std::string& what) : Error(ErrorKind::data, what) {}
};

// Row-level parse failure; line is 1-based.
struct ParseError : DataError {
    ParseError(std::size_t line, const std::string& what)
        : DataError("line " + std::to_string(line) + ": " + what), line(line) {}
    std::size_t line;
};

// Tensor or vector length does not match what the callee expects.
struct ShapeError : Error {
    explicit ShapeError(const std::string& what) : Error(ErrorKind::data, what) {}
};

struct NumericError : Error {
    explicit NumericError(const std::string& what) : Error(ErrorKind::numeric, what) {}
};

// Artifact failed hash or structural verification.
struct CorruptionError : DataError {
    explicit CorruptionError(const std::string& what) : DataError(what) {}
};

struct VersionError : DataError {
    explicit VersionError(const std::string& what) : DataError(what) {}
};

int exit_code_for(const Error& e) noexcept;

} // namespace vehids
