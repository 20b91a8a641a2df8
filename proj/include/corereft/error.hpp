#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace corereft {

enum class ErrorKind {
    shape,       // dimension / shape mismatch
    argument,    // invalid argument value
    divergence,  // non-finite loss during training
    format,      // malformed or truncated file/stream
    version,     // wrong magic / container version
    config,      // bad experiment configuration
    io,          // filesystem failure
    stale_tape,  // backward called with a tape that no longer matches
};

const char* to_string(ErrorKind kind);

// Every structured failure raised by the library derives from this.
class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what)
        : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind), detail_(what) {}

    ErrorKind kind() const noexcept { return kind_; }
    // Message without the kind prefix.
    const std::string& detail() const noexcept { return detail_; }

private:
    ErrorKind kind_;
    std::string detail_;
};

class DivergenceError : public Error {
public:
    DivergenceError(std::size_t step, const std::string& what)
        : Error(ErrorKind::divergence, "step " + std::to_string(step) + ": " + what), step_(step) {}

    std::size_t step() const noexcept { return step_; }

private:
    std::size_t step_;
};

// Calls f(); a divergence raised without a step index is re-raised as a
// DivergenceError carrying `step`.
template <class F>
decltype(auto) at_step(std::size_t step, F&& f) {
    try {
        return f();
    } catch (const DivergenceError&) {
        throw;
    } catch (const Error& e) {
        if (e.kind() == ErrorKind::divergence) throw DivergenceError(step, e.detail());
        throw;
    }
}

class ConfigError : public Error {
public:
    ConfigError(std::string key, const std::string& what)
        : Error(ErrorKind::config, key.empty() ? what : "'" + key + "': " + what),
          key_(std::move(key)) {}

    const std::string& key() const noexcept { return key_; }

private:
    std::string key_;
};

inline const char* to_string(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::shape: return "shape error";
        case ErrorKind::argument: return "argument error";
        case ErrorKind::divergence: return "divergence";
        case ErrorKind::format: return "format error";
        case ErrorKind::version: return "version error";
        case ErrorKind::config: return "config error";
        case ErrorKind::io: return "io error";
        case ErrorKind::stale_tape: return "stale tape";
    }
    return "error";
}

}  // namespace corereft
