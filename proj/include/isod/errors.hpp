#pragma once

#include <stdexcept>
#include <string>

namespace isod {

// Raster or region dimensions that do not fit together.
class DimensionError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// A file or container could not be read back.
class LoadError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Text input (roi.txt, CSV, JSON) that does not follow its grammar.
class ParseError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Configuration rejected during validation; `path` names the offending field.
class ConfigError : public std::runtime_error {
public:
    ConfigError(std::string path, std::string message)
        : std::runtime_error(path + ": " + message), path_(std::move(path)), message_(std::move(message)) {}
    const std::string& path() const noexcept { return path_; }
    const std::string& message() const noexcept { return message_; }

private:
    std::string path_;
    std::string message_;
};

// Too few valid pixels to summarize a strain field.
class InsufficientDataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

} // namespace isod
