#pragma once

#include <stdexcept>
#include <string>

namespace dtune {

// Every error raised by the library derives from Error so callers (the CLI in
// particular) can map them to a stable machine-readable kind.
class Error : public std::runtime_error {
public:
    Error(std::string kind, const std::string& what)
        : std::runtime_error(what), kind_(std::move(kind)) {}
    const std::string& kind() const noexcept { return kind_; }

private:
    std::string kind_;
};

/// Violated precondition on shapes, ids or dimensions.
class ContractError : public Error {
public:
    explicit ContractError(const std::string& what) : Error("contract", what) {}
};

class RangeError : public Error {
public:
    explicit RangeError(const std::string& what) : Error("range", what) {}
};

/// A sprite context that would leave the canvas.
class BoundsError : public Error {
public:
    explicit BoundsError(const std::string& what) : Error("bounds", what) {}
};

class IoError : public Error {
public:
    explicit IoError(const std::string& what) : Error("io", what) {}
};

/// On-disk artifact does not match its manifest.
class CorruptionError : public Error {
public:
    explicit CorruptionError(const std::string& what) : Error("corruption", what) {}
};

/// Checkpoint parameter set does not match the model being loaded into.
class StructureError : public Error {
public:
    explicit StructureError(const std::string& what) : Error("structure", what) {}
};

/// Config failed schema validation. `path()` is the first offending key path.
class ValidationError : public Error {
public:
    ValidationError(std::string path, const std::string& what)
        : Error("validation", what), path_(std::move(path)) {}
    const std::string& path() const noexcept { return path_; }

private:
    std::string path_;
};

/// Training diverged (non-finite loss).
class NumericError : public Error {
public:
    explicit NumericError(const std::string& what) : Error("numeric", what) {}
};

class UnsupportedError : public Error {
public:
    explicit UnsupportedError(const std::string& what) : Error("unsupported", what) {}
};

}  // namespace dtune
