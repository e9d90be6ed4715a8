// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace ckptmerge {

enum class ErrorKind {
    Format,
    Key,
    Config,
    Capacity,
    ShapeMismatch,
    DegenerateWeights,
    UnknownArchitecture,
    Cycle,
    Internal,
};

/// Name used on the `ERROR <Kind>: ...` line, e.g. "FormatError".
std::string_view error_kind_name(ErrorKind kind);

/// Every failure raised by the library carries a kind so the CLI can map it to
/// an exit code without string matching.
class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& message) : std::runtime_error(message), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

    /// Same kind, message prefixed with `context: `.
    Error with_context(std::string_view context) const;

private:
    ErrorKind kind_;
};

struct FormatError : Error {
    explicit FormatError(const std::string& m) : Error(ErrorKind::Format, m) {}
};
struct KeyError : Error {
    explicit KeyError(const std::string& m) : Error(ErrorKind::Key, m) {}
};
struct ConfigError : Error {
    explicit ConfigError(const std::string& m) : Error(ErrorKind::Config, m) {}
};
struct CapacityError : Error {
    explicit CapacityError(const std::string& m) : Error(ErrorKind::Capacity, m) {}
};
struct ShapeMismatch : Error {
    explicit ShapeMismatch(const std::string& m) : Error(ErrorKind::ShapeMismatch, m) {}
};
struct DegenerateWeights : Error {
    explicit DegenerateWeights(const std::string& m) : Error(ErrorKind::DegenerateWeights, m) {}
};
struct UnknownArchitecture : Error {
    explicit UnknownArchitecture(const std::string& m) : Error(ErrorKind::UnknownArchitecture, m) {}
};
struct CycleError : Error {
    explicit CycleError(const std::string& m) : Error(ErrorKind::Cycle, m) {}
};

} // namespace ckptmerge
