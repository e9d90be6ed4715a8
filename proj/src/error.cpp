// SPDX-License-Identifier: Apache-2.0
#include "ckptmerge/error.hpp"

namespace ckptmerge {

std::string_view error_kind_name(ErrorKind kind) {
    switch (kind) {
    case ErrorKind::Format: return "FormatError";
    case ErrorKind::Key: return "KeyError";
    case ErrorKind::Config: return "ConfigError";
    case ErrorKind::Capacity: return "CapacityError";
    case ErrorKind::ShapeMismatch: return "ShapeMismatch";
    case ErrorKind::DegenerateWeights: return "DegenerateWeights";
    case ErrorKind::UnknownArchitecture: return "UnknownArchitecture";
    case ErrorKind::Cycle: return "CycleError";
    case ErrorKind::Internal: return "InternalError";
    }
    return "InternalError";
}

Error Error::with_context(std::string_view context) const {
    std::string msg(context);
    msg += ": ";
    msg += what();
    return Error(kind_, msg);
}

} // namespace ckptmerge
