// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <ostream>
#include <string>
#include <vector>

#include "ckptmerge/error.hpp"

namespace ckptmerge {

/// 0 ok, 1 internal, 2 config or usage, 3 input data.
int exit_code_for(ErrorKind kind);

/// `args` excludes the program name: {"merge", recipe, out_dir, flags...}.
/// Reports and logs go to `out`; failures are one `ERROR <Kind>: <detail>`
/// line on `err`.
int run_merge(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

} // namespace ckptmerge
