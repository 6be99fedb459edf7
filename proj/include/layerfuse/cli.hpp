// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end. Exit codes: 0 ok, 2 usage or configuration error,
// 3 runtime failure (including training divergence).
#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace layerfuse::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitRuntime = 3;

/// Default worker count: LAYERFUSE_WORKERS when set to a positive integer, else 1.
int default_workers();

/// Runs one invocation; args excludes the program name.
int run(const std::vector<std::string> &args, std::ostream &out, std::ostream &err);

} // namespace layerfuse::cli
