// Copyright 2026 The quad2lin Authors.
// SPDX-License-Identifier: Apache-2.0

// Command-line entry point.

#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace q2l {

/// Exit codes of run_cli.
inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 1;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitRuntime = 3;

/// `args` excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace q2l
