#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace dsfwsi {

/// Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 invalid config.
inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitConfig = 3;

/// Runs one subcommand (synth, tile, pretrain, finetune, evaluate, report).
/// Failures print a single JSON line {"error": kind, "message": ...} on `err`.
int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int dispatch(int argc, char** argv);

}  // namespace dsfwsi
