#pragma once

#include <string>
#include <vector>

namespace pretrain {

// Process exit codes, one per failure class.
enum ExitCode : int {
    kOk = 0,
    kUsage = 2,         // bad flags, malformed or unknown config keys
    kMissingInput = 3,  // missing file or missing pipeline dependency
    kValidation = 4,    // config/checkpoint/objective mismatches
    kRuntime = 5,
};

// Dispatches one subcommand: build-vocab, train-embeddings, cluster,
// pretrain, probe, flops, gen-corpus. args excludes the program name.
int run_cli(const std::vector<std::string>& args);

}  // namespace pretrain
