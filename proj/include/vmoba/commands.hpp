#pragma once

#include "vmoba/config.hpp"

namespace vmoba {

// Subcommand bodies behind the CLI. Each writes its artifacts under
// config.out_dir and returns the process exit code: 0 success, 1 check
// failure or divergence. Config and I/O problems surface as exceptions
// (ConfigError, TensorIoError) for the entry point to map to exit codes
// 2 and 3.
int cmd_verify(const RunConfig& config);
int cmd_bench(const RunConfig& config);
int cmd_analyze(const RunConfig& config);
int cmd_train_toy(const RunConfig& config);

}  // namespace vmoba
