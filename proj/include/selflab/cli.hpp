#pragma once

namespace selflab {

/// Subcommands: solve | run | gen-synthetic | eval | inspect-bank.
/// Returns 0 on success, 1 on operational failure, 2 on usage errors.
int cli_main(int argc, char** argv);

}  // namespace selflab
