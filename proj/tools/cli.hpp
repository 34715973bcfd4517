#pragma once

namespace mlsae::cli {

/// Parses argv and runs one subcommand. Returns the process exit status.
int run(int argc, char** argv);

}  // namespace mlsae::cli
