#pragma once

#include <string>
#include <vector>

namespace mlae {

/// Runs one CLI command. args excludes the program name. Returns the
/// process exit code: 0 ok, 2 config/format error, 3 training
/// divergence, 4 checkpoint corruption.
int cli_main(const std::vector<std::string>& args);

}  // namespace mlae
