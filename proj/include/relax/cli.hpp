#pragma once

#include <string>
#include <vector>

namespace relax::cli {

// Entry point behind main(). Exit codes: 0 success, 1 runtime failure,
// 2 usage error.
int dispatch(const std::vector<std::string>& args);
int dispatch(int argc, char** argv);

} // namespace relax::cli
