#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace dfpf {

// args[0] is the program name. Returns 0 on success, 1 on a runtime failure
// and 2 on a usage error (unknown subcommand, bad flags).
int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace dfpf
