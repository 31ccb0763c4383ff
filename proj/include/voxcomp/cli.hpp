#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include <json.hpp>

namespace voxcomp {

inline constexpr const char* kVersion = "0.1.0";

enum ExitCode : int {
    exit_ok = 0,
    exit_other = 1,
    exit_usage = 2,
    exit_data = 3,
    exit_training = 4,
    exit_evaluation = 5,
};

/// Runs one subcommand. `args` excludes the program name.
int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int dispatch(int argc, char** argv);

/// Applies "dotted.key=value" overrides to a JSON document. Values parse as
/// JSON when they can, otherwise as strings. The same key given twice with
/// different values is a ConfigError.
void apply_overrides(nlohmann::json& doc, const std::vector<std::string>& overrides);

/// Levenshtein distance, used for "did you mean" hints.
std::size_t edit_distance(const std::string& a, const std::string& b);

}  // namespace voxcomp
