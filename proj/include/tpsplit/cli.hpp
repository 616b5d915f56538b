// Command-line front end: phantom | cae-train | fit | train | sweep | eval | export.

#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace tpsplit {

inline constexpr const char* kToolVersion = "0.1.0";

/// Runs one command line (without the program name). Returns the process
/// exit status: 0 on success, 2 on usage errors, 1 on any other failure.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Appends one run record to `dir`/manifest.json, creating it when absent.
void append_manifest(const std::filesystem::path& dir, const nlohmann::json& run);

/// Phantom directories below `dir` (those holding a params.json), sorted by name.
std::vector<std::filesystem::path> phantom_dirs(const std::filesystem::path& dir);

}  // namespace tpsplit
