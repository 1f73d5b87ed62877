#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>

#include "decontext/json.hpp"

namespace decontext::cli {

enum ExitCode : int { kOk = 0, kUsage = 2, kNumeric = 3, kIo = 4 };

/// Every command takes a JSON config, writes its artifacts plus a
/// `manifest.json` into config["output_dir"], and reports created paths on
/// `out`. The manifest records {"command", "config"} with the config fully
/// resolved, so `replay` can re-run it.
Json run_train(const Json& config, std::ostream& out);
Json run_attack(const Json& config, std::ostream& out);
Json run_grad_profile(const Json& config, std::ostream& out);
Json run_block_scan(const Json& config, std::ostream& out);
Json run_identity(const Json& config, std::ostream& out);
Json run_sample(const Json& config, std::ostream& out);

/// Dispatches on the manifest's command name. A non-empty `output_dir`
/// replaces the recorded one.
Json run_command(const std::string& command, const Json& config, std::ostream& out);
Json replay(const std::filesystem::path& manifest, const std::filesystem::path& output_dir, std::ostream& out);

/// Reads a JSON file; a missing file or a syntax error is a ConfigError that
/// names the path (and line/column for syntax errors).
Json load_config(const std::filesystem::path& path);

/// Maps exceptions to the documented exit codes and prints the message.
int report_failure(std::ostream& err);

}  // namespace decontext::cli
