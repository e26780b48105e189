#pragma once

#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "corrdst/pipeline.hpp"
#include "corrdst/report.hpp"

namespace corrdst::cli {

struct CliConfig {
    pipeline::RunConfig run;
    ReportStyle report_style = ReportStyle::Table;
    /// Input for "evaluate"; defaults to the newest predictions in the output directory.
    std::optional<std::filesystem::path> predictions;
};

/// snake_case key -> raw string value, as given on the command line or in the environment.
using Overrides = std::map<std::string, std::string>;

/// Every accepted configuration key, in snake_case.
const std::vector<std::string>& config_keys();

const std::vector<std::string>& commands();

/// Collects CORRDST_<KEY> variables. Unknown keys raise ValidationError.
Overrides environment_overrides(char** envp);

/// Merges file < env < flags. Relative paths in the file resolve against the
/// file's directory, the others against the working directory. Throws
/// ValidationError naming the offending key for unknown keys, type mismatches
/// and missing required keys.
CliConfig load_config(const std::optional<std::filesystem::path>& path, const Overrides& flags,
                      const Overrides& env = {});

/// Runs one command. Returns 0 on success, 1 on validation or dependency
/// errors, 2 on runtime and backend errors.
int dispatch(const std::string& command, const CliConfig& cfg, std::ostream& out, std::ostream& err);

/// Full command-line entry: parses argv, loads the config, dispatches.
int run_main(int argc, char** argv, char** envp, std::ostream& out, std::ostream& err);

}  // namespace corrdst::cli
