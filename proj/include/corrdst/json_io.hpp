#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "corrdst/dialogue.hpp"

namespace corrdst {

nlohmann::json to_json(const TurnBelief& tlb);
nlohmann::json to_json(const DialogueState& state);

/// Object of "domain-slot": "value". Throws ValidationError on non-string values.
TurnBelief tlb_from_json(const nlohmann::json& obj);
DialogueState state_from_json(const nlohmann::json& obj);

/// Reads every non-blank line of a JSONL file. Throws ParseError with the
/// 1-based line number of the first malformed line.
std::vector<nlohmann::json> read_jsonl(const std::filesystem::path& path);

/// Writes `text` to `path` atomically enough for our purposes: to a sibling
/// temporary first, then renamed over the target.
void write_file(const std::filesystem::path& path, std::string_view text);

std::string read_file(const std::filesystem::path& path);

/// Compact single-line dump with sorted keys; stable across runs.
std::string dump_line(const nlohmann::json& j);

}  // namespace corrdst
