#pragma once

#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json_fwd.hpp>

namespace corrdst {

struct SlotSpec {
    std::string name;         // bare slot name, e.g. "area"
    std::string description;
    std::vector<std::string> values;  // categorical values; empty for free-form slots
};

/// Domains and their slots. Iteration order is lexicographic by domain, then
/// by slot name, so any text rendered from a table is deterministic.
///
/// File format: {"domain": {"slot": {"description": str, "values": [str]?}}}
class SchemaTable {
public:
    SchemaTable() = default;

    static SchemaTable from_json(const nlohmann::json& doc);
    static SchemaTable load(const std::filesystem::path& path);

    /// Adds or replaces a slot. Names are normalized to lowercase.
    void add_slot(std::string_view domain, SlotSpec spec);

    bool has_domain(std::string_view domain) const;
    bool has_slot(std::string_view qualified_slot) const;
    const SlotSpec* find_slot(std::string_view qualified_slot) const;

    /// Every qualified "domain-slot" name, in canonical order.
    std::vector<std::string> qualified_slots() const;
    std::set<std::string> domains() const;

    const std::map<std::string, std::map<std::string, SlotSpec>>& table() const { return domains_; }
    bool empty() const { return domains_.empty(); }

private:
    std::map<std::string, std::map<std::string, SlotSpec>> domains_;
};

}  // namespace corrdst
