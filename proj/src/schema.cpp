#include "corrdst/schema.hpp"

#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "corrdst/dialogue.hpp"
#include "corrdst/errors.hpp"

namespace corrdst {

SchemaTable SchemaTable::from_json(const nlohmann::json& doc) {
    if (!doc.is_object()) throw ValidationError("schema: top level must be an object of domains");
    SchemaTable table;
    for (const auto& [domain, slots] : doc.items()) {
        if (!slots.is_object()) throw ValidationError("schema: domain '" + domain + "' must map to an object");
        if (slots.empty()) throw ValidationError("schema: domain '" + domain + "' has no slots");
        for (const auto& [slot, spec] : slots.items()) {
            if (!spec.is_object()) {
                throw ValidationError("schema: slot '" + domain + "-" + slot + "' must be an object");
            }
            SlotSpec s;
            s.name = slot;
            s.description = spec.value("description", std::string{});
            if (spec.contains("values")) {
                for (const auto& v : spec.at("values")) s.values.push_back(normalize_value(v.get<std::string>()));
            }
            table.add_slot(domain, std::move(s));
        }
    }
    return table;
}

SchemaTable SchemaTable::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open schema file " + path.string());
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw ValidationError("schema file " + path.string() + ": " + e.what());
    }
    return from_json(doc);
}

void SchemaTable::add_slot(std::string_view domain, SlotSpec spec) {
    std::string d = normalize_value(domain);
    spec.name = normalize_value(spec.name);
    if (d.find('-') != std::string::npos) throw ValidationError("schema: domain name '" + d + "' contains '-'");
    std::string name = spec.name;
    slot_domain(d + "-" + name);
    domains_[d][name] = std::move(spec);
}

bool SchemaTable::has_domain(std::string_view domain) const {
    return domains_.find(std::string(domain)) != domains_.end();
}

bool SchemaTable::has_slot(std::string_view qualified_slot) const { return find_slot(qualified_slot) != nullptr; }

const SlotSpec* SchemaTable::find_slot(std::string_view qualified_slot) const {
    auto dash = qualified_slot.find('-');
    if (dash == std::string_view::npos) return nullptr;
    auto d = domains_.find(std::string(qualified_slot.substr(0, dash)));
    if (d == domains_.end()) return nullptr;
    auto s = d->second.find(std::string(qualified_slot.substr(dash + 1)));
    return s == d->second.end() ? nullptr : &s->second;
}

std::vector<std::string> SchemaTable::qualified_slots() const {
    std::vector<std::string> out;
    for (const auto& [domain, slots] : domains_) {
        for (const auto& [name, _] : slots) out.push_back(domain + "-" + name);
    }
    return out;
}

std::set<std::string> SchemaTable::domains() const {
    std::set<std::string> out;
    for (const auto& [domain, _] : domains_) out.insert(domain);
    return out;
}

}  // namespace corrdst
