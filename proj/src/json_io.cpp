#include "corrdst/json_io.hpp"

#include <fstream>
#include <sstream>

#include "corrdst/errors.hpp"

namespace corrdst {

namespace {

template <typename Set>
nlohmann::json set_to_json(const Set& set) {
    nlohmann::json obj = nlohmann::json::object();
    for (const auto& [slot, value] : set) obj[slot] = value;
    return obj;
}

template <typename Set>
Set set_from_json(const nlohmann::json& obj) {
    if (obj.is_null()) return {};
    if (!obj.is_object()) throw ValidationError("expected an object of slot/value pairs");
    Set out;
    for (const auto& [slot, value] : obj.items()) {
        if (!value.is_string()) throw ValidationError("value of slot '" + slot + "' is not a string");
        out.set(slot, value.template get<std::string>());
    }
    return out;
}

}  // namespace

nlohmann::json to_json(const TurnBelief& tlb) { return set_to_json(tlb); }
nlohmann::json to_json(const DialogueState& state) { return set_to_json(state); }

TurnBelief tlb_from_json(const nlohmann::json& obj) { return set_from_json<TurnBelief>(obj); }
DialogueState state_from_json(const nlohmann::json& obj) { return set_from_json<DialogueState>(obj); }

std::vector<nlohmann::json> read_jsonl(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open " + path.string());
    std::vector<nlohmann::json> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            out.push_back(nlohmann::json::parse(line));
        } catch (const nlohmann::json::parse_error& e) {
            throw ParseError(path.string(), lineno, e.what());
        }
    }
    return out;
}

void write_file(const std::filesystem::path& path, std::string_view text) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw Error("cannot write " + tmp.string());
        out.write(text.data(), static_cast<std::streamsize>(text.size()));
        if (!out) throw Error("write failed for " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::string dump_line(const nlohmann::json& j) { return j.dump(-1, ' ', false, nlohmann::json::error_handler_t::replace); }

}  // namespace corrdst
