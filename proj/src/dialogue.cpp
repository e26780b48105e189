#include "corrdst/dialogue.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "corrdst/errors.hpp"
#include "corrdst/json_io.hpp"
#include "corrdst/rng.hpp"

namespace corrdst {

std::string normalize_value(std::string_view raw) {
    std::string out;
    out.reserve(raw.size());
    bool pending_space = false;
    for (unsigned char c : raw) {
        if (std::isspace(c)) {
            pending_space = !out.empty();
            continue;
        }
        if (pending_space) {
            out.push_back(' ');
            pending_space = false;
        }
        out.push_back(static_cast<char>(std::tolower(c)));
    }
    if (out.empty()) throw ValidationError("value is empty after normalization");
    return out;
}

std::string normalize_belief_value(std::string_view raw) {
    std::string v = normalize_value(raw);
    if (v == "[delete]") return std::string(kDeleteValue);
    return v;
}

std::string_view slot_domain(std::string_view qualified_slot) {
    auto dash = qualified_slot.find('-');
    if (dash == std::string_view::npos || dash == 0 || dash + 1 == qualified_slot.size()) {
        throw ValidationError("slot '" + std::string(qualified_slot) + "' is not of the form domain-slot");
    }
    if (qualified_slot.find(':') != std::string_view::npos || qualified_slot.find(';') != std::string_view::npos) {
        throw ValidationError("slot '" + std::string(qualified_slot) + "' contains a reserved character");
    }
    return qualified_slot.substr(0, dash);
}

template <bool AllowDelete>
void SlotSet<AllowDelete>::set(std::string_view slot, std::string_view value) {
    std::string s = normalize_value(slot);
    slot_domain(s);
    std::string v = normalize_belief_value(value);
    if constexpr (!AllowDelete) {
        if (v == kDeleteValue) throw ValidationError("deletion marker in dialogue state for slot '" + s + "'");
    }
    // "; " separates pairs in the rendered surface form.
    if (v.find("; ") != std::string::npos || v.ends_with(";")) {
        throw ValidationError("value '" + v + "' of slot '" + s + "' contains the pair separator");
    }
    pairs_.insert_or_assign(std::move(s), std::move(v));
}

template <bool AllowDelete>
std::set<std::string> SlotSet<AllowDelete>::domains() const {
    std::set<std::string> out;
    for (const auto& [slot, _] : pairs_) out.emplace(slot_domain(slot));
    return out;
}

template class SlotSet<true>;
template class SlotSet<false>;

DialogueState aggregate_state(const DialogueState& prev, const TurnBelief& tlb) {
    DialogueState next = prev;
    for (const auto& [slot, value] : tlb) {
        if (value == kDeleteValue) {
            next.erase(slot);
        } else {
            next.set(slot, value);
        }
    }
    return next;
}

std::vector<DialogueState> accumulate(const std::vector<TurnBelief>& tlbs) {
    std::vector<DialogueState> out;
    out.reserve(tlbs.size());
    DialogueState state;
    for (const auto& tlb : tlbs) {
        state = aggregate_state(state, tlb);
        out.push_back(state);
    }
    return out;
}

const Turn& Dialogue::turn(int t) const {
    if (t < 1 || static_cast<std::size_t>(t) > turns.size()) {
        throw ValidationError("turn " + std::to_string(t) + " out of range for dialogue '" + dialogue_id + "' with " +
                              std::to_string(turns.size()) + " turns");
    }
    return turns[static_cast<std::size_t>(t - 1)];
}

ContextWindow context_window(const Dialogue& d, int t, int width) {
    if (width < 1) throw ValidationError("context width must be >= 1");
    d.turn(t);
    ContextWindow ctx;
    ctx.exchanges.reserve(static_cast<std::size_t>(width));
    for (int i = t - width + 1; i <= t; ++i) {
        if (i < 1) {
            ctx.exchanges.push_back({});
        } else {
            const Turn& turn = d.turns[static_cast<std::size_t>(i - 1)];
            ctx.exchanges.push_back({turn.system_utterance, turn.user_utterance});
        }
    }
    return ctx;
}

const Dialogue* DatasetSplit::find(std::string_view dialogue_id) const {
    for (const auto& d : dialogues) {
        if (d.dialogue_id == dialogue_id) return &d;
    }
    return nullptr;
}

std::size_t DatasetSplit::turn_count() const {
    std::size_t n = 0;
    for (const auto& d : dialogues) n += d.turns.size();
    return n;
}

std::string example_id(std::string_view dialogue_id, int turn) {
    return std::string(dialogue_id) + ":" + std::to_string(turn);
}

namespace {

std::string describe_diff(const DialogueState& expected, const DialogueState& actual) {
    std::ostringstream os;
    bool first = true;
    auto note = [&](const std::string& what) {
        os << (first ? "" : ", ") << what;
        first = false;
    };
    for (const auto& [slot, value] : expected) {
        auto got = actual.get(slot);
        if (!got) note("missing " + slot);
        else if (*got != value) note(slot + " differs");
    }
    for (const auto& [slot, _] : actual) {
        if (!expected.contains(slot)) note("unexpected " + slot);
    }
    return os.str();
}

template <typename Set>
void check_slots(const Set& set, const SchemaTable& schema, std::string_view source, std::size_t lineno) {
    for (const auto& [slot, _] : set) {
        if (!schema.has_slot(slot)) {
            throw ParseError(std::string(source), lineno, "unknown slot '" + slot + "'");
        }
    }
}

Dialogue parse_dialogue(const nlohmann::json& obj, const SchemaTable& schema, const LoadOptions& options,
                        std::string_view source, std::size_t lineno, std::vector<std::string>& warnings) {
    auto fail = [&](const std::string& what) { return ParseError(std::string(source), lineno, what); };
    if (!obj.is_object()) throw fail("expected a dialogue object");
    if (!obj.contains("dialogue_id") || !obj["dialogue_id"].is_string()) throw fail("missing string 'dialogue_id'");
    if (!obj.contains("turns") || !obj["turns"].is_array()) throw fail("missing array 'turns'");

    Dialogue d;
    d.dialogue_id = obj["dialogue_id"].get<std::string>();
    if (d.dialogue_id.empty()) throw fail("empty 'dialogue_id'");
    if (obj["turns"].empty()) throw fail("dialogue '" + d.dialogue_id + "' has no turns");

    std::set<std::string> declared;
    if (obj.contains("domains")) {
        if (!obj["domains"].is_array()) throw fail("'domains' must be an array");
        for (const auto& dom : obj["domains"]) {
            if (!dom.is_string()) throw fail("'domains' entries must be strings");
            try {
                declared.insert(normalize_value(dom.get<std::string>()));
            } catch (const ValidationError& e) {
                throw fail(e.what());
            }
        }
    }

    int index = 0;
    for (const auto& jt : obj["turns"]) {
        ++index;
        if (!jt.is_object()) throw fail("turn " + std::to_string(index) + " is not an object");
        Turn turn;
        turn.index = index;
        try {
            turn.system_utterance = jt.value("system", std::string{});
            turn.user_utterance = jt.value("user", std::string{});
            turn.gold_tlb = tlb_from_json(jt.value("tlb", nlohmann::json::object()));
            turn.gold_state = state_from_json(jt.value("state", nlohmann::json::object()));
        } catch (const ParseError&) {
            throw;
        } catch (const std::exception& e) {
            throw fail("turn " + std::to_string(index) + ": " + e.what());
        }
        check_slots(turn.gold_tlb, schema, source, lineno);
        check_slots(turn.gold_state, schema, source, lineno);
        d.turns.push_back(std::move(turn));
    }

    std::vector<TurnBelief> tlbs;
    for (const auto& t : d.turns) tlbs.push_back(t.gold_tlb);
    const auto states = accumulate(tlbs);
    for (std::size_t i = 0; i < states.size(); ++i) {
        if (states[i] != d.turns[i].gold_state) {
            std::string msg = "dialogue '" + d.dialogue_id + "' turn " + std::to_string(i + 1) +
                              ": gold state disagrees with accumulated turn beliefs (" +
                              describe_diff(d.turns[i].gold_state, states[i]) + ")";
            if (options.strict) throw fail(msg);
            warnings.push_back(std::string(source) + ":" + std::to_string(lineno) + ": " + msg);
            break;
        }
    }

    std::set<std::string> used;
    for (const auto& t : d.turns) {
        for (const auto& dom : t.gold_state.domains()) used.insert(dom);
    }
    if (declared.empty()) {
        d.domains = used;
    } else {
        d.domains = declared;
        if (declared != used) {
            warnings.push_back(std::string(source) + ":" + std::to_string(lineno) + ": dialogue '" + d.dialogue_id +
                               "' declared domains differ from the domains of its gold states");
        }
    }
    return d;
}

}  // namespace

LoadedDataset parse_dataset(std::string_view jsonl, const SchemaTable& schema, const LoadOptions& options,
                            std::string_view source) {
    LoadedDataset out;
    out.split.name = options.name;
    std::set<std::string> ids;
    std::size_t lineno = 0;
    std::size_t pos = 0;
    while (pos <= jsonl.size()) {
        auto nl = jsonl.find('\n', pos);
        if (nl == std::string_view::npos) nl = jsonl.size();
        std::string_view line = jsonl.substr(pos, nl - pos);
        pos = nl + 1;
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
        nlohmann::json obj;
        try {
            obj = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            throw ParseError(std::string(source), lineno, e.what());
        }
        Dialogue d = parse_dialogue(obj, schema, options, source, lineno, out.warnings);
        if (!ids.insert(d.dialogue_id).second) {
            throw ParseError(std::string(source), lineno, "duplicate dialogue_id '" + d.dialogue_id + "'");
        }
        out.split.domain_set.insert(d.domains.begin(), d.domains.end());
        out.split.dialogues.push_back(std::move(d));
    }
    return out;
}

LoadedDataset load_dataset(const std::filesystem::path& path, const SchemaTable& schema, const LoadOptions& options) {
    return parse_dataset(read_file(path), schema, options, path.string());
}

DatasetSplit sample_low_resource(const DatasetSplit& split, double fraction, std::uint64_t seed) {
    if (!(fraction > 0.0 && fraction <= 1.0)) {
        throw ValidationError("fraction must lie in (0, 1], got " + std::to_string(fraction));
    }
    if (split.dialogues.empty()) throw ValidationError("cannot sample from an empty split");

    const std::size_t n = split.dialogues.size();
    // The epsilon keeps products such as 0.05 * 100 from rounding up past 5.
    auto want = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(n) - 1e-9));
    want = std::clamp<std::size_t>(want, 1, n);

    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return split.dialogues[a].dialogue_id < split.dialogues[b].dialogue_id;
    });
    Rng rng(seed, "low-resource-split");
    for (std::size_t i = 0; i < want; ++i) {
        std::swap(order[i], order[i + rng.below(n - i)]);
    }
    order.resize(want);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return split.dialogues[a].dialogue_id < split.dialogues[b].dialogue_id;
    });

    DatasetSplit out;
    out.name = split.name;
    for (auto i : order) {
        out.dialogues.push_back(split.dialogues[i]);
        out.domain_set.insert(split.dialogues[i].domains.begin(), split.dialogues[i].domains.end());
    }
    return out;
}

}  // namespace corrdst
