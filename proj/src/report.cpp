#include "corrdst/report.hpp"

#include <algorithm>
#include <cstdio>
#include <sstream>

#include "corrdst/errors.hpp"

namespace corrdst::cli {

namespace {

constexpr metrics::DomainCategory kCategories[] = {metrics::DomainCategory::InDomain,
                                                   metrics::DomainCategory::HalfOOD, metrics::DomainCategory::OOD};

std::string pad(std::string s, std::size_t width) {
    if (s.size() < width) s.append(width - s.size(), ' ');
    return s;
}

std::string cell(double jga, double f1) { return percent(jga) + " / " + percent(f1); }

std::string fixed(double v, int decimals) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
    return buf;
}

}  // namespace

ReportStyle parse_report_style(std::string_view name) {
    if (name == "table") return ReportStyle::Table;
    if (name == "json") return ReportStyle::Json;
    throw ValidationError("unknown report format '" + std::string(name) + "' (expected table or json)");
}

std::string percent(double fraction) { return fixed(fraction * 100.0, 2); }

nlohmann::json scores_to_json(const metrics::Scores& s) {
    return {{"dst_jga", s.dst_jga}, {"dst_f1", s.dst_f1}, {"tlb_jga", s.tlb_jga},
            {"tlb_f1", s.tlb_f1},   {"turns", s.turns}};
}

metrics::Scores scores_from_json(const nlohmann::json& j) {
    metrics::Scores s;
    s.dst_jga = j.at("dst_jga").get<double>();
    s.dst_f1 = j.at("dst_f1").get<double>();
    s.tlb_jga = j.at("tlb_jga").get<double>();
    s.tlb_f1 = j.at("tlb_f1").get<double>();
    s.turns = j.at("turns").get<std::size_t>();
    return s;
}

nlohmann::json report_to_json(const std::vector<ReportRow>& rows, const lm::LedgerSnapshot& ledger) {
    nlohmann::json out = {{"rows", nlohmann::json::array()}, {"ledger", lm::ledger_to_json(ledger)}};
    for (const auto& row : rows) {
        nlohmann::json cats = nlohmann::json::object();
        for (const auto& [c, s] : row.report.categories) cats[std::string(metrics::to_string(c))] = scores_to_json(s);
        out["rows"].push_back(
            {{"system", row.system}, {"overall", scores_to_json(row.report.overall)}, {"categories", cats}});
    }
    return out;
}

std::vector<ReportRow> rows_from_json(const nlohmann::json& j) {
    std::vector<ReportRow> rows;
    try {
        for (const auto& r : j.at("rows")) {
            ReportRow row;
            row.system = r.at("system").get<std::string>();
            row.report.overall = scores_from_json(r.at("overall"));
            for (const auto c : kCategories) {
                const std::string key(metrics::to_string(c));
                if (r.contains("categories") && r["categories"].contains(key)) {
                    row.report.categories[c] = scores_from_json(r["categories"][key]);
                }
            }
            rows.push_back(std::move(row));
        }
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("malformed report: ") + e.what());
    }
    return rows;
}

std::string format_report(const std::vector<ReportRow>& rows, const lm::LedgerSnapshot& ledger, ReportStyle style) {
    if (style == ReportStyle::Json) return report_to_json(rows, ledger).dump(2) + "\n";

    std::size_t name_w = 6;
    for (const auto& r : rows) name_w = std::max(name_w, r.system.size());
    name_w += 2;
    constexpr std::size_t cell_w = 18;

    std::ostringstream out;
    out << pad("System", name_w) << pad("DST JGA / F1", cell_w) << pad("TLB JGA / F1", cell_w) << "Turns\n";
    for (const auto& r : rows) {
        const auto& s = r.report.overall;
        out << pad(r.system, name_w) << pad(cell(s.dst_jga, s.dst_f1), cell_w) << pad(cell(s.tlb_jga, s.tlb_f1), cell_w)
            << s.turns << "\n";
    }

    bool any_categories = false;
    for (const auto& r : rows) any_categories = any_categories || !r.report.categories.empty();
    if (any_categories) {
        out << "\nDST JGA / F1 by domain category\n" << pad("System", name_w);
        for (const auto c : kCategories) out << pad(std::string(metrics::to_string(c)), cell_w + 6);
        out << "\n";
        for (const auto& r : rows) {
            out << pad(r.system, name_w);
            for (const auto c : kCategories) {
                auto it = r.report.categories.find(c);
                out << pad(it == r.report.categories.end() ? "-" : cell(it->second.dst_jga, it->second.dst_f1) + " (" +
                                                                         std::to_string(it->second.turns) + ")",
                           cell_w + 6);
            }
            out << "\n";
        }
    }

    if (!ledger.empty()) {
        std::size_t id_w = 7;
        for (const auto& [id, t] : ledger) id_w = std::max(id_w, id.size());
        id_w += 2;
        out << "\nCost\n"
            << pad("Backend", id_w) << pad("Calls", 8) << pad("Prompt tok", 12) << pad("Compl tok", 11)
            << pad("Errors", 8) << pad("Retries", 9) << "TeraFLOPs\n";
        lm::LedgerTotals sum;
        double flops = 0.0;
        for (const auto& [id, t] : ledger) {
            out << pad(id, id_w) << pad(std::to_string(t.calls), 8) << pad(std::to_string(t.prompt_tokens), 12)
                << pad(std::to_string(t.completion_tokens), 11) << pad(std::to_string(t.errors), 8)
                << pad(std::to_string(t.retries), 9) << fixed(t.teraflops(), 3) << "\n";
            sum.calls += t.calls;
            sum.prompt_tokens += t.prompt_tokens;
            sum.completion_tokens += t.completion_tokens;
            sum.errors += t.errors;
            sum.retries += t.retries;
            flops += t.flops();
        }
        out << pad("total", id_w) << pad(std::to_string(sum.calls), 8) << pad(std::to_string(sum.prompt_tokens), 12)
            << pad(std::to_string(sum.completion_tokens), 11) << pad(std::to_string(sum.errors), 8)
            << pad(std::to_string(sum.retries), 9) << fixed(flops / 1e12, 3) << "\n";
    }
    return out.str();
}

std::string format_report(const metrics::MetricsReport& report, const lm::LedgerSnapshot& ledger, ReportStyle style) {
    return format_report(std::vector<ReportRow>{{"system", report}}, ledger, style);
}

}  // namespace corrdst::cli
