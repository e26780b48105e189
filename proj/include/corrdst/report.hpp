#pragma once

#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "corrdst/lm_backend.hpp"
#include "corrdst/metrics.hpp"

namespace corrdst::cli {

enum class ReportStyle { Table, Json };

ReportStyle parse_report_style(std::string_view name);

/// One system row, e.g. "first-pass" or "two-pass".
struct ReportRow {
    std::string system;
    metrics::MetricsReport report;
};

/// A fraction as a percentage with two decimals: 0.5 -> "50.00".
std::string percent(double fraction);

nlohmann::json scores_to_json(const metrics::Scores& s);
metrics::Scores scores_from_json(const nlohmann::json& j);

/// {"rows": [{"system", "overall", "categories"}], "ledger": {...}}
nlohmann::json report_to_json(const std::vector<ReportRow>& rows, const lm::LedgerSnapshot& ledger);
std::vector<ReportRow> rows_from_json(const nlohmann::json& j);

/// Table: "JGA / F1" cells per row for DST and TLB, a per-category DST
/// section and a cost section. Json: report_to_json dumped with sorted keys.
std::string format_report(const std::vector<ReportRow>& rows, const lm::LedgerSnapshot& ledger, ReportStyle style);
std::string format_report(const metrics::MetricsReport& report, const lm::LedgerSnapshot& ledger, ReportStyle style);

}  // namespace corrdst::cli
