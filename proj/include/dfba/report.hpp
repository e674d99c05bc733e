#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "dfba/experiment.hpp"

namespace dfba {

inline constexpr const char* kReportVersion = "dfba-report/1";

/// run_id, seed, lambda, gamma, trigger_h, trigger_w, CA, BA, ASR, clean_activations,
/// backdoored_activations, surgery_ms, defense, defense_param, ACC_after, ASR_after
const std::vector<std::string>& csv_columns();

/// A CSV report: a version line, one `# config <hash>` line per contributing
/// config, the header, then the rows.
struct CsvReport {
    std::vector<std::string> config_hashes;
    std::vector<ReportRow> rows;

    std::string to_csv() const;
    static CsvReport parse(const std::string& text);
};

CsvReport make_report(const ExperimentResult& result, bool record_timing);

/// Concatenates reports in the given order; hashes are kept once each, first seen first.
CsvReport merge_reports(const std::vector<CsvReport>& reports);

/// Human-readable table of the rows plus a per-defense digest.
std::string summarize(const CsvReport& report);

/// Writes results.csv, summary.txt, config.txt and one `<run>.<defense>.txt` per defense report.
void write_outputs(const ExperimentResult& result, const ExperimentConfig& cfg);

} // namespace dfba
