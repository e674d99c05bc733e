#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "dfba/report.hpp"
#include "text.hpp"

namespace dfba {

namespace {

std::string fmt(const char* spec, double v)
{
    char buf[64];
    std::snprintf(buf, sizeof buf, spec, v);
    return buf;
}

std::string field(const std::string& s)
{
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) out += c == '"' ? std::string("\"\"") : std::string(1, c);
    return out + "\"";
}

std::vector<std::string> split_csv(const std::string& line)
{
    std::vector<std::string> out(1);
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char c = line[i];
        if (quoted) {
            if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') out.back() += '"', ++i;
            else if (c == '"') quoted = false;
            else out.back() += c;
        } else if (c == '"') quoted = true;
        else if (c == ',') out.emplace_back();
        else out.back() += c;
    }
    return out;
}

std::optional<double> opt(const std::string& s)
{
    if (s.empty()) return std::nullopt;
    return text::parse_double(s);
}

std::string safe_name(const std::string& s)
{
    std::string out = s;
    for (char& c : out)
        if (!std::isalnum(static_cast<unsigned char>(c)) && c != '.' && c != '-' && c != '_') c = '_';
    return out;
}

void write_file(const std::filesystem::path& p, const std::string& body)
{
    std::ofstream out(p, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + p.string());
    out << body;
}

} // namespace

const std::vector<std::string>& csv_columns()
{
    static const std::vector<std::string> cols{
        "run_id", "seed", "lambda", "gamma", "trigger_h", "trigger_w", "CA", "BA", "ASR", "clean_activations",
        "backdoored_activations", "surgery_ms", "defense", "defense_param", "ACC_after", "ASR_after"};
    return cols;
}

std::string CsvReport::to_csv() const
{
    std::ostringstream os;
    os << "# " << kReportVersion << '\n';
    for (const auto& h : config_hashes) os << "# config " << h << '\n';
    const auto& cols = csv_columns();
    for (std::size_t i = 0; i < cols.size(); ++i) os << (i ? "," : "") << cols[i];
    os << '\n';
    auto o = [](const std::optional<double>& v, const char* spec) { return v ? fmt(spec, *v) : std::string(); };
    for (const auto& r : rows) {
        os << field(r.run_id) << ',' << r.seed << ',' << fmt("%.9g", r.lambda) << ',' << fmt("%.9g", r.gamma) << ','
           << r.trigger_h << ',' << r.trigger_w << ',' << fmt("%.6f", r.ca) << ',' << fmt("%.6f", r.ba) << ','
           << fmt("%.6f", r.asr) << ',' << r.clean_activations << ',' << r.backdoored_activations << ','
           << o(r.surgery_ms, "%.3f") << ',' << field(r.defense) << ',' << field(r.defense_param) << ','
           << o(r.acc_after, "%.6f") << ',' << o(r.asr_after, "%.6f") << '\n';
    }
    return os.str();
}

CsvReport CsvReport::parse(const std::string& body)
{
    CsvReport r;
    std::istringstream is(body);
    std::string line;
    bool version = false, header = false;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        if (line.rfind("# config ", 0) == 0) {
            r.config_hashes.push_back(line.substr(9));
            continue;
        }
        if (line[0] == '#') {
            if (line != std::string("# ") + kReportVersion)
                throw std::runtime_error("unsupported report version line '" + line + "'");
            version = true;
            continue;
        }
        const auto f = split_csv(line);
        if (!header) {
            if (f != csv_columns()) throw std::runtime_error("report header does not match the expected columns");
            header = true;
            continue;
        }
        if (f.size() != csv_columns().size())
            throw std::runtime_error("report line " + std::to_string(lineno) + " has " + std::to_string(f.size()) +
                                     " fields");
        ReportRow row;
        row.run_id = f[0];
        row.seed = text::parse_size(f[1]);
        row.lambda = text::parse_double(f[2]);
        row.gamma = text::parse_double(f[3]);
        row.trigger_h = text::parse_size(f[4]);
        row.trigger_w = text::parse_size(f[5]);
        row.ca = text::parse_double(f[6]);
        row.ba = text::parse_double(f[7]);
        row.asr = text::parse_double(f[8]);
        row.clean_activations = text::parse_size(f[9]);
        row.backdoored_activations = text::parse_size(f[10]);
        row.surgery_ms = opt(f[11]);
        row.defense = f[12];
        row.defense_param = f[13];
        row.acc_after = opt(f[14]);
        row.asr_after = opt(f[15]);
        r.rows.push_back(row);
    }
    if (!version) throw std::runtime_error(std::string("missing '# ") + kReportVersion + "' line");
    if (!header) throw std::runtime_error("missing report header");
    return r;
}

CsvReport make_report(const ExperimentResult& result, bool record_timing)
{
    CsvReport r;
    r.config_hashes.push_back(result.config_hash);
    for (const auto& run : result.runs)
        for (auto& row : run.rows(record_timing)) r.rows.push_back(std::move(row));
    return r;
}

CsvReport merge_reports(const std::vector<CsvReport>& reports)
{
    CsvReport out;
    for (const auto& r : reports) {
        for (const auto& h : r.config_hashes)
            if (std::find(out.config_hashes.begin(), out.config_hashes.end(), h) == out.config_hashes.end())
                out.config_hashes.push_back(h);
        out.rows.insert(out.rows.end(), r.rows.begin(), r.rows.end());
    }
    return out;
}

std::string summarize(const CsvReport& report)
{
    std::ostringstream os;
    os << kReportVersion << " summary\n";
    for (const auto& h : report.config_hashes) os << "config " << h << '\n';
    char line[256];
    std::snprintf(line, sizeof line, "%-22s %-18s %7s %7s %7s %9s %9s %9s %9s\n", "run", "defense", "CA", "BA", "ASR",
                  "clean_act", "bd_act", "ACC_after", "ASR_after");
    os << line;
    auto pct = [](const std::optional<double>& v) { return v ? fmt("%.2f", 100.0 * *v) : std::string("-"); };
    double worst_asr = 1.0, worst_gap = 0.0;
    std::size_t attacks = 0;
    for (const auto& r : report.rows) {
        std::snprintf(line, sizeof line, "%-22s %-18s %7.2f %7.2f %7.2f %9zu %9zu %9s %9s\n", r.run_id.c_str(),
                      r.defense.c_str(), 100.0 * r.ca, 100.0 * r.ba, 100.0 * r.asr, r.clean_activations,
                      r.backdoored_activations, pct(r.acc_after).c_str(), pct(r.asr_after).c_str());
        os << line;
        if (r.defense == "none") {
            ++attacks;
            worst_asr = std::min(worst_asr, r.asr);
            worst_gap = std::max(worst_gap, r.ca - r.ba);
        }
    }
    if (attacks) {
        os << "attacks " << attacks << ", lowest ASR " << fmt("%.2f", 100.0 * worst_asr) << "%, largest CA-BA gap "
           << fmt("%.2f", 100.0 * worst_gap) << " points\n";
    }
    return os.str();
}

void write_outputs(const ExperimentResult& result, const ExperimentConfig& cfg)
{
    std::filesystem::create_directories(cfg.output);
    const CsvReport report = make_report(result, cfg.record_timing);
    write_file(cfg.output / "results.csv", report.to_csv());
    std::string summary = summarize(report);
    for (const auto& run : result.runs) {
        summary += "surgery " + run.run_id + " " + fmt("%.3f", run.surgery_ms) + " ms\n";
        for (const auto& d : run.defenses) {
            summary += "defense " + run.run_id + " " + d.defense + ": " + d.verdict;
            if (!d.verdict_metric.empty() && d.metrics.count(d.verdict_metric))
                summary += " (" + d.verdict_metric + " " + fmt("%.6g", d.metrics.at(d.verdict_metric)) + ")";
            summary += '\n';
            DefenseReport tagged = d;
            tagged.params["config_hash"] = result.config_hash;
            tagged.params["run"] = run.run_id;
            write_file(cfg.output / (safe_name(run.run_id) + "." + safe_name(d.defense) + ".txt"), tagged.to_text());
        }
    }
    write_file(cfg.output / "summary.txt", summary);
    write_file(cfg.output / "config.txt", "# config " + result.config_hash + "\n" + cfg.canonical());
}

} // namespace dfba
