#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include <nlohmann/json.hpp>

#include "mialab/common/error.hpp"
#include "mialab/common/rng.hpp"
#include "mialab/eval/eval.hpp"

namespace mialab::eval {

namespace {

std::ofstream open_out(const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + path.string());
    return out;
}

void finish(std::ofstream& out, const std::filesystem::path& path) {
    out.flush();
    if (!out) throw IoError("failed writing " + path.string());
}

std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    return cells;
}

}  // namespace

std::string format_number(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
}

void write_metrics_csv(std::span<const MetricsReport> reports, const std::filesystem::path& path) {
    auto out = open_out(path);
    out << "attack,dataset,seed,acc,recall,f1,auc,tp,fp,tn,fn\n";
    for (const auto& r : reports)
        out << r.attack << ',' << r.dataset << ',' << r.seed << ',' << format_number(r.accuracy) << ','
            << format_number(r.recall) << ',' << format_number(r.f1) << ',' << (r.auc ? format_number(*r.auc) : "NA")
            << ',' << r.tp << ',' << r.fp << ',' << r.tn << ',' << r.fn << '\n';
    finish(out, path);
}

std::vector<MetricsReport> read_metrics_csv(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::string line;
    if (!std::getline(in, line) || line != "attack,dataset,seed,acc,recall,f1,auc,tp,fp,tn,fn")
        throw FormatError(path.string() + ": unexpected header");
    std::vector<MetricsReport> out;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        const auto c = split_csv(line);
        const std::string where = path.string() + ":" + std::to_string(line_no) + ": ";
        if (c.size() != 11) throw FormatError(where + "expected 11 cells");
        try {
            MetricsReport r;
            r.attack = c[0];
            r.dataset = c[1];
            r.seed = std::stoull(c[2]);
            r.accuracy = std::stod(c[3]);
            r.recall = std::stod(c[4]);
            r.f1 = std::stod(c[5]);
            if (c[6] != "NA") r.auc = std::stod(c[6]);
            r.tp = std::stoull(c[7]);
            r.fp = std::stoull(c[8]);
            r.tn = std::stoull(c[9]);
            r.fn = std::stoull(c[10]);
            out.push_back(std::move(r));
        } catch (const std::logic_error&) {
            throw FormatError(where + "not a number");
        }
    }
    return out;
}

std::vector<std::filesystem::path> write_density_csvs(std::span<const DensityCurve> curves,
                                                      const std::filesystem::path& dir) {
    std::vector<std::filesystem::path> written;
    for (const auto& c : curves) {
        const auto path = dir / ("density_" + c.model + "_" + c.feature + "_" + c.population + ".csv");
        auto out = open_out(path);
        out << "x,density\n";
        for (std::size_t i = 0; i < c.grid.size(); ++i)
            out << format_number(c.grid[i]) << ',' << format_number(c.density[i]) << '\n';
        finish(out, path);
        written.push_back(path);
    }
    return written;
}

void write_ks_csv(std::span<const KsEntry> entries, const std::filesystem::path& path) {
    auto out = open_out(path);
    out << "model,feature,ks\n";
    for (const auto& e : entries) out << e.model << ',' << e.feature << ',' << format_number(e.ks) << '\n';
    finish(out, path);
}

void write_density_svg(std::span<const DensityCurve> curves, const std::filesystem::path& path) {
    // panels keyed by (model, feature) in first-seen order
    std::vector<std::pair<std::string, std::string>> panels;
    for (const auto& c : curves)
        if (std::find(panels.begin(), panels.end(), std::pair{c.model, c.feature}) == panels.end())
            panels.emplace_back(c.model, c.feature);
    const int pw = 260, ph = 180, pad = 30, cols = 3;
    const int rows = static_cast<int>((panels.size() + cols - 1) / cols);
    auto out = open_out(path);
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << cols * pw << "\" height=\"" << rows * ph
        << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
    for (std::size_t p = 0; p < panels.size(); ++p) {
        const int ox = static_cast<int>(p % cols) * pw, oy = static_cast<int>(p / cols) * ph;
        double x0 = 1e300, x1 = -1e300, y1 = 0.0;
        for (const auto& c : curves) {
            if (c.model != panels[p].first || c.feature != panels[p].second) continue;
            x0 = std::min(x0, c.grid.front());
            x1 = std::max(x1, c.grid.back());
            for (double d : c.density) y1 = std::max(y1, d);
        }
        if (y1 <= 0.0) y1 = 1.0;
        out << "<text x=\"" << ox + pad << "\" y=\"" << oy + 14 << "\">" << panels[p].first << " / "
            << panels[p].second << "</text>\n";
        out << "<rect x=\"" << ox + pad << "\" y=\"" << oy + 20 << "\" width=\"" << pw - 2 * pad << "\" height=\""
            << ph - pad - 20 << "\" fill=\"none\" stroke=\"#999\"/>\n";
        for (const auto& c : curves) {
            if (c.model != panels[p].first || c.feature != panels[p].second) continue;
            const char* colour = c.population == "member" ? "#c0392b" : "#2471a3";
            out << "<polyline fill=\"none\" stroke=\"" << colour << "\" points=\"";
            for (std::size_t i = 0; i < c.grid.size(); ++i) {
                const double sx = ox + pad + (c.grid[i] - x0) / (x1 - x0) * (pw - 2 * pad);
                const double sy = oy + ph - pad - c.density[i] / y1 * (ph - pad - 20);
                out << format_number(sx) << ',' << format_number(sy) << ' ';
            }
            out << "\"/>\n";
        }
    }
    out << "<text x=\"4\" y=\"" << rows * ph - 6 << "\" fill=\"#c0392b\">member</text>"
        << "<text x=\"60\" y=\"" << rows * ph - 6 << "\" fill=\"#2471a3\">non-member</text>\n</svg>\n";
    finish(out, path);
}

std::string config_hash(const nlohmann::json& config) {
    char buf[20];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(config.dump())));
    return buf;
}

void emit_report(std::span<const MetricsReport> reports, const SeparationReport* separation,
                 const nlohmann::json& config, const std::filesystem::path& dir, bool svg) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
    write_metrics_csv(reports, dir / "metrics.csv");
    nlohmann::ordered_json manifest;
    manifest["config_hash"] = config_hash(config);
    manifest["config"] = config;
    manifest["metrics"] = "metrics.csv";
    if (separation) {
        auto files = write_density_csvs(separation->curves, dir);
        write_ks_csv(separation->ks, dir / "separation_ks.csv");
        std::vector<std::string> names;
        for (const auto& f : files) names.push_back(f.filename().string());
        manifest["density"] = names;
        manifest["separation"] = "separation_ks.csv";
        if (svg) {
            write_density_svg(separation->curves, dir / "density.svg");
            manifest["plot"] = "density.svg";
        }
    }
    auto out = open_out(dir / "manifest.json");
    out << manifest.dump(2) << '\n';
    finish(out, dir / "manifest.json");
}

}  // namespace mialab::eval
