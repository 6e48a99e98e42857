#include "csf/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>
#include <stdexcept>

namespace csf {

namespace fs = std::filesystem;

namespace {

struct Table {
    std::vector<std::string> header;
    std::map<std::string, std::vector<double>> columns;
    std::size_t rows = 0;

    const std::vector<double>& column(const std::string& name) const
    {
        const auto it = columns.find(name);
        if (it == columns.end()) {
            throw std::runtime_error("missing column " + name);
        }
        return it->second;
    }
};

std::vector<std::string> split(const std::string& line)
{
    std::vector<std::string> out;
    std::stringstream in(line);
    std::string field;
    while (std::getline(in, field, ',')) {
        out.push_back(field);
    }
    return out;
}

Table read_csv(const fs::path& path)
{
    std::ifstream in(path);
    if (!in) {
        throw std::runtime_error("missing file " + path.string());
    }
    Table table;
    std::string line;
    if (!std::getline(in, line)) {
        throw std::runtime_error(path.string() + " is empty");
    }
    table.header = split(line);
    while (std::getline(in, line)) {
        if (line.empty()) {
            continue;
        }
        const auto fields = split(line);
        if (fields.size() != table.header.size()) {
            throw std::runtime_error(path.string() + ": ragged row");
        }
        for (std::size_t i = 0; i < fields.size(); ++i) {
            table.columns[table.header[i]].push_back(std::strtod(fields[i].c_str(), nullptr));
        }
        ++table.rows;
    }
    return table;
}

std::string num(double v)
{
    char buffer[32];
    std::snprintf(buffer, sizeof buffer, "%.6g", v);
    return buffer;
}

std::string escape(const std::string& text)
{
    std::string out;
    for (char c : text) {
        switch (c) {
        case '&':
            out += "&amp;";
            break;
        case '<':
            out += "&lt;";
            break;
        case '>':
            out += "&gt;";
            break;
        case '"':
            out += "&quot;";
            break;
        default:
            out.push_back(c);
        }
    }
    return out;
}

constexpr const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"};

} // namespace

std::string render_svg(const std::string& title, const std::vector<double>& x,
                       const std::vector<std::pair<std::string, std::vector<double>>>& series)
{
    if (x.empty()) {
        throw std::invalid_argument("plot: no data");
    }
    constexpr double width = 640.0;
    constexpr double height = 400.0;
    constexpr double left = 70.0;
    constexpr double right = 20.0;
    constexpr double top = 40.0;
    constexpr double bottom = 50.0;

    const auto [xmin_it, xmax_it] = std::minmax_element(x.begin(), x.end());
    const double xmin = *xmin_it;
    const double xmax = *xmax_it;
    double ymin = std::numeric_limits<double>::infinity();
    double ymax = -std::numeric_limits<double>::infinity();
    for (const auto& [name, ys] : series) {
        if (ys.size() != x.size()) {
            throw std::invalid_argument("plot: series " + name + " has the wrong length");
        }
        for (double y : ys) {
            if (std::isfinite(y)) {
                ymin = std::min(ymin, y);
                ymax = std::max(ymax, y);
            }
        }
    }
    if (!std::isfinite(ymin)) {
        ymin = 0.0;
        ymax = 1.0;
    }
    if (ymax - ymin < 1e-12) {
        ymin -= 0.5;
        ymax += 0.5;
    }
    const double xspan = xmax > xmin ? xmax - xmin : 1.0;
    const double yspan = ymax - ymin;
    const auto px = [&](double v) { return left + (v - xmin) / xspan * (width - left - right); };
    const auto py = [&](double v) { return height - bottom - (v - ymin) / yspan * (height - top - bottom); };

    std::ostringstream svg;
    svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
        << "\" viewBox=\"0 0 " << width << ' ' << height << "\" data-x-min=\"" << num(xmin) << "\" data-x-max=\""
        << num(xmax) << "\">\n";
    svg << "  <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    svg << "  <text x=\"" << width / 2 << "\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" "
           "font-size=\"16\">"
        << escape(title) << "</text>\n";
    svg << "  <g stroke=\"black\" stroke-width=\"1\">\n"
        << "    <line x1=\"" << left << "\" y1=\"" << height - bottom << "\" x2=\"" << width - right << "\" y2=\""
        << height - bottom << "\"/>\n"
        << "    <line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\"" << height - bottom
        << "\"/>\n  </g>\n";
    svg << "  <g font-family=\"sans-serif\" font-size=\"11\">\n";
    for (int i = 0; i <= 4; ++i) {
        const double xv = xmin + (xmax - xmin) * i / 4.0;
        const double yv = ymin + yspan * i / 4.0;
        svg << "    <text x=\"" << num(px(xv)) << "\" y=\"" << height - bottom + 18 << "\" text-anchor=\"middle\">"
            << num(xv) << "</text>\n";
        svg << "    <text x=\"" << left - 6 << "\" y=\"" << num(py(yv) + 4) << "\" text-anchor=\"end\">" << num(yv)
            << "</text>\n";
    }
    svg << "    <text x=\"" << (left + width - right) / 2 << "\" y=\"" << height - 10
        << "\" text-anchor=\"middle\">step</text>\n  </g>\n";

    for (std::size_t s = 0; s < series.size(); ++s) {
        const auto& [name, ys] = series[s];
        const char* colour = kPalette[s % std::size(kPalette)];
        std::string points;
        const auto flush = [&] {
            if (!points.empty()) {
                svg << "  <polyline fill=\"none\" stroke=\"" << colour << "\" stroke-width=\"1.5\" points=\""
                    << points << "\"/>\n";
                points.clear();
            }
        };
        for (std::size_t i = 0; i < x.size(); ++i) {
            if (!std::isfinite(ys[i])) {
                flush();
                continue;
            }
            points += (points.empty() ? "" : " ") + num(px(x[i])) + "," + num(py(ys[i]));
        }
        flush();
        const double ly = top + 14.0 * static_cast<double>(s);
        svg << "  <text x=\"" << width - right - 4 << "\" y=\"" << ly + 4
            << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\" fill=\"" << colour << "\">"
            << escape(name) << "</text>\n";
    }
    svg << "</svg>\n";
    return svg.str();
}

void emit_report(const fs::path& run_dir)
{
    const Table metrics = read_csv(run_dir / "metrics.csv");
    if (metrics.rows == 0) {
        throw std::runtime_error("metrics.csv has no rows");
    }
    const auto& steps = metrics.column("step");
    std::ofstream(run_dir / "loss.svg") << render_svg("contrastive loss", steps, {{"loss", metrics.column("loss")}});
    std::ofstream(run_dir / "r2.svg") << render_svg(
        "held-out R^2", steps, {{"r2_state", metrics.column("r2_state")}, {"r2_diff", metrics.column("r2_diff")}});

    std::ofstream summary(run_dir / "summary.md");
    summary << "# Run summary\n\n";
    const std::size_t last = metrics.rows - 1;
    summary << "| metric | value |\n|---|---|\n";
    for (const auto& name : metrics.header) {
        summary << "| final " << name << " | " << num(metrics.column(name)[last]) << " |\n";
    }
    if (fs::exists(run_dir / "coverage.csv")) {
        const Table coverage = read_csv(run_dir / "coverage.csv");
        if (coverage.rows > 0) {
            std::ofstream(run_dir / "coverage.svg")
                << render_svg("state coverage", coverage.column("step"),
                              {{"occupied cells", coverage.column("occupied_cells")}});
            summary << "| final occupied cells | " << num(coverage.column("occupied_cells").back()) << " |\n";
        }
    }
    if (fs::exists(run_dir / "report.json")) {
        std::ifstream in(run_dir / "report.json");
        const nlohmann::json report = nlohmann::json::parse(in);
        summary << "\nstatus: " << report.at("status").get<std::string>();
        if (!report.at("failure_reason").get<std::string>().empty()) {
            summary << " (" << report.at("failure_reason").get<std::string>() << ")";
        }
        summary << "\n\n| report field | value |\n|---|---|\n";
        summary << "| oracle return | " << report.at("oracle_return").dump() << " |\n";
        summary << "| diversity | " << report.at("diversity").at("score").dump() << " |\n";
        summary << "| mean abs cos(phi(o), phi(o')) | " << report.at("geometry").at("mean_abs_cos_pair").dump()
                << " |\n";
        summary << "| held-out critic accuracy | " << report.at("critic").at("heldout_accuracy").dump() << " |\n";
        summary << "| affine generator | " << report.at("skills").at("is_affine_generator").dump() << " |\n";
        summary << "| rejected steps | " << report.at("rejected_steps").dump() << " |\n";
        summary << "| config hash | " << report.at("config_hash").get<std::string>() << " |\n";
    }
    summary << "\nPlots: loss.svg, r2.svg, coverage.svg\n";
}

} // namespace csf
