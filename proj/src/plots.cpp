#include "dstkit/plots.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <sstream>

#include "dstkit/errors.hpp"
#include "dstkit/strings.hpp"

namespace dstkit {

namespace {

constexpr double kW = 640, kH = 400, kLeft = 60, kRight = 160, kTop = 30, kBottom = 50;
const char* kColors[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
                         "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};

std::string esc(std::string_view s) {
    std::string out;
    for (char c : s) {
        switch (c) {
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '&': out += "&amp;"; break;
            case '"': out += "&quot;"; break;
            default: out += c;
        }
    }
    return out;
}

std::string num(double v) {
    std::ostringstream s;
    s.precision(4);
    s << v;
    return s.str();
}

double quantile(const std::vector<double>& sorted, double q) {
    const double pos = q * static_cast<double>(sorted.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, sorted.size() - 1);
    return sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

void svg_frame(std::ostringstream& o, const std::string& title, const std::string& xlabel,
               const std::string& ylabel) {
    o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\"" << kH
      << "\" font-family=\"sans-serif\" font-size=\"12\">\n"
      << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
      << "<text x=\"" << kW / 2 << "\" y=\"18\" text-anchor=\"middle\">" << esc(title) << "</text>\n"
      << "<text x=\"" << (kLeft + (kW - kRight)) / 2 << "\" y=\"" << kH - 10
      << "\" text-anchor=\"middle\">" << esc(xlabel) << "</text>\n"
      << "<text x=\"15\" y=\"" << kH / 2 << "\" transform=\"rotate(-90 15 " << kH / 2
      << ")\" text-anchor=\"middle\">" << esc(ylabel) << "</text>\n";
    const double x0 = kLeft, x1 = kW - kRight, y0 = kH - kBottom, y1 = kTop;
    o << "<line x1=\"" << x0 << "\" y1=\"" << y0 << "\" x2=\"" << x1 << "\" y2=\"" << y0 << "\" stroke=\"black\"/>\n"
      << "<line x1=\"" << x0 << "\" y1=\"" << y0 << "\" x2=\"" << x0 << "\" y2=\"" << y1 << "\" stroke=\"black\"/>\n";
    for (int i = 0; i <= 5; ++i) {
        const double v = i / 5.0;
        const double y = y0 - v * (y0 - y1);
        o << "<line x1=\"" << x0 - 4 << "\" y1=\"" << y << "\" x2=\"" << x1 << "\" y2=\"" << y
          << "\" stroke=\"#ddd\"/>\n<text x=\"" << x0 - 8 << "\" y=\"" << y + 4
          << "\" text-anchor=\"end\">" << num(v) << "</text>\n";
    }
}

}  // namespace

BoxStats box_stats(std::span<const double> values) {
    BoxStats b;
    if (values.empty()) return b;
    std::vector<double> s(values.begin(), values.end());
    std::sort(s.begin(), s.end());
    b.min = s.front();
    b.max = s.back();
    b.q1 = quantile(s, 0.25);
    b.median = quantile(s, 0.5);
    b.q3 = quantile(s, 0.75);
    const Sensitivity st = population_stats(values);
    b.mean = st.mean;
    b.variance = st.variance;
    return b;
}

std::string per_turn_table(std::span<const NamedReport> reports) {
    std::ostringstream o;
    o.precision(10);
    o << "series\tturn\tjga\tn\n";
    for (const auto& r : reports) {
        for (const auto& t : r.report.per_turn_jga) o << r.label << '\t' << t.turn << '\t' << t.jga << '\t' << t.n << '\n';
    }
    return o.str();
}

std::string per_turn_svg(std::span<const NamedReport> reports) {
    std::ostringstream o;
    svg_frame(o, "JGA per turn", "turn", "JGA");
    std::size_t max_turn = 1;
    for (const auto& r : reports) {
        for (const auto& t : r.report.per_turn_jga) max_turn = std::max(max_turn, t.turn);
    }
    const double x0 = kLeft, x1 = kW - kRight, y0 = kH - kBottom, y1 = kTop;
    auto xpos = [&](std::size_t turn) {
        return max_turn == 1 ? (x0 + x1) / 2
                             : x0 + 10 + (x1 - x0 - 20) * static_cast<double>(turn - 1) / static_cast<double>(max_turn - 1);
    };
    for (std::size_t t = 1; t <= max_turn; ++t) {
        o << "<text x=\"" << xpos(t) << "\" y=\"" << y0 + 16 << "\" text-anchor=\"middle\">" << t << "</text>\n";
    }
    for (std::size_t i = 0; i < reports.size(); ++i) {
        const char* color = kColors[i % 10];
        std::string pts;
        for (const auto& t : reports[i].report.per_turn_jga) {
            const double x = xpos(t.turn), y = y0 - t.jga * (y0 - y1);
            pts += num(x) + "," + num(y) + " ";
            o << "<circle cx=\"" << x << "\" cy=\"" << y << "\" r=\"3\" fill=\"" << color << "\"/>\n";
        }
        o << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"" << pts << "\"/>\n";
        o << "<text x=\"" << x1 + 10 << "\" y=\"" << y1 + 14 + 16 * static_cast<double>(i) << "\" fill=\"" << color
          << "\">" << esc(reports[i].label) << "</text>\n";
    }
    o << "</svg>\n";
    return o.str();
}

std::string sensitivity_table(std::span<const NamedReport> reports) {
    std::ostringstream o;
    o.precision(10);
    o << "prompt\tjga\n";
    std::vector<double> v;
    for (const auto& r : reports) {
        o << r.label << '\t' << r.report.jga << '\n';
        v.push_back(r.report.jga);
    }
    const BoxStats b = box_stats(v);
    o << "# min\t" << b.min << "\n# q1\t" << b.q1 << "\n# median\t" << b.median << "\n# q3\t" << b.q3
      << "\n# max\t" << b.max << "\n# mean\t" << b.mean << "\n# variance\t" << b.variance << '\n';
    return o.str();
}

std::string sensitivity_svg(std::span<const NamedReport> reports) {
    std::vector<double> v;
    for (const auto& r : reports) v.push_back(r.report.jga);
    const BoxStats b = box_stats(v);
    std::ostringstream o;
    svg_frame(o, "JGA across prompts (mean " + num(b.mean) + ", var " + num(b.variance) + ")", "prompts", "JGA");
    const double x0 = kLeft, x1 = kW - kRight, y0 = kH - kBottom, y1 = kTop;
    auto y = [&](double val) { return y0 - val * (y0 - y1); };
    const double cx = (x0 + x1) / 2, half = 40;
    o << "<line x1=\"" << cx << "\" y1=\"" << y(b.min) << "\" x2=\"" << cx << "\" y2=\"" << y(b.max) << "\" stroke=\"black\"/>\n"
      << "<rect x=\"" << cx - half << "\" y=\"" << y(b.q3) << "\" width=\"" << 2 * half << "\" height=\""
      << std::max(1.0, y(b.q1) - y(b.q3)) << "\" fill=\"#9ecae1\" stroke=\"black\"/>\n"
      << "<line x1=\"" << cx - half << "\" y1=\"" << y(b.median) << "\" x2=\"" << cx + half << "\" y2=\"" << y(b.median)
      << "\" stroke=\"black\" stroke-width=\"2\"/>\n"
      << "<circle cx=\"" << cx << "\" cy=\"" << y(b.mean) << "\" r=\"4\" fill=\"#d62728\"/>\n";
    for (std::size_t i = 0; i < reports.size(); ++i) {
        o << "<circle cx=\"" << cx + half + 20 << "\" cy=\"" << y(v[i]) << "\" r=\"3\" fill=\"" << kColors[i % 10] << "\"/>\n"
          << "<text x=\"" << x1 + 10 << "\" y=\"" << y1 + 14 + 16 * static_cast<double>(i) << "\" fill=\"" << kColors[i % 10]
          << "\">" << esc(reports[i].label) << "</text>\n";
    }
    o << "</svg>\n";
    return o.str();
}

PlotFiles emit_plots(std::span<const NamedReport> reports, const std::string& out_dir) {
    if (reports.empty()) throw UsageError("plot needs at least one report");
    namespace fs = std::filesystem;
    PlotFiles files;
    auto put = [&](const std::string& name, const std::string& body) {
        const std::string path = (fs::path(out_dir) / name).string();
        write_file(path, body);
        files.written.push_back(path);
    };
    put("per_turn_jga.tsv", per_turn_table(reports));
    put("per_turn_jga.svg", per_turn_svg(reports));
    if (reports.size() >= 2) {
        put("prompt_sensitivity.tsv", sensitivity_table(reports));
        put("prompt_sensitivity.svg", sensitivity_svg(reports));
    }
    return files;
}

}  // namespace dstkit
