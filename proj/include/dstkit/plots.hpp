#pragma once

#include <span>
#include <string>
#include <vector>

#include "dstkit/metrics.hpp"

namespace dstkit {

struct NamedReport {
    std::string label;
    EvalReport report;
};

struct BoxStats {
    double min = 0, q1 = 0, median = 0, q3 = 0, max = 0, mean = 0, variance = 0;
};

// Quartiles by linear interpolation between order statistics.
BoxStats box_stats(std::span<const double> values);

// Long-format table: "series\tturn\tjga\tn".
std::string per_turn_table(std::span<const NamedReport> reports);
std::string per_turn_svg(std::span<const NamedReport> reports);

// "label\tjga" rows, then the box statistics.
std::string sensitivity_table(std::span<const NamedReport> reports);
std::string sensitivity_svg(std::span<const NamedReport> reports);

struct PlotFiles {
    std::vector<std::string> written;
};

// Writes per_turn_jga.tsv/.svg and, for two or more reports,
// prompt_sensitivity.tsv/.svg into `out_dir`. Throws UsageError when
// `reports` is empty.
PlotFiles emit_plots(std::span<const NamedReport> reports, const std::string& out_dir);

}  // namespace dstkit
