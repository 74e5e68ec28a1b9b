#include <doctest.h>

#include <filesystem>
#include <sstream>

#include "dstkit/errors.hpp"
#include "dstkit/plots.hpp"
#include "dstkit/strings.hpp"

using namespace dstkit;
namespace fs = std::filesystem;

namespace {

EvalReport report_with(double jga, std::vector<TurnJga> turns) {
    EvalReport r;
    r.jga = jga;
    r.per_turn_jga = std::move(turns);
    return r;
}

std::string table_value(const std::string& table, const std::string& key) {
    std::istringstream in(table);
    std::string line;
    while (std::getline(in, line)) {
        if (line.rfind("# " + key + "\t", 0) == 0) return line.substr(key.size() + 3);
    }
    return {};
}

}  // namespace

TEST_CASE("box statistics") {
    const std::vector<double> v = {0.5, 0.1, 0.3, 0.2, 0.4};
    const BoxStats b = box_stats(v);
    CHECK(b.min == 0.1);
    CHECK(b.max == 0.5);
    CHECK(b.median == doctest::Approx(0.3));
    CHECK(b.q1 == doctest::Approx(0.2));
    CHECK(b.q3 == doctest::Approx(0.4));
    CHECK(b.mean == doctest::Approx(0.3));
    CHECK(b.variance == doctest::Approx(0.02));
}

TEST_CASE("one report gives a single-series per-turn chart") {
    const std::string dir = (fs::temp_directory_path() / "dstkit_plots_one").string();
    fs::remove_all(dir);
    std::vector<NamedReport> one = {{"run", report_with(0.5, {{1, 1.0, 2}, {2, 0.0, 2}})}};
    const PlotFiles files = emit_plots(one, dir);
    CHECK(files.written.size() == 2);
    CHECK(read_file(dir + "/per_turn_jga.tsv") == "series\tturn\tjga\tn\nrun\t1\t1\t2\nrun\t2\t0\t2\n");
    CHECK(read_file(dir + "/per_turn_jga.svg").find("<svg") != std::string::npos);
    CHECK_FALSE(fs::exists(dir + "/prompt_sensitivity.tsv"));
}

TEST_CASE("six prompt reports give box data matching the sensitivity statistics") {
    const double v[6] = {0.31, 0.42, 0.38, 0.29, 0.45, 0.40};
    std::vector<NamedReport> six;
    std::vector<EvalReport> reports;
    for (int i = 0; i < 6; ++i) {
        six.push_back({"p" + std::to_string(i), report_with(v[i], {{1, v[i], 4}})});
        reports.push_back(six.back().report);
    }
    const Sensitivity s = prompt_sensitivity(reports);
    const std::string table = sensitivity_table(six);
    CHECK(std::stod(table_value(table, "mean")) == doctest::Approx(s.mean).epsilon(1e-9));
    CHECK(std::stod(table_value(table, "variance")) == doctest::Approx(s.variance).epsilon(1e-9));
    const std::string dir = (fs::temp_directory_path() / "dstkit_plots_six").string();
    fs::remove_all(dir);
    CHECK(emit_plots(six, dir).written.size() == 4);
    CHECK(fs::exists(dir + "/prompt_sensitivity.svg"));
}

TEST_CASE("no reports is a usage error") {
    std::vector<NamedReport> none;
    CHECK_THROWS_AS(emit_plots(none, "unused"), UsageError);
}
