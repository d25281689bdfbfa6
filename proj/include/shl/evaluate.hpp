#pragma once

// Scoring of hierarchical forecasts and report emission.

#include "core.hpp"
#include "loss.hpp"
#include "netarch.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

namespace shl {

/// Per-node root mean structurally scaled square error.
inline Vector rms3e_accuracy_per_node(const Matrix& y, const Matrix& y_hat, const Vector& kappa) {
    require(y.rows() > 0, "rms3e: empty test set");
    const Matrix e = structural_error(y, y_hat, kappa);
    return (e.array().square().colwise().mean()).sqrt().transpose();
}

/// Overall score: square root of the mean over nodes and time.
inline double rms3e_accuracy(const Matrix& y, const Matrix& y_hat, const Vector& kappa) {
    require(y.rows() > 0, "rms3e: empty test set");
    return std::sqrt(loss_sh(y, y_hat, kappa));
}

inline double rms3e_coherency(const Matrix& y_hat, const Vector& kappa, const ReconciliationMap& map) {
    require(y_hat.rows() > 0, "rms3e: empty test set");
    return std::sqrt(loss_sc(y_hat, kappa, map));
}

struct ImprovementRatios {
    double accuracy = 0.0;
    double coherency = 0.0;
};

/// Relative loss reductions from adding coherency information; positive means
/// the coherency-trained model did better.
inline ImprovementRatios improvement_ratios(double sh_reference, double sh_coherent,
                                            double sc_reference, double sc_coherent) {
    if (!(sh_reference > 0.0) || !(sc_reference > 0.0))
        throw ValidationError("improvement_ratios: reference losses must be positive");
    return {(sh_reference - sh_coherent) / sh_reference, (sc_reference - sc_coherent) / sc_reference};
}

struct RunScore {
    ArchitectureSpec architecture;
    LossKind loss = LossKind::sh;
    Vector node_accuracy;     // per-node RMS3E
    double accuracy = 0.0;    // overall RMS3E
    double coherency = 0.0;   // coherency RMS3E
};

inline RunScore score_run(const ArchitectureSpec& arch, LossKind loss, const Matrix& y, const Matrix& y_hat,
                          const Vector& kappa, const ReconciliationMap& map) {
    return {arch, loss, rms3e_accuracy_per_node(y, y_hat, kappa), rms3e_accuracy(y, y_hat, kappa),
            rms3e_coherency(y_hat, kappa, map)};
}

struct RatioRow {
    ArchitectureSpec architecture;
    ImprovementRatios ratios;
    bool defined = true;
};

struct EvaluationReport {
    std::vector<std::string> node_ids;
    std::vector<RunScore> runs;

    /// Ratios for every architecture scored under both loss kinds, in the order
    /// the sh runs appear.
    std::vector<RatioRow> ratios() const {
        std::vector<RatioRow> out;
        for (const auto& ref : runs) {
            if (ref.loss != LossKind::sh) continue;
            for (const auto& coh : runs) {
                if (coh.loss != LossKind::shc || !(coh.architecture == ref.architecture)) continue;
                RatioRow row{ref.architecture, {}, true};
                const double sh_ref = ref.accuracy * ref.accuracy;
                const double sc_ref = ref.coherency * ref.coherency;
                if (sh_ref > 0.0 && sc_ref > 0.0)
                    row.ratios = improvement_ratios(sh_ref, coh.accuracy * coh.accuracy, sc_ref,
                                                    coh.coherency * coh.coherency);
                else
                    row.defined = false;
                out.push_back(row);
                break;
            }
        }
        return out;
    }
};

namespace detail {

inline std::string fmt6(double v) {
    if (std::isnan(v)) return "nan";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6g", v);
    return buf;
}

inline std::string svg_escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
            case '&': out += "&amp;"; break;
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '"': out += "&quot;"; break;
            default: out += c;
        }
    }
    return out;
}

// Blue (low) to red (high) through white.
inline std::string ramp(double t) {
    t = std::clamp(t, 0.0, 1.0);
    int r, g, b;
    if (t < 0.5) {
        const double u = t / 0.5;
        r = static_cast<int>(49 + u * (255 - 49));
        g = static_cast<int>(54 + u * (255 - 54));
        b = static_cast<int>(149 + u * (255 - 149));
    } else {
        const double u = (t - 0.5) / 0.5;
        r = static_cast<int>(255 - u * (255 - 165));
        g = static_cast<int>(255 - u * 255);
        b = static_cast<int>(255 - u * (255 - 38));
    }
    char buf[16];
    std::snprintf(buf, sizeof buf, "#%02x%02x%02x", r, g, b);
    return buf;
}

/// Standalone SVG heatmap. `scale` maps a cell value to [0, 1].
template <class Scale>
inline std::string svg_heatmap(const std::string& title, const std::vector<std::string>& row_labels,
                               const std::vector<std::string>& col_labels,
                               const std::vector<std::vector<double>>& cells, Scale scale,
                               const std::string& legend) {
    const int cw = 28, ch = 18, left = 170, top = 110;
    const int width = left + cw * static_cast<int>(col_labels.size()) + 40;
    const int height = top + ch * static_cast<int>(row_labels.size()) + 50;
    std::ostringstream s;
    s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
      << "\" font-family=\"sans-serif\" font-size=\"10\">\n";
    s << "<text x=\"10\" y=\"20\" font-size=\"14\">" << svg_escape(title) << "</text>\n";
    for (std::size_t c = 0; c < col_labels.size(); ++c) {
        const int x = left + cw * static_cast<int>(c) + cw / 2;
        s << "<text transform=\"translate(" << x << "," << top - 6 << ") rotate(-60)\">"
          << svg_escape(col_labels[c]) << "</text>\n";
    }
    for (std::size_t r = 0; r < row_labels.size(); ++r) {
        const int y = top + ch * static_cast<int>(r);
        s << "<text x=\"" << left - 6 << "\" y=\"" << y + ch - 5 << "\" text-anchor=\"end\">"
          << svg_escape(row_labels[r]) << "</text>\n";
        for (std::size_t c = 0; c < cells[r].size(); ++c) {
            const double v = cells[r][c];
            const std::string fill = std::isfinite(v) ? ramp(scale(v)) : "#bbbbbb";
            s << "<rect x=\"" << left + cw * static_cast<int>(c) << "\" y=\"" << y << "\" width=\"" << cw
              << "\" height=\"" << ch << "\" fill=\"" << fill << "\"><title>" << fmt6(v)
              << "</title></rect>\n";
        }
    }
    s << "<text x=\"10\" y=\"" << height - 15 << "\">" << svg_escape(legend) << "</text>\n";
    s << "</svg>\n";
    return s.str();
}

// Fixed logarithmic scale over 1e-4 .. 1e4.
inline double log_scale(double v) {
    if (!(v > 0.0)) return 0.0;
    return (std::log10(v) + 4.0) / 8.0;
}

inline void write_file(const std::filesystem::path& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw RuntimeError("cannot write '" + path.string() + "'");
    out << content;
    if (!out) throw RuntimeError("failed writing '" + path.string() + "'");
}

}  // namespace detail

/// Writes accuracy_heatmap.csv, coherency_table.csv, improvement_ratios.csv
/// and an SVG heatmap next to each. Returns the written paths.
inline std::vector<std::filesystem::path> emit_reports(const EvaluationReport& report,
                                                       const std::filesystem::path& out_dir) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec || !fs::is_directory(out_dir))
        throw RuntimeError("cannot create report directory '" + out_dir.string() + "'");

    auto label = [](const RunScore& r) { return r.architecture.name() + "/" + to_string(r.loss); };
    auto by = [&](auto key) {
        std::vector<const RunScore*> sorted;
        for (const auto& r : report.runs) sorted.push_back(&r);
        std::stable_sort(sorted.begin(), sorted.end(), [&](const RunScore* a, const RunScore* b) {
            const double ka = key(*a), kb = key(*b);
            if (ka != kb) return ka < kb;
            return label(*a) < label(*b);
        });
        return sorted;
    };

    std::vector<fs::path> written;
    {
        const auto rows = by([](const RunScore& r) { return r.accuracy; });
        std::ostringstream csv;
        csv << "architecture,loss,overall";
        for (const auto& id : report.node_ids) csv << ',' << id;
        csv << '\n';
        std::vector<std::string> labels;
        std::vector<std::vector<double>> cells;
        for (const RunScore* r : rows) {
            csv << r->architecture.name() << ',' << to_string(r->loss) << ',' << detail::fmt6(r->accuracy);
            std::vector<double> line;
            for (Index j = 0; j < r->node_accuracy.size(); ++j) {
                csv << ',' << detail::fmt6(r->node_accuracy(j));
                line.push_back(r->node_accuracy(j));
            }
            csv << '\n';
            labels.push_back(label(*r));
            cells.push_back(std::move(line));
        }
        detail::write_file(out_dir / "accuracy_heatmap.csv", csv.str());
        detail::write_file(out_dir / "accuracy_heatmap.svg",
                           detail::svg_heatmap("Accuracy RMS3E per node", labels, report.node_ids, cells,
                                               detail::log_scale, "log10 colour scale, 1e-4 .. 1e4"));
        written.push_back(out_dir / "accuracy_heatmap.csv");
        written.push_back(out_dir / "accuracy_heatmap.svg");
    }
    {
        const auto rows = by([](const RunScore& r) { return r.coherency; });
        std::ostringstream csv;
        csv << "architecture,loss,coherency_rms3e,accuracy_rms3e\n";
        std::vector<std::string> labels;
        std::vector<std::vector<double>> cells;
        for (const RunScore* r : rows) {
            csv << r->architecture.name() << ',' << to_string(r->loss) << ',' << detail::fmt6(r->coherency)
                << ',' << detail::fmt6(r->accuracy) << '\n';
            labels.push_back(label(*r));
            cells.push_back({r->coherency, r->accuracy});
        }
        detail::write_file(out_dir / "coherency_table.csv", csv.str());
        detail::write_file(out_dir / "coherency_table.svg",
                           detail::svg_heatmap("Coherency and accuracy RMS3E", labels,
                                               {"coherency", "accuracy"}, cells, detail::log_scale,
                                               "log10 colour scale, 1e-4 .. 1e4"));
        written.push_back(out_dir / "coherency_table.csv");
        written.push_back(out_dir / "coherency_table.svg");
    }
    {
        std::ostringstream csv;
        csv << "partition,bridge,r_acc,r_coh\n";
        std::vector<std::string> labels;
        std::vector<std::vector<double>> cells;
        for (const auto& row : report.ratios()) {
            const bool full = row.architecture.partition == PartitionScheme::full;
            const double acc = row.defined ? row.ratios.accuracy : std::nan("");
            const double coh = row.defined ? row.ratios.coherency : std::nan("");
            csv << to_string(row.architecture.partition) << ','
                << (full ? std::string("-") : to_string(row.architecture.bridge)) << ','
                << detail::fmt6(acc) << ',' << detail::fmt6(coh) << '\n';
            labels.push_back(row.architecture.name());
            cells.push_back({acc, coh});
        }
        detail::write_file(out_dir / "improvement_ratios.csv", csv.str());
        detail::write_file(out_dir / "improvement_ratios.svg",
                           detail::svg_heatmap("Improvement ratios", labels, {"r_acc", "r_coh"}, cells,
                                               [](double v) { return (v + 1.0) / 2.0; },
                                               "linear colour scale, -1 .. 1"));
        written.push_back(out_dir / "improvement_ratios.csv");
        written.push_back(out_dir / "improvement_ratios.svg");
    }
    return written;
}

}  // namespace shl
