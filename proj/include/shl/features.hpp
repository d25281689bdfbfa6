#pragma once

// Data ingestion and feature engineering: CSV panels, hourly resampling with
// the gap policy, maximal information coefficient screening of exogenous
// candidates, autocorrelation lag selection and design-matrix assembly.

#include "core.hpp"
#include "json.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <fstream>
#include <istream>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

namespace shl {

using BoolMatrix = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>;

inline constexpr std::int64_t kSecondsPerHour = 3600;

/// Time-aligned table of series. `values` is T x n; missing entries are NaN
/// and flagged in `missing`.
struct SeriesPanel {
    std::vector<std::int64_t> timestamps;  // UTC seconds since epoch, strictly increasing
    std::vector<std::string> ids;
    Matrix values;
    BoolMatrix missing;

    Index rows() const { return values.rows(); }
    Index cols() const { return values.cols(); }

    std::optional<Index> column(const std::string& id) const {
        for (std::size_t i = 0; i < ids.size(); ++i)
            if (ids[i] == id) return static_cast<Index>(i);
        return std::nullopt;
    }

    bool hourly() const {
        for (std::size_t i = 1; i < timestamps.size(); ++i)
            if (timestamps[i] - timestamps[i - 1] != kSecondsPerHour) return false;
        return timestamps.empty() || timestamps.front() % kSecondsPerHour == 0;
    }
};

// ---------------------------------------------------------------------------
// Timestamps

namespace detail {

inline std::int64_t days_from_civil(std::int64_t y, unsigned m, unsigned d) {
    y -= m <= 2;
    const std::int64_t era = (y >= 0 ? y : y - 399) / 400;
    const auto yoe = static_cast<unsigned>(y - era * 400);
    const unsigned doy = (153 * (m + (m > 2 ? -3 : 9)) + 2) / 5 + d - 1;
    const unsigned doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
    return era * 146097 + static_cast<std::int64_t>(doe) - 719468;
}

inline void civil_from_days(std::int64_t z, std::int64_t& y, unsigned& m, unsigned& d) {
    z += 719468;
    const std::int64_t era = (z >= 0 ? z : z - 146096) / 146097;
    const auto doe = static_cast<unsigned>(z - era * 146097);
    const unsigned yoe = (doe - doe / 1460 + doe / 36524 - doe / 146096) / 365;
    y = static_cast<std::int64_t>(yoe) + era * 400;
    const unsigned doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    const unsigned mp = (5 * doy + 2) / 153;
    d = doy - (153 * mp + 2) / 5 + 1;
    m = mp < 10 ? mp + 3 : mp - 9;
    y += m <= 2;
}

inline std::string_view trim(std::string_view s) {
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
    if (s.size() >= 2 && s.front() == '"' && s.back() == '"') s = s.substr(1, s.size() - 2);
    return s;
}

inline std::vector<std::string_view> split_csv_line(std::string_view line) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    for (;;) {
        const auto comma = line.find(',', start);
        out.push_back(trim(line.substr(start, comma == std::string_view::npos ? line.npos : comma - start)));
        if (comma == std::string_view::npos) break;
        start = comma + 1;
    }
    return out;
}

}  // namespace detail

/// Parses "YYYY-MM-DD HH:MM[:SS]" (space or 'T' separator) with an optional
/// "Z" or "+00:00" suffix, as UTC seconds since the epoch.
inline std::optional<std::int64_t> parse_timestamp(std::string_view s) {
    s = detail::trim(s);
    if (!s.empty() && (s.back() == 'Z' || s.back() == 'z')) s.remove_suffix(1);
    if (s.size() >= 6 && (s.substr(s.size() - 6) == "+00:00" || s.substr(s.size() - 6) == "-00:00"))
        s.remove_suffix(6);
    auto num = [&](std::size_t pos, std::size_t len, int& out) {
        if (pos + len > s.size()) return false;
        auto r = std::from_chars(s.data() + pos, s.data() + pos + len, out);
        return r.ec == std::errc() && r.ptr == s.data() + pos + len;
    };
    int Y, M, D, h = 0, mi = 0, sec = 0;
    if (s.size() < 10 || !num(0, 4, Y) || s[4] != '-' || !num(5, 2, M) || s[7] != '-' || !num(8, 2, D))
        return std::nullopt;
    if (s.size() > 10) {
        if ((s[10] != ' ' && s[10] != 'T') || !num(11, 2, h) || s.size() < 16 || s[13] != ':' ||
            !num(14, 2, mi))
            return std::nullopt;
        if (s.size() > 16) {
            if (s[16] != ':' || !num(17, 2, sec) || s.size() != 19) return std::nullopt;
        }
    }
    if (M < 1 || M > 12 || D < 1 || D > 31 || h > 23 || mi > 59 || sec > 60) return std::nullopt;
    return detail::days_from_civil(Y, static_cast<unsigned>(M), static_cast<unsigned>(D)) * 86400 +
           h * 3600 + mi * 60 + sec;
}

inline std::string format_timestamp(std::int64_t t) {
    std::int64_t days = t >= 0 ? t / 86400 : (t - 86399) / 86400;
    std::int64_t rem = t - days * 86400;
    std::int64_t y;
    unsigned m, d;
    detail::civil_from_days(days, y, m, d);
    const int hh = static_cast<int>(rem / 3600), mm = static_cast<int>(rem / 60 % 60), ss = static_cast<int>(rem % 60);
    char buf[64];
    std::snprintf(buf, sizeof buf, "%04lld-%02u-%02uT%02d:%02d:%02dZ", static_cast<long long>(y), m, d, hh, mm, ss);
    return buf;
}

// ---------------------------------------------------------------------------
// CSV ingestion

/// Averages observations into hourly bins spanning the first to the last
/// observed hour. Hours without any observation are missing.
inline SeriesPanel to_hourly(const SeriesPanel& raw) {
    SeriesPanel out;
    out.ids = raw.ids;
    const Index n = raw.cols();
    if (raw.timestamps.empty()) {
        out.values.resize(0, n);
        out.missing.resize(0, n);
        return out;
    }
    auto floor_hour = [](std::int64_t t) {
        return (t >= 0 ? t / kSecondsPerHour : (t - kSecondsPerHour + 1) / kSecondsPerHour) * kSecondsPerHour;
    };
    const std::int64_t first = floor_hour(raw.timestamps.front());
    const std::int64_t last = floor_hour(raw.timestamps.back());
    const auto T = static_cast<Index>((last - first) / kSecondsPerHour + 1);
    Matrix sum = Matrix::Zero(T, n);
    Matrix count = Matrix::Zero(T, n);
    for (Index r = 0; r < raw.rows(); ++r) {
        const Index h = static_cast<Index>((floor_hour(raw.timestamps[static_cast<std::size_t>(r)]) - first) / kSecondsPerHour);
        for (Index c = 0; c < n; ++c)
            if (!raw.missing(r, c)) {
                sum(h, c) += raw.values(r, c);
                count(h, c) += 1.0;
            }
    }
    out.timestamps.resize(static_cast<std::size_t>(T));
    for (Index h = 0; h < T; ++h) out.timestamps[static_cast<std::size_t>(h)] = first + h * kSecondsPerHour;
    out.missing = (count.array() == 0.0);
    out.values = (out.missing).select(std::numeric_limits<double>::quiet_NaN(), sum.array() / count.array()).matrix();
    return out;
}

/// Reads a wide CSV (`timestamp,<id>,...`) and aligns it to hourly bins.
/// Errors name the offending line (the header is line 1).
inline SeriesPanel read_series_csv(std::istream& in, const std::string& source = "csv") {
    std::string line;
    if (!std::getline(in, line)) throw ValidationError(source + ": empty file");
    const auto header = detail::split_csv_line(line);
    if (header.empty() || header[0] != "timestamp")
        throw ValidationError(source + ": missing timestamp column (first header must be 'timestamp')");
    SeriesPanel raw;
    for (std::size_t c = 1; c < header.size(); ++c) {
        if (header[c].empty())
            throw ValidationError(source + ": column " + std::to_string(c + 1) + " has no name");
        raw.ids.emplace_back(header[c]);
    }
    if (raw.ids.empty()) throw ValidationError(source + ": no data columns");
    {
        auto sorted = raw.ids;
        std::sort(sorted.begin(), sorted.end());
        auto dup = std::adjacent_find(sorted.begin(), sorted.end());
        if (dup != sorted.end()) throw ValidationError(source + ": duplicate column '" + *dup + "'");
    }
    const std::size_t n = raw.ids.size();
    std::vector<std::vector<double>> rows;
    std::vector<std::vector<bool>> miss;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (detail::trim(line).empty()) continue;
        const auto cells = detail::split_csv_line(line);
        const std::string where = source + ": line " + std::to_string(line_no);
        if (cells.size() != n + 1)
            throw ValidationError(where + ": expected " + std::to_string(n + 1) + " fields, got " +
                                  std::to_string(cells.size()));
        const auto t = parse_timestamp(cells[0]);
        if (!t) throw ValidationError(where + ": unparseable timestamp '" + std::string(cells[0]) + "'");
        if (!raw.timestamps.empty()) {
            if (*t == raw.timestamps.back())
                throw ValidationError(where + ": duplicated timestamp '" + std::string(cells[0]) + "'");
            if (*t < raw.timestamps.back())
                throw ValidationError(where + ": timestamps are not increasing");
        }
        raw.timestamps.push_back(*t);
        std::vector<double> v(n);
        std::vector<bool> m(n);
        for (std::size_t c = 0; c < n; ++c) {
            const auto cell = cells[c + 1];
            if (cell.empty() || cell == "NaN" || cell == "nan" || cell == "NA") {
                v[c] = std::numeric_limits<double>::quiet_NaN();
                m[c] = true;
                continue;
            }
            double x = 0.0;
            const auto r = std::from_chars(cell.data(), cell.data() + cell.size(), x);
            if (r.ec != std::errc() || r.ptr != cell.data() + cell.size() || !std::isfinite(x))
                throw ValidationError(where + ": unparseable value '" + std::string(cell) +
                                      "' in column '" + raw.ids[c] + "'");
            v[c] = x;
        }
        rows.push_back(std::move(v));
        miss.push_back(std::move(m));
    }
    raw.values.resize(static_cast<Index>(rows.size()), static_cast<Index>(n));
    raw.missing.resize(static_cast<Index>(rows.size()), static_cast<Index>(n));
    for (std::size_t r = 0; r < rows.size(); ++r)
        for (std::size_t c = 0; c < n; ++c) {
            raw.values(static_cast<Index>(r), static_cast<Index>(c)) = rows[r][c];
            raw.missing(static_cast<Index>(r), static_cast<Index>(c)) = miss[r][c];
        }
    return to_hourly(raw);
}

inline SeriesPanel read_series_csv_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open '" + path + "'");
    return read_series_csv(in, path);
}

struct IngestResult {
    SeriesPanel meters;
    std::optional<SeriesPanel> weather;  // reindexed onto the meter timestamps
};

/// Restricts or extends `panel` to the given hourly timestamps; rows absent
/// from `panel` become missing.
inline SeriesPanel reindex(const SeriesPanel& panel, const std::vector<std::int64_t>& timestamps) {
    SeriesPanel out;
    out.ids = panel.ids;
    out.timestamps = timestamps;
    const auto T = static_cast<Index>(timestamps.size());
    out.values = Matrix::Constant(T, panel.cols(), std::numeric_limits<double>::quiet_NaN());
    out.missing = BoolMatrix::Constant(T, panel.cols(), true);
    std::map<std::int64_t, Index> pos;
    for (std::size_t r = 0; r < panel.timestamps.size(); ++r) pos[panel.timestamps[r]] = static_cast<Index>(r);
    for (Index r = 0; r < T; ++r) {
        auto it = pos.find(timestamps[static_cast<std::size_t>(r)]);
        if (it == pos.end()) continue;
        out.values.row(r) = panel.values.row(it->second);
        out.missing.row(r) = panel.missing.row(it->second);
    }
    return out;
}

inline IngestResult ingest_csv(std::istream& meters, std::istream* weather = nullptr) {
    IngestResult out;
    out.meters = read_series_csv(meters, "meter csv");
    if (weather) out.weather = reindex(read_series_csv(*weather, "weather csv"), out.meters.timestamps);
    return out;
}

inline IngestResult ingest_csv_files(const std::string& meter_path,
                                     const std::optional<std::string>& weather_path = std::nullopt) {
    IngestResult out;
    out.meters = read_series_csv_file(meter_path);
    if (weather_path)
        out.weather = reindex(read_series_csv_file(*weather_path), out.meters.timestamps);
    return out;
}

// ---------------------------------------------------------------------------
// Gap policy

struct FillOptions {
    int max_missing_hours = 2;  // series with more missing hours in total are dropped
    int window = 8;             // centered moving-average window (hours, excluding the gap itself)
};

struct FillResult {
    SeriesPanel panel;
    std::vector<std::string> dropped;
};

/// Hourly resampling, then: drop series whose cumulative missing hours exceed
/// the limit, and fill remaining gaps with the mean of the originally observed
/// values within +-window/2 hours.
inline FillResult resample_and_fill(const SeriesPanel& input, const FillOptions& opts = {}) {
    const SeriesPanel panel = input.hourly() ? input : to_hourly(input);
    FillResult out;
    std::vector<Index> keep;
    for (Index c = 0; c < panel.cols(); ++c) {
        const auto missing = panel.missing.col(c).count();
        if (missing > opts.max_missing_hours)
            out.dropped.push_back(panel.ids[static_cast<std::size_t>(c)]);
        else
            keep.push_back(c);
    }
    if (!out.dropped.empty()) {
        std::string list;
        for (const auto& d : out.dropped) list += (list.empty() ? "" : ", ") + d;
        warn("resample_and_fill: dropped series with more than " +
             std::to_string(opts.max_missing_hours) + " missing hours: " + list);
    }
    SeriesPanel& p = out.panel;
    p.timestamps = panel.timestamps;
    const Index T = panel.rows();
    p.values.resize(T, static_cast<Index>(keep.size()));
    p.missing = BoolMatrix::Constant(T, static_cast<Index>(keep.size()), false);
    const Index half = opts.window / 2;
    for (std::size_t k = 0; k < keep.size(); ++k) {
        const Index c = keep[k];
        p.ids.push_back(panel.ids[static_cast<std::size_t>(c)]);
        const auto kk = static_cast<Index>(k);
        for (Index t = 0; t < T; ++t) {
            if (!panel.missing(t, c)) {
                p.values(t, kk) = panel.values(t, c);
                continue;
            }
            double sum = 0.0;
            int count = 0;
            for (Index s = std::max<Index>(0, t - half); s <= std::min(T - 1, t + half); ++s)
                if (s != t && !panel.missing(s, c)) {
                    sum += panel.values(s, c);
                    ++count;
                }
            if (count == 0)
                throw RuntimeError("resample_and_fill: no observed values around hour " +
                                   std::to_string(t) + " of '" + p.ids.back() + "'");
            p.values(t, kk) = sum / count;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Maximal information coefficient

struct MicOptions {
    double alpha = 0.6;          // grid-size bound B = n^alpha
    double clump_factor = 15.0;  // at most clump_factor * x superclumps per x-axis search
};

namespace detail {

// Rows of an equipartition of `values` into `rows` bins; equal values share a
// bin. Returns the bin label of every point.
inline std::vector<int> equipartition(std::span<const double> values, const std::vector<std::size_t>& order,
                                      int rows) {
    const std::size_t n = values.size();
    std::vector<int> label(n, 0);
    std::size_t i = 0;
    int current = 0;
    double size = 0.0;
    double desired = static_cast<double>(n) / rows;
    while (i < n) {
        std::size_t j = i;
        while (j < n && values[order[j]] == values[order[i]]) ++j;
        const double s = static_cast<double>(j - i);
        if (size != 0.0 && std::abs(size + s - desired) >= std::abs(size - desired) &&
            current + 1 < rows) {
            ++current;
            size = 0.0;
            desired = static_cast<double>(n - i) / (rows - current);
        }
        for (std::size_t k = i; k < j; ++k) label[order[k]] = current;
        size += s;
        i = j;
    }
    return label;
}

// best[l] = max mutual information (nats) achievable by splitting the `a` axis
// into at most l columns, given fixed row labels on the other axis. Returns
// entries for l = 0..max_cols.
inline std::vector<double> optimize_axis(std::span<const double> a, const std::vector<std::size_t>& a_order,
                                         const std::vector<int>& row_label, int rows, int max_cols,
                                         double clump_factor) {
    const std::size_t n = a.size();
    // Clumps: maximal runs (in a-order) with one row label; ties in `a` are
    // never split, and a tie group spanning several rows is its own clump.
    std::vector<std::size_t> bounds{0};  // cumulative point counts at clump ends
    std::vector<std::vector<int>> clump_counts;
    int prev_label = -2;
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i;
        while (j < n && a[a_order[j]] == a[a_order[i]]) ++j;
        int lab = row_label[a_order[i]];
        for (std::size_t k = i; k < j; ++k)
            if (row_label[a_order[k]] != lab) lab = -1;
        if (lab < 0 || lab != prev_label) {
            clump_counts.emplace_back(static_cast<std::size_t>(rows), 0);
            bounds.push_back(bounds.back());
        }
        for (std::size_t k = i; k < j; ++k) ++clump_counts.back()[static_cast<std::size_t>(row_label[a_order[k]])];
        bounds.back() += j - i;
        prev_label = lab;
        i = j;
    }
    // Superclumps: merge neighbouring clumps into roughly equal-mass groups.
    const auto max_clumps = static_cast<std::size_t>(std::max(1.0, clump_factor * max_cols));
    if (clump_counts.size() > max_clumps) {
        std::vector<std::vector<int>> merged;
        std::vector<std::size_t> mb{0};
        const double per = static_cast<double>(n) / static_cast<double>(max_clumps);
        for (std::size_t c = 0; c < clump_counts.size(); ++c) {
            const bool start_new =
                merged.empty() || static_cast<double>(mb.back()) >= per * static_cast<double>(merged.size());
            if (start_new) {
                merged.emplace_back(static_cast<std::size_t>(rows), 0);
                mb.push_back(mb.back());
            }
            for (int r = 0; r < rows; ++r) merged.back()[static_cast<std::size_t>(r)] += clump_counts[c][static_cast<std::size_t>(r)];
            mb.back() = bounds[c + 1];
        }
        clump_counts = std::move(merged);
        bounds = std::move(mb);
    }
    const std::size_t k = clump_counts.size();
    const double N = static_cast<double>(n);

    // cost(s, t): N^-1 * sum_r n_r log(n_col / n_r) for the column made of
    // clumps s..t-1, i.e. its contribution to H(rows | columns).
    std::vector<double> cost((k + 1) * (k + 1), 0.0);
    std::vector<double> acc(static_cast<std::size_t>(rows));
    for (std::size_t s = 0; s < k; ++s) {
        std::fill(acc.begin(), acc.end(), 0.0);
        double total = 0.0;
        for (std::size_t t = s + 1; t <= k; ++t) {
            for (int r = 0; r < rows; ++r) acc[static_cast<std::size_t>(r)] += clump_counts[t - 1][static_cast<std::size_t>(r)];
            total += static_cast<double>(bounds[t] - bounds[t - 1]);
            double h = 0.0;
            for (double c : acc)
                if (c > 0.0) h += c * std::log(total / c);
            cost[s * (k + 1) + t] = h / N;
        }
    }
    std::vector<double> row_total(static_cast<std::size_t>(rows), 0.0);
    for (int lab : row_label) row_total[static_cast<std::size_t>(lab)] += 1.0;
    double h_rows = 0.0;
    for (double c : row_total)
        if (c > 0.0) h_rows -= (c / N) * std::log(c / N);

    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> best(static_cast<std::size_t>(max_cols) + 1, 0.0);
    std::vector<double> prev(k + 1, inf), cur(k + 1, inf);
    for (std::size_t t = 1; t <= k; ++t) prev[t] = cost[t];
    best[1] = h_rows - prev[k];
    for (int l = 2; l <= max_cols; ++l) {
        std::fill(cur.begin(), cur.end(), inf);
        for (std::size_t t = 1; t <= k; ++t) {
            double v = prev[t];  // at most l columns
            for (std::size_t s = 1; s < t; ++s) v = std::min(v, prev[s] + cost[s * (k + 1) + t]);
            cur[t] = v;
        }
        std::swap(prev, cur);
        best[static_cast<std::size_t>(l)] = h_rows - prev[k];
    }
    return best;
}

// Largest normalized score over grids whose `b` axis is equipartitioned and
// whose `a` axis is optimized.
inline double mic_one_side(std::span<const double> a, std::span<const double> b, double bound,
                           double clump_factor) {
    const std::size_t n = a.size();
    std::vector<std::size_t> a_order(n), b_order(n);
    std::iota(a_order.begin(), a_order.end(), 0);
    std::iota(b_order.begin(), b_order.end(), 0);
    std::stable_sort(a_order.begin(), a_order.end(), [&](auto i, auto j) { return a[i] < a[j]; });
    std::stable_sort(b_order.begin(), b_order.end(), [&](auto i, auto j) { return b[i] < b[j]; });
    double best = 0.0;
    for (int rows = 2; rows <= static_cast<int>(bound / 2.0); ++rows) {
        const int max_cols = static_cast<int>(bound / rows);
        if (max_cols < 2) break;
        const auto labels = equipartition(b, b_order, rows);
        const int used = *std::max_element(labels.begin(), labels.end()) + 1;
        if (used < 2) continue;
        const auto mi = optimize_axis(a, a_order, labels, used, max_cols, clump_factor);
        for (int cols = 2; cols <= max_cols; ++cols) {
            const double norm = std::log(static_cast<double>(std::min(cols, rows)));
            best = std::max(best, mi[static_cast<std::size_t>(cols)] / norm);
        }
    }
    return best;
}

}  // namespace detail

/// Approximate maximal information coefficient: the maximum, over grids with
/// at most n^alpha cells, of mutual information normalized by
/// log(min(columns, rows)). One axis is equipartitioned and the other optimized
/// by dynamic programming, in both orientations.
inline double mic(std::span<const double> x, std::span<const double> y, const MicOptions& opts = {}) {
    require(x.size() == y.size(), "mic: series lengths differ");
    require(x.size() >= 30, "mic: need at least 30 samples");
    for (std::size_t i = 0; i < x.size(); ++i)
        require(std::isfinite(x[i]) && std::isfinite(y[i]), "mic: non-finite sample");
    const double bound = std::max(std::pow(static_cast<double>(x.size()), opts.alpha), 4.0);
    const double v = std::max(detail::mic_one_side(x, y, bound, opts.clump_factor),
                              detail::mic_one_side(y, x, bound, opts.clump_factor));
    return std::clamp(v, 0.0, 1.0);
}

inline double mic(const Vector& x, const Vector& y, const MicOptions& opts = {}) {
    return mic(std::span<const double>(x.data(), static_cast<std::size_t>(x.size())),
               std::span<const double>(y.data(), static_cast<std::size_t>(y.size())), opts);
}

struct ScoredFeature {
    std::string id;
    double mic = 0.0;

    friend bool operator==(const ScoredFeature&, const ScoredFeature&) = default;
};

inline constexpr double kMicThreshold = 0.25;
inline constexpr double kAcfThreshold = 0.25;

/// Candidates (columns of `candidates`, named by `ids`) whose MIC with the
/// target exceeds the threshold, best first; ties broken by id.
inline std::vector<ScoredFeature> select_exogenous(const Vector& target, const Matrix& candidates,
                                                   const std::vector<std::string>& ids,
                                                   double threshold = kMicThreshold,
                                                   const MicOptions& opts = {}) {
    require(candidates.rows() == target.size(), "select_exogenous: candidates are not aligned");
    require(static_cast<Index>(ids.size()) == candidates.cols(), "select_exogenous: id count mismatch");
    std::vector<ScoredFeature> out;
    for (Index c = 0; c < candidates.cols(); ++c) {
        const Vector col = candidates.col(c);
        const double score = mic(target, col, opts);
        if (score > threshold) out.push_back({ids[static_cast<std::size_t>(c)], score});
    }
    std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) {
        return a.mic != b.mic ? a.mic > b.mic : a.id < b.id;
    });
    return out;
}

/// Sample autocorrelation at `lag` (biased estimator, normalized by lag 0).
inline double autocorrelation(const Vector& x, int lag) {
    const Index T = x.size();
    require(lag >= 0 && lag < T, "autocorrelation: lag out of range");
    const Vector c = x.array() - x.mean();
    const double denom = c.squaredNorm();
    if (denom == 0.0) return 0.0;
    return c.head(T - lag).dot(c.tail(T - lag)) / denom;
}

struct LagPool {
    int first = 1;
    int last = 24;
};

/// Intra-day, intra-week and beyond-week lag ranges (hours).
inline std::vector<LagPool> default_lag_pools() { return {{1, 24}, {25, 168}, {169, 672}}; }

/// Top three lags per pool whose autocorrelation exceeds the threshold, in
/// ascending order; [1] when no lag qualifies anywhere.
inline std::vector<int> select_lags(const Vector& target, double threshold = kAcfThreshold,
                                    const std::vector<LagPool>& pools = default_lag_pools(),
                                    int per_pool = 3) {
    std::vector<int> lags;
    for (const auto& pool : pools) {
        require(pool.first >= 1 && pool.last >= pool.first, "select_lags: invalid lag pool");
        if (target.size() <= pool.last) {
            warn("select_lags: series of length " + std::to_string(target.size()) +
                 " is too short for lag pool " + std::to_string(pool.first) + "-" +
                 std::to_string(pool.last) + "; skipped");
            continue;
        }
        std::vector<std::pair<double, int>> scored;
        for (int lag = pool.first; lag <= pool.last; ++lag) {
            const double r = autocorrelation(target, lag);
            if (r > threshold) scored.emplace_back(r, lag);
        }
        std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
            return a.first != b.first ? a.first > b.first : a.second < b.second;
        });
        for (std::size_t i = 0; i < scored.size() && i < static_cast<std::size_t>(per_pool); ++i)
            lags.push_back(scored[i].second);
    }
    if (lags.empty()) return {1};
    std::sort(lags.begin(), lags.end());
    return lags;
}

// ---------------------------------------------------------------------------
// Feature sets and design matrices

struct NodeFeatures {
    std::string node;
    std::vector<ScoredFeature> exogenous;
    std::vector<int> lags;

    int width() const { return static_cast<int>(exogenous.size() + lags.size()); }
    friend bool operator==(const NodeFeatures&, const NodeFeatures&) = default;
};

using FeatureSet = std::vector<NodeFeatures>;

struct FeatureOptions {
    double mic_threshold = kMicThreshold;
    double acf_threshold = kAcfThreshold;
    std::vector<LagPool> pools = default_lag_pools();
    MicOptions mic;
    /// MIC is scored on at most this many evenly strided rows (0 = all rows).
    Index mic_sample_limit = 2000;
};

/// Per-node lag and exogenous selection. `values` is T x n in node order.
inline FeatureSet select_features(const Matrix& values, const std::vector<std::string>& node_ids,
                                  const SeriesPanel* exogenous, const FeatureOptions& opts = {}) {
    require(static_cast<Index>(node_ids.size()) == values.cols(), "select_features: id count mismatch");
    FeatureSet out;
    std::vector<Index> sample;
    const Index T = values.rows();
    if (exogenous) {
        require(exogenous->rows() == T, "select_features: exogenous table is not aligned");
        const Index limit = opts.mic_sample_limit > 0 ? std::min(opts.mic_sample_limit, T) : T;
        for (Index k = 0; k < limit; ++k) sample.push_back(limit == T ? k : k * T / limit);
    }
    // Pools longer than the series are reported once here, not once per node.
    std::vector<LagPool> pools;
    for (const auto& pool : opts.pools) {
        if (T > pool.last)
            pools.push_back(pool);
        else
            warn("select_features: series of length " + std::to_string(T) + " are too short for lag pool " +
                 std::to_string(pool.first) + "-" + std::to_string(pool.last) + "; skipped");
    }
    for (Index j = 0; j < values.cols(); ++j) {
        NodeFeatures nf;
        nf.node = node_ids[static_cast<std::size_t>(j)];
        nf.lags = select_lags(values.col(j), opts.acf_threshold, pools);
        if (exogenous && exogenous->cols() > 0 && sample.size() >= 30) {
            Vector target(static_cast<Index>(sample.size()));
            Matrix cand(static_cast<Index>(sample.size()), exogenous->cols());
            for (std::size_t k = 0; k < sample.size(); ++k) {
                target(static_cast<Index>(k)) = values(sample[k], j);
                cand.row(static_cast<Index>(k)) = exogenous->values.row(sample[k]);
            }
            nf.exogenous = select_exogenous(target, cand, exogenous->ids, opts.mic_threshold, opts.mic);
        }
        out.push_back(std::move(nf));
    }
    return out;
}

inline nlohmann::json feature_set_to_json(const FeatureSet& fs) {
    nlohmann::json out = nlohmann::json::array();
    for (const auto& nf : fs) {
        nlohmann::json ex = nlohmann::json::array();
        for (const auto& f : nf.exogenous) ex.push_back({{"id", f.id}, {"mic", f.mic}});
        out.push_back({{"node", nf.node}, {"exogenous", ex}, {"lags", nf.lags}});
    }
    return out;
}

inline FeatureSet feature_set_from_json(const nlohmann::json& j) {
    FeatureSet fs;
    for (const auto& e : j) {
        NodeFeatures nf;
        nf.node = e.at("node").get<std::string>();
        for (const auto& f : e.at("exogenous")) nf.exogenous.push_back({f.at("id").get<std::string>(), f.at("mic").get<double>()});
        nf.lags = e.at("lags").get<std::vector<int>>();
        fs.push_back(std::move(nf));
    }
    return fs;
}

/// Aligned supervised rows. Row r uses information available at feature time
/// `feature_rows[r]` to predict every node at `feature_rows[r] + horizon`.
struct Design {
    std::vector<Index> feature_rows;
    std::vector<std::int64_t> target_times;
    Matrix X;  // node feature blocks side by side, in node order
    Matrix Y;  // targets, rows x n
    std::vector<int> node_feature_counts;
    std::vector<Index> node_offsets;  // first column of each node block in X
    std::vector<std::string> column_names;

    Index rows() const { return X.rows(); }

    /// Features and target of one node over the aligned rows.
    std::pair<Matrix, Vector> node(std::size_t i) const {
        return {X.middleCols(node_offsets.at(i), node_feature_counts.at(i)), Y.col(static_cast<Index>(i))};
    }
};

/// Builds the design: lag L contributes y[t + 1 - L] (lag 1 is the latest
/// observation), exogenous features are read at t, and the target is
/// y[t + horizon]. Rows lacking any lag or holding non-finite values are
/// dropped.
inline Design assemble_design(const Matrix& values, const std::vector<std::int64_t>& timestamps,
                              const FeatureSet& features, const SeriesPanel* exogenous = nullptr,
                              int horizon = 1) {
    const Index T = values.rows();
    const Index n = values.cols();
    require(static_cast<Index>(features.size()) == n, "assemble_design: need one feature entry per node");
    require(static_cast<Index>(timestamps.size()) == T, "assemble_design: timestamps are not aligned");
    require(horizon >= 1, "assemble_design: horizon must be >= 1");
    if (exogenous) require(exogenous->rows() == T, "assemble_design: exogenous table is not aligned");

    Design d;
    int max_lag = 1;
    std::vector<std::vector<Index>> exo_cols(static_cast<std::size_t>(n));
    Index width = 0;
    for (Index j = 0; j < n; ++j) {
        const auto& nf = features[static_cast<std::size_t>(j)];
        require(!nf.lags.empty() || !nf.exogenous.empty(),
                "assemble_design: node '" + nf.node + "' has no features");
        d.node_offsets.push_back(width);
        for (int L : nf.lags) {
            require(L >= 1, "assemble_design: lags must be >= 1");
            max_lag = std::max(max_lag, L);
            d.column_names.push_back(nf.node + ":lag" + std::to_string(L));
        }
        for (const auto& f : nf.exogenous) {
            require(exogenous != nullptr, "assemble_design: exogenous feature without a table");
            const auto c = exogenous->column(f.id);
            require(c.has_value(), "assemble_design: unknown exogenous feature '" + f.id + "'");
            exo_cols[static_cast<std::size_t>(j)].push_back(*c);
            d.column_names.push_back(nf.node + ":" + f.id);
        }
        d.node_feature_counts.push_back(nf.width());
        width += nf.width();
    }

    std::vector<RowVector> xs;
    std::vector<RowVector> ys;
    for (Index t = max_lag - 1; t + horizon < T; ++t) {
        RowVector x(width);
        Index k = 0;
        for (Index j = 0; j < n; ++j) {
            const auto& nf = features[static_cast<std::size_t>(j)];
            for (int L : nf.lags) x(k++) = values(t + 1 - L, j);
            for (Index c : exo_cols[static_cast<std::size_t>(j)]) x(k++) = exogenous->values(t, c);
        }
        RowVector y = values.row(t + horizon);
        if (!x.allFinite() || !y.allFinite()) continue;
        xs.push_back(std::move(x));
        ys.push_back(std::move(y));
        d.feature_rows.push_back(t);
        d.target_times.push_back(timestamps[static_cast<std::size_t>(t + horizon)]);
    }
    require(!xs.empty(), "assemble_design: no usable rows after trimming");
    d.X.resize(static_cast<Index>(xs.size()), width);
    d.Y.resize(static_cast<Index>(ys.size()), n);
    for (std::size_t r = 0; r < xs.size(); ++r) {
        d.X.row(static_cast<Index>(r)) = xs[r];
        d.Y.row(static_cast<Index>(r)) = ys[r];
    }
    return d;
}

}  // namespace shl
