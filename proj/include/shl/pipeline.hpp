#pragma once

// End-to-end orchestration: configuration, tree building, the training grid
// over (architecture, loss) pairs with per-fold checkpoints, forecast export,
// reconciliation of forecast files, and report emission.

#include "core.hpp"
#include "evaluate.hpp"
#include "features.hpp"
#include "hierarchy.hpp"
#include "json.hpp"
#include "loss.hpp"
#include "netarch.hpp"
#include "reconcile.hpp"
#include "train.hpp"

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

namespace shl {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Configuration

struct TrainingSettings {
    int epochs = 200;
    int batch_size = 32;
    double learning_rate = 1e-3;
    OptimizerKind optimizer = OptimizerKind::adam;
    double dropout = 0.2;
    int depth = 3;
    double validation_fraction = 0.1;
    int patience = 20;
    double bn_momentum = 0.9;
    bool init_output_bias = true;
    std::optional<std::size_t> max_train_rows;

    bool operator==(const TrainingSettings&) const = default;
};

struct RunConfig {
    std::string meters;                  // wide meter CSV
    std::optional<std::string> weather;  // wide weather CSV
    std::string output_dir = "shl_out";

    std::optional<std::string> tree_file;  // load instead of clustering
    double cut_threshold = 0.0;

    double mic_threshold = kMicThreshold;
    double acf_threshold = kAcfThreshold;
    int max_missing_hours = 2;
    int fill_window = 8;
    int horizon = 1;

    std::size_t split_count = 10;
    TrainingSettings training;
    double alpha = kDefaultAlpha;
    std::vector<std::string> architectures;  // empty = all 13
    std::vector<LossKind> losses{LossKind::sh, LossKind::shc};
    std::uint64_t seed = 0;
    unsigned workers = 0;  // 0 = hardware concurrency

    bool operator==(const RunConfig&) const = default;

    /// Checks values and that referenced input files exist.
    void validate(bool check_paths = true) const {
        auto unit = [](double v, const char* what) {
            require(v >= 0.0 && v <= 1.0, std::string("config: ") + what + " must lie in [0, 1]");
        };
        unit(mic_threshold, "mic_threshold");
        unit(acf_threshold, "acf_threshold");
        unit(alpha, "alpha");
        require(cut_threshold >= 0.0, "config: cut_threshold must be >= 0");
        require(max_missing_hours >= 0, "config: max_missing_hours must be >= 0");
        require(fill_window >= 2, "config: fill_window must be >= 2");
        require(horizon >= 1, "config: horizon must be >= 1");
        require(split_count >= 1, "config: split_count must be >= 1");
        require(training.depth >= 1, "config: depth must be >= 1");
        require(!losses.empty(), "config: at least one loss kind is required");
        TrainConfig probe;
        probe.epochs = training.epochs;
        probe.batch_size = training.batch_size;
        probe.learning_rate = training.learning_rate;
        probe.dropout = training.dropout;
        probe.validation_fraction = training.validation_fraction;
        probe.bn_momentum = training.bn_momentum;
        probe.alpha = alpha;
        probe.validate();
        for (const auto& a : architectures) architecture_from_name(a);
        if (!check_paths) return;
        require(!meters.empty(), "config: \"meters\" path is required");
        require(fs::is_regular_file(meters), "config: meter CSV '" + meters + "' does not exist");
        if (weather) require(fs::is_regular_file(*weather), "config: weather CSV '" + *weather + "' does not exist");
        if (tree_file) require(fs::is_regular_file(*tree_file), "config: tree file '" + *tree_file + "' does not exist");
    }

    TrainConfig train_config(LossKind loss) const {
        TrainConfig c;
        c.epochs = training.epochs;
        c.batch_size = training.batch_size;
        c.learning_rate = training.learning_rate;
        c.optimizer = training.optimizer;
        c.alpha = alpha;
        c.dropout = training.dropout;
        c.loss = loss;
        c.seed = seed;
        c.validation_fraction = training.validation_fraction;
        c.patience = training.patience;
        c.init_output_bias = training.init_output_bias;
        c.bn_momentum = training.bn_momentum;
        return c;
    }
};

inline nlohmann::json config_to_json(const RunConfig& c) {
    using nlohmann::json;
    json losses = json::array();
    for (auto l : c.losses) losses.push_back(to_string(l));
    const auto& t = c.training;
    json training = {{"epochs", t.epochs},
                     {"batch_size", t.batch_size},
                     {"learning_rate", t.learning_rate},
                     {"optimizer", to_string(t.optimizer)},
                     {"dropout", t.dropout},
                     {"depth", t.depth},
                     {"validation_fraction", t.validation_fraction},
                     {"patience", t.patience},
                     {"bn_momentum", t.bn_momentum},
                     {"init_output_bias", t.init_output_bias},
                     {"max_train_rows", t.max_train_rows ? json(*t.max_train_rows) : json(nullptr)}};
    return {{"meters", c.meters},
            {"weather", c.weather ? json(*c.weather) : json(nullptr)},
            {"output_dir", c.output_dir},
            {"tree_file", c.tree_file ? json(*c.tree_file) : json(nullptr)},
            {"cut_threshold", c.cut_threshold},
            {"mic_threshold", c.mic_threshold},
            {"acf_threshold", c.acf_threshold},
            {"max_missing_hours", c.max_missing_hours},
            {"fill_window", c.fill_window},
            {"horizon", c.horizon},
            {"split_count", c.split_count},
            {"training", training},
            {"alpha", c.alpha},
            {"architectures", c.architectures},
            {"losses", losses},
            {"seed", c.seed},
            {"workers", c.workers}};
}

namespace detail {

template <class T>
void read_key(const nlohmann::json& j, const char* key, T& out) {
    if (!j.contains(key) || j[key].is_null()) return;
    try {
        out = j[key].get<T>();
    } catch (const nlohmann::json::exception&) {
        throw ValidationError(std::string("config: bad value for \"") + key + "\"");
    }
}

template <class T>
void read_optional(const nlohmann::json& j, const char* key, std::optional<T>& out) {
    if (!j.contains(key)) return;
    if (j[key].is_null()) {
        out.reset();
        return;
    }
    T v{};
    read_key(j, key, v);
    out = v;
}

inline void reject_unknown(const nlohmann::json& j, std::initializer_list<const char*> known, const std::string& where) {
    for (const auto& [k, _] : j.items()) {
        if (std::find_if(known.begin(), known.end(), [&](const char* s) { return k == s; }) == known.end())
            throw ValidationError(where + ": unknown key \"" + k + "\"");
    }
}

}  // namespace detail

/// Missing keys keep their defaults; unknown keys are rejected.
inline RunConfig config_from_json(const nlohmann::json& j) {
    require(j.is_object(), "config: expected a JSON object");
    detail::reject_unknown(j,
                           {"meters", "weather", "output_dir", "tree_file", "cut_threshold", "mic_threshold",
                            "acf_threshold", "max_missing_hours", "fill_window", "horizon", "split_count",
                            "training", "alpha", "architectures", "losses", "seed", "workers"},
                           "config");
    RunConfig c;
    detail::read_key(j, "meters", c.meters);
    detail::read_optional(j, "weather", c.weather);
    detail::read_key(j, "output_dir", c.output_dir);
    detail::read_optional(j, "tree_file", c.tree_file);
    detail::read_key(j, "cut_threshold", c.cut_threshold);
    detail::read_key(j, "mic_threshold", c.mic_threshold);
    detail::read_key(j, "acf_threshold", c.acf_threshold);
    detail::read_key(j, "max_missing_hours", c.max_missing_hours);
    detail::read_key(j, "fill_window", c.fill_window);
    detail::read_key(j, "horizon", c.horizon);
    detail::read_key(j, "split_count", c.split_count);
    detail::read_key(j, "alpha", c.alpha);
    detail::read_key(j, "architectures", c.architectures);
    detail::read_key(j, "seed", c.seed);
    detail::read_key(j, "workers", c.workers);
    if (j.contains("losses")) {
        std::vector<std::string> names;
        detail::read_key(j, "losses", names);
        c.losses.clear();
        for (const auto& n : names) c.losses.push_back(loss_kind_from_string(n));
    }
    if (j.contains("training")) {
        const auto& t = j["training"];
        require(t.is_object(), "config: \"training\" must be an object");
        detail::reject_unknown(t,
                               {"epochs", "batch_size", "learning_rate", "optimizer", "dropout", "depth",
                                "validation_fraction", "patience", "bn_momentum", "init_output_bias",
                                "max_train_rows"},
                               "config.training");
        auto& s = c.training;
        detail::read_key(t, "epochs", s.epochs);
        detail::read_key(t, "batch_size", s.batch_size);
        detail::read_key(t, "learning_rate", s.learning_rate);
        detail::read_key(t, "dropout", s.dropout);
        detail::read_key(t, "depth", s.depth);
        detail::read_key(t, "validation_fraction", s.validation_fraction);
        detail::read_key(t, "patience", s.patience);
        detail::read_key(t, "bn_momentum", s.bn_momentum);
        detail::read_key(t, "init_output_bias", s.init_output_bias);
        detail::read_optional(t, "max_train_rows", s.max_train_rows);
        std::string opt = to_string(s.optimizer);
        detail::read_key(t, "optimizer", opt);
        s.optimizer = optimizer_from_string(opt);
    }
    c.validate(false);
    return c;
}

/// Reads a config file. Relative paths inside it are taken relative to the
/// file's directory.
inline RunConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open config '" + path + "'");
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw ValidationError("config '" + path + "': " + e.what());
    }
    RunConfig c = config_from_json(j);
    const fs::path base = fs::path(path).parent_path();
    auto resolve = [&](std::string& p) {
        if (!p.empty() && fs::path(p).is_relative()) p = (base / p).lexically_normal().string();
    };
    resolve(c.meters);
    resolve(c.output_dir);
    if (c.weather) resolve(*c.weather);
    if (c.tree_file) resolve(*c.tree_file);
    return c;
}

// ---------------------------------------------------------------------------
// Shared preparation

struct PreparedData {
    SeriesPanel meters;                 // filled hourly leaf series
    std::optional<SeriesPanel> weather;  // filled and aligned, unfillable columns removed
    Tree tree;
    std::optional<Linkage> linkage;
    StructuralMatrices sm;
    Matrix node_values;  // T x n in canonical order
    FeatureSet features;
    Design design;
};

namespace detail {

inline void write_text(const fs::path& path, const std::string& text) {
    std::error_code ec;
    if (path.has_parent_path()) fs::create_directories(path.parent_path(), ec);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw RuntimeError("cannot write '" + path.string() + "'");
    out << text;
    if (!out) throw RuntimeError("write failed for '" + path.string() + "'");
}

inline nlohmann::json read_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open '" + path.string() + "'");
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw ValidationError("'" + path.string() + "': " + e.what());
    }
}

// Weather gaps are filled column by column; columns that cannot be filled are
// removed instead of failing the whole run.
inline SeriesPanel fill_weather(const SeriesPanel& raw, const FillOptions& opts) {
    SeriesPanel out;
    out.timestamps = raw.timestamps;
    std::vector<Index> keep;
    std::vector<Vector> cols;
    FillOptions lenient = opts;
    lenient.max_missing_hours = static_cast<int>(raw.rows());
    for (Index c = 0; c < raw.cols(); ++c) {
        SeriesPanel one;
        one.timestamps = raw.timestamps;
        one.ids = {raw.ids[static_cast<std::size_t>(c)]};
        one.values = raw.values.col(c);
        one.missing = raw.missing.col(c);
        try {
            auto filled = resample_and_fill(one, lenient);
            out.ids.push_back(one.ids[0]);
            cols.push_back(filled.panel.values.col(0));
        } catch (const RuntimeError&) {
            warn("weather column '" + one.ids[0] + "' has gaps that cannot be filled; dropped");
        }
    }
    out.values.resize(raw.rows(), static_cast<Index>(cols.size()));
    for (std::size_t i = 0; i < cols.size(); ++i) out.values.col(static_cast<Index>(i)) = cols[i];
    out.missing = BoolMatrix::Constant(raw.rows(), out.values.cols(), false);
    return out;
}

}  // namespace detail

/// Ingests the inputs and builds the hierarchy. Stops before feature work.
inline PreparedData prepare_tree(const RunConfig& config) {
    config.validate();
    PreparedData d;
    auto ingest = ingest_csv_files(config.meters, config.weather);
    const FillOptions fill{config.max_missing_hours, config.fill_window};
    d.meters = resample_and_fill(ingest.meters, fill).panel;
    require(d.meters.cols() >= 1, "no meter series survived the gap rule");
    if (ingest.weather) d.weather = detail::fill_weather(*ingest.weather, fill);

    if (config.tree_file) {
        d.tree = tree_from_json(detail::read_json(*config.tree_file));
        std::vector<Index> cols;
        std::vector<std::string> ids;
        for (std::size_t j = 0; j < d.tree.leaf_count(); ++j) {
            const auto& id = d.tree.id(d.tree.leaf_node(j));
            const auto c = d.meters.column(id);
            require(c.has_value(), "tree leaf '" + id + "' has no meter series");
            cols.push_back(*c);
            ids.push_back(id);
        }
        SeriesPanel leaves;
        leaves.timestamps = d.meters.timestamps;
        leaves.ids = ids;
        leaves.values.resize(d.meters.rows(), static_cast<Index>(cols.size()));
        for (std::size_t j = 0; j < cols.size(); ++j) leaves.values.col(static_cast<Index>(j)) = d.meters.values.col(cols[j]);
        leaves.missing = BoolMatrix::Constant(leaves.values.rows(), leaves.values.cols(), false);
        d.meters = std::move(leaves);
    } else {
        require(d.meters.cols() >= 2, "clustering needs at least two meter series");
        d.linkage = ward_cluster(d.meters.values);
        d.tree = cut_tree(*d.linkage, config.cut_threshold, d.meters.ids);
    }
    d.sm = build_summation_matrix(d.tree);
    d.node_values = d.meters.values * d.sm.S.transpose();
    return d;
}

inline PreparedData prepare(const RunConfig& config) {
    PreparedData d = prepare_tree(config);
    FeatureOptions fo;
    fo.mic_threshold = config.mic_threshold;
    fo.acf_threshold = config.acf_threshold;
    const SeriesPanel* exo = d.weather ? &*d.weather : nullptr;
    d.features = select_features(d.node_values, d.tree.ids(), exo, fo);
    d.design = assemble_design(d.node_values, d.meters.timestamps, d.features, exo, config.horizon);
    return d;
}

// ---------------------------------------------------------------------------
// tree

struct TreeOutput {
    Tree tree;
    std::optional<Linkage> linkage;
    std::vector<fs::path> files;
};

inline std::string merge_listing(const Linkage& l) {
    std::ostringstream s;
    s << "step,left,right,distance,size\n" << std::setprecision(10);
    for (std::size_t k = 0; k < l.merges.size(); ++k) {
        const auto& m = l.merges[k];
        s << k << ',' << m.left << ',' << m.right << ',' << m.distance << ',' << m.size << '\n';
    }
    return s.str();
}

/// Writes tree.json and, when clustering, merges.csv into the output directory.
inline TreeOutput cmd_tree(const RunConfig& config) {
    PreparedData d = prepare_tree(config);
    TreeOutput out{d.tree, d.linkage, {}};
    const fs::path dir = config.output_dir;
    detail::write_text(dir / "tree.json", tree_to_json(d.tree).dump(2) + "\n");
    out.files.push_back(dir / "tree.json");
    if (d.linkage) {
        detail::write_text(dir / "merges.csv", merge_listing(*d.linkage));
        out.files.push_back(dir / "merges.csv");
    }
    return out;
}

// ---------------------------------------------------------------------------
// Forecast files: long format "timestamp,node,value"

struct ForecastTable {
    std::vector<std::int64_t> timestamps;
    Matrix values;  // rows x n, columns in tree order
};

inline std::string forecast_csv(const std::vector<std::int64_t>& timestamps, const Matrix& values,
                                const Tree& tree) {
    std::ostringstream s;
    s << "timestamp,node,value\n" << std::setprecision(17);
    for (Index r = 0; r < values.rows(); ++r)
        for (Index j = 0; j < values.cols(); ++j)
            s << format_timestamp(timestamps[static_cast<std::size_t>(r)]) << ','
              << tree.id(static_cast<std::size_t>(j)) << ',' << values(r, j) << '\n';
    return s.str();
}

inline ForecastTable read_forecast_csv(std::istream& in, const Tree& tree, const std::string& source = "forecast csv") {
    std::string line;
    require(static_cast<bool>(std::getline(in, line)), source + ": empty file");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    {
        const auto h = detail::split_csv_line(line);
        require(h.size() == 3 && detail::trim(h[0]) == "timestamp" && detail::trim(h[1]) == "node" &&
                    detail::trim(h[2]) == "value",
                source + ": header must be timestamp,node,value");
    }
    std::map<std::int64_t, std::vector<double>> rows;
    std::map<std::int64_t, std::vector<bool>> seen;
    const std::size_t n = tree.size();
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (detail::trim(line).empty()) continue;
        const std::string where = source + ": line " + std::to_string(lineno);
        const auto cells = detail::split_csv_line(line);
        require(cells.size() == 3, where + ": expected 3 cells");
        const auto ts = parse_timestamp(detail::trim(cells[0]));
        require(ts.has_value(), where + ": unparseable timestamp");
        const auto node = tree.find(std::string(detail::trim(cells[1])));
        require(node.has_value(), where + ": node '" + std::string(detail::trim(cells[1])) + "' is not in the tree");
        double v = 0.0;
        try {
            std::size_t used = 0;
            const std::string cell(detail::trim(cells[2]));
            v = std::stod(cell, &used);
            require(used == cell.size(), "");
        } catch (...) {
            throw ValidationError(where + ": unparseable value");
        }
        auto& r = rows.try_emplace(*ts, std::vector<double>(n, 0.0)).first->second;
        auto& s = seen.try_emplace(*ts, std::vector<bool>(n, false)).first->second;
        require(!s[*node], where + ": duplicated entry");
        s[*node] = true;
        r[*node] = v;
    }
    require(!rows.empty(), source + ": no forecasts");
    ForecastTable t;
    t.values.resize(static_cast<Index>(rows.size()), static_cast<Index>(n));
    Index r = 0;
    for (const auto& [ts, vals] : rows) {
        const auto& s = seen[ts];
        for (std::size_t j = 0; j < n; ++j)
            require(s[j], source + ": " + format_timestamp(ts) + " lacks node '" + tree.id(j) + "'");
        t.timestamps.push_back(ts);
        for (std::size_t j = 0; j < n; ++j) t.values(r, static_cast<Index>(j)) = vals[j];
        ++r;
    }
    return t;
}

inline ForecastTable read_forecast_csv_file(const std::string& path, const Tree& tree) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open forecast file '" + path + "'");
    return read_forecast_csv(in, tree, path);
}

// ---------------------------------------------------------------------------
// run

struct RunSummary {
    ArchitectureSpec architecture;
    LossKind loss = LossKind::sh;
    fs::path directory;
    std::size_t folds_trained = 0;
    std::size_t folds_restored = 0;
    RunScore score;
};

struct RunOutput {
    std::vector<RunSummary> runs;
    std::vector<fs::path> report_files;
    EvaluationReport report;
};

namespace detail {

inline std::uint64_t fnv1a(const void* data, std::size_t bytes, std::uint64_t h = 1469598103934665603ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < bytes; ++i) {
        h ^= p[i];
        h *= 1099511628211ull;
    }
    return h;
}

inline std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

inline std::string run_name(const ArchitectureSpec& a, LossKind l) { return a.name() + "_" + to_string(l); }

}  // namespace detail

/// Identifies everything a checkpoint depends on. Stale checkpoints are ignored.
inline std::string run_fingerprint(const RunConfig& config, const ArchitectureSpec& arch, LossKind loss,
                                   const Design& design, const Tree& tree) {
    nlohmann::json key = {{"training", config_to_json(config)["training"]},
                          {"alpha", config.alpha},
                          {"seed", config.seed},
                          {"split_count", config.split_count},
                          {"architecture", architecture_to_json(arch)},
                          {"loss", to_string(loss)},
                          {"tree", tree_to_json(tree)},
                          {"columns", design.column_names}};
    const std::string text = key.dump();
    std::uint64_t h = detail::fnv1a(text.data(), text.size());
    h = detail::fnv1a(design.X.data(), static_cast<std::size_t>(design.X.size()) * sizeof(double), h);
    h = detail::fnv1a(design.Y.data(), static_cast<std::size_t>(design.Y.size()) * sizeof(double), h);
    return detail::hex64(h);
}

inline nlohmann::json run_score_to_json(const RunScore& s) {
    return {{"architecture", s.architecture.name()},
            {"loss", to_string(s.loss)},
            {"accuracy", s.accuracy},
            {"coherency", s.coherency},
            {"node_accuracy", std::vector<double>(s.node_accuracy.data(), s.node_accuracy.data() + s.node_accuracy.size())}};
}

inline RunScore run_score_from_json(const nlohmann::json& j, int depth, double dropout) {
    RunScore s;
    s.architecture = architecture_from_name(j.at("architecture").get<std::string>(), depth, dropout);
    s.loss = loss_kind_from_string(j.at("loss").get<std::string>());
    s.accuracy = j.at("accuracy").get<double>();
    s.coherency = j.at("coherency").get<double>();
    const auto v = j.at("node_accuracy").get<std::vector<double>>();
    s.node_accuracy = Eigen::Map<const Vector>(v.data(), static_cast<Index>(v.size()));
    return s;
}

/// The (architecture, loss) grid in deterministic order.
inline std::vector<std::pair<ArchitectureSpec, LossKind>> run_grid(const RunConfig& config, const Tree& tree) {
    std::vector<ArchitectureSpec> archs;
    if (config.architectures.empty())
        archs = enumerate_architectures(tree, config.training.depth, config.training.dropout);
    else
        for (const auto& a : config.architectures)
            archs.push_back(architecture_from_name(a, config.training.depth, config.training.dropout));
    std::vector<std::pair<ArchitectureSpec, LossKind>> grid;
    for (const auto& a : archs)
        for (auto l : config.losses) {
            const bool dup = std::any_of(grid.begin(), grid.end(),
                                         [&](const auto& g) { return g.first == a && g.second == l; });
            if (!dup) grid.emplace_back(a, l);
        }
    return grid;
}

/// Collects per-run scores from <out>/runs and writes the reports.
inline RunOutput cmd_report(const RunConfig& config) {
    const fs::path dir = config.output_dir;
    const Tree tree = tree_from_json(detail::read_json(dir / "tree.json"));
    RunOutput out;
    out.report.node_ids = tree.ids();
    std::vector<fs::path> score_files;
    if (fs::is_directory(dir / "runs"))
        for (const auto& e : fs::directory_iterator(dir / "runs"))
            if (fs::is_regular_file(e.path() / "score.json")) score_files.push_back(e.path() / "score.json");
    std::sort(score_files.begin(), score_files.end());
    for (const auto& f : score_files) {
        RunScore s = run_score_from_json(detail::read_json(f), config.training.depth, config.training.dropout);
        require(s.node_accuracy.size() == static_cast<Index>(tree.size()),
                "'" + f.string() + "' does not match the tree");
        out.runs.push_back({s.architecture, s.loss, f.parent_path(), 0, 0, s});
        out.report.runs.push_back(std::move(s));
    }
    out.report_files = emit_reports(out.report, dir / "reports");
    return out;
}

/// Trains every (architecture, loss) pair of the grid on the rolling-window
/// protocol. Fold models are checkpointed and reused on later invocations.
inline RunOutput cmd_run(const RunConfig& config) {
    const PreparedData d = prepare(config);
    const fs::path dir = config.output_dir;
    detail::write_text(dir / "tree.json", tree_to_json(d.tree).dump(2) + "\n");
    detail::write_text(dir / "features.json", feature_set_to_json(d.features).dump(2) + "\n");
    detail::write_text(dir / "config.json", config_to_json(config).dump(2) + "\n");

    const auto grid = run_grid(config, d.tree);
    const ReconciliationMap scoring(d.sm.S, CovarianceEstimate::identity(static_cast<Index>(d.tree.size())));
    std::vector<RunSummary> summaries(grid.size());
    std::vector<std::string> errors(grid.size());
    std::vector<char> runtime_failure(grid.size(), 0);

    auto execute = [&](std::size_t g) {
        const auto& [arch, loss] = grid[g];
        const fs::path run_dir = dir / "runs" / detail::run_name(arch, loss);
        const fs::path ckpt = run_dir / "checkpoints";
        std::size_t fold = 0;
        try {
            const auto layout = build_masks(d.tree, arch, d.design.node_feature_counts);
            const std::string fp = run_fingerprint(config, arch, loss, d.design, d.tree);
            RunSummary& sum = summaries[g];
            sum.architecture = arch;
            sum.loss = loss;
            sum.directory = run_dir;
            auto file = [&](std::size_t i) {
                char name[32];
                std::snprintf(name, sizeof name, "fold_%02zu.json", i);
                return ckpt / name;
            };
            RollingHooks hooks;
            hooks.load = [&](std::size_t i) -> std::optional<Model> {
                fold = i;
                if (!fs::is_regular_file(file(i))) return std::nullopt;
                try {
                    const auto j = detail::read_json(file(i));
                    if (j.value("fingerprint", "") != fp) return std::nullopt;
                    Model m = model_from_json(j.at("model"));
                    ++sum.folds_restored;
                    return m;
                } catch (const std::exception&) {
                    warn("ignoring unreadable checkpoint '" + file(i).string() + "'");
                    return std::nullopt;
                }
            };
            hooks.save = [&](std::size_t i, const Model& m) {
                ++sum.folds_trained;
                nlohmann::json j = {{"fingerprint", fp}, {"model", model_to_json(m)}};
                detail::write_text(file(i), j.dump() + "\n");
            };
            const RollingResult res = rolling_window_run(d.design.X, d.design.Y, d.sm, layout,
                                                         config.train_config(loss), config.split_count, hooks,
                                                         config.training.max_train_rows);
            fold = res.records.size();
            if (!res.forecasts.allFinite()) throw RuntimeError("non-finite forecasts");

            std::vector<std::int64_t> times;
            for (auto r : res.rows) times.push_back(d.design.target_times[r]);
            detail::write_text(run_dir / "forecasts.csv", forecast_csv(times, res.forecasts, d.tree));
            detail::write_text(run_dir / "targets.csv", forecast_csv(times, res.targets, d.tree));

            // Reference reconciliation: each block uses the covariance its fold trained with.
            Matrix reconciled(res.forecasts.rows(), res.forecasts.cols());
            Index cursor = 0;
            for (std::size_t i = 0; i < res.records.size(); ++i) {
                const ReconciliationMap map(d.sm.S, res.sigmas[i]);
                const auto len = static_cast<Index>(res.records[i].fold.test_end - res.records[i].fold.test_begin);
                for (Index r = cursor; r < cursor + len; ++r)
                    reconciled.row(r) = map.apply(res.forecasts.row(r).transpose()).transpose();
                cursor += len;
            }
            detail::write_text(run_dir / "reconciled.csv", forecast_csv(times, reconciled, d.tree));

            nlohmann::json sig = {{"folds", nlohmann::json::array()}, {"next", covariance_to_json(res.next_sigma)}};
            for (const auto& s : res.sigmas) sig["folds"].push_back(covariance_to_json(s));
            detail::write_text(run_dir / "sigma.json", sig.dump(2) + "\n");

            sum.score = score_run(arch, loss, res.targets, res.forecasts, d.sm.kappa, scoring);
            detail::write_text(run_dir / "score.json", run_score_to_json(sum.score).dump(2) + "\n");
        } catch (const std::exception& e) {
            runtime_failure[g] = dynamic_cast<const ValidationError*>(&e) == nullptr;
            errors[g] = "architecture " + arch.name() + ", loss " + to_string(loss) + ", batch " +
                        std::to_string(fold + 1) + ": " + e.what();
        }
    };

    unsigned workers = config.workers ? config.workers : std::max(1u, std::thread::hardware_concurrency());
    workers = std::min<unsigned>(workers, static_cast<unsigned>(std::max<std::size_t>(grid.size(), 1)));
    std::atomic<std::size_t> next{0};
    {
        std::vector<std::jthread> pool;
        for (unsigned w = 0; w < workers; ++w)
            pool.emplace_back([&] {
                for (std::size_t g = next++; g < grid.size(); g = next++) execute(g);
            });
    }

    std::string failures;
    bool validation_only = true;
    for (std::size_t g = 0; g < grid.size(); ++g)
        if (!errors[g].empty()) {
            failures += (failures.empty() ? "" : "\n") + errors[g];
            if (runtime_failure[g]) validation_only = false;
        }
    if (!failures.empty()) {
        if (validation_only) throw ValidationError(failures);
        throw RuntimeError(failures);
    }

    RunOutput out;
    out.runs = std::move(summaries);
    out.report.node_ids = d.tree.ids();
    for (const auto& r : out.runs) out.report.runs.push_back(r.score);
    out.report_files = emit_reports(out.report, dir / "reports");
    return out;
}

// ---------------------------------------------------------------------------
// reconcile

enum class ReconcileMethod { gls, bu, td };

inline ReconcileMethod reconcile_method_from_string(std::string_view s) {
    if (s == "gls") return ReconcileMethod::gls;
    if (s == "bu") return ReconcileMethod::bu;
    if (s == "td") return ReconcileMethod::td;
    throw ValidationError("unknown reconciliation method '" + std::string(s) + "' (expected gls, bu or td)");
}

struct ReconcileOptions {
    std::string forecasts;  // long-format forecast CSV
    std::string tree;       // tree JSON
    ReconcileMethod method = ReconcileMethod::gls;
    std::string sigma = "identity";  // identity | structural | path to a sigma.json or covariance JSON
    std::optional<std::string> history;  // wide leaf CSV for top-down proportions
    std::string output;
};

struct ReconcileOutput {
    ForecastTable table;
    double max_residual = 0.0;  // max-norm of the coherency residual after reconciliation
};

inline CovarianceEstimate load_sigma(const std::string& source, const StructuralMatrices& sm) {
    const auto n = sm.S.rows();
    if (source == "identity") return CovarianceEstimate::identity(n);
    if (source == "structural") return CovarianceEstimate::structural(sm.kappa);
    const auto j = detail::read_json(source);
    // A run's sigma.json holds the per-fold sequence and the estimate for the next block.
    const CovarianceEstimate c = covariance_from_json(j.contains("next") ? j["next"] : j);
    require(c.diag.size() == n, "sigma '" + source + "' has the wrong dimension");
    return c;
}

inline ReconcileOutput cmd_reconcile(const ReconcileOptions& opts) {
    const Tree tree = tree_from_json(detail::read_json(opts.tree));
    const auto sm = build_summation_matrix(tree);
    ReconcileOutput out;
    out.table = read_forecast_csv_file(opts.forecasts, tree);
    Matrix& v = out.table.values;

    std::optional<ReconciliationMap> map;
    Vector proportions;
    if (opts.method == ReconcileMethod::gls) map.emplace(sm.S, load_sigma(opts.sigma, sm));
    if (opts.method == ReconcileMethod::td) {
        if (opts.history) {
            const SeriesPanel h = read_series_csv_file(*opts.history);
            Matrix leaves(h.rows(), static_cast<Index>(tree.leaf_count()));
            for (std::size_t j = 0; j < tree.leaf_count(); ++j) {
                const auto c = h.column(tree.id(tree.leaf_node(j)));
                require(c.has_value(), "history lacks leaf '" + tree.id(tree.leaf_node(j)) + "'");
                leaves.col(static_cast<Index>(j)) = h.values.col(*c);
            }
            require(leaves.allFinite(), "history has missing values");
            proportions = historical_proportions(leaves * sm.S.transpose(), tree.leaf_count());
        } else {
            proportions = historical_proportions(v, tree.leaf_count());
        }
    }
    for (Index r = 0; r < v.rows(); ++r) {
        const Vector y = v.row(r).transpose();
        Vector rec;
        switch (opts.method) {
            case ReconcileMethod::gls: rec = map->apply(y); break;
            case ReconcileMethod::bu: rec = reconcile_bottom_up(y, sm.S, sm.G); break;
            case ReconcileMethod::td: rec = reconcile_top_down(y, sm.S, proportions); break;
        }
        v.row(r) = rec.transpose();
        out.max_residual = std::max(out.max_residual, coherency_residual(rec, sm.S, sm.G).cwiseAbs().maxCoeff());
    }
    if (!opts.output.empty()) detail::write_text(opts.output, forecast_csv(out.table.timestamps, v, tree));
    return out;
}

}  // namespace shl
