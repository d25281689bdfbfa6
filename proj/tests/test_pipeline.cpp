#include "shl/pipeline.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <numbers>
#include <sstream>

#include <sys/wait.h>
#include <unistd.h>

using namespace shl;

namespace {

constexpr std::int64_t kStart = 1483228800;

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

void write(const fs::path& p, const std::string& text) {
    fs::create_directories(p.parent_path());
    std::ofstream(p, std::ios::binary) << text;
}

class Workspace {
public:
    explicit Workspace(const std::string& name)
        : root_(fs::temp_directory_path() / ("shl_pipe_" + name + "_" + std::to_string(::getpid()))) {
        fs::remove_all(root_);
        fs::create_directories(root_);
    }
    ~Workspace() { fs::remove_all(root_); }
    const fs::path& root() const { return root_; }
    fs::path operator/(const std::string& s) const { return root_ / s; }

private:
    fs::path root_;
};

std::string wide_csv(const std::vector<std::string>& ids, const Matrix& v) {
    std::ostringstream s;
    s << "timestamp";
    for (const auto& id : ids) s << ',' << id;
    s << '\n' << std::setprecision(10);
    for (Index r = 0; r < v.rows(); ++r) {
        s << format_timestamp(kStart + r * 3600);
        for (Index c = 0; c < v.cols(); ++c) s << ',' << v(r, c);
        s << '\n';
    }
    return s.str();
}

// Six meters in three families with daily load shapes plus noise.
std::string six_meter_csv(Index T = 400) {
    Rng rng(17);
    Matrix v(T, 6);
    for (Index t = 0; t < T; ++t) {
        const double phase = 2 * std::numbers::pi * static_cast<double>(t % 24) / 24.0;
        for (Index c = 0; c < 6; ++c) {
            const double family = static_cast<double>(c / 2);
            v(t, c) = 20 + 10 * family + (3 + family) * std::sin(phase + family) + 0.5 * rng.normal();
        }
    }
    return wide_csv({"m0", "m1", "m2", "m3", "m4", "m5"}, v);
}

std::string weather_csv(Index T = 400) {
    Rng rng(18);
    Matrix v(T, 2);
    for (Index t = 0; t < T; ++t) {
        v(t, 0) = 10 + 5 * std::sin(2 * std::numbers::pi * static_cast<double>(t % 24) / 24.0);
        v(t, 1) = rng.normal();
    }
    return wide_csv({"air_temperature", "wind"}, v);
}

RunConfig small_config(const Workspace& ws, const std::string& out = "out") {
    write(ws / "meters.csv", six_meter_csv());
    RunConfig c;
    c.meters = (ws / "meters.csv").string();
    c.output_dir = (ws / out).string();
    c.training.epochs = 3;
    c.training.batch_size = 64;
    c.training.learning_rate = 1e-2;
    c.seed = 5;
    c.workers = 4;
    return c;
}

int run_cli(const std::string& args) {
    const std::string cmd = std::string(SHL_CLI_PATH) + " " + args + " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST(RunConfig, JsonRoundTripIsFixedPoint) {
    RunConfig a;
    EXPECT_EQ(config_from_json(config_to_json(a)), a);
    RunConfig b;
    b.meters = "m.csv";
    b.weather = "w.csv";
    b.tree_file = "t.json";
    b.cut_threshold = 12.5;
    b.architectures = {"tree-bu", "full"};
    b.losses = {LossKind::shc};
    b.training.max_train_rows = 500;
    b.training.optimizer = OptimizerKind::sgd;
    b.seed = 99;
    const auto j = config_to_json(b);
    EXPECT_EQ(config_from_json(j), b);
    EXPECT_EQ(config_to_json(config_from_json(nlohmann::json::parse(j.dump()))), j);
}

TEST(RunConfig, DefaultsAndValidation) {
    const RunConfig c = config_from_json(nlohmann::json::parse(R"({"meters":"x.csv"})"));
    EXPECT_EQ(c.alpha, 0.75);
    EXPECT_EQ(c.mic_threshold, 0.25);
    EXPECT_EQ(c.acf_threshold, 0.25);
    EXPECT_EQ(c.split_count, 10u);
    EXPECT_EQ(c.losses.size(), 2u);
    EXPECT_TRUE(c.architectures.empty());
    EXPECT_THROW(config_from_json(nlohmann::json::parse(R"({"mic_threshold":1.5})")), ValidationError);
    EXPECT_THROW(config_from_json(nlohmann::json::parse(R"({"alhpa":0.5})")), ValidationError);
    EXPECT_THROW(config_from_json(nlohmann::json::parse(R"({"architectures":["tree-up"]})")), ValidationError);
    EXPECT_THROW(config_from_json(nlohmann::json::parse(R"({"training":{"epochs":"many"}})")), ValidationError);
    EXPECT_THROW(c.validate(), ValidationError);  // x.csv does not exist
}

TEST(RunConfig, LoadResolvesRelativePaths) {
    Workspace ws("load");
    write(ws / "meters.csv", "timestamp,a\n");
    write(ws / "cfg" / "run.json", R"({"meters":"../meters.csv","output_dir":"results"})");
    const RunConfig c = load_config((ws / "cfg" / "run.json").string());
    EXPECT_EQ(fs::path(c.meters), (ws / "meters.csv").lexically_normal());
    EXPECT_EQ(fs::path(c.output_dir), (ws / "cfg" / "results").lexically_normal());
    EXPECT_THROW(load_config((ws / "missing.json").string()), ValidationError);
}

TEST(CmdTree, SixSeriesThresholds) {
    Workspace ws("tree6");
    RunConfig c = small_config(ws);
    const auto zero = cmd_tree(c);
    EXPECT_EQ(zero.tree.size(), 11u);
    EXPECT_EQ(zero.tree.leaf_count(), 6u);
    ASSERT_TRUE(zero.linkage.has_value());
    EXPECT_TRUE(fs::exists(ws / "out" / "tree.json"));
    EXPECT_EQ(tree_from_json(nlohmann::json::parse(slurp(ws / "out" / "tree.json"))), zero.tree);
    const std::string listing = slurp(ws / "out" / "merges.csv");
    EXPECT_EQ(std::count(listing.begin(), listing.end(), '\n'), 6);  // header + 5 merges

    c.cut_threshold = zero.linkage->merges.back().distance * 1.01;
    const auto flat = cmd_tree(c);
    EXPECT_EQ(flat.tree.size(), 7u);
    for (std::size_t j = 0; j < 6; ++j) EXPECT_EQ(flat.tree.parent(flat.tree.leaf_node(j)), std::optional<std::size_t>(0));
}

TEST(CmdTree, LargeFixtureHas265Nodes) {
    Workspace ws("tree133");
    Rng rng(3);
    Matrix v(48, 133);
    for (Index i = 0; i < v.size(); ++i) v.data()[i] = rng.uniform(0, 50);
    std::vector<std::string> ids;
    for (int i = 0; i < 133; ++i) ids.push_back("b" + std::to_string(i));
    write(ws / "meters.csv", wide_csv(ids, v));
    RunConfig c;
    c.meters = (ws / "meters.csv").string();
    c.output_dir = (ws / "out").string();
    EXPECT_EQ(cmd_tree(c).tree.size(), 265u);
}

TEST(CmdTree, TreeFileSelectsLeaves) {
    Workspace ws("treefile");
    RunConfig c = small_config(ws);
    write(ws / "tree.json",
          R"({"nodes":[{"id":"site","parent":null},{"id":"m3","parent":"site"},{"id":"m0","parent":"site"}]})");
    c.tree_file = (ws / "tree.json").string();
    const auto d = prepare_tree(c);
    EXPECT_EQ(d.tree.size(), 3u);
    EXPECT_EQ(d.meters.ids, (std::vector<std::string>{"m3", "m0"}));
    EXPECT_EQ(d.node_values.col(0), d.node_values.col(1) + d.node_values.col(2));

    write(ws / "bad.json", R"({"nodes":[{"id":"site","parent":null},{"id":"zz","parent":"site"}]})");
    c.tree_file = (ws / "bad.json").string();
    EXPECT_THROW(prepare_tree(c), ValidationError);
}

TEST(CmdRun, SingleRunWritesArtifacts) {
    Workspace ws("single");
    write(ws / "weather.csv", weather_csv());
    RunConfig c = small_config(ws);
    c.weather = (ws / "weather.csv").string();
    c.architectures = {"tree-disc"};
    c.losses = {LossKind::sh};
    const auto out = cmd_run(c);
    ASSERT_EQ(out.runs.size(), 1u);
    EXPECT_EQ(out.runs[0].folds_trained, 10u);
    EXPECT_EQ(out.runs[0].folds_restored, 0u);
    const fs::path run = ws / "out" / "runs" / "tree-disc_sh";
    for (const char* f : {"forecasts.csv", "targets.csv", "reconciled.csv", "sigma.json", "score.json"})
        EXPECT_TRUE(fs::exists(run / f)) << f;
    EXPECT_TRUE(fs::exists(run / "checkpoints" / "fold_09.json"));

    const auto acc = slurp(ws / "out" / "reports" / "accuracy_heatmap.csv");
    EXPECT_EQ(std::count(acc.begin(), acc.end(), '\n'), 2);

    // Forecast file: every test row has one line per node.
    const Tree tree = tree_from_json(nlohmann::json::parse(slurp(ws / "out" / "tree.json")));
    const auto fc = read_forecast_csv_file((run / "forecasts.csv").string(), tree);
    EXPECT_EQ(fc.values.cols(), 11);
    EXPECT_EQ(fc.values.rows() % 10, 0);
    EXPECT_TRUE(std::is_sorted(fc.timestamps.begin(), fc.timestamps.end()));

    // Reconciled reference output is coherent.
    const auto sm = build_summation_matrix(tree);
    const auto rec = read_forecast_csv_file((run / "reconciled.csv").string(), tree);
    for (Index r = 0; r < rec.values.rows(); ++r)
        EXPECT_LT(coherency_residual(rec.values.row(r).transpose(), sm.S, sm.G).cwiseAbs().maxCoeff(),
                  1e-9 * (1 + rec.values.row(r).norm()));

    // Sigma sequence: identity first, then hvar.
    const auto sig = nlohmann::json::parse(slurp(run / "sigma.json"));
    ASSERT_EQ(sig["folds"].size(), 10u);
    EXPECT_EQ(covariance_from_json(sig["folds"][0]).kind, CovarianceKind::identity);
    EXPECT_EQ(covariance_from_json(sig["folds"][1]).kind, CovarianceKind::hvar);
}

TEST(CmdRun, FullGridDeterministicAndResumable) {
    Workspace ws("grid");
    RunConfig c = small_config(ws, "a");
    c.training.epochs = 2;
    const auto first = cmd_run(c);
    EXPECT_EQ(first.runs.size(), 26u);
    const auto acc = slurp(ws / "a" / "reports" / "accuracy_heatmap.csv");
    EXPECT_EQ(std::count(acc.begin(), acc.end(), '\n'), 27);

    // Same seed, different worker count and directory.
    RunConfig c2 = c;
    c2.output_dir = (ws / "b").string();
    c2.workers = 1;
    cmd_run(c2);
    for (const char* f : {"accuracy_heatmap.csv", "coherency_table.csv", "improvement_ratios.csv"})
        EXPECT_EQ(slurp(ws / "a" / "reports" / f), slurp(ws / "b" / "reports" / f)) << f;

    // Delete the reports and rerun: everything restores from checkpoints.
    const std::string before = slurp(ws / "a" / "reports" / "coherency_table.csv");
    fs::remove_all(ws / "a" / "reports");
    const auto again = cmd_run(c);
    for (const auto& r : again.runs) {
        EXPECT_EQ(r.folds_trained, 0u) << r.architecture.name();
        EXPECT_EQ(r.folds_restored, 10u);
    }
    EXPECT_EQ(slurp(ws / "a" / "reports" / "coherency_table.csv"), before);
    EXPECT_EQ(slurp(ws / "a" / "reports" / "accuracy_heatmap.csv"), acc);

    // The report subcommand rebuilds the same files from the run scores.
    fs::remove_all(ws / "a" / "reports");
    cmd_report(c);
    EXPECT_EQ(slurp(ws / "a" / "reports" / "accuracy_heatmap.csv"), acc);

    // A different seed invalidates the checkpoints.
    c.seed = 6;
    c.architectures = {"full"};
    c.losses = {LossKind::shc};
    const auto reseeded = cmd_run(c);
    EXPECT_EQ(reseeded.runs[0].folds_trained, 10u);
}

TEST(CmdRun, ErrorsCarryRunCoordinate) {
    Workspace ws("err");
    RunConfig c = small_config(ws);
    c.architectures = {"cutree-td"};
    c.losses = {LossKind::shc};
    c.split_count = 5000;
    try {
        cmd_run(c);
        FAIL() << "expected an error";
    } catch (const ValidationError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("cutree-td"), std::string::npos) << msg;
        EXPECT_NE(msg.find("shc"), std::string::npos) << msg;
        EXPECT_NE(msg.find("batch 1"), std::string::npos) << msg;
    }
}

TEST(CmdReconcile, Methods) {
    Workspace ws("rec");
    write(ws / "tree.json",
          R"({"nodes":[{"id":"total","parent":null},{"id":"a","parent":"total"},{"id":"b","parent":"total"}]})");
    write(ws / "incoherent.csv",
          "timestamp,node,value\n2017-01-01T00:00:00Z,total,10\n2017-01-01T00:00:00Z,a,4\n"
          "2017-01-01T00:00:00Z,b,4\n");
    write(ws / "coherent.csv",
          "timestamp,node,value\n2017-01-01T00:00:00Z,b,4\n2017-01-01T00:00:00Z,a,4\n"
          "2017-01-01T00:00:00Z,total,8\n");
    ReconcileOptions o;
    o.tree = (ws / "tree.json").string();
    o.forecasts = (ws / "incoherent.csv").string();
    o.output = (ws / "gls.csv").string();
    const auto gls = cmd_reconcile(o);
    EXPECT_LT((gls.table.values.row(0) - RowVector::Map(std::vector<double>{28.0 / 3, 14.0 / 3, 14.0 / 3}.data(), 3))
                  .cwiseAbs()
                  .maxCoeff(),
              1e-12);
    EXPECT_LT(gls.max_residual, 1e-12);
    const Tree tree = tree_from_json(nlohmann::json::parse(slurp(ws / "tree.json")));
    EXPECT_EQ(read_forecast_csv_file(o.output, tree).values, gls.table.values);

    o.method = ReconcileMethod::bu;
    const auto bu = cmd_reconcile(o);
    EXPECT_EQ(bu.table.values(0, 0), 8.0);
    EXPECT_EQ(bu.table.values(0, 1), 4.0);
    EXPECT_EQ(bu.table.values(0, 2), 4.0);

    o.forecasts = (ws / "coherent.csv").string();
    for (auto m : {ReconcileMethod::gls, ReconcileMethod::bu, ReconcileMethod::td}) {
        o.method = m;
        for (const char* s : {"identity", "structural"}) {
            o.sigma = s;
            const auto r = cmd_reconcile(o);
            EXPECT_LT((r.table.values.row(0) - RowVector::Map(std::vector<double>{8, 4, 4}.data(), 3)).cwiseAbs().maxCoeff(),
                      1e-12);
        }
    }

    EXPECT_THROW(reconcile_method_from_string("middle-out"), ValidationError);
    write(ws / "partial.csv", "timestamp,node,value\n2017-01-01T00:00:00Z,total,10\n");
    o.forecasts = (ws / "partial.csv").string();
    EXPECT_THROW(cmd_reconcile(o), ValidationError);
}

TEST(Cli, ExitCodes) {
    Workspace ws("cli");
    EXPECT_EQ(run_cli(""), 1);
    EXPECT_EQ(run_cli("tree --config " + (ws / "nope.json").string()), 1);
    EXPECT_EQ(run_cli("bogus"), 1);

    write(ws / "meters.csv", six_meter_csv());
    write(ws / "run.json", R"({"meters":"meters.csv","output_dir":"out","training":{"epochs":2}})");
    EXPECT_EQ(run_cli("tree --config " + (ws / "run.json").string()), 0);
    EXPECT_TRUE(fs::exists(ws / "out" / "tree.json"));
    EXPECT_EQ(run_cli("run --config " + (ws / "run.json").string() + " --arch tree-bu --loss shc --seed 3 --workers 1"),
              0);
    EXPECT_TRUE(fs::exists(ws / "out" / "runs" / "tree-bu_shc" / "forecasts.csv"));
    EXPECT_EQ(run_cli("run --config " + (ws / "run.json").string() + " --arch tree-sideways"), 1);
    EXPECT_EQ(run_cli("run --config " + (ws / "run.json").string() + " --loss mse"), 1);
    EXPECT_EQ(run_cli("report --config " + (ws / "run.json").string()), 0);
    EXPECT_EQ(run_cli("reconcile --forecasts " + (ws / "out" / "runs" / "tree-bu_shc" / "forecasts.csv").string() +
                      " --tree " + (ws / "out" / "tree.json").string() + " --method bu --out " +
                      (ws / "bu.csv").string()),
              0);
    EXPECT_EQ(run_cli("reconcile --forecasts x.csv --tree " + (ws / "out" / "tree.json").string() +
                      " --method sideways --out y.csv"),
              1);

    // Output below a regular file cannot be written: runtime failure.
    write(ws / "blocker", "x");
    EXPECT_EQ(run_cli("tree --config " + (ws / "run.json").string() + " --out " + (ws / "blocker" / "sub").string()),
              2);
}
