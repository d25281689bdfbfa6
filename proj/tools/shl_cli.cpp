// Command-line front end: shl tree | run | reconcile | report

#include "shl/shl.hpp"

#include "CLI11.hpp"

#include <cstdio>
#include <iostream>
#include <sstream>

namespace {

struct Overrides {
    std::string config;
    std::string arch;
    std::string loss;
    std::optional<std::uint64_t> seed;
    std::optional<unsigned> workers;
    std::string out;
};

std::vector<std::string> split_commas(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    for (std::string item; std::getline(ss, item, ',');)
        if (!item.empty()) out.push_back(item);
    return out;
}

shl::RunConfig resolve(const Overrides& o) {
    shl::RunConfig c = shl::load_config(o.config);
    if (!o.arch.empty()) c.architectures = split_commas(o.arch);
    if (o.loss == "sh")
        c.losses = {shl::LossKind::sh};
    else if (o.loss == "shc")
        c.losses = {shl::LossKind::shc};
    else if (o.loss == "both")
        c.losses = {shl::LossKind::sh, shl::LossKind::shc};
    else if (!o.loss.empty())
        throw shl::ValidationError("--loss must be sh, shc or both");
    if (o.seed) c.seed = *o.seed;
    if (o.workers) c.workers = *o.workers;
    if (!o.out.empty()) c.output_dir = o.out;
    c.validate(false);
    return c;
}

void add_common(CLI::App* cmd, Overrides& o) {
    cmd->add_option("--config", o.config, "JSON run configuration")->required();
    cmd->add_option("--out", o.out, "output directory (overrides the config)");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Structural hierarchical learning for hierarchical time series"};
    app.require_subcommand(1);

    Overrides o;
    auto* tree = app.add_subcommand("tree", "cluster the meter series and write tree.json and merges.csv");
    add_common(tree, o);

    auto* run = app.add_subcommand("run", "train and evaluate the architecture x loss grid");
    add_common(run, o);
    run->add_option("--arch", o.arch, "architecture names, comma separated (default: all 13)");
    run->add_option("--loss", o.loss, "sh, shc or both")->check(CLI::IsMember({"sh", "shc", "both"}));
    run->add_option("--seed", o.seed, "random seed");
    run->add_option("--workers", o.workers, "parallel runs (0 = hardware threads)");

    shl::ReconcileOptions rec;
    std::string method = "gls";
    auto* reconcile = app.add_subcommand("reconcile", "reconcile a forecast CSV onto the tree");
    reconcile->add_option("--forecasts", rec.forecasts, "forecast CSV (timestamp,node,value)")->required();
    reconcile->add_option("--tree", rec.tree, "tree JSON")->required();
    reconcile->add_option("--method", method, "gls, bu or td");
    reconcile->add_option("--sigma", rec.sigma, "identity, structural or a covariance JSON file");
    reconcile->add_option("--history", rec.history, "wide leaf CSV for top-down proportions");
    reconcile->add_option("--out", rec.output, "reconciled CSV path")->required();

    auto* report = app.add_subcommand("report", "rebuild reports from finished runs");
    add_common(report, o);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    }

    try {
        if (*tree) {
            const auto out = shl::cmd_tree(resolve(o));
            std::printf("tree: %zu nodes, %zu leaves\n", out.tree.size(), out.tree.leaf_count());
            if (out.linkage) std::fputs(shl::merge_listing(*out.linkage).c_str(), stdout);
            for (const auto& f : out.files) std::printf("wrote %s\n", f.string().c_str());
        } else if (*run) {
            const auto out = shl::cmd_run(resolve(o));
            for (const auto& r : out.runs)
                std::printf("%-12s %-3s accuracy %.6g coherency %.6g (trained %zu, restored %zu)\n",
                            r.architecture.name().c_str(), shl::to_string(r.loss).c_str(), r.score.accuracy,
                            r.score.coherency, r.folds_trained, r.folds_restored);
            for (const auto& f : out.report_files) std::printf("wrote %s\n", f.string().c_str());
        } else if (*reconcile) {
            rec.method = shl::reconcile_method_from_string(method);
            const auto out = shl::cmd_reconcile(rec);
            std::printf("reconciled %td rows; max coherency residual %.6g\n", out.table.values.rows(),
                        out.max_residual);
        } else if (*report) {
            const auto out = shl::cmd_report(resolve(o));
            for (const auto& f : out.report_files) std::printf("wrote %s\n", f.string().c_str());
        }
    } catch (const shl::ValidationError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
    return 0;
}
