#pragma once

// Independent reference computations used by the test suites. Nothing here
// calls into the code paths it is used to check.

#include "shl/hierarchy.hpp"

#include <Eigen/Dense>

#include <functional>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace shl::oracle {

/// A random tree given as (ids, parent ids) in arbitrary order. Grows by
/// splitting random leaves into 2..4 children until `target_nodes` is reached
/// or exceeded by at most three.
struct RawTree {
    std::vector<std::string> ids;
    std::vector<std::optional<std::string>> parents;
};

inline RawTree random_raw_tree(Rng& rng, std::size_t target_nodes) {
    RawTree t;
    t.ids.push_back("r");
    t.parents.emplace_back(std::nullopt);
    std::vector<std::size_t> leaves{0};
    while (t.ids.size() < target_nodes) {
        const std::size_t pick = rng.below(leaves.size());
        const std::size_t node = leaves[pick];
        leaves.erase(leaves.begin() + static_cast<long>(pick));
        const std::size_t kids = 2 + rng.below(3);
        for (std::size_t k = 0; k < kids; ++k) {
            t.ids.push_back("v" + std::to_string(t.ids.size()));
            t.parents.emplace_back(t.ids[node]);
            leaves.push_back(t.ids.size() - 1);
        }
    }
    // Shuffle so that construction order never matches canonical order.
    std::vector<std::size_t> perm(t.ids.size());
    for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
    rng.shuffle(perm);
    RawTree out;
    for (std::size_t i : perm) {
        out.ids.push_back(t.ids[i]);
        out.parents.push_back(t.parents[i]);
    }
    return out;
}

inline Tree random_tree(Rng& rng, std::size_t target_nodes) {
    const auto raw = random_raw_tree(rng, target_nodes);
    return Tree::from_parent_ids(raw.ids, raw.parents);
}

/// For every node, the set of leaf ids below it (or itself), by walking the
/// parent links upward from each leaf.
inline std::vector<std::set<std::string>> descendant_leaves(const Tree& tree) {
    const std::size_t n = tree.nodes().size();
    std::vector<bool> has_child(n, false);
    for (const auto& node : tree.nodes())
        if (node.parent) has_child[*node.parent] = true;
    std::vector<std::set<std::string>> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        if (has_child[i]) continue;
        for (std::optional<std::size_t> cur = i; cur; cur = tree.nodes()[*cur].parent)
            out[*cur].insert(tree.nodes()[i].id);
    }
    return out;
}

/// Brute-force Ward agglomeration: at every step, recompute the increase in
/// within-cluster sum of squares for every pair of clusters from their raw
/// members. Returns (left id, right id, sqrt(2 * increase)) per merge.
struct OracleMerge {
    std::size_t left;
    std::size_t right;
    double height;
};

inline std::vector<OracleMerge> brute_force_ward(const Eigen::MatrixXd& series) {
    const auto N = static_cast<std::size_t>(series.cols());
    struct Cluster {
        std::size_t id;
        std::vector<Eigen::Index> members;
    };
    std::vector<Cluster> active;
    for (std::size_t i = 0; i < N; ++i) active.push_back({i, {static_cast<Eigen::Index>(i)}});
    auto ess = [&](const std::vector<Eigen::Index>& m) {
        Eigen::VectorXd c = Eigen::VectorXd::Zero(series.rows());
        for (auto i : m) c += series.col(i);
        c /= static_cast<double>(m.size());
        double s = 0.0;
        for (auto i : m) s += (series.col(i) - c).squaredNorm();
        return s;
    };
    std::vector<OracleMerge> out;
    std::size_t next = N;
    while (active.size() > 1) {
        double best = std::numeric_limits<double>::infinity();
        std::size_t bi = 0, bj = 0;
        std::pair<std::size_t, std::size_t> best_key{};
        bool first = true;
        for (std::size_t i = 0; i < active.size(); ++i)
            for (std::size_t j = i + 1; j < active.size(); ++j) {
                auto merged = active[i].members;
                merged.insert(merged.end(), active[j].members.begin(), active[j].members.end());
                const double inc = ess(merged) - ess(active[i].members) - ess(active[j].members);
                const std::pair<std::size_t, std::size_t> key = std::minmax(active[i].id, active[j].id);
                if (first || inc < best - 1e-12 * std::max(1.0, best) ||
                    (std::abs(inc - best) <= 1e-12 * std::max(1.0, best) && key < best_key)) {
                    best = inc;
                    bi = i;
                    bj = j;
                    best_key = key;
                    first = false;
                }
            }
        out.push_back({best_key.first, best_key.second, std::sqrt(2.0 * std::max(best, 0.0))});
        auto merged = active[bi].members;
        merged.insert(merged.end(), active[bj].members.begin(), active[bj].members.end());
        active.erase(active.begin() + static_cast<long>(bj));
        active[bi] = {next++, merged};
    }
    return out;
}

/// Equality-constrained weighted least squares: minimize
/// (x - y)' W (x - y) subject to x_i = sum of its descendant leaves for every
/// aggregate node, solved through the full KKT system.
inline Eigen::VectorXd constrained_wls(const Tree& tree, const Eigen::VectorXd& y,
                                       const Eigen::VectorXd& sigma_diag) {
    const auto n = static_cast<Eigen::Index>(tree.size());
    const auto leaves = descendant_leaves(tree);
    std::vector<std::vector<Eigen::Index>> rows;
    for (Eigen::Index i = 0; i < n; ++i) {
        if (leaves[static_cast<std::size_t>(i)].size() == 1 &&
            *leaves[static_cast<std::size_t>(i)].begin() == tree.nodes()[static_cast<std::size_t>(i)].id)
            continue;
        std::vector<Eigen::Index> r{i};
        for (Eigen::Index j = 0; j < n; ++j) {
            const auto& id = tree.nodes()[static_cast<std::size_t>(j)].id;
            if (leaves[static_cast<std::size_t>(j)].size() == 1 && *leaves[static_cast<std::size_t>(j)].begin() == id &&
                leaves[static_cast<std::size_t>(i)].count(id))
                r.push_back(j);
        }
        rows.push_back(r);
    }
    const auto c = static_cast<Eigen::Index>(rows.size());
    Eigen::MatrixXd C = Eigen::MatrixXd::Zero(c, n);
    for (Eigen::Index k = 0; k < c; ++k) {
        C(k, rows[static_cast<std::size_t>(k)][0]) = 1.0;
        for (std::size_t q = 1; q < rows[static_cast<std::size_t>(k)].size(); ++q)
            C(k, rows[static_cast<std::size_t>(k)][q]) = -1.0;
    }
    Eigen::MatrixXd K = Eigen::MatrixXd::Zero(n + c, n + c);
    Eigen::VectorXd rhs = Eigen::VectorXd::Zero(n + c);
    const Eigen::VectorXd w = sigma_diag.cwiseInverse();
    K.topLeftCorner(n, n) = 2.0 * w.asDiagonal();
    K.topRightCorner(n, c) = C.transpose();
    K.bottomLeftCorner(c, n) = C;
    rhs.head(n) = 2.0 * w.cwiseProduct(y);
    return K.fullPivLu().solve(rhs).head(n);
}

/// Central finite-difference gradient of a scalar function of a matrix.
inline Eigen::MatrixXd numeric_gradient(const std::function<double(const Eigen::MatrixXd&)>& f,
                                        const Eigen::MatrixXd& at, double step) {
    Eigen::MatrixXd g(at.rows(), at.cols());
    Eigen::MatrixXd x = at;
    for (Eigen::Index r = 0; r < at.rows(); ++r)
        for (Eigen::Index c = 0; c < at.cols(); ++c) {
            const double orig = x(r, c);
            x(r, c) = orig + step;
            const double up = f(x);
            x(r, c) = orig - step;
            const double down = f(x);
            x(r, c) = orig;
            g(r, c) = (up - down) / (2.0 * step);
        }
    return g;
}

/// max |a - b| / max(|a|, |b|, floor) elementwise.
inline double max_relative_error(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, double floor = 1e-8) {
    double worst = 0.0;
    for (Eigen::Index i = 0; i < a.size(); ++i) {
        const double x = a.data()[i], y = b.data()[i];
        worst = std::max(worst, std::abs(x - y) / std::max({std::abs(x), std::abs(y), floor}));
    }
    return worst;
}

/// The two-level example hierarchy: a root over two aggregates of three leaves.
inline Tree figure_one_tree() {
    return Tree::from_parent_ids({"y61", "y31", "y32", "y11", "y12", "y13", "y14", "y15", "y16"},
                                 {std::nullopt, "y61", "y61", "y31", "y31", "y31", "y32", "y32", "y32"});
}

inline Tree two_leaf_tree() {
    return Tree::from_parent_ids({"total", "a", "b"}, {std::nullopt, "total", "total"});
}

}  // namespace shl::oracle
