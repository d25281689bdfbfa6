#pragma once

// Rooted hierarchies over time series: tree representation, summation and
// extraction matrices, Ward clustering of leaf series and dendrogram cutting.
//
// Node order convention used everywhere in the library: the root first, then
// interior nodes level by level (most aggregate first), then every leaf. The
// leaf block is therefore the trailing m entries of any stacked vector, which
// makes the extraction matrix G = [0 | I_m].

#include "core.hpp"
#include "json.hpp"

#include <algorithm>
#include <deque>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace shl {

struct TreeNode {
    std::string id;
    std::optional<std::size_t> parent;

    friend bool operator==(const TreeNode&, const TreeNode&) = default;
};

class Tree {
public:
    Tree() = default;

    /// Takes nodes already in canonical order. Throws ValidationError when the
    /// structure is malformed or the ordering convention is not respected.
    explicit Tree(std::vector<TreeNode> nodes) : nodes_(std::move(nodes)) { validate_and_index(); }

    /// Builds a tree from (id, parent id) pairs in any order and reorders the
    /// nodes canonically. Leaves keep their relative input order; interior
    /// nodes are visited breadth-first, children in input order.
    static Tree from_parent_ids(const std::vector<std::string>& ids,
                                const std::vector<std::optional<std::string>>& parents);

    std::size_t size() const { return nodes_.size(); }
    std::size_t leaf_count() const { return leaf_count_; }
    std::size_t interior_count() const { return nodes_.size() - leaf_count_; }
    std::size_t root() const { return 0; }

    const TreeNode& node(std::size_t i) const { return nodes_.at(i); }
    const std::vector<TreeNode>& nodes() const { return nodes_; }
    const std::string& id(std::size_t i) const { return nodes_.at(i).id; }
    std::optional<std::size_t> parent(std::size_t i) const { return nodes_.at(i).parent; }
    const std::vector<std::size_t>& children(std::size_t i) const { return children_.at(i); }
    std::size_t depth(std::size_t i) const { return depth_.at(i); }
    bool is_leaf(std::size_t i) const { return i >= interior_count(); }

    /// Position of node i inside the leaf block.
    std::size_t leaf_index(std::size_t i) const {
        require(is_leaf(i), "node '" + id(i) + "' is not a leaf");
        return i - interior_count();
    }
    std::size_t leaf_node(std::size_t j) const { return interior_count() + j; }

    std::optional<std::size_t> find(const std::string& node_id) const {
        auto it = index_.find(node_id);
        if (it == index_.end()) return std::nullopt;
        return it->second;
    }

    std::size_t index_of(const std::string& node_id) const {
        auto i = find(node_id);
        if (!i) throw ValidationError("unknown node id '" + node_id + "'");
        return *i;
    }

    std::vector<std::string> ids() const {
        std::vector<std::string> out;
        out.reserve(nodes_.size());
        for (const auto& n : nodes_) out.push_back(n.id);
        return out;
    }

    friend bool operator==(const Tree& a, const Tree& b) { return a.nodes_ == b.nodes_; }

private:
    void validate_and_index();

    std::vector<TreeNode> nodes_;
    std::vector<std::vector<std::size_t>> children_;
    std::vector<std::size_t> depth_;
    std::map<std::string, std::size_t> index_;
    std::size_t leaf_count_ = 0;
};

namespace detail {

// Structural checks shared by both construction paths: one root, parents in
// range, acyclic, interior nodes with at least two children.
inline std::vector<std::vector<std::size_t>> check_structure(
    const std::vector<std::optional<std::size_t>>& parents, const std::vector<std::string>& ids) {
    const std::size_t n = parents.size();
    require(n > 0, "tree: no nodes");
    std::size_t roots = 0;
    std::vector<std::vector<std::size_t>> children(n);
    for (std::size_t i = 0; i < n; ++i) {
        if (!parents[i]) {
            ++roots;
            continue;
        }
        const std::size_t p = *parents[i];
        require(p < n, "tree: node '" + ids[i] + "' has an out-of-range parent");
        require(p != i, "tree: node '" + ids[i] + "' is its own parent");
        children[p].push_back(i);
    }
    require(roots == 1, "tree: expected exactly one root, found " + std::to_string(roots));
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t steps = 0;
        for (auto cur = parents[i]; cur; cur = parents[*cur])
            require(++steps <= n, "tree: cycle through node '" + ids[i] + "'");
    }
    for (std::size_t i = 0; i < n; ++i)
        require(children[i].empty() || children[i].size() >= 2,
                "tree: interior node '" + ids[i] + "' has a single child");
    return children;
}

}  // namespace detail

inline void Tree::validate_and_index() {
    const std::size_t n = nodes_.size();
    std::vector<std::optional<std::size_t>> parents(n);
    std::vector<std::string> ids(n);
    for (std::size_t i = 0; i < n; ++i) {
        parents[i] = nodes_[i].parent;
        ids[i] = nodes_[i].id;
    }
    children_ = detail::check_structure(parents, ids);

    index_.clear();
    for (std::size_t i = 0; i < n; ++i) {
        require(!ids[i].empty(), "tree: empty node id");
        require(index_.emplace(ids[i], i).second, "tree: duplicate node id '" + ids[i] + "'");
    }

    require(!parents[0], "tree: the root must be the first node");
    leaf_count_ = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (children_[i].empty())
            ++leaf_count_;
        else
            require(leaf_count_ == 0, "tree: interior node '" + ids[i] + "' listed after a leaf");
    }
    depth_.assign(n, 0);
    for (std::size_t i = 1; i < n; ++i) {
        require(*parents[i] < i, "tree: node '" + ids[i] + "' listed before its parent");
        depth_[i] = depth_[*parents[i]] + 1;
        if (i < interior_count())
            require(depth_[i] >= depth_[i - 1],
                    "tree: interior nodes are not ordered level by level at '" + ids[i] + "'");
    }
}

inline Tree Tree::from_parent_ids(const std::vector<std::string>& ids,
                                  const std::vector<std::optional<std::string>>& parent_ids) {
    require(ids.size() == parent_ids.size(), "tree: ids and parents differ in length");
    const std::size_t n = ids.size();
    std::map<std::string, std::size_t> index;
    for (std::size_t i = 0; i < n; ++i)
        require(index.emplace(ids[i], i).second, "tree: duplicate node id '" + ids[i] + "'");
    std::vector<std::optional<std::size_t>> parents(n);
    for (std::size_t i = 0; i < n; ++i) {
        if (!parent_ids[i]) continue;
        auto it = index.find(*parent_ids[i]);
        require(it != index.end(),
                "tree: node '" + ids[i] + "' references unknown parent '" + *parent_ids[i] + "'");
        parents[i] = it->second;
    }
    const auto children = detail::check_structure(parents, ids);
    std::size_t root = 0;
    while (parents[root]) ++root;

    std::vector<std::size_t> order;
    std::deque<std::size_t> queue{root};
    while (!queue.empty()) {
        const std::size_t i = queue.front();
        queue.pop_front();
        if (children[i].empty()) continue;
        order.push_back(i);
        for (std::size_t c : children[i]) queue.push_back(c);
    }
    for (std::size_t i = 0; i < n; ++i)
        if (children[i].empty()) order.push_back(i);

    std::vector<std::size_t> position(n);
    for (std::size_t k = 0; k < n; ++k) position[order[k]] = k;
    std::vector<TreeNode> nodes(n);
    for (std::size_t k = 0; k < n; ++k) {
        nodes[k].id = ids[order[k]];
        if (auto p = parents[order[k]]) nodes[k].parent = position[*p];
    }
    return Tree(std::move(nodes));
}

/// S (n x m), G (m x n) and the structural scale kappa = S 1_m.
struct StructuralMatrices {
    Matrix S;
    Matrix G;
    Vector kappa;
};

inline StructuralMatrices build_summation_matrix(const Tree& tree) {
    const auto n = static_cast<Index>(tree.size());
    const auto m = static_cast<Index>(tree.leaf_count());
    require(n > 0, "build_summation_matrix: empty tree");
    StructuralMatrices out;
    out.S = Matrix::Zero(n, m);
    for (Index j = 0; j < m; ++j) {
        std::optional<std::size_t> cur = tree.leaf_node(static_cast<std::size_t>(j));
        while (cur) {
            out.S(static_cast<Index>(*cur), j) = 1.0;
            cur = tree.parent(*cur);
        }
    }
    out.G = Matrix::Zero(m, n);
    out.G.rightCols(m).setIdentity();
    out.kappa = out.S.rowwise().sum();
    return out;
}

inline Vector aggregate_bottom_up(const Vector& b, const Matrix& S) {
    require(b.size() == S.cols(), "aggregate_bottom_up: leaf vector has length " +
                                      std::to_string(b.size()) + ", expected " +
                                      std::to_string(S.cols()));
    return S * b;
}

/// y_hat - S G y_hat; zero exactly when y_hat is coherent.
inline Vector coherency_residual(const Vector& y_hat, const Matrix& S, const Matrix& G) {
    require(S.cols() == G.rows() && S.rows() == G.cols(), "coherency_residual: S and G disagree");
    require(y_hat.size() == S.rows(), "coherency_residual: vector has length " +
                                          std::to_string(y_hat.size()) + ", expected " +
                                          std::to_string(S.rows()));
    return y_hat - S * (G * y_hat);
}

// ---------------------------------------------------------------------------
// Ward clustering

/// One agglomeration step. Cluster ids follow the usual convention: leaves are
/// 0..N-1, the cluster created by merge k gets id N+k.
struct Merge {
    std::size_t left = 0;
    std::size_t right = 0;
    double distance = 0.0;
    std::size_t size = 0;
};

struct Linkage {
    std::size_t leaf_count = 0;
    std::vector<Merge> merges;
};

/// Ward minimum-variance linkage of the columns of `series` (T x N).
///
/// Distances are Euclidean and updated with the Lance-Williams recurrence, so a
/// merge height equals sqrt(2 * increase in within-cluster sum of squares). Ties
/// go to the lexicographically smallest (left id, right id) pair.
inline Linkage ward_cluster(const Matrix& series) {
    const Index count = series.cols();
    require(count >= 2, "ward_cluster: need at least two series");
    require(series.rows() > 0, "ward_cluster: empty series");
    require(series.allFinite(), "ward_cluster: series contain missing values");

    const auto N = static_cast<std::size_t>(count);
    // Squared distances between active clusters, indexed by slot. Slot i holds
    // cluster ids[i]; merging i and j stores the new cluster in slot min(i, j).
    Matrix d2(count, count);
    for (Index i = 0; i < count; ++i)
        for (Index j = 0; j < count; ++j) d2(i, j) = (series.col(i) - series.col(j)).squaredNorm();

    std::vector<std::size_t> ids(N), sizes(N, 1);
    std::vector<bool> active(N, true);
    for (std::size_t i = 0; i < N; ++i) ids[i] = i;

    Linkage out;
    out.leaf_count = N;
    out.merges.reserve(N - 1);
    for (std::size_t step = 0; step + 1 < N; ++step) {
        std::size_t bi = 0, bj = 0;
        double best = std::numeric_limits<double>::infinity();
        std::pair<std::size_t, std::size_t> best_key{N * 2, N * 2};
        for (std::size_t i = 0; i < N; ++i) {
            if (!active[i]) continue;
            for (std::size_t j = i + 1; j < N; ++j) {
                if (!active[j]) continue;
                const double v = d2(static_cast<Index>(i), static_cast<Index>(j));
                const std::pair<std::size_t, std::size_t> key = std::minmax(ids[i], ids[j]);
                if (v < best || (v == best && key < best_key)) {
                    best = v;
                    best_key = key;
                    bi = i;
                    bj = j;
                }
            }
        }
        const double ni = static_cast<double>(sizes[bi]);
        const double nj = static_cast<double>(sizes[bj]);
        for (std::size_t k = 0; k < N; ++k) {
            if (!active[k] || k == bi || k == bj) continue;
            const double nk = static_cast<double>(sizes[k]);
            const auto K = static_cast<Index>(k);
            const double v = ((ni + nk) * d2(K, static_cast<Index>(bi)) +
                              (nj + nk) * d2(K, static_cast<Index>(bj)) - nk * best) /
                             (ni + nj + nk);
            d2(K, static_cast<Index>(bi)) = d2(static_cast<Index>(bi), K) = std::max(v, 0.0);
        }
        out.merges.push_back({best_key.first, best_key.second, std::sqrt(std::max(best, 0.0)),
                              sizes[bi] + sizes[bj]});
        sizes[bi] += sizes[bj];
        ids[bi] = N + step;
        active[bj] = false;
    }
    return out;
}

/// Cuts the dendrogram: every maximal subtree whose top merge lies strictly
/// below `threshold` becomes one interior node holding its leaves directly.
/// Merges at or above the threshold stay binary. Interior nodes are named
/// "n<cluster id>".
inline Tree cut_tree(const Linkage& linkage, double threshold,
                     const std::vector<std::string>& leaf_ids) {
    require(threshold >= 0.0 && !std::isnan(threshold), "cut_tree: threshold must be >= 0");
    const std::size_t N = linkage.leaf_count;
    require(leaf_ids.size() == N, "cut_tree: expected " + std::to_string(N) + " leaf ids");
    require(linkage.merges.size() + 1 == N, "cut_tree: linkage is incomplete");
    if (N == 1) return Tree(std::vector<TreeNode>{TreeNode{leaf_ids[0], std::nullopt}});

    const std::size_t total = 2 * N - 1;
    std::vector<std::optional<std::size_t>> parent_cluster(total);
    for (std::size_t k = 0; k < linkage.merges.size(); ++k) {
        const auto& m = linkage.merges[k];
        require(m.left < N + k && m.right < N + k, "cut_tree: merge references a later cluster");
        parent_cluster[m.left] = N + k;
        parent_cluster[m.right] = N + k;
    }
    auto collapsed = [&](std::size_t c) {
        return c >= N && linkage.merges[c - N].distance < threshold;
    };

    // Each cluster is represented by its nearest kept ancestor-or-self. A
    // collapsed cluster is absorbed into its parent when that parent is also
    // collapsed, so only the top of each collapsed run survives.
    std::vector<std::string> ids;
    std::vector<std::optional<std::string>> parents;
    auto name = [&](std::size_t c) { return c < N ? leaf_ids[c] : "n" + std::to_string(c); };
    auto surviving_parent = [&](std::size_t c) -> std::optional<std::string> {
        auto p = parent_cluster[c];
        if (!p) return std::nullopt;
        // Leaves inside a collapsed run attach to the top of that run.
        while (collapsed(*p) && parent_cluster[*p] && collapsed(*parent_cluster[*p]))
            p = parent_cluster[*p];
        return name(*p);
    };
    for (std::size_t c = N; c < total; ++c) {
        const bool absorbed = collapsed(c) && parent_cluster[c] && collapsed(*parent_cluster[c]);
        if (absorbed) continue;
        ids.push_back(name(c));
        parents.push_back(surviving_parent(c));
    }
    for (std::size_t c = 0; c < N; ++c) {
        ids.push_back(name(c));
        parents.push_back(surviving_parent(c));
    }
    return Tree::from_parent_ids(ids, parents);
}

// ---------------------------------------------------------------------------
// JSON: {"nodes":[{"id":"...","parent":"..."|null}, ...]}

inline nlohmann::json tree_to_json(const Tree& tree) {
    nlohmann::json nodes = nlohmann::json::array();
    for (const auto& n : tree.nodes()) {
        nlohmann::json parent = nullptr;
        if (n.parent) parent = tree.id(*n.parent);
        nodes.push_back({{"id", n.id}, {"parent", parent}});
    }
    return {{"nodes", nodes}};
}

inline Tree tree_from_json(const nlohmann::json& doc) {
    require(doc.is_object() && doc.contains("nodes") && doc["nodes"].is_array(),
            "tree JSON: expected an object with a \"nodes\" array");
    std::vector<std::string> ids;
    std::vector<std::optional<std::string>> parents;
    for (const auto& n : doc["nodes"]) {
        require(n.is_object() && n.contains("id") && n["id"].is_string(),
                "tree JSON: every node needs a string \"id\"");
        ids.push_back(n["id"].get<std::string>());
        if (!n.contains("parent") || n["parent"].is_null())
            parents.emplace_back(std::nullopt);
        else {
            require(n["parent"].is_string(), "tree JSON: \"parent\" must be a string or null");
            parents.emplace_back(n["parent"].get<std::string>());
        }
    }
    return Tree::from_parent_ids(ids, parents);
}

}  // namespace shl
