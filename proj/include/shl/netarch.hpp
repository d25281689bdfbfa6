#pragma once

// Structural network architectures: node partitions, per-partition width
// schedules, and the binary weight masks produced by topological bridges.

#include "core.hpp"
#include "hierarchy.hpp"
#include "json.hpp"

#include <map>
#include <set>
#include <string>
#include <string_view>
#include <vector>

namespace shl {

enum class PartitionScheme { tree, cutree, klvl, full };
enum class BridgeKind { disc, bu, td, butd };

inline std::string to_string(PartitionScheme p) {
    switch (p) {
        case PartitionScheme::tree: return "tree";
        case PartitionScheme::cutree: return "cutree";
        case PartitionScheme::klvl: return "klvl";
        case PartitionScheme::full: return "full";
    }
    return "?";
}

inline std::string to_string(BridgeKind b) {
    switch (b) {
        case BridgeKind::disc: return "disc";
        case BridgeKind::bu: return "bu";
        case BridgeKind::td: return "td";
        case BridgeKind::butd: return "butd";
    }
    return "?";
}

inline PartitionScheme partition_scheme_from_string(std::string_view s) {
    if (s == "tree") return PartitionScheme::tree;
    if (s == "cutree") return PartitionScheme::cutree;
    if (s == "klvl") return PartitionScheme::klvl;
    if (s == "full") return PartitionScheme::full;
    throw ValidationError("unknown partition scheme '" + std::string(s) + "'");
}

inline BridgeKind bridge_kind_from_string(std::string_view s) {
    if (s == "disc") return BridgeKind::disc;
    if (s == "bu") return BridgeKind::bu;
    if (s == "td") return BridgeKind::td;
    if (s == "butd") return BridgeKind::butd;
    throw ValidationError("unknown bridge kind '" + std::string(s) + "'");
}

struct ArchitectureSpec {
    PartitionScheme partition = PartitionScheme::tree;
    BridgeKind bridge = BridgeKind::disc;  // ignored for the full partition
    int depth = 3;
    double dropout = 0.2;

    /// "tree-bu", "klvl-disc", ... and plain "full".
    std::string name() const {
        if (partition == PartitionScheme::full) return "full";
        return to_string(partition) + "-" + to_string(bridge);
    }

    void validate() const {
        require(depth >= 1, "architecture: depth must be >= 1");
        require(dropout >= 0.0 && dropout < 1.0, "architecture: dropout must lie in [0, 1)");
    }

    friend bool operator==(const ArchitectureSpec&, const ArchitectureSpec&) = default;
};

inline ArchitectureSpec architecture_from_name(std::string_view name, int depth = 3,
                                               double dropout = 0.2) {
    ArchitectureSpec spec;
    spec.depth = depth;
    spec.dropout = dropout;
    if (name == "full") {
        spec.partition = PartitionScheme::full;
        return spec;
    }
    const auto dash = name.find('-');
    require(dash != std::string_view::npos, "unknown architecture '" + std::string(name) + "'");
    spec.partition = partition_scheme_from_string(name.substr(0, dash));
    require(spec.partition != PartitionScheme::full,
            "unknown architecture '" + std::string(name) + "'");
    spec.bridge = bridge_kind_from_string(name.substr(dash + 1));
    return spec;
}

inline nlohmann::json architecture_to_json(const ArchitectureSpec& s) {
    return {{"partition", to_string(s.partition)},
            {"bridge", to_string(s.bridge)},
            {"depth", s.depth},
            {"dropout", s.dropout}};
}

inline ArchitectureSpec architecture_from_json(const nlohmann::json& j) {
    ArchitectureSpec s;
    s.partition = partition_scheme_from_string(j.at("partition").get<std::string>());
    s.bridge = bridge_kind_from_string(j.value("bridge", std::string("disc")));
    s.depth = j.value("depth", 3);
    s.dropout = j.value("dropout", 0.2);
    s.validate();
    return s;
}

/// The 13 architectures: {tree, cutree, klvl} x {disc, bu, td, butd} and full.
inline std::vector<ArchitectureSpec> enumerate_architectures(const Tree& tree, int depth = 3,
                                                             double dropout = 0.2) {
    require(tree.size() > 0, "enumerate_architectures: empty tree");
    std::vector<ArchitectureSpec> out;
    for (auto p : {PartitionScheme::tree, PartitionScheme::cutree, PartitionScheme::klvl})
        for (auto b : {BridgeKind::disc, BridgeKind::bu, BridgeKind::td, BridgeKind::butd})
            out.push_back({p, b, depth, dropout});
    out.push_back({PartitionScheme::full, BridgeKind::disc, depth, dropout});
    return out;
}

using Partition = std::vector<std::size_t>;

/// Exact cover of the tree's nodes. Partitions are listed in order of their
/// first node; nodes inside a partition keep canonical order.
///
/// klvl groups interior nodes by depth and puts every leaf in one bottom
/// partition, so unbalanced trees still get a single leaf level.
inline std::vector<Partition> partition_nodes(const Tree& tree, PartitionScheme scheme) {
    const std::size_t n = tree.size();
    std::vector<Partition> parts;
    switch (scheme) {
        case PartitionScheme::tree:
            for (std::size_t i = 0; i < n; ++i) parts.push_back({i});
            break;
        case PartitionScheme::full: {
            Partition all(n);
            for (std::size_t i = 0; i < n; ++i) all[i] = i;
            parts.push_back(std::move(all));
            break;
        }
        case PartitionScheme::cutree: {
            std::map<std::size_t, std::size_t> sibling_group;  // parent -> partition
            for (std::size_t i = 0; i < n; ++i) {
                const auto p = tree.parent(i);
                if (!tree.is_leaf(i) || !p) {
                    parts.push_back({i});
                    continue;
                }
                auto [it, fresh] = sibling_group.emplace(*p, parts.size());
                if (fresh) parts.emplace_back();
                parts[it->second].push_back(i);
            }
            break;
        }
        case PartitionScheme::klvl: {
            std::map<std::size_t, std::size_t> level_group;
            for (std::size_t i = 0; i < tree.interior_count(); ++i) {
                auto [it, fresh] = level_group.emplace(tree.depth(i), parts.size());
                if (fresh) parts.emplace_back();
                parts[it->second].push_back(i);
            }
            Partition leaves;
            for (std::size_t i = tree.interior_count(); i < n; ++i) leaves.push_back(i);
            parts.push_back(std::move(leaves));
            break;
        }
        default: throw ValidationError("partition_nodes: unknown scheme");
    }
    return parts;
}

/// Layer widths 0..depth interpolating linearly from `input_width` down to
/// `output_width`, rounded half up and never below the output width.
inline std::vector<int> width_schedule(int input_width, int output_width, int depth) {
    require(depth >= 1, "width_schedule: depth must be >= 1");
    require(output_width >= 1, "width_schedule: output width must be >= 1");
    require(input_width >= output_width, "width_schedule: input width " +
                                             std::to_string(input_width) +
                                             " is below output width " +
                                             std::to_string(output_width));
    std::vector<int> w(static_cast<std::size_t>(depth) + 1);
    for (int l = 0; l <= depth; ++l) {
        // round((input*D - (input-output)*l) / D) with halves going up
        const long long num = static_cast<long long>(input_width) * depth -
                              static_cast<long long>(input_width - output_width) * l;
        const long long rounded = (2 * num + depth) / (2LL * depth);
        w[static_cast<std::size_t>(l)] = std::max(static_cast<int>(rounded), output_width);
    }
    return w;
}

/// A compiled architecture: neurons of every layer tagged with their
/// partition, and one binary mask per weight matrix.
struct NetworkLayout {
    ArchitectureSpec spec;
    std::vector<Partition> partitions;
    std::vector<std::vector<int>> schedules;               // per partition, depth + 1 widths
    std::vector<std::vector<std::size_t>> neuron_partition;  // per layer 0..depth
    std::vector<Matrix> masks;                             // mask l: width(l+1) x width(l)

    int depth() const { return spec.depth; }
    Index width(std::size_t layer) const { return static_cast<Index>(neuron_partition.at(layer).size()); }
    Index input_width() const { return width(0); }
    Index output_width() const { return width(neuron_partition.size() - 1); }

    std::size_t active_weights() const {
        double total = 0.0;
        for (const auto& m : masks) total += m.sum();
        return static_cast<std::size_t>(total);
    }
};

namespace detail {

// licensed[src][dst]: weights from neurons of partition src into neurons of
// partition dst are allowed.
inline std::vector<std::vector<bool>> licensed_blocks(const Tree& tree,
                                                      const std::vector<Partition>& parts,
                                                      const ArchitectureSpec& spec) {
    const std::size_t P = parts.size();
    std::vector<std::vector<bool>> ok(P, std::vector<bool>(P, false));
    std::vector<std::size_t> owner(tree.size());
    for (std::size_t p = 0; p < P; ++p)
        for (std::size_t i : parts[p]) owner[i] = p;
    for (std::size_t p = 0; p < P; ++p) ok[p][p] = true;
    if (spec.partition == PartitionScheme::full) return ok;
    const bool up = spec.bridge == BridgeKind::bu || spec.bridge == BridgeKind::butd;
    const bool down = spec.bridge == BridgeKind::td || spec.bridge == BridgeKind::butd;
    for (std::size_t i = 0; i < tree.size(); ++i) {
        const auto parent = tree.parent(i);
        if (!parent) continue;
        const std::size_t child_part = owner[i];
        const std::size_t parent_part = owner[*parent];
        if (up) ok[child_part][parent_part] = true;
        if (down) ok[parent_part][child_part] = true;
    }
    return ok;
}

inline NetworkLayout assemble_layout(const Tree& tree, const ArchitectureSpec& spec,
                                     std::vector<Partition> parts,
                                     std::vector<std::vector<int>> schedules,
                                     std::vector<std::size_t> input_partition) {
    NetworkLayout layout;
    layout.spec = spec;
    layout.partitions = std::move(parts);
    layout.schedules = std::move(schedules);
    const auto D = static_cast<std::size_t>(spec.depth);

    std::vector<std::size_t> owner(tree.size());
    for (std::size_t p = 0; p < layout.partitions.size(); ++p)
        for (std::size_t i : layout.partitions[p]) owner[i] = p;

    layout.neuron_partition.resize(D + 1);
    layout.neuron_partition[0] = std::move(input_partition);
    for (std::size_t l = 1; l < D; ++l)
        for (std::size_t p = 0; p < layout.partitions.size(); ++p)
            layout.neuron_partition[l].insert(layout.neuron_partition[l].end(),
                                              static_cast<std::size_t>(layout.schedules[p][l]), p);
    // Output neurons are the tree nodes in canonical order.
    layout.neuron_partition[D] = owner;

    const auto ok = licensed_blocks(tree, layout.partitions, spec);
    layout.masks.resize(D);
    for (std::size_t l = 0; l < D; ++l) {
        const auto& src = layout.neuron_partition[l];
        const auto& dst = layout.neuron_partition[l + 1];
        Matrix m(static_cast<Index>(dst.size()), static_cast<Index>(src.size()));
        for (std::size_t r = 0; r < dst.size(); ++r)
            for (std::size_t c = 0; c < src.size(); ++c)
                m(static_cast<Index>(r), static_cast<Index>(c)) = ok[src[c]][dst[r]] ? 1.0 : 0.0;
        layout.masks[l] = std::move(m);
    }
    return layout;
}

}  // namespace detail

/// Compiles masks from per-node input feature counts. Input columns are the
/// node feature blocks in canonical node order; each partition's input width is
/// the total feature count of its nodes and its output width its node count.
inline NetworkLayout build_masks(const Tree& tree, const ArchitectureSpec& spec,
                                 const std::vector<int>& node_feature_counts) {
    spec.validate();
    require(node_feature_counts.size() == tree.size(),
            "build_masks: need one feature count per tree node");
    auto parts = partition_nodes(tree, spec.partition);
    std::vector<std::vector<int>> schedules;
    for (const auto& part : parts) {
        int features = 0;
        for (std::size_t i : part) {
            require(node_feature_counts[i] >= 1,
                    "build_masks: node '" + tree.id(i) + "' has no input features");
            features += node_feature_counts[i];
        }
        schedules.push_back(width_schedule(features, static_cast<int>(part.size()), spec.depth));
    }
    std::vector<std::size_t> owner(tree.size());
    for (std::size_t p = 0; p < parts.size(); ++p)
        for (std::size_t i : parts[p]) owner[i] = p;
    std::vector<std::size_t> input;
    for (std::size_t i = 0; i < tree.size(); ++i)
        input.insert(input.end(), static_cast<std::size_t>(node_feature_counts[i]), owner[i]);
    return detail::assemble_layout(tree, spec, std::move(parts), std::move(schedules),
                                   std::move(input));
}

/// Compiles masks from explicit per-partition width schedules (depth + 1
/// entries each). Input neurons are laid out partition by partition.
inline NetworkLayout build_masks(const Tree& tree, const ArchitectureSpec& spec,
                                 const std::vector<std::vector<int>>& schedules) {
    spec.validate();
    auto parts = partition_nodes(tree, spec.partition);
    require(schedules.size() == parts.size(), "build_masks: expected " +
                                                  std::to_string(parts.size()) +
                                                  " partition schedules");
    std::vector<std::size_t> input;
    for (std::size_t p = 0; p < parts.size(); ++p) {
        require(schedules[p].size() == static_cast<std::size_t>(spec.depth) + 1,
                "build_masks: schedule length must be depth + 1");
        require(schedules[p].back() == static_cast<int>(parts[p].size()),
                "build_masks: partition output width must equal its node count");
        for (int w : schedules[p]) require(w >= 1, "build_masks: widths must be positive");
        input.insert(input.end(), static_cast<std::size_t>(schedules[p][0]), p);
    }
    return detail::assemble_layout(tree, spec, std::move(parts), schedules, std::move(input));
}

}  // namespace shl
