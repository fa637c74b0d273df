// Test-only oracles, independent of the library implementations they check.
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <queue>
#include <vector>

#include "pipeplan/model.hpp"
#include "pipeplan/partition.hpp"
#include "pipeplan/schedule.hpp"
#include "pipeplan/tinynet.hpp"

namespace oracles {

// Kahn's algorithm over node count + edge list, optionally with extra order
// constraints (device-list orders) folded in as edges.
inline bool is_acyclic(int nodes, const std::vector<std::pair<int, int>>& edges) {
    std::vector<std::vector<int>> adj(static_cast<size_t>(nodes));
    std::vector<int> indeg(static_cast<size_t>(nodes), 0);
    for (auto [a, b] : edges) {
        adj[static_cast<size_t>(a)].push_back(b);
        indeg[static_cast<size_t>(b)] += 1;
    }
    std::queue<int> q;
    for (int i = 0; i < nodes; ++i) {
        if (indeg[static_cast<size_t>(i)] == 0) q.push(i);
    }
    int seen = 0;
    while (!q.empty()) {
        const int u = q.front();
        q.pop();
        ++seen;
        for (int v : adj[static_cast<size_t>(u)]) {
            if (--indeg[static_cast<size_t>(v)] == 0) q.push(v);
        }
    }
    return seen == nodes;
}

// Device-local list orders are consistent with the dag iff dag edges plus
// list-adjacency edges stay acyclic.
inline bool lists_linearize_dag(const pipeplan::Schedule& s) {
    std::vector<std::pair<int, int>> edges = s.dag.edges;
    for (const auto& list : s.device_lists) {
        for (size_t i = 0; i + 1 < list.size(); ++i) edges.emplace_back(list[i], list[i + 1]);
    }
    for (size_t i = 0; i + 1 < s.link_list.size(); ++i) {
        edges.emplace_back(s.link_list[i], s.link_list[i + 1]);
    }
    return is_acyclic(static_cast<int>(s.dag.nodes.size()), edges);
}

// Exhaustive boundary accounting for communication volume, re-derived from
// the plan structure with plain loops.
inline double comm_volume_brute(const pipeplan::PartitionPlan& p, const pipeplan::ModelGraph& g,
                                double samples) {
    double total = 0.0;
    for (int k = 0; k + 1 < p.num_submodules(); ++k) {
        const pipeplan::SubModule& up = p.submodules[static_cast<size_t>(k)];
        const pipeplan::SubModule& down = p.submodules[static_cast<size_t>(k + 1)];
        const pipeplan::LayerSpec& layer = g.layer(up.last_layer);
        const auto& shards = up.layer_shards(up.last_layer);
        const int n = static_cast<int>(shards.size());
        if (n <= 1 || shards.front().replicated) continue;
        const double moved = layer.act_bytes * samples * (n - 1) / n;
        if (p.boundaries[static_cast<size_t>(k)] == pipeplan::BoundaryKind::concat_repartition) {
            total += 2.0 * moved;
        } else {
            // Canonical re-split of the boundary width over the consumer group.
            bool same = shards.size() == down.devices.size();
            if (same) {
                const int width = layer.fan_out;
                const int base = width / n;
                const int rem = width % n;
                int lo = 0;
                for (int i = 0; i < n && same; ++i) {
                    const int size = base + (i < rem ? 1 : 0);
                    same = shards[static_cast<size_t>(i)].device_id == down.devices[static_cast<size_t>(i)] &&
                           shards[static_cast<size_t>(i)].lo == lo &&
                           shards[static_cast<size_t>(i)].hi == lo + size;
                    lo += size;
                }
            }
            if (!same) total += moved;
        }
    }
    return total;
}

// Central finite differences over every parameter of a tiny net, written
// against forward/loss only.
inline double max_fd_error(const pipeplan::TinyNet& net, const pipeplan::Matrix& X,
                           const std::vector<int>& labels, pipeplan::LossKind kind, double h,
                           const pipeplan::GradientSet& analytic) {
    using namespace pipeplan;
    double worst = 0.0;
    auto loss_at = [&](const TinyNet& n) {
        return loss_value(forward(n, X).a.back(), labels, kind);
    };
    for (size_t l = 0; l < net.layers.size(); ++l) {
        for (size_t i = 0; i < net.layers[l].weights.v.size(); ++i) {
            TinyNet p = net, m = net;
            p.layers[l].weights.v[i] += h;
            m.layers[l].weights.v[i] -= h;
            const double numeric = (loss_at(p) - loss_at(m)) / (2 * h);
            const double a = analytic.dW[l].v[i];
            worst = std::max(worst,
                             std::abs(numeric - a) / std::max({1e-6, std::abs(numeric), std::abs(a)}));
        }
        for (size_t i = 0; i < net.layers[l].bias.size(); ++i) {
            TinyNet p = net, m = net;
            p.layers[l].bias[i] += h;
            m.layers[l].bias[i] -= h;
            const double numeric = (loss_at(p) - loss_at(m)) / (2 * h);
            const double a = analytic.db[l][i];
            worst = std::max(worst,
                             std::abs(numeric - a) / std::max({1e-6, std::abs(numeric), std::abs(a)}));
        }
    }
    return worst;
}

// Minimum objective over every span composition and merge mask, enumerated
// recursively and evaluated through the caller-supplied objective.
inline double exhaustive_min_objective(
    const pipeplan::ModelGraph& g, int n, int z_cap,
    const std::function<double(const pipeplan::PartitionPlan&)>& objective) {
    using namespace pipeplan;
    const int L = g.num_layers();
    double best = std::numeric_limits<double>::infinity();
    std::function<void(std::vector<int>&, int, int)> rec = [&](std::vector<int>& cuts, int next,
                                                               int Z) {
        if (static_cast<int>(cuts.size()) == Z - 1) {
            PartitionPlan base = build_plan_with_cuts(g, n, cuts);
            for (unsigned mask = 0; mask < (1u << (Z - 1)); ++mask) {
                PartitionPlan p = base;
                for (int k = 0; k < Z - 1; ++k) {
                    if (mask >> k & 1u) {
                        p = merge_submodules(p, {k + 1, k + 2});
                    }
                }
                best = std::min(best, objective(p));
            }
            return;
        }
        const int remaining = Z - 1 - static_cast<int>(cuts.size());
        for (int pos = next; pos <= L - remaining; ++pos) {
            cuts.push_back(pos);
            rec(cuts, pos + 1, Z);
            cuts.pop_back();
        }
    };
    for (int Z = 1; Z <= std::min(L, z_cap); ++Z) {
        std::vector<int> cuts;
        rec(cuts, 1, Z);
    }
    return best;
}

}  // namespace oracles
