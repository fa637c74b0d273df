#include "pipeplan/cost.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

#include <json.hpp>

namespace pipeplan {

using nlohmann::json;

namespace {

double shard_flops(const LayerSpec& layer, const Shard& s, double per_sample_flops) {
    if (layer.fan_out <= 0) return 0.0;
    if (s.replicated) return per_sample_flops;
    return per_sample_flops * s.units() / layer.fan_out;
}

}  // namespace

TaskCostTable task_costs(const PartitionPlan& plan, const ModelGraph& g, const CostParams& params) {
    if (params.microbatch_samples < 1) {
        throw std::invalid_argument("microbatch_samples must be >= 1");
    }
    const int Z = plan.num_submodules();
    const int m = std::max(1, params.microbatches);
    TaskCostTable t;
    t.m = m;
    t.tf.assign(static_cast<size_t>(Z), std::vector<double>(static_cast<size_t>(m), 0.0));
    t.tb = t.tf;
    for (int i = 0; i < Z; ++i) {
        const SubModule& sm = plan.submodules[static_cast<size_t>(i)];
        double fwd = 0.0;
        double bwd = 0.0;
        for (size_t di = 0; di < sm.devices.size(); ++di) {
            const DeviceSpec& dev = params.cluster.device(sm.devices[di]);
            double f = 0.0;
            double b = 0.0;
            for (int l = sm.first_layer; l <= sm.last_layer; ++l) {
                const LayerSpec& layer = g.layer(l);
                const Shard& s = sm.layer_shards(l)[di];
                f += shard_flops(layer, s, layer.fwd_flops);
                b += shard_flops(layer, s, layer.bwd_flops);
            }
            fwd = std::max(fwd, f * params.microbatch_samples / dev.flops_per_sec);
            bwd = std::max(bwd, b * params.microbatch_samples / dev.flops_per_sec);
        }
        for (int j = 0; j < m; ++j) {
            t.tf[static_cast<size_t>(i)][static_cast<size_t>(j)] = fwd;
            t.tb[static_cast<size_t>(i)][static_cast<size_t>(j)] = bwd;
        }
    }
    t.tcomm.assign(static_cast<size_t>(std::max(0, Z - 1)),
                   std::vector<double>(static_cast<size_t>(m), 0.0));
    for (int k = 0; k < Z - 1; ++k) {
        const double bytes = boundary_bytes(plan, g, k, params.microbatch_samples);
        const double secs =
            bytes > 0.0 ? params.cluster.link_latency_s + bytes / params.cluster.link_bandwidth_Bps
                        : 0.0;
        for (int j = 0; j < m; ++j) {
            t.tcomm[static_cast<size_t>(k)][static_cast<size_t>(j)] = secs;
        }
    }
    return t;
}

double total_cost(const TaskCostTable& t) {
    const CostBreakdown b = cost_breakdown(t);
    return b.sum_tf + b.sum_tb + b.sum_tcomm;
}

CostBreakdown cost_breakdown(const TaskCostTable& t) {
    CostBreakdown b;
    for (const auto& row : t.tf) b.sum_tf = std::accumulate(row.begin(), row.end(), b.sum_tf);
    for (const auto& row : t.tb) b.sum_tb = std::accumulate(row.begin(), row.end(), b.sum_tb);
    for (const auto& row : t.tcomm) {
        b.sum_tcomm = std::accumulate(row.begin(), row.end(), b.sum_tcomm);
    }
    return b;
}

namespace {

struct Candidate {
    double objective = std::numeric_limits<double>::infinity();
    int Z = std::numeric_limits<int>::max();
    std::vector<int> cuts;
    unsigned mask = 0;  // bit k set -> boundary k direct
    PartitionPlan plan;
    bool valid = false;
};

// (objective, Z, cuts, mask) — smaller Z then earlier boundaries win ties.
bool better(const Candidate& a, const Candidate& b) {
    if (!b.valid) return true;
    if (a.objective != b.objective) return a.objective < b.objective;
    if (a.Z != b.Z) return a.Z < b.Z;
    if (a.cuts != b.cuts) return a.cuts < b.cuts;
    return a.mask < b.mask;
}

PartitionPlan apply_mask(PartitionPlan plan, unsigned mask) {
    const int Z = plan.num_submodules();
    int run_start = -1;
    for (int k = 0; k <= Z - 1; ++k) {
        const bool set = k < Z - 1 && (mask >> k & 1u) != 0;
        if (set && run_start < 0) run_start = k;
        if (!set && run_start >= 0) {
            std::vector<int> group;
            for (int j = run_start + 1; j <= k + 1; ++j) group.push_back(j);
            plan = merge_submodules(plan, group);
            run_start = -1;
        }
    }
    return plan;
}

long count_candidates(int L, int z_cap, long limit) {
    long total = 0;
    // C(L-1, Z-1) * 2^(Z-1) span compositions with merge masks, per Z.
    double comb = 1.0;
    for (int Z = 1; Z <= z_cap; ++Z) {
        if (Z > 1) comb = comb * (L - Z + 1) / (Z - 1);
        const double c = comb * std::pow(2.0, Z - 1);
        if (c > static_cast<double>(limit) - total) return limit + 1;
        total += static_cast<long>(c);
    }
    return total;
}

void enumerate_cuts(int L, int Z, std::vector<int>& cuts,
                    const std::function<void(const std::vector<int>&)>& emit, int next) {
    if (static_cast<int>(cuts.size()) == Z - 1) {
        emit(cuts);
        return;
    }
    const int remaining = Z - 1 - static_cast<int>(cuts.size());
    for (int pos = next; pos <= L - remaining; ++pos) {
        cuts.push_back(pos);
        enumerate_cuts(L, Z, cuts, emit, pos + 1);
        cuts.pop_back();
    }
}

}  // namespace

OptimizeResult optimize_plan(const ModelGraph& g, const ClusterSpec& cluster, int n,
                             const OptimizeOptions& opts) {
    validate_model(g);
    if (n < 1) throw std::invalid_argument("optimize_plan: n must be >= 1");
    if (opts.budget < 1) throw std::invalid_argument("optimize_plan: budget must be >= 1");
    const int L = g.num_layers();
    const int z_cap = std::min(L, opts.z_max > 0 ? opts.z_max : 2 * n);

    CostParams params;
    params.cluster = cluster;
    params.microbatch_samples = opts.microbatch_samples;
    params.microbatches = opts.m;
    PlanObjective objective = opts.objective;
    if (!objective) {
        objective = [&](const PartitionPlan& p) { return total_cost(task_costs(p, g, params)); };
    }

    long evaluated = 0;
    Candidate best;
    auto evaluate = [&](const std::vector<int>& cuts, unsigned mask) {
        PartitionPlan plan = apply_mask(build_plan_with_cuts(g, n, cuts, opts.replicate_narrow), mask);
        Candidate c;
        c.objective = objective(plan);
        c.Z = plan.num_submodules();
        c.cuts = cuts;
        c.mask = mask;
        c.plan = std::move(plan);
        c.valid = true;
        ++evaluated;
        if (better(c, best)) best = c;
        return c;
    };

    const long space = count_candidates(L, z_cap, 4096);
    OptimizeResult result;
    if (space <= 4096) {
        result.exhaustive = true;
        for (int Z = 1; Z <= z_cap; ++Z) {
            std::vector<int> cuts;
            enumerate_cuts(L, Z, cuts, [&](const std::vector<int>& cs) {
                for (unsigned mask = 0; mask < (1u << (Z - 1)); ++mask) evaluate(cs, mask);
            }, 1);
        }
    } else {
        // Greedy descent: start at Z=min(n,L) balanced spans, repeatedly take
        // the single merge or one-layer boundary move that reduces the
        // objective most, until a local minimum or the budget.
        const int z0 = std::min(n, L);
        PartitionPlan seed = build_plan(g, n, z0, opts.replicate_narrow);
        std::vector<int> cuts;
        for (int j = 0; j + 1 < seed.num_submodules(); ++j) {
            cuts.push_back(seed.submodules[static_cast<size_t>(j)].last_layer);
        }
        Candidate current = evaluate(cuts, 0);
        while (evaluated < opts.budget) {
            Candidate round;
            auto try_neighbor = [&](const std::vector<int>& cs, unsigned mask) {
                if (evaluated >= opts.budget) return;
                Candidate c = evaluate(cs, mask);
                if (better(c, round)) round = std::move(c);
            };
            const int Z = current.Z;
            for (int k = 0; k < Z - 1; ++k) {
                if ((current.mask >> k & 1u) == 0) {
                    try_neighbor(current.cuts, current.mask | (1u << k));
                }
            }
            for (size_t ci = 0; ci < current.cuts.size(); ++ci) {
                for (int delta : {-1, +1}) {
                    std::vector<int> moved = current.cuts;
                    moved[ci] += delta;
                    const int lo = ci == 0 ? 1 : moved[ci - 1] + 1;
                    const int hi = ci + 1 < moved.size() ? moved[ci + 1] - 1 : L - 1;
                    if (moved[ci] < lo || moved[ci] > hi) continue;
                    try_neighbor(moved, current.mask);
                }
            }
            if (!round.valid || round.objective >= current.objective) break;  // local minimum
            current = round;
        }
    }

    result.plan = best.plan;
    result.objective = best.objective;
    result.candidates_evaluated = evaluated;
    result.breakdown = cost_breakdown(task_costs(result.plan, g, params));
    return result;
}

std::string serialize_optimizer_report(const OptimizeResult& r) {
    json doc;
    doc["schema"] = 1;
    doc["candidates_evaluated"] = r.candidates_evaluated;
    doc["exhaustive"] = r.exhaustive;
    doc["objective_s"] = r.objective;
    doc["breakdown"] = {{"sum_tf_s", r.breakdown.sum_tf},
                        {"sum_tb_s", r.breakdown.sum_tb},
                        {"sum_tcomm_s", r.breakdown.sum_tcomm}};
    doc["plan"] = json::parse(serialize_plan(r.plan));
    return doc.dump(2) + "\n";
}

}  // namespace pipeplan
