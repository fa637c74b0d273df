#pragma once

#include <functional>
#include <string>
#include <vector>

#include "pipeplan/model.hpp"
#include "pipeplan/partition.hpp"

namespace pipeplan {

/// Per-task prices: tf[i][j] / tb[i][j] for sub-module i+1, micro-batch j+1,
/// tcomm[k][j] for one transfer over boundary k+1. All seconds, all >= 0.
struct TaskCostTable {
    int m = 0;
    std::vector<std::vector<double>> tf;     // Z x m
    std::vector<std::vector<double>> tb;     // Z x m
    std::vector<std::vector<double>> tcomm;  // (Z-1) x m

    int num_modules() const { return static_cast<int>(tf.size()); }
};

struct CostParams {
    ClusterSpec cluster;
    int microbatch_samples = 1;
    int microbatches = 1;
    bool overlap_comm = false;
};

/// Price every task of the plan. A sub-module's pass costs the slowest
/// participating device (synchronous concatenation waits for it); transfers
/// cost latency + bytes/bandwidth, zero-byte boundaries cost nothing.
TaskCostTable task_costs(const PartitionPlan& plan, const ModelGraph& g, const CostParams& params);

/// Sum of every table entry: forward + backward + communication seconds.
double total_cost(const TaskCostTable& t);

struct CostBreakdown {
    double sum_tf = 0.0;
    double sum_tb = 0.0;
    double sum_tcomm = 0.0;
};

CostBreakdown cost_breakdown(const TaskCostTable& t);

/// Objective evaluated per candidate plan; defaults to total_cost of
/// task_costs. A simulator-backed objective can be plugged in to rank
/// candidates by pipelined makespan instead.
using PlanObjective = std::function<double(const PartitionPlan&)>;

struct OptimizeResult {
    PartitionPlan plan;
    double objective = 0.0;
    long candidates_evaluated = 0;
    bool exhaustive = false;
    CostBreakdown breakdown;
};

struct OptimizeOptions {
    int m = 1;                  // micro-batch count for pricing
    int microbatch_samples = 1;
    long budget = 100000;       // evaluation cap for the greedy path
    int z_max = 0;              // 0 -> default 2n
    bool replicate_narrow = false;
    PlanObjective objective;    // empty -> total_cost
};

/// Search span compositions, Z in 1..min(L, z_max) and merge choices for the
/// minimum-objective plan. Spaces of at most 4096 candidates are enumerated
/// exhaustively; larger ones use greedy descent from Z=min(n,L) balanced
/// spans (single best merge or boundary move per step, stop at a local
/// minimum or budget). Ties break toward smaller Z, then earlier boundaries.
OptimizeResult optimize_plan(const ModelGraph& g, const ClusterSpec& cluster, int n,
                             const OptimizeOptions& opts = {});

std::string serialize_optimizer_report(const OptimizeResult& r);

}  // namespace pipeplan
