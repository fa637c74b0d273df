#pragma once

#include <string>
#include <vector>

#include "pipeplan/cost.hpp"
#include "pipeplan/model.hpp"
#include "pipeplan/partition.hpp"
#include "pipeplan/schedule.hpp"

namespace pipeplan {

/// proposed frees a micro-batch's activations when its backward completes;
/// stash_all holds every micro-batch of the batch until the module's final
/// backward, modeling delayed-gradient training.
enum class MemoryMode { proposed, stash_all };

struct SimOptions {
    double bytes_per_param = 4.0;
    double samples_per_microbatch = 1.0;
};

struct TaskEvent {
    int node = 0;
    double start = 0.0;
    double end = 0.0;
};

struct SimReport {
    double makespan_s = 0.0;
    std::vector<double> busy_s;          // per device
    std::vector<double> utilization;     // busy / makespan, 0 when makespan 0
    std::vector<double> peak_mem_bytes;  // per device, parameters + live stash
    double comm_s = 0.0;                 // link occupancy
    double tF_total = 0.0;
    double tB_total = 0.0;
    std::vector<TaskEvent> trace;        // start-ordered

    bool operator==(const SimReport&) const = default;
};

/// Deterministic discrete-event execution of the schedule under the cost
/// table. A task starts when all dag prerequisites finished and every
/// resource it occupies (its devices; the single shared link for comm tasks)
/// is free, in device-list order. Throws on unpriced tasks, naming them.
SimReport simulate(const Schedule& s, const TaskCostTable& t, MemoryMode mem, const ModelGraph& g,
                   const PartitionPlan& plan, const SimOptions& opts = {});

/// Eq-style scalability ratio. Throws when T_p <= 0.
double speedup(double T_s, double T_p);

/// Per-device peak memory ratio proposed / stash_all (max over devices),
/// simulated on the same schedule and prices.
double memory_compare(const ModelGraph& g, const PartitionPlan& plan, const Schedule& s,
                      const TaskCostTable& t, const SimOptions& opts = {});

struct SweepRow {
    int n = 0;
    int Z = 0;
    int merges = 0;
    double makespan_s = 0.0;
    double speedup = 0.0;
    double util_min = 0.0;
    double util_mean = 0.0;
    double peak_mem_bytes = 0.0;
    double comm_s = 0.0;
    double mem_ratio = -1.0;  // proposed/stash_all when requested, else -1
};

struct SweepOptions {
    int microbatch_samples = 1;
    MemoryMode memory = MemoryMode::proposed;
    bool optimize = true;  // false: balanced Z=min(n,L) plan, no merging
    bool memory_compare = false;
    bool replicate_narrow = false;
    SimOptions sim;
};

/// For each n: plan (optimizer or balanced baseline), pipelined schedule with
/// async updates, simulate. Speedup is measured against a sequential run on
/// one device, per the single-device baseline convention.
std::vector<SweepRow> sweep(const ModelGraph& g, const ClusterSpec& cluster_template,
                            const std::vector<int>& n_list, int m, const SweepOptions& opts = {});

std::string sweep_csv(const std::vector<SweepRow>& rows, bool with_mem_ratio);
std::string serialize_report(const SimReport& r, const Schedule& s);

}  // namespace pipeplan
