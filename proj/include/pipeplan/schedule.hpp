#pragma once

#include <string>
#include <vector>

#include "pipeplan/partition.hpp"

namespace pipeplan {

enum class TaskKind { forward, backward, comm, update };
enum class SchedulePolicy { sequential, pipelined };
enum class UpdateMode { none, sync_barrier, async_per_module };

struct Task {
    TaskKind kind = TaskKind::forward;
    int module = 0;      // 1..Z for F/B/U; producing module for comm
    int microbatch = 0;  // 1..m for F/B/comm; 0 for updates
    int boundary = 0;    // 1..Z-1 for comm tasks
    bool backward_comm = false;
    std::vector<int> devices;  // participating devices, ascending
};

std::string task_name(const Task& t);

struct DependencyDag {
    std::vector<Task> nodes;
    std::vector<std::pair<int, int>> edges;  // (prerequisite, dependent) node indices

    int find(TaskKind kind, int module, int microbatch, bool backward_comm = false) const;
};

struct Schedule {
    SchedulePolicy policy = SchedulePolicy::pipelined;
    UpdateMode update_mode = UpdateMode::none;
    int m = 0;
    int num_devices = 0;
    bool overlap_comm = false;
    DependencyDag dag;
    std::vector<std::vector<int>> device_lists;  // [device-1] -> node indices in run order
    std::vector<int> link_list;                  // comm node indices in run order
    std::vector<int> global_order;               // serialized order (drives sequential execution)
};

/// m micro-batch sizes summing to b, each floor(b/m) or ceil(b/m), larger
/// first. Throws when m > b.
std::vector<int> split_microbatches(int b, int m);

struct DagOptions {
    bool include_backward = true;  // forward-only dags for pipeline-law tests
};

/// Task dependency DAG for the plan: forward chains F(i,j)->F(i+1,j) with
/// comm tasks inserted on concat boundaries (mirrored for backward),
/// F(Z,j)->B(Z,j), backward chains B(i+1,j)->B(i,j), per-module micro-batch
/// order edges, and U(i) depending on every B(i,j).
DependencyDag build_dependency_dag(const PartitionPlan& plan, int m, const DagOptions& opts = {});

struct ScheduleOptions {
    bool overlap_comm = false;
    bool forward_only = false;
};

/// Device-level task orders for the plan. sequential serializes
/// F(1..Z,j), B(Z..1,j) per micro-batch; pipelined is a work-conserving
/// list schedule (ready ties broken by smaller micro-batch, backward before
/// forward, then smaller module) that additionally holds back F(i,j) until
/// B(i,j-2) has finished, bounding each module to two in-flight
/// micro-batches. Update tasks are left unplaced; see attach_updates.
Schedule build_schedule(const PartitionPlan& plan, int m, SchedulePolicy policy,
                        const ScheduleOptions& opts = {});

/// Place update tasks. async_per_module puts U(i) immediately after B(i,m)
/// on module i's devices; sync_barrier appends every U after all other work.
Schedule attach_updates(const Schedule& s, UpdateMode mode);

std::string serialize_schedule(const Schedule& s);

}  // namespace pipeplan
