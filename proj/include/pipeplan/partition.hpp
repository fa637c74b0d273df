#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pipeplan/model.hpp"

namespace pipeplan {

/// One per-device slice of a layer: the half-open unit range [lo, hi) of the
/// layer's fan_out dimension owned by `device_id`. A replicated shard covers
/// the full [0, fan_out) on every participating device.
struct Shard {
    int layer_id = 0;
    int device_id = 0;
    int lo = 0;
    int hi = 0;
    bool replicated = false;

    int units() const { return hi - lo; }
};

/// A contiguous span of sharded layers treated as one pipeline stage.
struct SubModule {
    int index = 0;                    // 1-based
    int first_layer = 0;              // inclusive
    int last_layer = 0;               // inclusive
    std::vector<int> devices;         // ascending ids
    std::vector<std::vector<Shard>> shards;  // [layer within span][device]

    int num_layers() const { return last_layer - first_layer + 1; }
    const std::vector<Shard>& layer_shards(int layer_id) const {
        return shards.at(static_cast<size_t>(layer_id - first_layer));
    }
};

enum class BoundaryKind { concat_repartition, direct };

struct PartitionPlan {
    int n = 0;  // devices the plan was built for
    std::vector<SubModule> submodules;
    std::vector<BoundaryKind> boundaries;  // size Z-1; boundary k sits between submodules k+1 and k+2
    std::vector<std::string> provenance;

    int num_submodules() const { return static_cast<int>(submodules.size()); }
};

/// Split one layer's fan_out over `devices` with largest-remainder balancing
/// (sizes differ by at most 1, larger slices first). Throws when the layer is
/// narrower than the device count unless `replicate_narrow` is set, in which
/// case every device carries the full layer.
std::vector<Shard> split_layer(const LayerSpec& layer, const std::vector<int>& devices,
                               bool replicate_narrow = false);

/// Convenience overload over devices 1..n.
std::vector<Shard> split_layer(const LayerSpec& layer, int n, bool replicate_narrow = false);

/// Assign layers to Z contiguous spans balancing summed fwd_flops (greedy
/// prefix sums, ties toward the earlier boundary), split every layer over all
/// n devices, and flag all Z-1 boundaries concat_repartition.
PartitionPlan build_plan(const ModelGraph& g, int n, int Z, bool replicate_narrow = false);

/// Plan with an explicit device group per sub-module (pipeline-style
/// placement). Spans are balanced the same way as build_plan; `n` is taken
/// from the largest device id referenced.
PartitionPlan build_staged_plan(const ModelGraph& g,
                                const std::vector<std::vector<int>>& device_groups,
                                bool replicate_narrow = false);

/// build_plan with explicit span boundaries: `cuts` lists the layer ids after
/// which a sub-module ends (ascending, strictly inside 1..L-1).
PartitionPlan build_plan_with_cuts(const ModelGraph& g, int n, const std::vector<int>& cuts,
                                   bool replicate_narrow = false);

/// Reclassify the boundaries interior to `group` (contiguous sub-module
/// indices, length >= 2) as direct. Shard contents and Z are unchanged.
PartitionPlan merge_submodules(const PartitionPlan& p, const std::vector<int>& group);

/// Merge every boundary of the plan.
PartitionPlan merge_all(const PartitionPlan& p);

/// Total boundary traffic in bytes for `samples` inputs. concat_repartition
/// boundaries cost 2 * act_bytes * samples * (n-1)/n (gather + scatter; each
/// device already holds its own 1/n share); direct boundaries cost
/// act_bytes * samples * (n-1)/n when the consumer's shard layout differs
/// from the producer's, else 0. Replicated producer layers cost 0.
double comm_volume(const PartitionPlan& p, const ModelGraph& g, double samples);

/// Bytes attributed to boundary k alone (same accounting as comm_volume).
double boundary_bytes(const PartitionPlan& p, const ModelGraph& g, int boundary, double samples);

/// Check plan invariants against the graph (and cluster when given):
/// spans partition 1..L in order, shards tile [0, fan_out) exactly unless
/// replicated, boundary count is Z-1, device ids exist. Throws on violation.
void validate_plan(const PartitionPlan& p, const ModelGraph& g, const ClusterSpec* cluster = nullptr);

PartitionPlan parse_plan(const std::string& text);
std::string serialize_plan(const PartitionPlan& p);

/// Sub-module owning `layer_id`.
const SubModule& submodule_of_layer(const PartitionPlan& p, int layer_id);

}  // namespace pipeplan
