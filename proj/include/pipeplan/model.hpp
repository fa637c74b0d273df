#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace pipeplan {

enum class LayerKind { dense, generic };

/// One abstract layer of a chain model. Costs are per input sample.
struct LayerSpec {
    int id = 0;                // 1-based, contiguous
    LayerKind kind = LayerKind::dense;
    int fan_in = 0;
    int fan_out = 0;
    std::int64_t param_count = 0;
    double fwd_flops = 0.0;
    double bwd_flops = 0.0;
    double act_bytes = 0.0;    // output activation bytes per sample
};

struct ModelGraph {
    std::string name;
    std::vector<LayerSpec> layers;

    int num_layers() const { return static_cast<int>(layers.size()); }
    const LayerSpec& layer(int id) const { return layers.at(static_cast<size_t>(id - 1)); }
};

struct DeviceSpec {
    int id = 0;                // 1-based
    double flops_per_sec = 0.0;
    double mem_bytes = 0.0;
};

/// Uniform all-pairs alpha-beta link model: every message costs
/// link_latency_s + bytes / link_bandwidth_Bps.
struct ClusterSpec {
    std::vector<DeviceSpec> devices;
    double link_latency_s = 0.0;
    double link_bandwidth_Bps = 1.0;

    int num_devices() const { return static_cast<int>(devices.size()); }
    const DeviceSpec& device(int id) const { return devices.at(static_cast<size_t>(id - 1)); }
};

/// Parse a model document (JSON, `schema: 1`). Throws std::runtime_error with
/// the offending field or layer ids on malformed input or dimension mismatch.
ModelGraph parse_model(const std::string& text);

/// Inverse of parse_model on valid graphs.
std::string serialize_model(const ModelGraph& g);

/// Validate chain structure: contiguous ids, adjacent fan_in/fan_out
/// compatibility, per-layer invariants. Throws on violation.
void validate_model(const ModelGraph& g);

/// Fill zero cost fields of dense layers from their dimensions:
/// fwd = 2*fan_in*fan_out, bwd = 2*fwd, act_bytes = fan_out*bytes_per_unit,
/// param_count = fan_in*fan_out + fan_out. Nonzero fields are preserved.
ModelGraph default_costs(const ModelGraph& g, double bytes_per_unit);

/// All cluster invariant violations, empty when the cluster is valid.
/// Never throws; errors are enumerated, not short-circuited.
std::vector<std::string> validate_cluster(const ClusterSpec& c);

ClusterSpec parse_cluster(const std::string& text);
std::string serialize_cluster(const ClusterSpec& c);

/// n identical devices.
ClusterSpec uniform_cluster(int n, double flops_per_sec, double mem_bytes,
                            double link_latency_s, double link_bandwidth_Bps);

}  // namespace pipeplan
