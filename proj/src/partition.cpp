#include "pipeplan/partition.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace pipeplan {

using nlohmann::json;

std::vector<Shard> split_layer(const LayerSpec& layer, const std::vector<int>& devices,
                               bool replicate_narrow) {
    const int n = static_cast<int>(devices.size());
    if (n < 1) throw std::invalid_argument("split_layer: need at least one device");
    std::vector<Shard> out;
    out.reserve(static_cast<size_t>(n));
    if (layer.fan_out < n) {
        if (!replicate_narrow) {
            throw std::runtime_error("layer " + std::to_string(layer.id) + " too narrow to split " +
                                     std::to_string(n) + " ways (fan_out " +
                                     std::to_string(layer.fan_out) + ")");
        }
        for (int k = 0; k < n; ++k) {
            out.push_back(Shard{layer.id, devices[static_cast<size_t>(k)], 0, layer.fan_out, true});
        }
        return out;
    }
    // Largest-remainder balancing, larger slices first.
    const int base = layer.fan_out / n;
    const int rem = layer.fan_out % n;
    int lo = 0;
    for (int k = 0; k < n; ++k) {
        const int size = base + (k < rem ? 1 : 0);
        out.push_back(Shard{layer.id, devices[static_cast<size_t>(k)], lo, lo + size, false});
        lo += size;
    }
    return out;
}

std::vector<Shard> split_layer(const LayerSpec& layer, int n, bool replicate_narrow) {
    std::vector<int> devices(static_cast<size_t>(n));
    std::iota(devices.begin(), devices.end(), 1);
    return split_layer(layer, devices, replicate_narrow);
}

namespace {

// Span boundaries balancing cumulative fwd_flops: boundary i aims at the
// prefix closest to total*i/Z, ties toward the earlier layer, while leaving
// at least one layer per remaining span.
std::vector<int> balanced_spans(const ModelGraph& g, int Z) {
    const int L = g.num_layers();
    std::vector<double> prefix(static_cast<size_t>(L) + 1, 0.0);
    for (int l = 1; l <= L; ++l) {
        prefix[static_cast<size_t>(l)] =
            prefix[static_cast<size_t>(l - 1)] + g.layer(l).fwd_flops;
    }
    const double total = prefix[static_cast<size_t>(L)];
    std::vector<int> cuts;  // cut after layer cuts[i]
    int prev = 0;
    for (int i = 1; i < Z; ++i) {
        const double target = total * i / Z;
        const int lo = prev + 1;
        const int hi = L - (Z - i);
        int best = lo;
        double best_err = std::abs(prefix[static_cast<size_t>(lo)] - target);
        for (int pos = lo + 1; pos <= hi; ++pos) {
            const double err = std::abs(prefix[static_cast<size_t>(pos)] - target);
            if (err < best_err) {
                best = pos;
                best_err = err;
            }
        }
        cuts.push_back(best);
        prev = best;
    }
    return cuts;
}

PartitionPlan plan_from_spans(const ModelGraph& g, const std::vector<int>& cuts,
                              const std::vector<std::vector<int>>& groups, int n,
                              bool replicate_narrow) {
    PartitionPlan p;
    p.n = n;
    const int Z = static_cast<int>(groups.size());
    int first = 1;
    for (int j = 0; j < Z; ++j) {
        const int last = j < Z - 1 ? cuts[static_cast<size_t>(j)] : g.num_layers();
        SubModule sm;
        sm.index = j + 1;
        sm.first_layer = first;
        sm.last_layer = last;
        sm.devices = groups[static_cast<size_t>(j)];
        for (int l = first; l <= last; ++l) {
            sm.shards.push_back(split_layer(g.layer(l), sm.devices, replicate_narrow));
        }
        p.submodules.push_back(std::move(sm));
        first = last + 1;
    }
    p.boundaries.assign(static_cast<size_t>(Z - 1), BoundaryKind::concat_repartition);
    return p;
}

}  // namespace

PartitionPlan build_plan(const ModelGraph& g, int n, int Z, bool replicate_narrow) {
    validate_model(g);
    if (n < 1) throw std::invalid_argument("build_plan: n must be >= 1");
    if (Z < 1 || Z > g.num_layers()) {
        throw std::runtime_error("Z exceeds layer count (Z=" + std::to_string(Z) +
                                 ", L=" + std::to_string(g.num_layers()) + ")");
    }
    std::vector<int> all(static_cast<size_t>(n));
    std::iota(all.begin(), all.end(), 1);
    std::vector<std::vector<int>> groups(static_cast<size_t>(Z), all);
    return plan_from_spans(g, balanced_spans(g, Z), groups, n, replicate_narrow);
}

PartitionPlan build_staged_plan(const ModelGraph& g,
                                const std::vector<std::vector<int>>& device_groups,
                                bool replicate_narrow) {
    validate_model(g);
    const int Z = static_cast<int>(device_groups.size());
    if (Z < 1 || Z > g.num_layers()) {
        throw std::runtime_error("Z exceeds layer count (Z=" + std::to_string(Z) +
                                 ", L=" + std::to_string(g.num_layers()) + ")");
    }
    int n = 0;
    for (const auto& grp : device_groups) {
        if (grp.empty()) throw std::invalid_argument("device group must not be empty");
        for (int d : grp) n = std::max(n, d);
    }
    return plan_from_spans(g, balanced_spans(g, Z), device_groups, n, replicate_narrow);
}

PartitionPlan build_plan_with_cuts(const ModelGraph& g, int n, const std::vector<int>& cuts,
                                   bool replicate_narrow) {
    validate_model(g);
    if (n < 1) throw std::invalid_argument("build_plan_with_cuts: n must be >= 1");
    int prev = 0;
    for (int c : cuts) {
        if (c <= prev || c >= g.num_layers()) {
            throw std::runtime_error("invalid span cut at layer " + std::to_string(c));
        }
        prev = c;
    }
    std::vector<int> all(static_cast<size_t>(n));
    std::iota(all.begin(), all.end(), 1);
    std::vector<std::vector<int>> groups(cuts.size() + 1, all);
    return plan_from_spans(g, cuts, groups, n, replicate_narrow);
}

PartitionPlan merge_submodules(const PartitionPlan& p, const std::vector<int>& group) {
    if (group.size() < 2) throw std::runtime_error("merge group must have length >= 2");
    for (size_t i = 0; i < group.size(); ++i) {
        if (group[i] < 1 || group[i] > p.num_submodules()) {
            throw std::runtime_error("merge group index " + std::to_string(group[i]) +
                                     " out of range 1.." + std::to_string(p.num_submodules()));
        }
        if (i > 0 && group[i] != group[i - 1] + 1) {
            throw std::runtime_error("group must be contiguous");
        }
    }
    PartitionPlan out = p;
    for (size_t i = 0; i + 1 < group.size(); ++i) {
        out.boundaries[static_cast<size_t>(group[i] - 1)] = BoundaryKind::direct;
    }
    out.provenance.push_back("merge[" + std::to_string(group.front()) + ".." +
                             std::to_string(group.back()) + "]");
    return out;
}

PartitionPlan merge_all(const PartitionPlan& p) {
    if (p.num_submodules() < 2) return p;
    std::vector<int> group(static_cast<size_t>(p.num_submodules()));
    std::iota(group.begin(), group.end(), 1);
    return merge_submodules(p, group);
}

namespace {

// The consumer side re-partitions the incoming activation canonically over
// its own device group; a direct boundary is free exactly when that layout
// equals the producer's.
bool layouts_match(const std::vector<Shard>& produced, const LayerSpec& boundary_layer,
                   const SubModule& consumer) {
    std::vector<Shard> want;
    try {
        want = split_layer(boundary_layer, consumer.devices, true);
    } catch (const std::exception&) {
        return false;
    }
    if (want.size() != produced.size()) return false;
    for (size_t i = 0; i < want.size(); ++i) {
        if (want[i].device_id != produced[i].device_id || want[i].lo != produced[i].lo ||
            want[i].hi != produced[i].hi || want[i].replicated != produced[i].replicated) {
            return false;
        }
    }
    return true;
}

}  // namespace

double boundary_bytes(const PartitionPlan& p, const ModelGraph& g, int boundary, double samples) {
    const SubModule& producer = p.submodules.at(static_cast<size_t>(boundary));
    const SubModule& consumer = p.submodules.at(static_cast<size_t>(boundary) + 1);
    const LayerSpec& bl = g.layer(producer.last_layer);
    const std::vector<Shard>& shards = producer.layer_shards(producer.last_layer);
    const int n = static_cast<int>(shards.size());
    if (n <= 1 || shards.front().replicated) return 0.0;
    const double frac = static_cast<double>(n - 1) / n;
    const double act = bl.act_bytes * samples;
    if (p.boundaries.at(static_cast<size_t>(boundary)) == BoundaryKind::concat_repartition) {
        return 2.0 * act * frac;
    }
    return layouts_match(shards, bl, consumer) ? 0.0 : act * frac;
}

double comm_volume(const PartitionPlan& p, const ModelGraph& g, double samples) {
    double total = 0.0;
    for (int k = 0; k < p.num_submodules() - 1; ++k) {
        total += boundary_bytes(p, g, k, samples);
    }
    return total;
}

void validate_plan(const PartitionPlan& p, const ModelGraph& g, const ClusterSpec* cluster) {
    if (p.submodules.empty()) throw std::runtime_error("plan has no submodules");
    if (static_cast<int>(p.boundaries.size()) != p.num_submodules() - 1) {
        throw std::runtime_error("plan boundary count must be Z-1");
    }
    int expect_first = 1;
    for (const SubModule& sm : p.submodules) {
        if (sm.first_layer != expect_first || sm.last_layer < sm.first_layer) {
            throw std::runtime_error("sub-module spans must partition 1..L in order");
        }
        expect_first = sm.last_layer + 1;
        if (static_cast<int>(sm.shards.size()) != sm.num_layers()) {
            throw std::runtime_error("sub-module " + std::to_string(sm.index) +
                                     " missing shard rows");
        }
        for (int l = sm.first_layer; l <= sm.last_layer; ++l) {
            const LayerSpec& layer = g.layer(l);
            const std::vector<Shard>& shards = sm.layer_shards(l);
            if (shards.size() != sm.devices.size()) {
                throw std::runtime_error("layer " + std::to_string(l) +
                                         ": one shard per participating device required");
            }
            if (shards.front().replicated) {
                for (const Shard& s : shards) {
                    if (!s.replicated || s.lo != 0 || s.hi != layer.fan_out) {
                        throw std::runtime_error("layer " + std::to_string(l) +
                                                 ": inconsistent replication");
                    }
                }
            } else {
                int lo = 0;
                for (const Shard& s : shards) {
                    if (s.lo != lo || s.hi <= s.lo) {
                        throw std::runtime_error("layer " + std::to_string(l) +
                                                 ": shards must tile [0, fan_out) exactly");
                    }
                    lo = s.hi;
                }
                if (lo != layer.fan_out) {
                    throw std::runtime_error("layer " + std::to_string(l) +
                                             ": shards must tile [0, fan_out) exactly");
                }
            }
            for (size_t i = 0; i < shards.size(); ++i) {
                if (shards[i].device_id != sm.devices[i]) {
                    throw std::runtime_error("layer " + std::to_string(l) +
                                             ": shard device order must match sub-module devices");
                }
                if (cluster != nullptr &&
                    (shards[i].device_id < 1 || shards[i].device_id > cluster->num_devices())) {
                    throw std::runtime_error("plan references device " +
                                             std::to_string(shards[i].device_id) +
                                             " absent from the cluster");
                }
            }
        }
    }
    if (expect_first != g.num_layers() + 1) {
        throw std::runtime_error("plan does not cover all layers (ends at " +
                                 std::to_string(expect_first - 1) + " of " +
                                 std::to_string(g.num_layers()) + ")");
    }
}

const SubModule& submodule_of_layer(const PartitionPlan& p, int layer_id) {
    for (const SubModule& sm : p.submodules) {
        if (layer_id >= sm.first_layer && layer_id <= sm.last_layer) return sm;
    }
    throw std::out_of_range("no sub-module owns layer " + std::to_string(layer_id));
}

std::string serialize_plan(const PartitionPlan& p) {
    json doc;
    doc["schema"] = 1;
    doc["n"] = p.n;
    doc["submodules"] = json::array();
    for (const SubModule& sm : p.submodules) {
        json jm;
        jm["span"] = {sm.first_layer, sm.last_layer};
        jm["devices"] = sm.devices;
        jm["shards"] = json::array();
        for (const auto& row : sm.shards) {
            for (const Shard& s : row) {
                json js;
                js["layer"] = s.layer_id;
                js["device"] = s.device_id;
                js["range"] = {s.lo, s.hi};
                if (s.replicated) js["replicated"] = true;
                jm["shards"].push_back(js);
            }
        }
        doc["submodules"].push_back(jm);
    }
    doc["boundaries"] = json::array();
    for (BoundaryKind b : p.boundaries) {
        doc["boundaries"].push_back(b == BoundaryKind::concat_repartition ? "concat" : "direct");
    }
    doc["provenance"] = p.provenance;
    return doc.dump(2) + "\n";
}

PartitionPlan parse_plan(const std::string& text) {
    json doc;
    try {
        doc = json::parse(text);
    } catch (const json::parse_error& e) {
        throw std::runtime_error(std::string("plan parse error: ") + e.what());
    }
    PartitionPlan p;
    p.n = doc.at("n").get<int>();
    int index = 1;
    for (const json& jm : doc.at("submodules")) {
        SubModule sm;
        sm.index = index++;
        sm.first_layer = jm.at("span").at(0).get<int>();
        sm.last_layer = jm.at("span").at(1).get<int>();
        if (jm.contains("devices")) {
            sm.devices = jm.at("devices").get<std::vector<int>>();
        }
        sm.shards.assign(static_cast<size_t>(sm.num_layers()), {});
        for (const json& js : jm.at("shards")) {
            Shard s;
            s.layer_id = js.at("layer").get<int>();
            s.device_id = js.at("device").get<int>();
            s.lo = js.at("range").at(0).get<int>();
            s.hi = js.at("range").at(1).get<int>();
            s.replicated = js.value("replicated", false);
            if (s.layer_id < sm.first_layer || s.layer_id > sm.last_layer) {
                throw std::runtime_error("plan shard layer " + std::to_string(s.layer_id) +
                                         " outside its sub-module span");
            }
            sm.shards[static_cast<size_t>(s.layer_id - sm.first_layer)].push_back(s);
        }
        if (sm.devices.empty() && !sm.shards.empty()) {
            for (const Shard& s : sm.shards.front()) sm.devices.push_back(s.device_id);
        }
        p.submodules.push_back(std::move(sm));
    }
    for (const json& jb : doc.at("boundaries")) {
        const std::string b = jb.get<std::string>();
        if (b == "concat") {
            p.boundaries.push_back(BoundaryKind::concat_repartition);
        } else if (b == "direct") {
            p.boundaries.push_back(BoundaryKind::direct);
        } else {
            throw std::runtime_error("unknown boundary kind \"" + b + "\"");
        }
    }
    if (doc.contains("provenance")) {
        p.provenance = doc.at("provenance").get<std::vector<std::string>>();
    }
    return p;
}

}  // namespace pipeplan
