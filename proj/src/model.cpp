#include "pipeplan/model.hpp"

#include <sstream>
#include <stdexcept>
#include <unordered_set>

#include <json.hpp>

namespace pipeplan {

using nlohmann::json;

namespace {

LayerKind kind_from_string(const std::string& s) {
    if (s == "dense") return LayerKind::dense;
    if (s == "generic") return LayerKind::generic;
    throw std::runtime_error("unknown layer kind \"" + s + "\" (expected dense|generic)");
}

const char* kind_to_string(LayerKind k) {
    return k == LayerKind::dense ? "dense" : "generic";
}

double get_number(const json& j, const std::string& field, double fallback, bool required) {
    if (!j.contains(field)) {
        if (required) throw std::runtime_error("missing field \"" + field + "\"");
        return fallback;
    }
    if (!j.at(field).is_number()) {
        throw std::runtime_error("field \"" + field + "\" must be a number");
    }
    return j.at(field).get<double>();
}

}  // namespace

void validate_model(const ModelGraph& g) {
    if (g.layers.empty()) {
        throw std::runtime_error("model must have at least one layer");
    }
    for (size_t i = 0; i < g.layers.size(); ++i) {
        const LayerSpec& l = g.layers[i];
        const std::string where = "layer " + std::to_string(i + 1);
        if (l.id != static_cast<int>(i + 1)) {
            throw std::runtime_error(where + ": ids must be contiguous starting at 1, got " +
                                     std::to_string(l.id));
        }
        if (l.fan_in < 1 || l.fan_out < 1) {
            throw std::runtime_error(where + ": fan_in and fan_out must be >= 1");
        }
        if (l.param_count < 0 || l.fwd_flops < 0 || l.bwd_flops < 0 || l.act_bytes < 0) {
            throw std::runtime_error(where + ": cost fields must be >= 0");
        }
        if (i > 0 && g.layers[i - 1].fan_out != l.fan_in) {
            throw std::runtime_error("dimension mismatch between layers " + std::to_string(i) +
                                     " and " + std::to_string(i + 1) + ": fan_out " +
                                     std::to_string(g.layers[i - 1].fan_out) + " vs fan_in " +
                                     std::to_string(l.fan_in));
        }
    }
}

ModelGraph parse_model(const std::string& text) {
    json doc;
    try {
        doc = json::parse(text);
    } catch (const json::parse_error& e) {
        throw std::runtime_error(std::string("model parse error: ") + e.what());
    }
    if (!doc.is_object()) throw std::runtime_error("model document must be an object");
    const int schema = static_cast<int>(get_number(doc, "schema", 1, false));
    if (schema != 1) {
        throw std::runtime_error("unsupported model schema " + std::to_string(schema));
    }
    if (!doc.contains("layers") || !doc.at("layers").is_array()) {
        throw std::runtime_error("missing field \"layers\" (array)");
    }

    ModelGraph g;
    g.name = doc.value("name", std::string("model"));
    int next_id = 1;
    for (const json& jl : doc.at("layers")) {
        const std::string where = "layers[" + std::to_string(next_id - 1) + "]";
        try {
            if (!jl.is_object()) throw std::runtime_error("must be an object");
            LayerSpec l;
            l.id = next_id++;
            l.kind = kind_from_string(jl.value("kind", std::string("dense")));
            l.fan_in = static_cast<int>(get_number(jl, "fan_in", 0, true));
            l.fan_out = static_cast<int>(get_number(jl, "fan_out", 0, true));
            l.param_count = static_cast<std::int64_t>(get_number(jl, "param_count", 0, false));
            l.fwd_flops = get_number(jl, "fwd_flops", 0, false);
            l.bwd_flops = get_number(jl, "bwd_flops", 0, false);
            l.act_bytes = get_number(jl, "act_bytes", 0, false);
            g.layers.push_back(l);
        } catch (const std::exception& e) {
            throw std::runtime_error(where + ": " + e.what());
        }
    }
    validate_model(g);
    return g;
}

std::string serialize_model(const ModelGraph& g) {
    json doc;
    doc["schema"] = 1;
    doc["name"] = g.name;
    doc["layers"] = json::array();
    for (const LayerSpec& l : g.layers) {
        json jl;
        jl["kind"] = kind_to_string(l.kind);
        jl["fan_in"] = l.fan_in;
        jl["fan_out"] = l.fan_out;
        jl["param_count"] = l.param_count;
        jl["fwd_flops"] = l.fwd_flops;
        jl["bwd_flops"] = l.bwd_flops;
        jl["act_bytes"] = l.act_bytes;
        doc["layers"].push_back(jl);
    }
    return doc.dump(2) + "\n";
}

ModelGraph default_costs(const ModelGraph& g, double bytes_per_unit) {
    ModelGraph out = g;
    for (LayerSpec& l : out.layers) {
        if (l.kind != LayerKind::dense) continue;
        const double io = static_cast<double>(l.fan_in) * l.fan_out;
        if (l.fwd_flops == 0) l.fwd_flops = 2.0 * io;
        if (l.bwd_flops == 0) l.bwd_flops = 4.0 * io;  // two products per forward product
        if (l.act_bytes == 0) l.act_bytes = l.fan_out * bytes_per_unit;
        if (l.param_count == 0) {
            l.param_count = static_cast<std::int64_t>(l.fan_in) * l.fan_out + l.fan_out;
        }
    }
    return out;
}

std::vector<std::string> validate_cluster(const ClusterSpec& c) {
    std::vector<std::string> errs;
    if (c.devices.empty()) errs.push_back("cluster must have at least one device");
    std::unordered_set<int> seen;
    for (const DeviceSpec& d : c.devices) {
        if (!seen.insert(d.id).second) {
            errs.push_back("duplicate device id " + std::to_string(d.id));
        }
        if (d.flops_per_sec <= 0) {
            errs.push_back("device " + std::to_string(d.id) + ": flops_per_sec must be positive");
        }
        if (d.mem_bytes <= 0) {
            errs.push_back("device " + std::to_string(d.id) + ": mem_bytes must be positive");
        }
    }
    if (c.link_latency_s < 0) errs.push_back("link latency must be >= 0");
    if (c.link_bandwidth_Bps <= 0) errs.push_back("bandwidth must be positive");
    return errs;
}

ClusterSpec parse_cluster(const std::string& text) {
    json doc;
    try {
        doc = json::parse(text);
    } catch (const json::parse_error& e) {
        throw std::runtime_error(std::string("cluster parse error: ") + e.what());
    }
    if (!doc.is_object() || !doc.contains("devices") || !doc.at("devices").is_array()) {
        throw std::runtime_error("cluster document must contain a \"devices\" array");
    }
    ClusterSpec c;
    int next_id = 1;
    for (const json& jd : doc.at("devices")) {
        DeviceSpec d;
        d.id = next_id++;
        d.flops_per_sec = get_number(jd, "flops_per_sec", 0, true);
        d.mem_bytes = get_number(jd, "mem_bytes", 0, true);
        c.devices.push_back(d);
    }
    c.link_latency_s = get_number(doc, "link_latency_s", 0.0, false);
    c.link_bandwidth_Bps = get_number(doc, "link_bandwidth_Bps", 1.0, false);
    std::vector<std::string> errs = validate_cluster(c);
    if (!errs.empty()) {
        std::ostringstream oss;
        oss << "invalid cluster:";
        for (const std::string& e : errs) oss << " " << e << ";";
        throw std::runtime_error(oss.str());
    }
    return c;
}

std::string serialize_cluster(const ClusterSpec& c) {
    json doc;
    doc["schema"] = 1;
    doc["devices"] = json::array();
    for (const DeviceSpec& d : c.devices) {
        doc["devices"].push_back({{"flops_per_sec", d.flops_per_sec}, {"mem_bytes", d.mem_bytes}});
    }
    doc["link_latency_s"] = c.link_latency_s;
    doc["link_bandwidth_Bps"] = c.link_bandwidth_Bps;
    return doc.dump(2) + "\n";
}

ClusterSpec uniform_cluster(int n, double flops_per_sec, double mem_bytes,
                            double link_latency_s, double link_bandwidth_Bps) {
    ClusterSpec c;
    for (int i = 1; i <= n; ++i) {
        c.devices.push_back(DeviceSpec{i, flops_per_sec, mem_bytes});
    }
    c.link_latency_s = link_latency_s;
    c.link_bandwidth_Bps = link_bandwidth_Bps;
    return c;
}

}  // namespace pipeplan
