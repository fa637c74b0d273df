#include <doctest.h>

#include <stdexcept>

#include "pipeplan/model.hpp"

using namespace pipeplan;

namespace {

std::string two_layer_doc() {
    return R"({"schema": 1, "name": "demo", "layers": [
        {"kind": "dense", "fan_in": 4, "fan_out": 8},
        {"kind": "dense", "fan_in": 8, "fan_out": 3}
    ]})";
}

}  // namespace

TEST_SUITE("model") {

TEST_CASE("parse_model reads a two-layer document") {
    const ModelGraph g = parse_model(two_layer_doc());
    CHECK(g.num_layers() == 2);
    CHECK(g.layer(1).fan_out == 8);
    CHECK(g.layer(2).fan_in == 8);
    CHECK(g.layer(2).fan_out == 3);
}

TEST_CASE("parse_model rejects dimension mismatches naming both layers") {
    const std::string doc = R"({"layers": [
        {"fan_in": 4, "fan_out": 8}, {"fan_in": 7, "fan_out": 3}]})";
    CHECK_THROWS_WITH_AS(parse_model(doc),
                         doctest::Contains("layers 1 and 2"), std::runtime_error);
}

TEST_CASE("parse_model rejects an empty layer list") {
    CHECK_THROWS_WITH_AS(parse_model(R"({"layers": []})"),
                         doctest::Contains("at least one layer"), std::runtime_error);
}

TEST_CASE("parse_model names the offending field") {
    CHECK_THROWS_WITH_AS(parse_model(R"({"layers": [{"fan_out": 3}]})"),
                         doctest::Contains("fan_in"), std::runtime_error);
    CHECK_THROWS_AS(parse_model("{not json"), std::runtime_error);
}

TEST_CASE("serialize round-trips through parse_model") {
    ModelGraph g = parse_model(two_layer_doc());
    g = default_costs(g, 4);
    const ModelGraph back = parse_model(serialize_model(g));
    REQUIRE(back.num_layers() == g.num_layers());
    for (int l = 1; l <= g.num_layers(); ++l) {
        CHECK(back.layer(l).fan_in == g.layer(l).fan_in);
        CHECK(back.layer(l).fan_out == g.layer(l).fan_out);
        CHECK(back.layer(l).param_count == g.layer(l).param_count);
        CHECK(back.layer(l).fwd_flops == g.layer(l).fwd_flops);
        CHECK(back.layer(l).bwd_flops == g.layer(l).bwd_flops);
        CHECK(back.layer(l).act_bytes == g.layer(l).act_bytes);
    }
}

TEST_CASE("default_costs fills dense layers from their dimensions") {
    ModelGraph g = parse_model(two_layer_doc());
    g = default_costs(g, 4);
    CHECK(g.layer(1).fwd_flops == 64);      // 2 * 4 * 8
    CHECK(g.layer(1).bwd_flops == 128);     // 2x forward
    CHECK(g.layer(1).act_bytes == 32);      // 8 * 4
    CHECK(g.layer(1).param_count == 40);    // 4*8 + 8
}

TEST_CASE("default_costs unit case 1->1") {
    ModelGraph g;
    g.layers.push_back(LayerSpec{1, LayerKind::dense, 1, 1, 0, 0, 0, 0});
    g = default_costs(g, 4);
    CHECK(g.layer(1).fwd_flops == 2);
    CHECK(g.layer(1).param_count == 2);
}

TEST_CASE("default_costs preserves preset fields and is idempotent") {
    ModelGraph g;
    g.layers.push_back(LayerSpec{1, LayerKind::dense, 4, 8, 0, 999, 0, 0});
    const ModelGraph filled = default_costs(g, 4);
    CHECK(filled.layer(1).fwd_flops == 999);
    const ModelGraph twice = default_costs(filled, 4);
    CHECK(twice.layer(1).fwd_flops == filled.layer(1).fwd_flops);
    CHECK(twice.layer(1).bwd_flops == filled.layer(1).bwd_flops);
    CHECK(twice.layer(1).act_bytes == filled.layer(1).act_bytes);
    CHECK(twice.layer(1).param_count == filled.layer(1).param_count);
}

TEST_CASE("generic layers keep their explicit costs") {
    ModelGraph g;
    g.layers.push_back(LayerSpec{1, LayerKind::generic, 4, 8, 123, 7, 9, 11});
    const ModelGraph filled = default_costs(g, 4);
    CHECK(filled.layer(1).fwd_flops == 7);
    CHECK(filled.layer(1).bwd_flops == 9);
    CHECK(filled.layer(1).act_bytes == 11);
    CHECK(filled.layer(1).param_count == 123);
}

TEST_CASE("validate_cluster accepts a healthy cluster") {
    const ClusterSpec c = uniform_cluster(1, 1e9, 1e9, 0.0, 1e9);
    CHECK(validate_cluster(c).empty());
}

TEST_CASE("validate_cluster enumerates violations without aborting") {
    ClusterSpec c;
    c.devices.push_back(DeviceSpec{1, 1e9, 1e9});
    c.devices.push_back(DeviceSpec{1, 0.0, 1e9});  // duplicate id, zero speed
    c.link_bandwidth_Bps = 0.0;
    const std::vector<std::string> errs = validate_cluster(c);
    REQUIRE(errs.size() >= 3);
    bool saw_bandwidth = false;
    bool saw_duplicate = false;
    for (const std::string& e : errs) {
        if (e.find("bandwidth must be positive") != std::string::npos) saw_bandwidth = true;
        if (e.find("duplicate device id 1") != std::string::npos) saw_duplicate = true;
    }
    CHECK(saw_bandwidth);
    CHECK(saw_duplicate);
}

TEST_CASE("cluster serialization round-trips") {
    const ClusterSpec c = uniform_cluster(3, 2e12, 16e9, 1e-5, 3.125e9);
    const ClusterSpec back = parse_cluster(serialize_cluster(c));
    CHECK(back.num_devices() == 3);
    CHECK(back.device(2).flops_per_sec == 2e12);
    CHECK(back.link_latency_s == 1e-5);
    CHECK(back.link_bandwidth_Bps == 3.125e9);
}

}  // TEST_SUITE
