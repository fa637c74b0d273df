#include <doctest.h>

#include <random>
#include <stdexcept>

#include "oracles.hpp"
#include "pipeplan/model.hpp"
#include "pipeplan/partition.hpp"

using namespace pipeplan;

namespace {

ModelGraph uniform_model(int L, int width) {
    ModelGraph g;
    g.name = "uniform";
    for (int l = 1; l <= L; ++l) {
        g.layers.push_back(LayerSpec{l, LayerKind::dense, width, width, 0, 0, 0, 0});
    }
    return default_costs(g, 4);
}

ModelGraph random_model(std::mt19937_64& rng, int L, int max_width) {
    ModelGraph g;
    auto pick = [&](int lo, int hi) {
        return lo + static_cast<int>(rng() % static_cast<std::uint64_t>(hi - lo + 1));
    };
    int fan_in = pick(1, max_width);
    for (int l = 1; l <= L; ++l) {
        const int fan_out = pick(1, max_width);
        g.layers.push_back(LayerSpec{l, LayerKind::dense, fan_in, fan_out, 0, 0, 0, 0});
        fan_in = fan_out;
    }
    return default_costs(g, 4);
}

}  // namespace

TEST_SUITE("partition") {

TEST_CASE("split_layer balances with the largest remainder first") {
    const LayerSpec even{1, LayerKind::dense, 4, 8, 0, 0, 0, 0};
    auto shards = split_layer(even, 2);
    REQUIRE(shards.size() == 2);
    CHECK(shards[0].lo == 0);
    CHECK(shards[0].hi == 4);
    CHECK(shards[1].lo == 4);
    CHECK(shards[1].hi == 8);

    const LayerSpec odd{1, LayerKind::dense, 4, 7, 0, 0, 0, 0};
    shards = split_layer(odd, 2);
    CHECK(shards[0].hi == 4);
    CHECK(shards[1].lo == 4);
    CHECK(shards[1].hi == 7);

    shards = split_layer(even, 1);
    REQUIRE(shards.size() == 1);
    CHECK(shards[0].lo == 0);
    CHECK(shards[0].hi == 8);
}

TEST_CASE("split_layer rejects layers narrower than the device count") {
    const LayerSpec narrow{1, LayerKind::dense, 4, 2, 0, 0, 0, 0};
    CHECK_THROWS_WITH_AS(split_layer(narrow, 3), doctest::Contains("too narrow"),
                         std::runtime_error);
    const auto shards = split_layer(narrow, 3, true);
    REQUIRE(shards.size() == 3);
    for (const Shard& s : shards) {
        CHECK(s.replicated);
        CHECK(s.lo == 0);
        CHECK(s.hi == 2);
    }
}

TEST_CASE("split tiling property over random widths and device counts") {
    std::mt19937_64 rng(42);
    for (int trial = 0; trial < 200; ++trial) {
        const int fan_out = 1 + static_cast<int>(rng() % 32);
        const int n = 1 + static_cast<int>(rng() % 8);
        if (fan_out < n) continue;
        const LayerSpec layer{1, LayerKind::dense, 3, fan_out, 0, 0, 0, 0};
        const auto shards = split_layer(layer, n);
        int lo = 0;
        int min_units = fan_out;
        int max_units = 0;
        for (const Shard& s : shards) {
            CHECK(s.lo == lo);
            lo = s.hi;
            min_units = std::min(min_units, s.units());
            max_units = std::max(max_units, s.units());
        }
        CHECK(lo == fan_out);
        CHECK(max_units - min_units <= 1);
    }
}

TEST_CASE("build_plan splits four uniform layers into two balanced spans") {
    const ModelGraph g = uniform_model(4, 8);
    const PartitionPlan p = build_plan(g, 2, 2);
    validate_plan(p, g);
    REQUIRE(p.num_submodules() == 2);
    CHECK(p.submodules[0].first_layer == 1);
    CHECK(p.submodules[0].last_layer == 2);
    CHECK(p.submodules[1].first_layer == 3);
    CHECK(p.submodules[1].last_layer == 4);
    REQUIRE(p.boundaries.size() == 1);
    CHECK(p.boundaries[0] == BoundaryKind::concat_repartition);
}

TEST_CASE("build_plan singleton spans and Z bounds") {
    const ModelGraph g = uniform_model(3, 6);
    const PartitionPlan p = build_plan(g, 2, 3);
    REQUIRE(p.num_submodules() == 3);
    CHECK(p.boundaries.size() == 2);
    for (const SubModule& sm : p.submodules) CHECK(sm.num_layers() == 1);

    CHECK_THROWS_WITH_AS(build_plan(uniform_model(2, 6), 2, 3),
                         doctest::Contains("Z exceeds layer count"), std::runtime_error);
}

TEST_CASE("build_plan is deterministic") {
    const ModelGraph g = uniform_model(5, 12);
    const PartitionPlan a = build_plan(g, 3, 2);
    const PartitionPlan b = build_plan(g, 3, 2);
    CHECK(serialize_plan(a) == serialize_plan(b));
}

TEST_CASE("merge_submodules reclassifies interior boundaries only") {
    const ModelGraph g = uniform_model(3, 6);
    PartitionPlan p = build_plan(g, 2, 3);
    PartitionPlan merged = merge_submodules(p, {1, 2});
    CHECK(merged.boundaries[0] == BoundaryKind::direct);
    CHECK(merged.boundaries[1] == BoundaryKind::concat_repartition);
    validate_plan(merged, g);

    merged = merge_submodules(p, {1, 2, 3});
    CHECK(merged.boundaries[0] == BoundaryKind::direct);
    CHECK(merged.boundaries[1] == BoundaryKind::direct);

    CHECK_THROWS_WITH_AS(merge_submodules(p, {1, 3}), doctest::Contains("contiguous"),
                         std::runtime_error);
    CHECK_THROWS_AS(merge_submodules(p, {2, 3, 4}), std::runtime_error);
}

TEST_CASE("merge is idempotent on already-direct boundaries") {
    const ModelGraph g = uniform_model(3, 6);
    const PartitionPlan p = merge_submodules(build_plan(g, 2, 3), {1, 2});
    const PartitionPlan again = merge_submodules(p, {1, 2});
    CHECK(again.boundaries == p.boundaries);
    for (int i = 0; i < 3; ++i) {
        CHECK(again.submodules[i].first_layer == p.submodules[i].first_layer);
    }
}

TEST_CASE("comm_volume single device plans move nothing") {
    const ModelGraph g = uniform_model(4, 8);
    const PartitionPlan p = build_plan(g, 1, 4);
    CHECK(comm_volume(p, g, 16) == 0.0);
}

TEST_CASE("comm_volume prices a concat boundary as gather plus scatter") {
    // One boundary, 32-byte activation, n=2: 2 * 32 * (1/2) = 32.
    ModelGraph g = uniform_model(2, 8);
    g.layers[0].act_bytes = 32;
    const PartitionPlan p = build_plan(g, 2, 2);
    CHECK(comm_volume(p, g, 1) == doctest::Approx(32.0));

    const PartitionPlan merged = merge_all(p);
    CHECK(comm_volume(merged, g, 1) == 0.0);  // matching layouts
}

TEST_CASE("direct boundaries with differing layouts still move shards") {
    ModelGraph g = uniform_model(2, 8);
    g.layers[0].act_bytes = 40;
    PartitionPlan p = build_staged_plan(g, {{1, 2}, {3, 4}});
    p = merge_all(p);
    // Producer holds the tensor on devices 1,2; consumer group is 3,4.
    CHECK(comm_volume(p, g, 1) == doctest::Approx(40.0 * (2 - 1) / 2));
}

TEST_CASE("merge monotonicity against brute-force boundary accounting") {
    std::mt19937_64 rng(7);
    for (int trial = 0; trial < 120; ++trial) {
        const int L = 2 + static_cast<int>(rng() % 5);
        ModelGraph g = random_model(rng, L, 9);
        for (LayerSpec& l : g.layers) l.act_bytes = static_cast<double>(1 + rng() % 64);
        const int n = 1 + static_cast<int>(rng() % 3);
        const int Z = 1 + static_cast<int>(rng() % L);
        PartitionPlan p = build_plan(g, n, Z, true);
        const double samples = static_cast<double>(1 + rng() % 8);

        CHECK(comm_volume(p, g, samples) ==
              doctest::Approx(oracles::comm_volume_brute(p, g, samples)));

        if (Z >= 2) {
            const int lo = 1 + static_cast<int>(rng() % (Z - 1));
            const PartitionPlan merged = merge_submodules(p, {lo, lo + 1});
            CHECK(comm_volume(merged, g, samples) <= comm_volume(p, g, samples));
            CHECK(comm_volume(merged, g, samples) ==
                  doctest::Approx(oracles::comm_volume_brute(merged, g, samples)));
        }
    }
}

TEST_CASE("plan serialization round-trips") {
    const ModelGraph g = uniform_model(4, 8);
    PartitionPlan p = merge_submodules(build_plan(g, 2, 3), {2, 3});
    const PartitionPlan back = parse_plan(serialize_plan(p));
    CHECK(serialize_plan(back) == serialize_plan(p));
    validate_plan(back, g);
}

TEST_CASE("validate_plan flags devices missing from the cluster") {
    const ModelGraph g = uniform_model(2, 8);
    const PartitionPlan p = build_plan(g, 3, 2);
    const ClusterSpec small = uniform_cluster(2, 1e9, 1e9, 0, 1e9);
    CHECK_THROWS_WITH_AS(validate_plan(p, g, &small), doctest::Contains("absent"),
                         std::runtime_error);
}

}  // TEST_SUITE
