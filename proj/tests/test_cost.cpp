#include <doctest.h>

#include <random>

#include "oracles.hpp"
#include "pipeplan/cost.hpp"

using namespace pipeplan;

namespace {

ModelGraph uniform_model(int L, int width, double act_bytes = 0.0) {
    ModelGraph g;
    for (int l = 1; l <= L; ++l) {
        g.layers.push_back(LayerSpec{l, LayerKind::dense, width, width, 0, 0, 0, act_bytes});
    }
    return default_costs(g, 0.0);
}

}  // namespace

TEST_SUITE("cost") {

TEST_CASE("task_costs prices one module on one device directly") {
    ModelGraph g;
    g.layers.push_back(LayerSpec{1, LayerKind::generic, 4, 8, 10, 64, 64, 0});
    const PartitionPlan p = build_plan(g, 1, 1);
    const ClusterSpec c = uniform_cluster(1, 64, 1e9, 0, 1e9);
    const TaskCostTable t = task_costs(p, g, CostParams{c, 1, 1, false});
    CHECK(t.tf[0][0] == doctest::Approx(1.0));
}

TEST_CASE("task_costs direct boundary with matching layouts is free") {
    ModelGraph g = uniform_model(2, 8, 32.0);
    const PartitionPlan p = merge_all(build_plan(g, 2, 2));
    const ClusterSpec c = uniform_cluster(2, 1e9, 1e9, 1e-3, 1e9);
    const TaskCostTable t = task_costs(p, g, CostParams{c, 4, 3, false});
    for (const auto& row : t.tcomm) {
        for (double v : row) CHECK(v == 0.0);
    }
}

TEST_CASE("task_costs takes the slowest participating device") {
    ModelGraph g;
    g.layers.push_back(LayerSpec{1, LayerKind::generic, 4, 8, 10, 128, 128, 0});
    const PartitionPlan p = build_plan(g, 2, 1);
    const ClusterSpec c = uniform_cluster(2, 64, 1e9, 0, 1e9);
    const TaskCostTable t = task_costs(p, g, CostParams{c, 1, 1, false});
    CHECK(t.tf[0][0] == doctest::Approx(1.0));  // each device runs 64 flops at 64 flop/s
}

TEST_CASE("task_costs prices concat boundaries as latency plus bytes over bandwidth") {
    ModelGraph g = uniform_model(2, 8, 100.0);
    const PartitionPlan p = build_plan(g, 2, 2);
    const ClusterSpec c = uniform_cluster(2, 1e9, 1e9, 0.5, 200.0);
    const TaskCostTable t = task_costs(p, g, CostParams{c, 1, 1, false});
    // bytes = 2 * 100 * (1/2) = 100 -> 0.5 + 100/200 = 1.0
    CHECK(t.tcomm[0][0] == doctest::Approx(1.0));
}

TEST_CASE("total_cost sums every table entry") {
    TaskCostTable t;
    t.m = 2;
    t.tf = {{1, 2}};
    t.tb = {{3, 4}};
    CHECK(total_cost(t) == doctest::Approx(10.0));

    TaskCostTable zero;
    zero.m = 1;
    zero.tf = {{0}};
    zero.tb = {{0}};
    CHECK(total_cost(zero) == 0.0);

    TaskCostTable withcomm;
    withcomm.m = 1;
    withcomm.tf = {{1}};
    withcomm.tb = {{1}};
    withcomm.tcomm = {{0.5}};
    CHECK(total_cost(withcomm) == doctest::Approx(2.5));
}

TEST_CASE("total_cost is linear in the table") {
    std::mt19937_64 rng(11);
    TaskCostTable t;
    t.m = 3;
    t.tf = {{0.1, 0.2, 0.3}, {0.4, 0.5, 0.6}};
    t.tb = {{0.7, 0.8, 0.9}, {1.0, 1.1, 1.2}};
    t.tcomm = {{0.01, 0.02, 0.03}};
    const double base = total_cost(t);
    const double c = 3.5;
    TaskCostTable scaled = t;
    for (auto* rows : {&scaled.tf, &scaled.tb, &scaled.tcomm}) {
        for (auto& row : *rows) {
            for (double& v : row) v *= c;
        }
    }
    CHECK(total_cost(scaled) == doctest::Approx(c * base));
}

TEST_CASE("optimize_plan collapses to one module on a single device") {
    const ModelGraph g = uniform_model(2, 8);
    const ClusterSpec c = uniform_cluster(1, 100.0, 1e9, 0, 1e9);
    const OptimizeResult r = optimize_plan(g, c, 1);
    CHECK(r.plan.num_submodules() == 1);
    double flops = 0.0;
    for (const LayerSpec& l : g.layers) flops += l.fwd_flops + l.bwd_flops;
    CHECK(r.objective == doctest::Approx(flops / 100.0));
}

TEST_CASE("optimize_plan matches exhaustive enumeration on a friendly link") {
    const ModelGraph g = uniform_model(4, 8, 16.0);
    const ClusterSpec c = uniform_cluster(2, 1e6, 1e9, 0.0, 1e15);
    OptimizeOptions opts;
    const OptimizeResult r = optimize_plan(g, c, 2, opts);
    CHECK(r.exhaustive);
    auto objective = [&](const PartitionPlan& p) {
        return total_cost(task_costs(p, g, CostParams{c, 1, 1, false}));
    };
    CHECK(r.objective == oracles::exhaustive_min_objective(g, 2, 4, objective));
}

TEST_CASE("optimize_plan merges everything away under extreme latency") {
    const ModelGraph g = uniform_model(4, 8, 64.0);
    const ClusterSpec c = uniform_cluster(2, 1e6, 1e9, 1e3, 1e9);
    const OptimizeResult r = optimize_plan(g, c, 2);
    for (BoundaryKind b : r.plan.boundaries) CHECK(b == BoundaryKind::direct);
    auto objective = [&](const PartitionPlan& p) {
        return total_cost(task_costs(p, g, CostParams{c, 1, 1, false}));
    };
    CHECK(r.objective == oracles::exhaustive_min_objective(g, 2, 4, objective));
}

TEST_CASE("optimizer never loses to the unoptimized baseline") {
    std::mt19937_64 rng(23);
    for (int trial = 0; trial < 40; ++trial) {
        const int L = 2 + static_cast<int>(rng() % 5);
        const int n = 1 + static_cast<int>(rng() % 3);
        ModelGraph g;
        int fan = 3 + static_cast<int>(rng() % 6);
        for (int l = 1; l <= L; ++l) {
            const int out = 3 + static_cast<int>(rng() % 6);
            g.layers.push_back(LayerSpec{l, LayerKind::dense, fan, out, 0, 0, 0,
                                         static_cast<double>(rng() % 128)});
            fan = out;
        }
        g = default_costs(g, 4.0);
        const ClusterSpec c = uniform_cluster(n, 1e6 + static_cast<double>(rng() % 1000),
                                              1e9, 1e-6 * static_cast<double>(rng() % 1000),
                                              1e3 + static_cast<double>(rng() % 100000));
        const OptimizeResult r = optimize_plan(g, c, n, OptimizeOptions{1, 1, 100000, 0, true, {}});
        const PartitionPlan base = build_plan(g, n, std::min(n, L), true);
        const double base_obj = total_cost(task_costs(base, g, CostParams{c, 1, 1, false}));
        CHECK(r.objective <= base_obj + 1e-12);
    }
}

TEST_CASE("raising bandwidth never raises the optimal objective") {
    std::mt19937_64 rng(31);
    for (int trial = 0; trial < 25; ++trial) {
        const int L = 2 + static_cast<int>(rng() % 4);
        ModelGraph g = uniform_model(L, 6, static_cast<double>(1 + rng() % 256));
        const int n = 1 + static_cast<int>(rng() % 3);
        const double bw = 1e3 + static_cast<double>(rng() % 100000);
        const ClusterSpec slow = uniform_cluster(n, 1e6, 1e9, 1e-4, bw);
        const ClusterSpec fast = uniform_cluster(n, 1e6, 1e9, 1e-4, 4 * bw);
        CHECK(optimize_plan(g, fast, n).objective <= optimize_plan(g, slow, n).objective + 1e-12);
    }
}

TEST_CASE("optimizer report carries the breakdown") {
    const ModelGraph g = uniform_model(3, 8, 32.0);
    const ClusterSpec c = uniform_cluster(2, 1e6, 1e9, 1e-5, 1e9);
    const OptimizeResult r = optimize_plan(g, c, 2);
    const std::string doc = serialize_optimizer_report(r);
    CHECK(doc.find("sum_tf_s") != std::string::npos);
    CHECK(doc.find("sum_tb_s") != std::string::npos);
    CHECK(doc.find("sum_tcomm_s") != std::string::npos);
    CHECK(doc.find("candidates_evaluated") != std::string::npos);
}

}  // TEST_SUITE
