#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pipeplan/tinynet.hpp"
#include "pipeplan/train_partitioned.hpp"

namespace pipeplan {

struct VerifyOptions {
    int seeds = 100;
    std::uint64_t base_seed = 1234;
    bool inject_gradient_fault = false;  // test hook: flips one gradient sign
    double receive_timeout_s = 30.0;
};

struct PropertyResult {
    std::string name;
    bool pass = false;
    double max_err = 0.0;
    double tolerance = 0.0;
    int instances = 0;
    std::string note;
};

struct VerifyReport {
    std::vector<PropertyResult> properties;

    bool all_pass() const;
};

/// A randomly drawn instance of net + batch + plan dimensions, reproducible
/// from its seed. Layer widths stay >= n unless the draw opted into narrow
/// layers with replication.
struct VerifyInstance {
    TinyNet net;
    Batch batch;
    TrainConfig cfg;
    PartitionPlan plan;
    int n = 0;
    int m = 0;
    std::uint64_t seed = 0;
};

VerifyInstance draw_instance(std::uint64_t seed);

/// Relative elementwise distance between two nets' parameters:
/// max |x-y| / max(1, |x|, |y|).
double net_distance(const TinyNet& a, const TinyNet& b);

/// Run the oracle-equivalence, mode-equivalence, micro-batch-invariance,
/// gradient-correctness and shard-reassembly suites over `seeds` instances.
VerifyReport run_verification(const VerifyOptions& opts);

std::string verify_report_text(const VerifyReport& r);
std::string serialize_verify_report(const VerifyReport& r);

}  // namespace pipeplan
