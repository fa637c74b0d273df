#pragma once

#include "pipeplan/partition.hpp"
#include "pipeplan/schedule.hpp"
#include "pipeplan/tinynet.hpp"

namespace pipeplan {

struct PartitionedTrainOptions {
    double receive_timeout_s = 30.0;
};

/// Train the net on one worker thread per (sub-module, device) pairing.
/// Workers hold their shard rows of each layer, exchange full activations
/// forward (gather+scatter through a hub on concat boundaries, peer-to-peer
/// on direct ones) and error-signal partials backward, accumulate gradients
/// over all m micro-batches, and apply them per `mode`. Cross-device sums run
/// in ascending device-id order, so identical inputs give identical bits in
/// both update modes; with one worker and one micro-batch the result is
/// bitwise equal to train_sequential.
///
/// Throws on plan/net shape mismatch, on divergence, and on message timeouts
/// (naming the stalled exchange).
TrainResult train_partitioned(const TinyNet& net, const Batch& batch, const TrainConfig& cfg,
                              const PartitionPlan& plan, int m, UpdateMode mode,
                              const PartitionedTrainOptions& opts = {});

}  // namespace pipeplan
