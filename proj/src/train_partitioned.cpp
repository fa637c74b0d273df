#include "pipeplan/train_partitioned.hpp"

#include <barrier>
#include <chrono>
#include <condition_variable>
#include <deque>
#include <map>
#include <mutex>
#include <stdexcept>
#include <thread>
#include <tuple>

namespace pipeplan {

namespace {

enum class MsgKind : int { act_slice, act_full, delta_part, loss, predictions };

struct MsgKey {
    int kind;
    int layer;
    int microbatch;
    int iteration;
    int src_device;

    auto operator<=>(const MsgKey&) const = default;
};

std::string describe(const MsgKey& k) {
    const char* names[] = {"activation shard", "activation", "error-signal partial", "loss",
                           "predictions"};
    return std::string(names[k.kind]) + " of layer " + std::to_string(k.layer) + " micro-batch " +
           std::to_string(k.microbatch) + " from device " + std::to_string(k.src_device);
}

class Mailbox {
  public:
    void put(const MsgKey& key, Matrix payload) {
        {
            std::lock_guard<std::mutex> lock(mu_);
            queues_[key].push_back(std::move(payload));
        }
        cv_.notify_all();
    }

    Matrix take(const MsgKey& key, double timeout_s) {
        std::unique_lock<std::mutex> lock(mu_);
        const auto deadline =
            std::chrono::steady_clock::now() + std::chrono::duration<double>(timeout_s);
        while (true) {
            auto it = queues_.find(key);
            if (it != queues_.end() && !it->second.empty()) {
                Matrix out = std::move(it->second.front());
                it->second.pop_front();
                return out;
            }
            if (cv_.wait_until(lock, deadline) == std::cv_status::timeout) {
                throw std::runtime_error("handoff deadlock: timed out waiting for " + describe(key));
            }
        }
    }

  private:
    std::mutex mu_;
    std::condition_variable cv_;
    std::map<MsgKey, std::deque<Matrix>> queues_;
};

struct ShardView {
    Matrix weights;             // rows [lo, hi) of the full layer
    std::vector<double> bias;   // entries [lo, hi)
    int lo = 0;
    int hi = 0;
    bool replicated = false;
    ActKind act = ActKind::identity;
    int fan_in = 0;
    int fan_out = 0;  // full layer width
};

struct WorkerCtx {
    int module = 0;     // 1..Z
    int device = 0;
    int rank = 0;       // position within the module's device list
    int first_layer = 0;
    int last_layer = 0;
    std::vector<ShardView> shards;  // one per layer in span
};

Matrix relu_mask_mul(Matrix grad, const Matrix& q) {
    for (size_t i = 0; i < grad.v.size(); ++i) {
        if (q.v[i] <= 0.0) grad.v[i] = 0.0;
    }
    return grad;
}

Matrix elementwise_activation(const Matrix& q, ActKind act) {
    Matrix a = q;
    if (act == ActKind::relu) {
        for (double& x : a.v) x = x > 0.0 ? x : 0.0;
    }
    return a;
}

Matrix softmax_rows(const Matrix& q) {
    Matrix a = q;
    for (int i = 0; i < a.rows; ++i) {
        double mx = a.at(i, 0);
        for (int j = 1; j < a.cols; ++j) mx = std::max(mx, a.at(i, j));
        double sum = 0.0;
        for (int j = 0; j < a.cols; ++j) {
            a.at(i, j) = std::exp(a.at(i, j) - mx);
            sum += a.at(i, j);
        }
        for (int j = 0; j < a.cols; ++j) a.at(i, j) /= sum;
    }
    return a;
}

}  // namespace

TrainResult train_partitioned(const TinyNet& net, const Batch& batch, const TrainConfig& cfg,
                              const PartitionPlan& plan, int m, UpdateMode mode,
                              const PartitionedTrainOptions& opts) {
    validate_net(net);
    const ModelGraph graph = model_graph_of(net);
    try {
        validate_plan(plan, graph);
    } catch (const std::exception& e) {
        throw std::runtime_error(std::string("plan/net shape mismatch: ") + e.what());
    }
    if (batch.size() != static_cast<int>(batch.labels.size())) {
        throw std::invalid_argument("batch rows and label count disagree");
    }
    if (mode == UpdateMode::none) {
        throw std::invalid_argument("train_partitioned needs sync or async update mode");
    }
    const std::vector<int> mb_sizes = split_microbatches(batch.size(), m);
    std::vector<int> mb_offset(static_cast<size_t>(m) + 1, 0);
    for (int j = 0; j < m; ++j) {
        mb_offset[static_cast<size_t>(j) + 1] = mb_offset[static_cast<size_t>(j)] + mb_sizes[static_cast<size_t>(j)];
    }

    const int Z = plan.num_submodules();
    const int L = net.num_layers();
    const double timeout = opts.receive_timeout_s;

    // Worker contexts and mailboxes, keyed by (module, device).
    std::map<std::pair<int, int>, WorkerCtx> workers;
    std::map<std::pair<int, int>, Mailbox> mailboxes;
    for (const SubModule& sm : plan.submodules) {
        for (size_t rank = 0; rank < sm.devices.size(); ++rank) {
            WorkerCtx ctx;
            ctx.module = sm.index;
            ctx.device = sm.devices[rank];
            ctx.rank = static_cast<int>(rank);
            ctx.first_layer = sm.first_layer;
            ctx.last_layer = sm.last_layer;
            for (int l = sm.first_layer; l <= sm.last_layer; ++l) {
                const Shard& shard = sm.layer_shards(l)[rank];
                const TinyLayer& layer = net.layers[static_cast<size_t>(l - 1)];
                ShardView view;
                view.lo = shard.lo;
                view.hi = shard.hi;
                view.replicated = shard.replicated;
                view.act = layer.act;
                view.fan_in = layer.fan_in();
                view.fan_out = layer.fan_out();
                view.weights = slice_rows(layer.weights, shard.lo, shard.hi);
                view.bias.assign(layer.bias.begin() + shard.lo, layer.bias.begin() + shard.hi);
                ctx.shards.push_back(std::move(view));
            }
            const std::pair<int, int> key{ctx.module, ctx.device};
            workers.emplace(key, std::move(ctx));
            mailboxes[key];
        }
    }
    Mailbox results;  // loss / prediction stream consumed by this thread

    // Producer-side contributors of a layer's output: every shard owner, or
    // just the first device when the layer is replicated (all copies equal).
    auto contributors = [&](int module, int layer) {
        const SubModule& sm = plan.submodules[static_cast<size_t>(module - 1)];
        const std::vector<Shard>& shards = sm.layer_shards(layer);
        std::vector<std::pair<int, Shard>> out;  // (device, shard)
        for (const Shard& s : shards) {
            out.emplace_back(s.device_id, s);
            if (s.replicated) break;
        }
        return out;
    };

    std::barrier sync_point(static_cast<std::ptrdiff_t>(workers.size()));
    std::vector<std::exception_ptr> errors(workers.size());
    std::vector<std::thread> threads;
    size_t worker_index = 0;

    for (auto& [key, ctx_ref] : workers) {
        WorkerCtx* ctx = &ctx_ref;
        const size_t err_slot = worker_index++;
        threads.emplace_back([&, ctx, err_slot]() {
            try {
                const SubModule& sm = plan.submodules[static_cast<size_t>(ctx->module - 1)];
                const int span = ctx->last_layer - ctx->first_layer + 1;
                auto send = [&](int module, int device, const MsgKey& k, Matrix payload) {
                    mailboxes.at({module, device}).put(k, std::move(payload));
                };
                auto recv = [&](const MsgKey& k) {
                    return mailboxes.at({ctx->module, ctx->device}).take(k, timeout);
                };

                // Full boundary/interior activation assembled from producer slices.
                auto assemble = [&](int layer, int producer_module, int j, int t,
                                    bool via_mailbox_only_from, int only_src) {
                    const LayerSpec& lspec = graph.layer(layer);
                    if (via_mailbox_only_from) {
                        return recv({static_cast<int>(MsgKind::act_full), layer, j, t, only_src});
                    }
                    Matrix full(mb_sizes[static_cast<size_t>(j - 1)], lspec.fan_out);
                    for (const auto& [dev, shard] : contributors(producer_module, layer)) {
                        Matrix piece =
                            recv({static_cast<int>(MsgKind::act_slice), layer, j, t, dev});
                        paste_cols(full, piece, shard.lo);
                    }
                    return full;
                };

                // Per-micro-batch stashes for the backward pass.
                std::vector<std::vector<Matrix>> inputs(
                    static_cast<size_t>(span), std::vector<Matrix>(static_cast<size_t>(m)));
                std::vector<std::vector<Matrix>> q_slices = inputs;
                std::vector<Matrix> out_slices(static_cast<size_t>(m));  // last layer activations

                std::vector<Matrix> dw_sum(static_cast<size_t>(span));
                std::vector<std::vector<double>> db_sum(static_cast<size_t>(span));

                double alpha = cfg.alpha0;
                for (int t = 1; t <= cfg.iterations; ++t) {
                    for (int s = 0; s < span; ++s) {
                        ShardView& sv = ctx->shards[static_cast<size_t>(s)];
                        dw_sum[static_cast<size_t>(s)] = Matrix(sv.hi - sv.lo, sv.fan_in);
                        db_sum[static_cast<size_t>(s)].assign(static_cast<size_t>(sv.hi - sv.lo), 0.0);
                    }

                    // ---- forward, all micro-batches ----
                    for (int j = 1; j <= m; ++j) {
                        Matrix input;
                        if (ctx->module == 1) {
                            input = slice_rows(batch.X, mb_offset[static_cast<size_t>(j - 1)],
                                               mb_offset[static_cast<size_t>(j)]);
                        } else {
                            const int boundary = ctx->module - 1;  // 1-based
                            const SubModule& prev =
                                plan.submodules[static_cast<size_t>(ctx->module - 2)];
                            const int blayer = prev.last_layer;
                            const bool concat =
                                plan.boundaries[static_cast<size_t>(boundary - 1)] ==
                                BoundaryKind::concat_repartition;
                            if (concat) {
                                // Hub = first worker of this (consumer) module.
                                const int hub = sm.devices.front();
                                if (ctx->rank == 0) {
                                    Matrix full = assemble(blayer, ctx->module - 1, j, t, false, 0);
                                    for (size_t r = 1; r < sm.devices.size(); ++r) {
                                        send(ctx->module, sm.devices[r],
                                             {static_cast<int>(MsgKind::act_full), blayer, j, t, hub},
                                             full);
                                    }
                                    input = std::move(full);
                                } else {
                                    input = assemble(blayer, ctx->module - 1, j, t, true, hub);
                                }
                            } else {
                                input = assemble(blayer, ctx->module - 1, j, t, false, 0);
                            }
                        }

                        for (int s = 0; s < span; ++s) {
                            const int layer = ctx->first_layer + s;
                            ShardView& sv = ctx->shards[static_cast<size_t>(s)];
                            inputs[static_cast<size_t>(s)][static_cast<size_t>(j - 1)] = input;
                            Matrix q = matmul_nt(input, sv.weights);
                            for (int r = 0; r < q.rows; ++r) {
                                for (int c = 0; c < q.cols; ++c) {
                                    q.at(r, c) += sv.bias[static_cast<size_t>(c)];
                                }
                            }
                            q_slices[static_cast<size_t>(s)][static_cast<size_t>(j - 1)] = q;

                            Matrix a_slice;
                            Matrix a_full;
                            bool have_full = false;
                            if (sv.act == ActKind::softmax_last) {
                                // Softmax couples columns: gather the full
                                // pre-activation row before normalizing.
                                Matrix q_full(q.rows, sv.fan_out);
                                if (sv.replicated) {
                                    q_full = q;
                                } else {
                                    for (const auto& [dev, shard] : contributors(ctx->module, layer)) {
                                        if (dev == ctx->device) {
                                            paste_cols(q_full, q, sv.lo);
                                        } else {
                                            send(ctx->module, dev,
                                                 {static_cast<int>(MsgKind::act_slice), -layer, j, t,
                                                  ctx->device},
                                                 q);
                                            Matrix piece = recv({static_cast<int>(MsgKind::act_slice),
                                                                 -layer, j, t, dev});
                                            paste_cols(q_full, piece, shard.lo);
                                        }
                                    }
                                }
                                a_full = softmax_rows(q_full);
                                have_full = true;
                                a_slice = sv.replicated ? a_full : slice_cols(a_full, sv.lo, sv.hi);
                            } else {
                                a_slice = elementwise_activation(q, sv.act);
                            }

                            const bool last_in_span = s == span - 1;
                            if (!last_in_span) {
                                // Interior crossing: peers all-gather this
                                // layer's slices into the next full input.
                                if (sv.replicated) {
                                    input = a_slice;
                                } else {
                                    for (size_t r = 0; r < sm.devices.size(); ++r) {
                                        if (sm.devices[r] == ctx->device) continue;
                                        send(ctx->module, sm.devices[r],
                                             {static_cast<int>(MsgKind::act_slice), layer, j, t,
                                              ctx->device},
                                             a_slice);
                                    }
                                    Matrix full(a_slice.rows, sv.fan_out);
                                    for (const auto& [dev, shard] : contributors(ctx->module, layer)) {
                                        if (dev == ctx->device) {
                                            paste_cols(full, a_slice, sv.lo);
                                        } else {
                                            Matrix piece =
                                                recv({static_cast<int>(MsgKind::act_slice), layer, j,
                                                      t, dev});
                                            paste_cols(full, piece, shard.lo);
                                        }
                                    }
                                    input = std::move(full);
                                }
                            } else {
                                out_slices[static_cast<size_t>(j - 1)] = a_slice;
                                if (ctx->module < Z) {
                                    // Boundary send toward the next module.
                                    const bool is_contributor = !sv.replicated || ctx->rank == 0;
                                    const SubModule& next =
                                        plan.submodules[static_cast<size_t>(ctx->module)];
                                    const bool concat =
                                        plan.boundaries[static_cast<size_t>(ctx->module - 1)] ==
                                        BoundaryKind::concat_repartition;
                                    if (is_contributor) {
                                        if (concat) {
                                            send(ctx->module + 1, next.devices.front(),
                                                 {static_cast<int>(MsgKind::act_slice), layer, j, t,
                                                  ctx->device},
                                                 a_slice);
                                        } else {
                                            for (int dev : next.devices) {
                                                send(ctx->module + 1, dev,
                                                     {static_cast<int>(MsgKind::act_slice), layer, j,
                                                      t, ctx->device},
                                                     a_slice);
                                            }
                                        }
                                    }
                                } else if (ctx->rank == 0) {
                                    // Batch-level loss and predictions from the
                                    // full network output.
                                    Matrix full;
                                    if (have_full) {
                                        full = a_full;
                                    } else if (sv.replicated) {
                                        full = a_slice;
                                    } else {
                                        full = Matrix(a_slice.rows, sv.fan_out);
                                        for (const auto& [dev, shard] :
                                             contributors(ctx->module, layer)) {
                                            if (dev == ctx->device) {
                                                paste_cols(full, a_slice, sv.lo);
                                            } else {
                                                Matrix piece = recv(
                                                    {static_cast<int>(MsgKind::act_slice), layer, j,
                                                     t, dev});
                                                paste_cols(full, piece, shard.lo);
                                            }
                                        }
                                    }
                                    std::vector<int> lbl(batch.labels.begin() +
                                                             mb_offset[static_cast<size_t>(j - 1)],
                                                         batch.labels.begin() +
                                                             mb_offset[static_cast<size_t>(j)]);
                                    Matrix lossm(1, 1);
                                    lossm.at(0, 0) = loss_sum(full, lbl, cfg.loss);
                                    results.put({static_cast<int>(MsgKind::loss), 0, j, t, 0},
                                                std::move(lossm));
                                    const std::vector<int> preds = predict_classes(full);
                                    Matrix predm(1, static_cast<int>(preds.size()));
                                    for (size_t c = 0; c < preds.size(); ++c) {
                                        predm.at(0, static_cast<int>(c)) = preds[c];
                                    }
                                    results.put({static_cast<int>(MsgKind::predictions), 0, j, t, 0},
                                                std::move(predm));
                                } else if (!sv.replicated && sv.act != ActKind::softmax_last) {
                                    // rank 0 of the last module still needs our
                                    // output slice for the loss.
                                    send(ctx->module, sm.devices.front(),
                                         {static_cast<int>(MsgKind::act_slice), layer, j, t,
                                          ctx->device},
                                         a_slice);
                                }
                            }
                        }
                    }

                    // ---- backward, all micro-batches ----
                    for (int j = 1; j <= m; ++j) {
                        std::vector<int> lbl(batch.labels.begin() + mb_offset[static_cast<size_t>(j - 1)],
                                             batch.labels.begin() + mb_offset[static_cast<size_t>(j)]);
                        Matrix delta;  // dL/dq for the current layer, this shard's columns
                        for (int s = span - 1; s >= 0; --s) {
                            const int layer = ctx->first_layer + s;
                            ShardView& sv = ctx->shards[static_cast<size_t>(s)];
                            const Matrix& q =
                                q_slices[static_cast<size_t>(s)][static_cast<size_t>(j - 1)];

                            if (layer == L && s == span - 1) {
                                // Loss delta on our columns, sum convention.
                                const Matrix& out =
                                    out_slices[static_cast<size_t>(j - 1)];
                                if (cfg.loss == LossKind::cross_entropy) {
                                    if (sv.act != ActKind::softmax_last) {
                                        throw std::runtime_error(
                                            "cross_entropy needs probability outputs (softmax last "
                                            "layer required)");
                                    }
                                    delta = out;
                                    for (int r = 0; r < delta.rows; ++r) {
                                        const int lb = lbl[static_cast<size_t>(r)];
                                        if (sv.replicated) {
                                            delta.at(r, lb) -= 1.0;
                                        } else if (lb >= sv.lo && lb < sv.hi) {
                                            delta.at(r, lb - sv.lo) -= 1.0;
                                        }
                                    }
                                } else {
                                    if (sv.act == ActKind::softmax_last) {
                                        throw std::runtime_error(
                                            "softmax output requires the cross_entropy loss");
                                    }
                                    delta = out;
                                    for (int r = 0; r < delta.rows; ++r) {
                                        for (int c = 0; c < delta.cols; ++c) {
                                            const int col = sv.replicated ? c : sv.lo + c;
                                            double target = 0.0;
                                            if (sv.fan_out == 1) {
                                                target = static_cast<double>(lbl[static_cast<size_t>(r)]);
                                            } else if (col == lbl[static_cast<size_t>(r)]) {
                                                target = 1.0;
                                            }
                                            delta.at(r, c) -= target;
                                        }
                                    }
                                    if (sv.act == ActKind::relu) delta = relu_mask_mul(std::move(delta), q);
                                }
                            } else if (s == span - 1) {
                                // Error signal arriving over the boundary from
                                // module above; sum producer partials in
                                // ascending device order.
                                const SubModule& next =
                                    plan.submodules[static_cast<size_t>(ctx->module)];
                                const int nlayer = next.first_layer;
                                Matrix post(mb_sizes[static_cast<size_t>(j - 1)], sv.hi - sv.lo);
                                const bool concat =
                                    plan.boundaries[static_cast<size_t>(ctx->module - 1)] ==
                                    BoundaryKind::concat_repartition;
                                if (concat) {
                                    post = recv({static_cast<int>(MsgKind::delta_part), layer, j, t,
                                                 next.devices.front()});
                                } else {
                                    bool first = true;
                                    for (const auto& [dev, shard] : contributors(ctx->module + 1, nlayer)) {
                                        Matrix piece = recv({static_cast<int>(MsgKind::delta_part),
                                                             layer, j, t, dev});
                                        if (first) {
                                            post = std::move(piece);
                                            first = false;
                                        } else {
                                            for (size_t i = 0; i < post.v.size(); ++i) {
                                                post.v[i] += piece.v[i];
                                            }
                                        }
                                    }
                                }
                                delta = sv.act == ActKind::relu ? relu_mask_mul(std::move(post), q)
                                                                : std::move(post);
                            }

                            {
                                Matrix dw = matmul_tn(
                                    delta, inputs[static_cast<size_t>(s)][static_cast<size_t>(j - 1)]);
                                std::vector<double> db = col_sums(delta);
                                Matrix& acc = dw_sum[static_cast<size_t>(s)];
                                for (size_t i = 0; i < acc.v.size(); ++i) acc.v[i] += dw.v[i];
                                std::vector<double>& bacc = db_sum[static_cast<size_t>(s)];
                                for (size_t i = 0; i < bacc.size(); ++i) bacc[i] += db[i];
                            }

                            if (s > 0 || ctx->module > 1) {
                                Matrix partial = matmul(delta, sv.weights);  // full fan_in width
                                if (s > 0) {
                                    // Interior: exchange partial slices among
                                    // peers; each sums over contributors of
                                    // this layer in ascending device order.
                                    ShardView& below = ctx->shards[static_cast<size_t>(s - 1)];
                                    if (!sv.replicated) {
                                        for (size_t r = 0; r < sm.devices.size(); ++r) {
                                            if (sm.devices[r] == ctx->device) continue;
                                            const Shard& dest_shard =
                                                sm.layer_shards(layer - 1)[r];
                                            Matrix piece =
                                                dest_shard.replicated
                                                    ? partial
                                                    : slice_cols(partial, dest_shard.lo, dest_shard.hi);
                                            send(ctx->module, sm.devices[r],
                                                 {static_cast<int>(MsgKind::delta_part), layer - 1, j,
                                                  t, ctx->device},
                                                 std::move(piece));
                                        }
                                    }
                                    Matrix post(partial.rows, below.hi - below.lo);
                                    if (sv.replicated) {
                                        post = below.replicated
                                                   ? partial
                                                   : slice_cols(partial, below.lo, below.hi);
                                    } else {
                                        bool first = true;
                                        for (const auto& [dev, shard] :
                                             contributors(ctx->module, layer)) {
                                            Matrix piece;
                                            if (dev == ctx->device) {
                                                piece = below.replicated
                                                            ? partial
                                                            : slice_cols(partial, below.lo, below.hi);
                                            } else {
                                                piece = recv({static_cast<int>(MsgKind::delta_part),
                                                              layer - 1, j, t, dev});
                                            }
                                            if (first) {
                                                post = std::move(piece);
                                                first = false;
                                            } else {
                                                for (size_t i = 0; i < post.v.size(); ++i) {
                                                    post.v[i] += piece.v[i];
                                                }
                                            }
                                        }
                                    }
                                    delta = below.act == ActKind::relu
                                                ? relu_mask_mul(std::move(post),
                                                                q_slices[static_cast<size_t>(s - 1)]
                                                                        [static_cast<size_t>(j - 1)])
                                                : std::move(post);
                                } else {
                                    // Boundary toward module below.
                                    const SubModule& prev =
                                        plan.submodules[static_cast<size_t>(ctx->module - 2)];
                                    const int blayer = prev.last_layer;
                                    const bool concat =
                                        plan.boundaries[static_cast<size_t>(ctx->module - 2)] ==
                                        BoundaryKind::concat_repartition;
                                    const bool i_contribute = !sv.replicated || ctx->rank == 0;
                                    if (concat) {
                                        // Hub = first worker of this (producer)
                                        // module: sum full-width partials, then
                                        // scatter consumer slices.
                                        const int hub = sm.devices.front();
                                        if (ctx->rank == 0) {
                                            Matrix total = partial;
                                            if (!sv.replicated) {
                                                for (const auto& [dev, shard] :
                                                     contributors(ctx->module, layer)) {
                                                    if (dev == ctx->device) continue;
                                                    Matrix piece =
                                                        recv({static_cast<int>(MsgKind::delta_part),
                                                              -layer, j, t, dev});
                                                    for (size_t i = 0; i < total.v.size(); ++i) {
                                                        total.v[i] += piece.v[i];
                                                    }
                                                }
                                            }
                                            for (size_t r = 0; r < prev.devices.size(); ++r) {
                                                const Shard& pshard = prev.layer_shards(blayer)[r];
                                                Matrix piece =
                                                    pshard.replicated
                                                        ? total
                                                        : slice_cols(total, pshard.lo, pshard.hi);
                                                send(ctx->module - 1, prev.devices[r],
                                                     {static_cast<int>(MsgKind::delta_part), blayer,
                                                      j, t, hub},
                                                     std::move(piece));
                                            }
                                        } else if (i_contribute) {
                                            send(ctx->module, hub,
                                                 {static_cast<int>(MsgKind::delta_part), -layer, j, t,
                                                  ctx->device},
                                                 partial);
                                        }
                                    } else if (i_contribute) {
                                        for (size_t r = 0; r < prev.devices.size(); ++r) {
                                            const Shard& pshard = prev.layer_shards(blayer)[r];
                                            Matrix piece =
                                                pshard.replicated
                                                    ? partial
                                                    : slice_cols(partial, pshard.lo, pshard.hi);
                                            send(ctx->module - 1, prev.devices[r],
                                                 {static_cast<int>(MsgKind::delta_part), blayer, j, t,
                                                  ctx->device},
                                                 std::move(piece));
                                        }
                                    }
                                }
                            }
                        }
                    }

                    // ---- update ----
                    if (mode == UpdateMode::sync_barrier) sync_point.arrive_and_wait();
                    const int b = batch.size();
                    for (int s = 0; s < span; ++s) {
                        ShardView& sv = ctx->shards[static_cast<size_t>(s)];
                        Matrix grad = dw_sum[static_cast<size_t>(s)];
                        for (double& x : grad.v) x /= b;
                        std::vector<double> gb = db_sum[static_cast<size_t>(s)];
                        for (double& x : gb) x /= b;
                        for (double x : grad.v) {
                            if (!std::isfinite(x)) {
                                throw std::runtime_error("diverged at iteration " + std::to_string(t));
                            }
                        }
                        for (size_t i = 0; i < sv.weights.v.size(); ++i) {
                            sv.weights.v[i] -= alpha * grad.v[i];
                        }
                        for (size_t i = 0; i < sv.bias.size(); ++i) sv.bias[i] -= alpha * gb[i];
                    }
                    alpha *= 1.0 - cfg.decay;
                }
            } catch (...) {
                errors[err_slot] = std::current_exception();
                // Unblock a sync barrier that peers may be waiting on.
                if (mode == UpdateMode::sync_barrier) sync_point.arrive_and_drop();
            }
        });
    }

    // Collect histories while workers run; a worker failure surfaces as a
    // timeout here, then the real error is rethrown after join.
    TrainResult result;
    std::exception_ptr history_error;
    try {
        for (int t = 1; t <= cfg.iterations; ++t) {
            double batch_loss = 0.0;
            std::vector<int> preds;
            for (int j = 1; j <= m; ++j) {
                Matrix lossm = results.take({static_cast<int>(MsgKind::loss), 0, j, t, 0}, timeout);
                batch_loss += lossm.at(0, 0);
                Matrix predm =
                    results.take({static_cast<int>(MsgKind::predictions), 0, j, t, 0}, timeout);
                for (int c = 0; c < predm.cols; ++c) {
                    preds.push_back(static_cast<int>(predm.at(0, c)));
                }
            }
            result.loss_history.push_back(batch_loss / batch.size());
            result.acc_history.push_back(accuracy(preds, batch.labels));
        }
    } catch (...) {
        history_error = std::current_exception();
    }

    for (std::thread& th : threads) th.join();
    for (const std::exception_ptr& e : errors) {
        if (e) std::rethrow_exception(e);
    }
    if (history_error) std::rethrow_exception(history_error);

    // Reassemble the trained net from worker shards.
    result.net = net;
    for (const SubModule& sm : plan.submodules) {
        for (size_t rank = 0; rank < sm.devices.size(); ++rank) {
            const WorkerCtx& ctx = workers.at({sm.index, sm.devices[rank]});
            for (int s = 0; s < static_cast<int>(ctx.shards.size()); ++s) {
                const ShardView& sv = ctx.shards[static_cast<size_t>(s)];
                if (sv.replicated && rank != 0) continue;
                TinyLayer& layer =
                    result.net.layers[static_cast<size_t>(ctx.first_layer + s - 1)];
                paste_rows(layer.weights, sv.weights, sv.lo);
                for (int i = sv.lo; i < sv.hi; ++i) {
                    layer.bias[static_cast<size_t>(i)] = sv.bias[static_cast<size_t>(i - sv.lo)];
                }
            }
        }
    }
    return result;
}

}  // namespace pipeplan
