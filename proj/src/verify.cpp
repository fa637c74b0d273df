#include "pipeplan/verify.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <random>
#include <sstream>

#include <json.hpp>

namespace pipeplan {

using nlohmann::json;

bool VerifyReport::all_pass() const {
    return std::all_of(properties.begin(), properties.end(),
                       [](const PropertyResult& p) { return p.pass; });
}

VerifyInstance draw_instance(std::uint64_t seed) {
    std::mt19937_64 rng(seed * 0x9E3779B97F4A7C15ull + 1);
    auto pick = [&](int lo, int hi) {
        return lo + static_cast<int>(rng() % static_cast<std::uint64_t>(hi - lo + 1));
    };

    VerifyInstance inst;
    inst.seed = seed;
    inst.n = pick(1, 3);
    const int L = pick(1, 4);
    const bool use_ce = pick(0, 1) == 1;

    std::vector<int> dims;
    dims.push_back(pick(2, 6));  // input features
    bool narrow = false;
    for (int l = 0; l < L; ++l) {
        int w = l == L - 1 ? pick(2, 4)  // binary-label head needs >= 2 outputs
                           : pick(2, 8);
        if (w < inst.n) narrow = true;
        dims.push_back(w);
    }
    std::vector<ActKind> acts;
    for (int l = 0; l < L - 1; ++l) acts.push_back(pick(0, 1) == 0 ? ActKind::identity : ActKind::relu);
    acts.push_back(use_ce ? ActKind::softmax_last : (pick(0, 1) == 0 ? ActKind::identity : ActKind::relu));

    inst.net = init_net(dims, acts, seed + 7);
    const int b = pick(2, 12);
    inst.m = std::min(pick(1, 4), b);
    inst.batch = make_blobs(b, dims.front(), 1.0, seed + 13);
    inst.cfg.loss = use_ce ? LossKind::cross_entropy : LossKind::mse;
    inst.cfg.alpha0 = 0.05;
    inst.cfg.decay = 0.01;
    inst.cfg.iterations = pick(3, 6);
    inst.cfg.seed = seed;

    const int Z = pick(1, L);
    inst.plan = build_plan(model_graph_of(inst.net), inst.n, Z, narrow || pick(0, 3) == 0);
    if (Z >= 2 && pick(0, 1) == 1) {
        const int lo = pick(1, Z - 1);
        inst.plan = merge_submodules(inst.plan, {lo, lo + 1});
    }
    return inst;
}

double net_distance(const TinyNet& a, const TinyNet& b) {
    double worst = 0.0;
    for (size_t l = 0; l < a.layers.size(); ++l) {
        const TinyLayer& la = a.layers[l];
        const TinyLayer& lb = b.layers[l];
        for (size_t i = 0; i < la.weights.v.size(); ++i) {
            const double x = la.weights.v[i];
            const double y = lb.weights.v[i];
            worst = std::max(worst, std::abs(x - y) / std::max({1.0, std::abs(x), std::abs(y)}));
        }
        for (size_t i = 0; i < la.bias.size(); ++i) {
            const double x = la.bias[i];
            const double y = lb.bias[i];
            worst = std::max(worst, std::abs(x - y) / std::max({1.0, std::abs(x), std::abs(y)}));
        }
    }
    return worst;
}

namespace {

double grad_distance(const GradientSet& a, const GradientSet& b) {
    double worst = 0.0;
    for (size_t l = 0; l < a.dW.size(); ++l) {
        for (size_t i = 0; i < a.dW[l].v.size(); ++i) {
            const double x = a.dW[l].v[i];
            const double y = b.dW[l].v[i];
            worst = std::max(worst, std::abs(x - y) / std::max({1.0, std::abs(x), std::abs(y)}));
        }
        for (size_t i = 0; i < a.db[l].size(); ++i) {
            const double x = a.db[l][i];
            const double y = b.db[l][i];
            worst = std::max(worst, std::abs(x - y) / std::max({1.0, std::abs(x), std::abs(y)}));
        }
    }
    return worst;
}

}  // namespace

VerifyReport run_verification(const VerifyOptions& opts) {
    VerifyReport report;
    PartitionedTrainOptions topts;
    topts.receive_timeout_s = opts.receive_timeout_s;

    PropertyResult oracle{"oracle-equivalence-sync", true, 0.0, 1e-6, opts.seeds, ""};
    PropertyResult modes{"mode-equivalence-async-vs-sync", true, 0.0, 1e-12, opts.seeds, ""};
    PropertyResult microbatch{"microbatch-invariance", true, 0.0, 1e-10, opts.seeds, ""};
    PropertyResult gradcheck{"gradient-correctness", true, 0.0, 1e-4, opts.seeds, ""};
    PropertyResult reassembly{"shard-reassembly", true, 0.0, 1e-12, opts.seeds, ""};

    for (int s = 0; s < opts.seeds; ++s) {
        const std::uint64_t seed = opts.base_seed + static_cast<std::uint64_t>(s);
        const VerifyInstance inst = draw_instance(seed);

        // Sequential oracle vs concurrent partitioned run (sync), then the two
        // update modes against each other.
        const TrainResult seq = train_sequential(inst.net, inst.batch, inst.cfg);
        const TrainResult sync = train_partitioned(inst.net, inst.batch, inst.cfg, inst.plan,
                                                   inst.m, UpdateMode::sync_barrier, topts);
        const TrainResult async_r = train_partitioned(inst.net, inst.batch, inst.cfg, inst.plan,
                                                      inst.m, UpdateMode::async_per_module, topts);
        const double d_oracle = net_distance(seq.net, sync.net);
        if (d_oracle > oracle.max_err) {
            oracle.max_err = d_oracle;
            if (d_oracle > oracle.tolerance) {
                oracle.note = "seed " + std::to_string(seed);
            }
        }
        const double d_mode = net_distance(sync.net, async_r.net);
        if (d_mode > modes.max_err) {
            modes.max_err = d_mode;
            if (d_mode > modes.tolerance) modes.note = "seed " + std::to_string(seed);
        }

        // Accumulated micro-batch gradients, weighted by micro-batch size,
        // against the one-shot full-batch gradient.
        {
            const std::vector<int> sizes = split_microbatches(inst.batch.size(), inst.m);
            GradientSet acc;
            int offset = 0;
            for (int j = 0; j < inst.m; ++j) {
                Batch piece;
                piece.X = slice_rows(inst.batch.X, offset, offset + sizes[static_cast<size_t>(j)]);
                piece.labels.assign(inst.batch.labels.begin() + offset,
                                    inst.batch.labels.begin() + offset + sizes[static_cast<size_t>(j)]);
                offset += sizes[static_cast<size_t>(j)];
                const ActivationTape tape = forward(inst.net, piece.X);
                const GradientSet g = backward(inst.net, tape, piece.labels, inst.cfg.loss);
                const double w = static_cast<double>(piece.size()) / inst.batch.size();
                if (j == 0) {
                    acc = g;
                    for (auto& mtx : acc.dW) {
                        for (double& x : mtx.v) x *= w;
                    }
                    for (auto& vec : acc.db) {
                        for (double& x : vec) x *= w;
                    }
                } else {
                    for (size_t l = 0; l < acc.dW.size(); ++l) {
                        for (size_t i = 0; i < acc.dW[l].v.size(); ++i) {
                            acc.dW[l].v[i] += w * g.dW[l].v[i];
                        }
                        for (size_t i = 0; i < acc.db[l].size(); ++i) {
                            acc.db[l][i] += w * g.db[l][i];
                        }
                    }
                }
            }
            const ActivationTape tape = forward(inst.net, inst.batch.X);
            const GradientSet full = backward(inst.net, tape, inst.batch.labels, inst.cfg.loss);
            const double d = grad_distance(acc, full);
            if (d > microbatch.max_err) {
                microbatch.max_err = d;
                if (d > microbatch.tolerance) microbatch.note = "seed " + std::to_string(seed);
            }
        }

        // Analytic gradients against central finite differences.
        {
            const GradCheckResult gc =
                grad_check(inst.net, inst.batch.X, inst.batch.labels, inst.cfg.loss, 1e-5);
            double err = gc.max_rel_err;
            if (opts.inject_gradient_fault && s == 0) {
                // Test hook: measure a sign-flipped gradient coordinate
                // against the same finite-difference oracle.
                const ActivationTape tape = forward(inst.net, inst.batch.X);
                const GradientSet g = backward(inst.net, tape, inst.batch.labels, inst.cfg.loss);
                const double flipped = -g.dW[0].v[0];
                TinyNet plus = inst.net;
                TinyNet minus = inst.net;
                plus.layers[0].weights.v[0] += 1e-5;
                minus.layers[0].weights.v[0] -= 1e-5;
                const double fp = loss_value(forward(plus, inst.batch.X).a.back(),
                                             inst.batch.labels, inst.cfg.loss);
                const double fm = loss_value(forward(minus, inst.batch.X).a.back(),
                                             inst.batch.labels, inst.cfg.loss);
                const double numeric = (fp - fm) / 2e-5;
                err = std::max(err, std::abs(numeric - flipped) /
                                        std::max({1e-6, std::abs(numeric), std::abs(flipped)}));
            }
            if (err > gradcheck.max_err) {
                gradcheck.max_err = err;
                if (err > gradcheck.tolerance) gradcheck.note = "seed " + std::to_string(seed);
            }
        }

        // Concatenated per-shard forward outputs against the unsharded layer.
        {
            const TinyLayer& layer0 = inst.net.layers.front();
            const ActivationTape tape = forward(inst.net, inst.batch.X);
            const Matrix& whole = tape.q.front();
            const std::vector<Shard> shards =
                split_layer(model_graph_of(inst.net).layer(1), inst.n, true);
            Matrix gathered(whole.rows, whole.cols);
            for (const Shard& sh : shards) {
                Matrix w = slice_rows(layer0.weights, sh.lo, sh.hi);
                Matrix q = matmul_nt(inst.batch.X, w);
                for (int r = 0; r < q.rows; ++r) {
                    for (int c = 0; c < q.cols; ++c) {
                        q.at(r, c) += layer0.bias[static_cast<size_t>(sh.lo + c)];
                    }
                }
                paste_cols(gathered, q, sh.lo);
                if (sh.replicated) break;
            }
            double d = 0.0;
            for (size_t i = 0; i < whole.v.size(); ++i) {
                d = std::max(d, std::abs(whole.v[i] - gathered.v[i]) /
                                    std::max({1.0, std::abs(whole.v[i]), std::abs(gathered.v[i])}));
            }
            if (d > reassembly.max_err) {
                reassembly.max_err = d;
                if (d > reassembly.tolerance) reassembly.note = "seed " + std::to_string(seed);
            }
        }
    }

    for (PropertyResult* p : {&oracle, &modes, &microbatch, &gradcheck, &reassembly}) {
        p->pass = p->max_err <= p->tolerance;
        report.properties.push_back(*p);
    }
    return report;
}

std::string verify_report_text(const VerifyReport& r) {
    std::ostringstream oss;
    oss << "property                          instances  max_err        tolerance  result\n";
    for (const PropertyResult& p : r.properties) {
        char line[160];
        std::snprintf(line, sizeof(line), "%-33s %-10d %-14.6g %-10.3g %s%s%s\n", p.name.c_str(),
                      p.instances, p.max_err, p.tolerance, p.pass ? "PASS" : "FAIL",
                      p.note.empty() ? "" : "  ", p.note.c_str());
        oss << line;
    }
    oss << (r.all_pass() ? "all properties pass\n" : "verification FAILED\n");
    return oss.str();
}

std::string serialize_verify_report(const VerifyReport& r) {
    json doc;
    doc["schema"] = 1;
    doc["all_pass"] = r.all_pass();
    doc["properties"] = json::array();
    for (const PropertyResult& p : r.properties) {
        doc["properties"].push_back({{"name", p.name},
                                     {"pass", p.pass},
                                     {"max_err", p.max_err},
                                     {"tolerance", p.tolerance},
                                     {"instances", p.instances},
                                     {"note", p.note}});
    }
    return doc.dump(2) + "\n";
}

}  // namespace pipeplan
