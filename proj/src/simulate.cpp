#include "pipeplan/simulate.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace pipeplan {

using nlohmann::json;

namespace {

double task_duration(const Task& t, const TaskCostTable& table) {
    auto out_of_range = [&]() {
        throw std::runtime_error("task " + task_name(t) + " not priced in cost table");
    };
    const int i = t.kind == TaskKind::comm ? t.boundary : t.module;
    const int j = t.microbatch;
    switch (t.kind) {
        case TaskKind::forward:
            if (i < 1 || i > table.num_modules() || j < 1 || j > table.m) out_of_range();
            return table.tf[static_cast<size_t>(i - 1)][static_cast<size_t>(j - 1)];
        case TaskKind::backward:
            if (i < 1 || i > table.num_modules() || j < 1 || j > table.m) out_of_range();
            return table.tb[static_cast<size_t>(i - 1)][static_cast<size_t>(j - 1)];
        case TaskKind::comm:
            if (i < 1 || i > static_cast<int>(table.tcomm.size()) || j < 1 || j > table.m) {
                out_of_range();
            }
            return table.tcomm[static_cast<size_t>(i - 1)][static_cast<size_t>(j - 1)];
        case TaskKind::update:
            return 0.0;
    }
    return 0.0;
}

// Per-device parameter bytes and per-(module, device) activation stash bytes
// for one micro-batch.
struct MemoryModel {
    std::vector<double> param_bytes;                  // [device-1]
    std::vector<std::map<int, double>> stash_bytes;   // [module-1] device -> bytes

    MemoryModel(const ModelGraph& g, const PartitionPlan& plan, const SimOptions& opts, int n) {
        param_bytes.assign(static_cast<size_t>(n), 0.0);
        stash_bytes.assign(static_cast<size_t>(plan.num_submodules()), {});
        for (const SubModule& sm : plan.submodules) {
            for (int l = sm.first_layer; l <= sm.last_layer; ++l) {
                const LayerSpec& layer = g.layer(l);
                for (const Shard& s : sm.layer_shards(l)) {
                    const double frac =
                        s.replicated ? 1.0 : static_cast<double>(s.units()) / layer.fan_out;
                    param_bytes[static_cast<size_t>(s.device_id - 1)] +=
                        static_cast<double>(layer.param_count) * frac * opts.bytes_per_param;
                    stash_bytes[static_cast<size_t>(sm.index - 1)][s.device_id] +=
                        layer.act_bytes * frac * opts.samples_per_microbatch;
                }
            }
        }
    }
};

struct Engine {
    const Schedule& s;
    const TaskCostTable& table;
    MemoryMode mem;
    MemoryModel memory;
    SimReport report;

    std::vector<double> mem_now;
    // stash ownership: live[(module, microbatch)] present while stashed
    std::map<std::pair<int, int>, bool> live_stash;

    Engine(const Schedule& sched, const TaskCostTable& t, MemoryMode m, const ModelGraph& g,
           const PartitionPlan& plan, const SimOptions& opts)
        : s(sched), table(t), mem(m), memory(g, plan, opts, sched.num_devices) {
        report.busy_s.assign(static_cast<size_t>(s.num_devices), 0.0);
        report.peak_mem_bytes = memory.param_bytes;
        mem_now = memory.param_bytes;
    }

    void on_start(int node, double start, double dur) {
        const Task& t = s.dag.nodes[static_cast<size_t>(node)];
        report.trace.push_back(TaskEvent{node, start, start + dur});
        const bool occupies_devices = t.kind != TaskKind::comm || !s.overlap_comm;
        if (occupies_devices) {
            for (int d : t.devices) report.busy_s[static_cast<size_t>(d - 1)] += dur;
        }
        if (t.kind == TaskKind::comm) report.comm_s += dur;
        if (t.kind == TaskKind::forward) {
            report.tF_total += dur;
            alloc_stash(t.module, t.microbatch);
        }
        if (t.kind == TaskKind::backward) report.tB_total += dur;
    }

    void on_end(int node) {
        const Task& t = s.dag.nodes[static_cast<size_t>(node)];
        if (t.kind != TaskKind::backward) return;
        if (mem == MemoryMode::proposed) {
            free_stash(t.module, t.microbatch);
        } else if (t.microbatch == s.m) {
            for (int j = 1; j <= s.m; ++j) free_stash(t.module, j);
        }
    }

    void alloc_stash(int module, int microbatch) {
        if (live_stash[{module, microbatch}]) return;
        live_stash[{module, microbatch}] = true;
        for (const auto& [dev, bytes] : memory.stash_bytes[static_cast<size_t>(module - 1)]) {
            double& now = mem_now[static_cast<size_t>(dev - 1)];
            now += bytes;
            report.peak_mem_bytes[static_cast<size_t>(dev - 1)] =
                std::max(report.peak_mem_bytes[static_cast<size_t>(dev - 1)], now);
        }
    }

    void free_stash(int module, int microbatch) {
        auto it = live_stash.find({module, microbatch});
        if (it == live_stash.end() || !it->second) return;
        it->second = false;
        for (const auto& [dev, bytes] : memory.stash_bytes[static_cast<size_t>(module - 1)]) {
            mem_now[static_cast<size_t>(dev - 1)] -= bytes;
        }
    }

    void finalize() {
        double makespan = 0.0;
        for (const TaskEvent& e : report.trace) makespan = std::max(makespan, e.end);
        report.makespan_s = makespan;
        report.utilization.assign(report.busy_s.size(), 0.0);
        if (makespan > 0) {
            for (size_t d = 0; d < report.busy_s.size(); ++d) {
                report.utilization[d] = report.busy_s[d] / makespan;
            }
        }
    }
};

SimReport run_sequential(const Schedule& s, const TaskCostTable& table, MemoryMode mem,
                         const ModelGraph& g, const PartitionPlan& plan, const SimOptions& opts) {
    Engine eng(s, table, mem, g, plan, opts);
    double now = 0.0;
    for (int node : s.global_order) {
        const double dur = task_duration(s.dag.nodes[static_cast<size_t>(node)], table);
        eng.on_start(node, now, dur);
        now += dur;
        eng.on_end(node);
    }
    eng.finalize();
    return eng.report;
}

SimReport run_pipelined(const Schedule& s, const TaskCostTable& table, MemoryMode mem,
                        const ModelGraph& g, const PartitionPlan& plan, const SimOptions& opts) {
    Engine eng(s, table, mem, g, plan, opts);
    const size_t N = s.dag.nodes.size();

    std::vector<int> pending(N, 0);
    std::vector<std::vector<int>> succ(N);
    for (auto [a, b] : s.dag.edges) {
        pending[static_cast<size_t>(b)] += 1;
        succ[static_cast<size_t>(a)].push_back(b);
    }

    // Resource queues: one per device plus the shared link.
    const int R = s.num_devices + 1;
    std::vector<const std::vector<int>*> queues(static_cast<size_t>(R));
    for (int d = 0; d < s.num_devices; ++d) queues[static_cast<size_t>(d)] = &s.device_lists[static_cast<size_t>(d)];
    queues[static_cast<size_t>(R - 1)] = &s.link_list;
    std::vector<size_t> ptr(static_cast<size_t>(R), 0);
    std::vector<bool> busy(static_cast<size_t>(R), false);

    std::vector<bool> started(N, false);
    std::vector<bool> done(N, false);
    std::vector<double> finish(N, 0.0);
    std::vector<int> running;  // node indices in flight

    size_t total_entries = 0;
    for (const auto* q : queues) total_entries += q->size();
    size_t consumed = 0;

    auto resources_of = [&](int node, std::vector<int>& out) {
        const Task& t = s.dag.nodes[static_cast<size_t>(node)];
        out.clear();
        const bool needs_devices = t.kind != TaskKind::comm || !s.overlap_comm;
        if (needs_devices) {
            for (int d : t.devices) out.push_back(d - 1);
        }
        if (t.kind == TaskKind::comm) out.push_back(R - 1);
    };

    double now = 0.0;
    std::vector<int> res;
    while (true) {
        bool progressed = true;
        while (progressed) {
            progressed = false;
            // Complete anything due at the current instant (zero-length tasks).
            std::sort(running.begin(), running.end());
            for (size_t ri = 0; ri < running.size();) {
                const int node = running[ri];
                if (finish[static_cast<size_t>(node)] <= now) {
                    done[static_cast<size_t>(node)] = true;
                    for (int nxt : succ[static_cast<size_t>(node)]) {
                        pending[static_cast<size_t>(nxt)] -= 1;
                    }
                    resources_of(node, res);
                    for (int r : res) busy[static_cast<size_t>(r)] = false;
                    eng.on_end(node);
                    running.erase(running.begin() + static_cast<long>(ri));
                    progressed = true;
                } else {
                    ++ri;
                }
            }
            // Scan resources in id order for startable heads.
            for (int r = 0; r < R; ++r) {
                if (busy[static_cast<size_t>(r)] || ptr[static_cast<size_t>(r)] >= queues[static_cast<size_t>(r)]->size()) {
                    continue;
                }
                const int node = (*queues[static_cast<size_t>(r)])[ptr[static_cast<size_t>(r)]];
                if (started[static_cast<size_t>(node)] || pending[static_cast<size_t>(node)] > 0) {
                    continue;
                }
                resources_of(node, res);
                bool ok = true;
                for (int rr : res) {
                    ok = ok && !busy[static_cast<size_t>(rr)] &&
                         ptr[static_cast<size_t>(rr)] < queues[static_cast<size_t>(rr)]->size() &&
                         (*queues[static_cast<size_t>(rr)])[ptr[static_cast<size_t>(rr)]] == node;
                }
                if (!ok) continue;
                started[static_cast<size_t>(node)] = true;
                const double dur = task_duration(s.dag.nodes[static_cast<size_t>(node)], table);
                finish[static_cast<size_t>(node)] = now + dur;
                for (int rr : res) {
                    busy[static_cast<size_t>(rr)] = true;
                    ptr[static_cast<size_t>(rr)] += 1;
                    ++consumed;
                }
                eng.on_start(node, now, dur);
                running.push_back(node);
                progressed = true;
                break;  // rescan from device 1 for deterministic ordering
            }
        }
        if (running.empty()) {
            if (consumed < total_entries) {
                int blocked = -1;
                for (int r = 0; r < R && blocked < 0; ++r) {
                    if (ptr[static_cast<size_t>(r)] < queues[static_cast<size_t>(r)]->size()) {
                        blocked = (*queues[static_cast<size_t>(r)])[ptr[static_cast<size_t>(r)]];
                    }
                }
                throw std::runtime_error(
                    "simulation stalled at task " +
                    (blocked >= 0 ? task_name(s.dag.nodes[static_cast<size_t>(blocked)]) : "?"));
            }
            break;
        }
        double next = std::numeric_limits<double>::infinity();
        for (int node : running) next = std::min(next, finish[static_cast<size_t>(node)]);
        now = next;
    }
    eng.finalize();
    return eng.report;
}

}  // namespace

SimReport simulate(const Schedule& s, const TaskCostTable& t, MemoryMode mem, const ModelGraph& g,
                   const PartitionPlan& plan, const SimOptions& opts) {
    if (s.policy == SchedulePolicy::sequential) {
        return run_sequential(s, t, mem, g, plan, opts);
    }
    return run_pipelined(s, t, mem, g, plan, opts);
}

double speedup(double T_s, double T_p) {
    if (T_p <= 0) throw std::invalid_argument("speedup: T_p must be positive");
    return T_s / T_p;
}

double memory_compare(const ModelGraph& g, const PartitionPlan& plan, const Schedule& s,
                      const TaskCostTable& t, const SimOptions& opts) {
    const SimReport a = simulate(s, t, MemoryMode::proposed, g, plan, opts);
    const SimReport b = simulate(s, t, MemoryMode::stash_all, g, plan, opts);
    const double pa = *std::max_element(a.peak_mem_bytes.begin(), a.peak_mem_bytes.end());
    const double pb = *std::max_element(b.peak_mem_bytes.begin(), b.peak_mem_bytes.end());
    if (pb <= 0) return 1.0;
    return pa / pb;
}

std::vector<SweepRow> sweep(const ModelGraph& g, const ClusterSpec& cluster_template,
                            const std::vector<int>& n_list, int m, const SweepOptions& opts) {
    if (n_list.empty()) throw std::invalid_argument("sweep: n_list must not be empty");
    for (size_t i = 1; i < n_list.size(); ++i) {
        if (n_list[i] <= n_list[i - 1]) {
            throw std::invalid_argument("sweep: n_list must be ascending");
        }
    }
    const DeviceSpec proto = cluster_template.device(1);

    auto cluster_of = [&](int n) {
        return uniform_cluster(n, proto.flops_per_sec, proto.mem_bytes,
                               cluster_template.link_latency_s, cluster_template.link_bandwidth_Bps);
    };

    // Single-device sequential baseline.
    const ClusterSpec c1 = cluster_of(1);
    const PartitionPlan plan1 = build_plan(g, 1, 1, opts.replicate_narrow);
    CostParams params1{c1, opts.microbatch_samples, m, false};
    const TaskCostTable table1 = task_costs(plan1, g, params1);
    const Schedule sched1 = attach_updates(
        build_schedule(plan1, m, SchedulePolicy::sequential), UpdateMode::sync_barrier);
    const double T_s = simulate(sched1, table1, opts.memory, g, plan1, opts.sim).makespan_s;

    std::vector<SweepRow> rows;
    for (int n : n_list) {
        const ClusterSpec cn = cluster_of(n);
        PartitionPlan plan;
        if (opts.optimize) {
            OptimizeOptions oo;
            oo.m = m;
            oo.microbatch_samples = opts.microbatch_samples;
            oo.replicate_narrow = opts.replicate_narrow;
            plan = optimize_plan(g, cn, n, oo).plan;
        } else {
            plan = build_plan(g, n, std::min(n, g.num_layers()), opts.replicate_narrow);
        }
        CostParams params{cn, opts.microbatch_samples, m, false};
        const TaskCostTable table = task_costs(plan, g, params);
        const Schedule sched = attach_updates(build_schedule(plan, m, SchedulePolicy::pipelined),
                                              UpdateMode::async_per_module);
        const SimReport rep = simulate(sched, table, opts.memory, g, plan, opts.sim);

        SweepRow row;
        row.n = n;
        row.Z = plan.num_submodules();
        row.merges = static_cast<int>(
            std::count(plan.boundaries.begin(), plan.boundaries.end(), BoundaryKind::direct));
        row.makespan_s = rep.makespan_s;
        row.speedup = speedup(T_s, rep.makespan_s);
        row.util_min = rep.utilization.empty()
                           ? 0.0
                           : *std::min_element(rep.utilization.begin(), rep.utilization.end());
        double mean = 0.0;
        for (double u : rep.utilization) mean += u;
        row.util_mean = rep.utilization.empty() ? 0.0 : mean / rep.utilization.size();
        row.peak_mem_bytes =
            *std::max_element(rep.peak_mem_bytes.begin(), rep.peak_mem_bytes.end());
        row.comm_s = rep.comm_s;
        if (opts.memory_compare) {
            row.mem_ratio = memory_compare(g, plan, sched, table, opts.sim);
        }
        rows.push_back(row);
    }
    return rows;
}

namespace {

std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.12g", v);
    return buf;
}

}  // namespace

std::string sweep_csv(const std::vector<SweepRow>& rows, bool with_mem_ratio) {
    std::ostringstream oss;
    oss << "n,Z,merges,makespan_s,speedup,util_min,util_mean,peak_mem_bytes,comm_s";
    if (with_mem_ratio) oss << ",mem_ratio";
    oss << "\n";
    for (const SweepRow& r : rows) {
        oss << r.n << "," << r.Z << "," << r.merges << "," << fmt_double(r.makespan_s) << ","
            << fmt_double(r.speedup) << "," << fmt_double(r.util_min) << ","
            << fmt_double(r.util_mean) << "," << fmt_double(r.peak_mem_bytes) << ","
            << fmt_double(r.comm_s);
        if (with_mem_ratio) oss << "," << fmt_double(r.mem_ratio);
        oss << "\n";
    }
    return oss.str();
}

std::string serialize_report(const SimReport& r, const Schedule& s) {
    json doc;
    doc["schema"] = 1;
    doc["makespan_s"] = r.makespan_s;
    doc["busy_s"] = r.busy_s;
    doc["utilization"] = r.utilization;
    doc["peak_mem_bytes"] = r.peak_mem_bytes;
    doc["comm_s"] = r.comm_s;
    doc["tF_total"] = r.tF_total;
    doc["tB_total"] = r.tB_total;
    doc["trace"] = json::array();
    for (const TaskEvent& e : r.trace) {
        doc["trace"].push_back({{"task", task_name(s.dag.nodes[static_cast<size_t>(e.node)])},
                                {"start", e.start},
                                {"end", e.end}});
    }
    return doc.dump(2) + "\n";
}

}  // namespace pipeplan
