#include "pipeplan/schedule.hpp"

#include <algorithm>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace pipeplan {

using nlohmann::json;

std::string task_name(const Task& t) {
    std::ostringstream oss;
    switch (t.kind) {
        case TaskKind::forward:
            oss << "F(" << t.module << "," << t.microbatch << ")";
            break;
        case TaskKind::backward:
            oss << "B(" << t.module << "," << t.microbatch << ")";
            break;
        case TaskKind::comm:
            oss << (t.backward_comm ? "Cb(" : "Cf(") << t.boundary << "," << t.microbatch << ")";
            break;
        case TaskKind::update:
            oss << "U(" << t.module << ")";
            break;
    }
    return oss.str();
}

int DependencyDag::find(TaskKind kind, int module, int microbatch, bool backward_comm) const {
    for (size_t i = 0; i < nodes.size(); ++i) {
        const Task& t = nodes[i];
        const int key = kind == TaskKind::comm ? t.boundary : t.module;
        if (t.kind == kind && key == module && t.microbatch == microbatch &&
            t.backward_comm == backward_comm) {
            return static_cast<int>(i);
        }
    }
    return -1;
}

std::vector<int> split_microbatches(int b, int m) {
    if (b < 1 || m < 1) throw std::invalid_argument("batch and micro-batch count must be >= 1");
    if (m > b) {
        throw std::runtime_error("micro-batch smaller than one sample (b=" + std::to_string(b) +
                                 ", m=" + std::to_string(m) + ")");
    }
    std::vector<int> sizes(static_cast<size_t>(m), b / m);
    for (int k = 0; k < b % m; ++k) sizes[static_cast<size_t>(k)] += 1;
    return sizes;
}

namespace {

std::vector<int> union_devices(const SubModule& a, const SubModule& b) {
    std::set<int> s(a.devices.begin(), a.devices.end());
    s.insert(b.devices.begin(), b.devices.end());
    return {s.begin(), s.end()};
}

}  // namespace

DependencyDag build_dependency_dag(const PartitionPlan& plan, int m, const DagOptions& opts) {
    if (m < 1) throw std::invalid_argument("micro-batch count must be >= 1");
    const int Z = plan.num_submodules();
    DependencyDag dag;

    // Node layout: F(i,j) first, then forward comms, backwards, backward
    // comms, and updates; index helpers below rely on this order.
    auto fid = [&](int i, int j) { return (j - 1) * Z + (i - 1); };
    std::map<std::pair<int, int>, int> cfid;
    std::map<std::pair<int, int>, int> cbid;
    std::map<std::pair<int, int>, int> bid;
    std::map<int, int> uid;

    for (int j = 1; j <= m; ++j) {
        for (int i = 1; i <= Z; ++i) {
            Task t;
            t.kind = TaskKind::forward;
            t.module = i;
            t.microbatch = j;
            t.devices = plan.submodules[static_cast<size_t>(i - 1)].devices;
            dag.nodes.push_back(std::move(t));
        }
    }
    for (int j = 1; j <= m; ++j) {
        for (int k = 1; k <= Z - 1; ++k) {
            if (plan.boundaries[static_cast<size_t>(k - 1)] != BoundaryKind::concat_repartition) {
                continue;
            }
            Task t;
            t.kind = TaskKind::comm;
            t.module = k;
            t.boundary = k;
            t.microbatch = j;
            t.devices = union_devices(plan.submodules[static_cast<size_t>(k - 1)],
                                      plan.submodules[static_cast<size_t>(k)]);
            cfid[{k, j}] = static_cast<int>(dag.nodes.size());
            dag.nodes.push_back(std::move(t));
        }
    }
    if (opts.include_backward) {
        for (int j = 1; j <= m; ++j) {
            for (int i = 1; i <= Z; ++i) {
                Task t;
                t.kind = TaskKind::backward;
                t.module = i;
                t.microbatch = j;
                t.devices = plan.submodules[static_cast<size_t>(i - 1)].devices;
                bid[{i, j}] = static_cast<int>(dag.nodes.size());
                dag.nodes.push_back(std::move(t));
            }
        }
        for (int j = 1; j <= m; ++j) {
            for (int k = 1; k <= Z - 1; ++k) {
                if (plan.boundaries[static_cast<size_t>(k - 1)] != BoundaryKind::concat_repartition) {
                    continue;
                }
                Task t;
                t.kind = TaskKind::comm;
                t.module = k;
                t.boundary = k;
                t.microbatch = j;
                t.backward_comm = true;
                t.devices = union_devices(plan.submodules[static_cast<size_t>(k - 1)],
                                          plan.submodules[static_cast<size_t>(k)]);
                cbid[{k, j}] = static_cast<int>(dag.nodes.size());
                dag.nodes.push_back(std::move(t));
            }
        }
        for (int i = 1; i <= Z; ++i) {
            Task t;
            t.kind = TaskKind::update;
            t.module = i;
            t.devices = plan.submodules[static_cast<size_t>(i - 1)].devices;
            uid[i] = static_cast<int>(dag.nodes.size());
            dag.nodes.push_back(std::move(t));
        }
    }

    auto edge = [&](int a, int b) { dag.edges.emplace_back(a, b); };
    for (int j = 1; j <= m; ++j) {
        for (int i = 1; i <= Z - 1; ++i) {
            if (auto it = cfid.find({i, j}); it != cfid.end()) {
                edge(fid(i, j), it->second);
                edge(it->second, fid(i + 1, j));
            } else {
                edge(fid(i, j), fid(i + 1, j));
            }
        }
        if (opts.include_backward) {
            edge(fid(Z, j), bid[{Z, j}]);
            for (int i = Z - 1; i >= 1; --i) {
                if (auto it = cbid.find({i, j}); it != cbid.end()) {
                    edge(bid[{i + 1, j}], it->second);
                    edge(it->second, bid[{i, j}]);
                } else {
                    edge(bid[{i + 1, j}], bid[{i, j}]);
                }
            }
        }
    }
    for (int j = 1; j <= m - 1; ++j) {
        for (int i = 1; i <= Z; ++i) {
            edge(fid(i, j), fid(i, j + 1));
            if (opts.include_backward) edge(bid[{i, j}], bid[{i, j + 1}]);
        }
    }
    if (opts.include_backward) {
        for (int i = 1; i <= Z; ++i) {
            for (int j = 1; j <= m; ++j) edge(bid[{i, j}], uid[i]);
        }
    }
    return dag;
}

namespace {

// Ready-tie priority: smaller micro-batch, then backward before forward
// (backward comms with backward), then smaller module/boundary index.
int kind_rank(const Task& t) {
    switch (t.kind) {
        case TaskKind::backward: return 0;
        case TaskKind::comm: return t.backward_comm ? 1 : 3;
        case TaskKind::forward: return 2;
        case TaskKind::update: return 4;
    }
    return 5;
}

bool priority_less(const Task& a, const Task& b) {
    if (a.microbatch != b.microbatch) return a.microbatch < b.microbatch;
    const int ra = kind_rank(a);
    const int rb = kind_rank(b);
    if (ra != rb) return ra < rb;
    const int ia = a.kind == TaskKind::comm ? a.boundary : a.module;
    const int ib = b.kind == TaskKind::comm ? b.boundary : b.module;
    return ia < ib;
}

}  // namespace

Schedule build_schedule(const PartitionPlan& plan, int m, SchedulePolicy policy,
                        const ScheduleOptions& opts) {
    Schedule s;
    s.policy = policy;
    s.m = m;
    s.num_devices = plan.n;
    s.overlap_comm = opts.overlap_comm;
    DagOptions dopts;
    dopts.include_backward = !opts.forward_only;
    s.dag = build_dependency_dag(plan, m, dopts);
    s.device_lists.assign(static_cast<size_t>(plan.n), {});
    const int Z = plan.num_submodules();

    auto place = [&](int node) {
        const Task& t = s.dag.nodes[static_cast<size_t>(node)];
        s.global_order.push_back(node);
        if (t.kind == TaskKind::comm) {
            s.link_list.push_back(node);
            if (s.overlap_comm) return;
        }
        for (int d : t.devices) {
            s.device_lists[static_cast<size_t>(d - 1)].push_back(node);
        }
    };

    if (policy == SchedulePolicy::sequential) {
        for (int j = 1; j <= m; ++j) {
            for (int i = 1; i <= Z; ++i) {
                place(s.dag.find(TaskKind::forward, i, j));
                if (i < Z) {
                    const int c = s.dag.find(TaskKind::comm, i, j, false);
                    if (c >= 0) place(c);
                }
            }
            if (!opts.forward_only) {
                for (int i = Z; i >= 1; --i) {
                    place(s.dag.find(TaskKind::backward, i, j));
                    if (i > 1) {
                        const int c = s.dag.find(TaskKind::comm, i - 1, j, true);
                        if (c >= 0) place(c);
                    }
                }
            }
        }
        return s;
    }

    // Pipelined: list schedule over unit-duration ticks. A task dispatches
    // when its dag predecessors finished, every resource it needs is idle,
    // and (forward tasks) B(i,j-2) has finished.
    const size_t N = s.dag.nodes.size();
    std::vector<int> pending(N, 0);
    std::vector<std::vector<int>> succ(N);
    for (auto [a, b] : s.dag.edges) {
        pending[static_cast<size_t>(b)] += 1;
        succ[static_cast<size_t>(a)].push_back(b);
    }
    std::vector<bool> done(N, false);
    std::vector<bool> started(N, false);
    std::vector<int> finish_tick(N, -1);
    std::vector<int> device_free(static_cast<size_t>(plan.n) + 1, 0);
    int link_free = 0;
    size_t placed = 0;
    size_t placeable = 0;
    for (size_t i = 0; i < N; ++i) {
        if (s.dag.nodes[i].kind != TaskKind::update) ++placeable;
    }

    int tick = 0;
    size_t in_flight = 0;
    while (placed < placeable) {
        for (size_t i = 0; i < N; ++i) {
            if (started[i] && !done[i] && finish_tick[i] <= tick) {
                done[i] = true;
                --in_flight;
                for (int nxt : succ[i]) pending[static_cast<size_t>(nxt)] -= 1;
            }
        }
        bool any = true;
        bool started_this_tick = false;
        while (any) {
            any = false;
            int pick = -1;
            for (size_t i = 0; i < N; ++i) {
                const Task& t = s.dag.nodes[i];
                if (started[i] || t.kind == TaskKind::update || pending[i] > 0) continue;
                if (t.kind == TaskKind::forward && t.microbatch > 2) {
                    const int gate = s.dag.find(TaskKind::backward, t.module, t.microbatch - 2);
                    if (gate >= 0 && !done[static_cast<size_t>(gate)]) continue;
                }
                bool free = true;
                const bool needs_devices = t.kind != TaskKind::comm || !s.overlap_comm;
                if (needs_devices) {
                    for (int d : t.devices) free = free && device_free[static_cast<size_t>(d)] <= tick;
                }
                if (t.kind == TaskKind::comm) free = free && link_free <= tick;
                if (!free) continue;
                if (pick < 0 || priority_less(t, s.dag.nodes[static_cast<size_t>(pick)])) {
                    pick = static_cast<int>(i);
                }
            }
            if (pick >= 0) {
                const Task& t = s.dag.nodes[static_cast<size_t>(pick)];
                started[static_cast<size_t>(pick)] = true;
                finish_tick[static_cast<size_t>(pick)] = tick + 1;
                const bool needs_devices = t.kind != TaskKind::comm || !s.overlap_comm;
                if (needs_devices) {
                    for (int d : t.devices) device_free[static_cast<size_t>(d)] = tick + 1;
                }
                if (t.kind == TaskKind::comm) link_free = tick + 1;
                place(pick);
                ++placed;
                ++in_flight;
                any = true;
                started_this_tick = true;
            }
        }
        if (!started_this_tick && in_flight == 0 && placed < placeable) {
            throw std::runtime_error("scheduler stalled: dependency cycle in task graph");
        }
        ++tick;
    }
    return s;
}

Schedule attach_updates(const Schedule& s, UpdateMode mode) {
    Schedule out = s;
    out.update_mode = mode;
    auto is_update = [&](int node) {
        return out.dag.nodes[static_cast<size_t>(node)].kind == TaskKind::update;
    };
    for (auto& list : out.device_lists) {
        list.erase(std::remove_if(list.begin(), list.end(), is_update), list.end());
    }
    out.global_order.erase(
        std::remove_if(out.global_order.begin(), out.global_order.end(), is_update),
        out.global_order.end());

    std::vector<int> updates;
    for (size_t i = 0; i < out.dag.nodes.size(); ++i) {
        if (out.dag.nodes[i].kind == TaskKind::update) updates.push_back(static_cast<int>(i));
    }
    std::sort(updates.begin(), updates.end(), [&](int a, int b) {
        return out.dag.nodes[static_cast<size_t>(a)].module <
               out.dag.nodes[static_cast<size_t>(b)].module;
    });
    for (int u : updates) {
        const Task& t = out.dag.nodes[static_cast<size_t>(u)];
        if (mode == UpdateMode::async_per_module) {
            const int last_b = out.dag.find(TaskKind::backward, t.module, out.m);
            for (int d : t.devices) {
                auto& list = out.device_lists[static_cast<size_t>(d - 1)];
                auto it = std::find(list.begin(), list.end(), last_b);
                list.insert(it == list.end() ? list.end() : it + 1, u);
            }
            auto git = std::find(out.global_order.begin(), out.global_order.end(), last_b);
            out.global_order.insert(git == out.global_order.end() ? out.global_order.end() : git + 1,
                                    u);
        } else if (mode == UpdateMode::sync_barrier) {
            for (int d : t.devices) out.device_lists[static_cast<size_t>(d - 1)].push_back(u);
            out.global_order.push_back(u);
        }
    }
    return out;
}

std::string serialize_schedule(const Schedule& s) {
    json doc;
    doc["schema"] = 1;
    doc["policy"] = s.policy == SchedulePolicy::sequential ? "sequential" : "pipelined";
    switch (s.update_mode) {
        case UpdateMode::none: doc["update_mode"] = "none"; break;
        case UpdateMode::sync_barrier: doc["update_mode"] = "sync"; break;
        case UpdateMode::async_per_module: doc["update_mode"] = "async"; break;
    }
    doc["microbatches"] = s.m;
    doc["devices"] = json::array();
    for (size_t d = 0; d < s.device_lists.size(); ++d) {
        json jd;
        jd["device"] = static_cast<int>(d + 1);
        jd["tasks"] = json::array();
        for (int node : s.device_lists[d]) {
            jd["tasks"].push_back(task_name(s.dag.nodes[static_cast<size_t>(node)]));
        }
        doc["devices"].push_back(jd);
    }
    doc["link"] = json::array();
    for (int node : s.link_list) {
        doc["link"].push_back(task_name(s.dag.nodes[static_cast<size_t>(node)]));
    }
    return doc.dump(2) + "\n";
}

}  // namespace pipeplan
