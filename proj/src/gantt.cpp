#include "pipeplan/gantt.hpp"

#include <algorithm>
#include <cstdio>
#include <set>
#include <sstream>
#include <vector>

namespace pipeplan {

namespace {

std::string short_label(const Task& t) {
    char buf[32];
    switch (t.kind) {
        case TaskKind::forward:
            std::snprintf(buf, sizeof(buf), "F%d.%d", t.module, t.microbatch);
            break;
        case TaskKind::backward:
            std::snprintf(buf, sizeof(buf), "B%d.%d", t.module, t.microbatch);
            break;
        case TaskKind::comm:
            std::snprintf(buf, sizeof(buf), "%s%d.%d", t.backward_comm ? "Cb" : "Cf", t.boundary,
                          t.microbatch);
            break;
        case TaskKind::update:
            std::snprintf(buf, sizeof(buf), "U%d", t.module);
            break;
    }
    return buf;
}

std::string fmt_time(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%g", v);
    return buf;
}

}  // namespace

std::string render_gantt(const Schedule& s, const SimReport& r) {
    std::set<double> marks;
    marks.insert(0.0);
    for (const TaskEvent& e : r.trace) {
        marks.insert(e.start);
        marks.insert(e.end);
    }
    std::vector<double> times(marks.begin(), marks.end());

    struct Slot {
        double a, b;
    };
    std::vector<Slot> slots;
    for (size_t i = 0; i + 1 < times.size(); ++i) {
        if (times[i + 1] > times[i]) slots.push_back({times[i], times[i + 1]});
    }

    size_t width = 4;
    for (const TaskEvent& e : r.trace) {
        width = std::max(width, short_label(s.dag.nodes[static_cast<size_t>(e.node)]).size());
    }
    width += 1;

    auto pad = [&](std::string v) {
        if (v.size() > width) v = v.substr(0, width);
        v.resize(width, ' ');
        return v;
    };

    const bool has_link = !s.link_list.empty();
    const int rows = s.num_devices + (has_link ? 1 : 0);
    std::vector<std::string> grid(static_cast<size_t>(rows));
    for (auto& g : grid) {
        for (size_t c = 0; c < slots.size(); ++c) g += pad(".");
    }

    for (const TaskEvent& e : r.trace) {
        const Task& t = s.dag.nodes[static_cast<size_t>(e.node)];
        if (e.end <= e.start) continue;
        const std::string label = short_label(t);
        for (size_t c = 0; c < slots.size(); ++c) {
            if (slots[c].a < e.start || slots[c].b > e.end) continue;
            const std::string cell = pad(slots[c].a == e.start ? label : "-");
            const bool occupies_devices = t.kind != TaskKind::comm || !s.overlap_comm;
            if (occupies_devices) {
                for (int d : t.devices) {
                    grid[static_cast<size_t>(d - 1)].replace(c * width, width, cell);
                }
            }
            if (t.kind == TaskKind::comm && has_link) {
                grid[static_cast<size_t>(rows - 1)].replace(c * width, width, cell);
            }
        }
    }

    std::ostringstream oss;
    oss << pad("t=");
    for (const Slot& sl : slots) oss << pad(fmt_time(sl.a));
    oss << pad(fmt_time(r.makespan_s)) << "\n";
    for (int d = 0; d < s.num_devices; ++d) {
        char head[16];
        std::snprintf(head, sizeof(head), "d%-3d", d + 1);
        oss << pad(head) << grid[static_cast<size_t>(d)] << "\n";
    }
    if (has_link) {
        oss << pad("link") << grid[static_cast<size_t>(rows - 1)] << "\n";
    }

    std::vector<std::string> instants;
    for (const TaskEvent& e : r.trace) {
        if (e.end <= e.start) {
            instants.push_back(short_label(s.dag.nodes[static_cast<size_t>(e.node)]) + "@t=" +
                               fmt_time(e.start));
        }
    }
    if (!instants.empty()) {
        oss << "instant:";
        for (const std::string& i : instants) oss << " " << i;
        oss << "\n";
    }
    return oss.str();
}

}  // namespace pipeplan
