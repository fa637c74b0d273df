#pragma once

#include <string>

#include "pipeplan/schedule.hpp"
#include "pipeplan/simulate.hpp"

namespace pipeplan {

/// Monospace Gantt chart: one row per device (plus the link when any comm ran),
/// one column per simulated time slot between consecutive event boundaries.
std::string render_gantt(const Schedule& s, const SimReport& r);

}  // namespace pipeplan
