#pragma once

#include <string>
#include <vector>

#include "cadet/metrics.hpp"

namespace cadet {

// Canonical JSON serialization; save(load(p)) reproduces p byte for byte.
void save_report(const EvalReport& report, const std::string& path);
EvalReport load_report(const std::string& path);

// Text table, one row per report: AR-Seen / AR-Unseen / AR-HM at each k.
// Rows missing a column leave it blank.
std::string report_table(const std::vector<EvalReport>& reports,
                         const std::vector<int>& k_values = kDefaultKGrid);

// AR-vs-k line plots (SVG): one file per panel (seen / unseen / harmonic /
// each per-class and per-size curve), one polyline per report.
// Returns the paths written.
std::vector<std::string> write_report_plots(const std::vector<EvalReport>& reports,
                                            const std::string& dir);

}  // namespace cadet
