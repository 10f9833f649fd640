#include "cadet/report_io.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "cadet/errors.hpp"

namespace cadet {

namespace {

using json = nlohmann::ordered_json;

json curve_to_json(const ARCurve& c) {
  return {{"k_values", c.k_values},
          {"recalls", c.recalls},
          {"iou_threshold", c.iou_threshold},
          {"empty_truth_warning", c.empty_truth_warning}};
}

ARCurve curve_from_json(const json& j) {
  ARCurve c;
  c.k_values = j.at("k_values").get<std::vector<int>>();
  c.recalls = j.at("recalls").get<std::vector<double>>();
  c.iou_threshold = j.at("iou_threshold").get<double>();
  c.empty_truth_warning = j.at("empty_truth_warning").get<bool>();
  if (c.k_values.size() != c.recalls.size()) {
    throw DataError("AR curve: k/recall length mismatch");
  }
  return c;
}

json downstream_to_json(const DownstreamReport& d) {
  json acc = json::object();
  for (const auto& [m, v] : d.accuracy_at_m) acc[std::to_string(m)] = v;
  return {{"accuracy_at_m", std::move(acc)},
          {"bo_accuracy", d.bo_accuracy},
          {"uncropped_accuracy", d.uncropped_accuracy},
          {"gt_crop_accuracy", d.gt_crop_accuracy},
          {"classifier_failures", d.classifier_failures}};
}

DownstreamReport downstream_from_json(const json& j) {
  DownstreamReport d;
  for (const auto& [k, v] : j.at("accuracy_at_m").items()) {
    d.accuracy_at_m[std::stoi(k)] = v.get<double>();
  }
  d.bo_accuracy = j.at("bo_accuracy").get<double>();
  d.uncropped_accuracy = j.at("uncropped_accuracy").get<double>();
  d.gt_crop_accuracy = j.at("gt_crop_accuracy").get<double>();
  d.classifier_failures = j.at("classifier_failures").get<int>();
  return d;
}

}  // namespace

void save_report(const EvalReport& report, const std::string& path) {
  json j;
  j["model"] = report.model;
  if (report.macro_all) j["macro_all"] = curve_to_json(*report.macro_all);
  if (report.macro_seen) j["macro_seen"] = curve_to_json(*report.macro_seen);
  if (report.macro_unseen) j["macro_unseen"] = curve_to_json(*report.macro_unseen);
  if (report.harmonic) j["harmonic_mean"] = curve_to_json(*report.harmonic);
  if (!report.per_class.empty()) {
    json per = json::object();
    for (const auto& [name, curve] : report.per_class) per[name] = curve_to_json(curve);
    j["per_class"] = std::move(per);
  }
  if (!report.per_size.empty()) {
    json per = json::object();
    for (const auto& [name, curve] : report.per_size) per[name] = curve_to_json(curve);
    j["per_size"] = std::move(per);
  }
  if (report.downstream) j["downstream"] = downstream_to_json(*report.downstream);
  std::ofstream out(path);
  if (!out) throw DataError("cannot write report " + path);
  out << j.dump(2) << "\n";
}

EvalReport load_report(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open report " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw DataError(path + ": " + e.what());
  }
  EvalReport report;
  try {
    static const std::set<std::string> known = {
        "model",     "macro_all", "macro_seen", "macro_unseen",
        "harmonic_mean", "per_class", "per_size",   "downstream"};
    for (const auto& [key, value] : j.items()) {
      if (!known.count(key)) throw DataError(path + ": unknown key '" + key + "'");
    }
    report.model = j.at("model").get<std::string>();
    if (j.contains("macro_all")) report.macro_all = curve_from_json(j["macro_all"]);
    if (j.contains("macro_seen")) report.macro_seen = curve_from_json(j["macro_seen"]);
    if (j.contains("macro_unseen")) {
      report.macro_unseen = curve_from_json(j["macro_unseen"]);
    }
    if (j.contains("harmonic_mean")) {
      report.harmonic = curve_from_json(j["harmonic_mean"]);
    }
    if (j.contains("per_class")) {
      for (const auto& [name, curve] : j["per_class"].items()) {
        report.per_class[name] = curve_from_json(curve);
      }
    }
    if (j.contains("per_size")) {
      for (const auto& [name, curve] : j["per_size"].items()) {
        report.per_size[name] = curve_from_json(curve);
      }
    }
    if (j.contains("downstream")) {
      report.downstream = downstream_from_json(j["downstream"]);
    }
  } catch (const json::exception& e) {
    throw DataError(path + ": " + e.what());
  }
  return report;
}

// ---------------------------------------------------------------------------
// Text table

namespace {

std::string format_cell(const ARCurve* curve, int k) {
  char buf[16];
  if (!curve) return std::string(7, ' ');
  for (size_t i = 0; i < curve->k_values.size(); ++i) {
    if (curve->k_values[i] == k) {
      std::snprintf(buf, sizeof buf, "%7.3f", curve->recalls[i]);
      return buf;
    }
  }
  return std::string(7, ' ');
}

void table_row(std::ostringstream& out, const std::string& model,
               const std::string& label, const ARCurve* curve,
               const std::vector<int>& ks) {
  out << model;
  out << std::string(model.size() < 18 ? 18 - model.size() : 1, ' ');
  out << label;
  out << std::string(label.size() < 16 ? 16 - label.size() : 1, ' ');
  for (int k : ks) out << format_cell(curve, k) << " ";
  out << "\n";
}

}  // namespace

std::string report_table(const std::vector<EvalReport>& reports,
                         const std::vector<int>& k_values) {
  std::ostringstream out;
  out << std::string(18, ' ') << std::string(16, ' ');
  for (int k : k_values) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%7s", ("AR@" + std::to_string(k)).c_str());
    out << buf << " ";
  }
  out << "\n";
  for (const auto& r : reports) {
    if (r.macro_all) table_row(out, r.model, "all", &*r.macro_all, k_values);
    if (r.macro_seen) table_row(out, r.model, "seen", &*r.macro_seen, k_values);
    if (r.macro_unseen) {
      table_row(out, r.model, "unseen", &*r.macro_unseen, k_values);
    }
    if (r.harmonic) table_row(out, r.model, "harmonic", &*r.harmonic, k_values);
    for (const auto& [name, curve] : r.per_class) {
      table_row(out, r.model, "class:" + name, &curve, k_values);
    }
    for (const auto& [name, curve] : r.per_size) {
      table_row(out, r.model, "size:" + name, &curve, k_values);
    }
  }
  return out.str();
}

// ---------------------------------------------------------------------------
// SVG plots

namespace {

constexpr int kPlotW = 640, kPlotH = 420;
constexpr int kMarginL = 56, kMarginR = 150, kMarginT = 28, kMarginB = 44;

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e",
                          "#9467bd", "#8c564b", "#17becf", "#7f7f7f"};

double x_of(double k, double k_min, double k_max) {
  double t = (std::log10(k) - std::log10(k_min)) /
             std::max(1e-12, std::log10(k_max) - std::log10(k_min));
  return kMarginL + t * (kPlotW - kMarginL - kMarginR);
}

double y_of(double recall) {
  return kMarginT + (1.0 - recall) * (kPlotH - kMarginT - kMarginB);
}

void write_panel(const std::string& path, const std::string& title,
                 const std::vector<std::pair<std::string, const ARCurve*>>& curves) {
  double k_min = 1e18, k_max = 1;
  for (const auto& [name, c] : curves) {
    for (int k : c->k_values) {
      k_min = std::min(k_min, static_cast<double>(k));
      k_max = std::max(k_max, static_cast<double>(k));
    }
  }
  if (k_min > k_max) {
    k_min = 1;
    k_max = 10;
  }

  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kPlotW
      << "\" height=\"" << kPlotH << "\">\n";
  svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  svg << "<text x=\"" << kPlotW / 2 << "\" y=\"18\" text-anchor=\"middle\" "
      << "font-size=\"14\" font-family=\"sans-serif\">" << title << "</text>\n";

  // Axes and y grid.
  double x0 = kMarginL, x1 = kPlotW - kMarginR;
  double y0 = y_of(0.0), y1 = y_of(1.0);
  for (int i = 0; i <= 5; ++i) {
    double r = i / 5.0;
    double y = y_of(r);
    svg << "<line x1=\"" << x0 << "\" y1=\"" << y << "\" x2=\"" << x1
        << "\" y2=\"" << y << "\" stroke=\"#dddddd\"/>\n";
    svg << "<text x=\"" << x0 - 6 << "\" y=\"" << y + 4
        << "\" text-anchor=\"end\" font-size=\"11\" font-family=\"sans-serif\">"
        << i * 20 / 100.0 << "</text>\n";
  }
  for (const auto& [name, c] : curves) {
    for (int k : c->k_values) {
      double x = x_of(k, k_min, k_max);
      svg << "<line x1=\"" << x << "\" y1=\"" << y0 << "\" x2=\"" << x
          << "\" y2=\"" << y0 + 4 << "\" stroke=\"#555555\"/>\n";
    }
    break;  // ticks from the first curve's grid only
  }
  if (!curves.empty()) {
    for (int k : curves.front().second->k_values) {
      svg << "<text x=\"" << x_of(k, k_min, k_max) << "\" y=\"" << y0 + 16
          << "\" text-anchor=\"middle\" font-size=\"11\" "
          << "font-family=\"sans-serif\">" << k << "</text>\n";
    }
  }
  svg << "<line x1=\"" << x0 << "\" y1=\"" << y0 << "\" x2=\"" << x1
      << "\" y2=\"" << y0 << "\" stroke=\"black\"/>\n";
  svg << "<line x1=\"" << x0 << "\" y1=\"" << y0 << "\" x2=\"" << x0
      << "\" y2=\"" << y1 << "\" stroke=\"black\"/>\n";
  svg << "<text x=\"" << (x0 + x1) / 2 << "\" y=\"" << kPlotH - 8
      << "\" text-anchor=\"middle\" font-size=\"12\" "
      << "font-family=\"sans-serif\">k (log scale)</text>\n";

  // Curves plus legend.
  int ci = 0;
  for (const auto& [name, c] : curves) {
    const char* color = kPalette[ci % 8];
    svg << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
    for (size_t i = 0; i < c->k_values.size(); ++i) {
      svg << x_of(c->k_values[i], k_min, k_max) << "," << y_of(c->recalls[i]) << " ";
    }
    svg << "\"/>\n";
    for (size_t i = 0; i < c->k_values.size(); ++i) {
      svg << "<circle cx=\"" << x_of(c->k_values[i], k_min, k_max) << "\" cy=\""
          << y_of(c->recalls[i]) << "\" r=\"3\" fill=\"" << color << "\"/>\n";
    }
    double ly = kMarginT + 14 + 16 * ci;
    svg << "<line x1=\"" << x1 + 8 << "\" y1=\"" << ly - 4 << "\" x2=\"" << x1 + 28
        << "\" y2=\"" << ly - 4 << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
    svg << "<text x=\"" << x1 + 32 << "\" y=\"" << ly
        << "\" font-size=\"11\" font-family=\"sans-serif\">" << name << "</text>\n";
    ++ci;
  }
  svg << "</svg>\n";

  std::ofstream out(path);
  if (!out) throw DataError("cannot write plot " + path);
  out << svg.str();
}

}  // namespace

std::vector<std::string> write_report_plots(const std::vector<EvalReport>& reports,
                                            const std::string& dir) {
  std::filesystem::create_directories(dir);
  std::vector<std::string> written;

  auto emit = [&](const std::string& file, const std::string& title,
                  auto pick) {
    std::vector<std::pair<std::string, const ARCurve*>> curves;
    for (const auto& r : reports) {
      const ARCurve* c = pick(r);
      if (c) curves.emplace_back(r.model, c);
    }
    if (curves.empty()) return;
    std::string path = dir + "/" + file;
    write_panel(path, title, curves);
    written.push_back(path);
  };

  emit("ar_all.svg", "AR", [](const EvalReport& r) {
    return r.macro_all ? &*r.macro_all : nullptr;
  });
  emit("ar_seen.svg", "AR-Seen", [](const EvalReport& r) {
    return r.macro_seen ? &*r.macro_seen : nullptr;
  });
  emit("ar_unseen.svg", "AR-Unseen", [](const EvalReport& r) {
    return r.macro_unseen ? &*r.macro_unseen : nullptr;
  });
  emit("ar_hm.svg", "AR-HM", [](const EvalReport& r) {
    return r.harmonic ? &*r.harmonic : nullptr;
  });

  std::set<std::string> class_names, size_names;
  for (const auto& r : reports) {
    for (const auto& [name, c] : r.per_class) class_names.insert(name);
    for (const auto& [name, c] : r.per_size) size_names.insert(name);
  }
  for (const auto& name : class_names) {
    emit("ar_class_" + name + ".svg", "AR (" + name + ")",
         [&](const EvalReport& r) -> const ARCurve* {
           auto it = r.per_class.find(name);
           return it == r.per_class.end() ? nullptr : &it->second;
         });
  }
  for (const auto& name : size_names) {
    emit("ar_size_" + name + ".svg", "AR (" + name + ")",
         [&](const EvalReport& r) -> const ARCurve* {
           auto it = r.per_size.find(name);
           return it == r.per_size.end() ? nullptr : &it->second;
         });
  }
  return written;
}

}  // namespace cadet
