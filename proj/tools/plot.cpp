#include "plot.hpp"

#include "forgetlab/errors.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>

namespace forgetlab::cli {

namespace {

using json = nlohmann::ordered_json;

constexpr const char* kKnown[] = {"train_loss",   "val_acc",      "head_acc",    "tail_acc",   "head_iw_pref",
                                  "tail_iw_pref", "head_ic_acc",  "tail_ic_acc", "unseen_acc", "probe_acc"};
constexpr const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
                                   "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};

struct Point {
  double step;
  double value;
};

/// series[metric][run] -> points
using Series = std::map<std::string, std::vector<std::vector<Point>>>;

std::string fmt(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", x);
  return buf;
}

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

void write_svg(const std::filesystem::path& path, const std::string& metric,
               const std::vector<std::vector<Point>>& runs, const std::vector<PlotInput>& inputs) {
  constexpr double W = 640, H = 400, L = 60, R = 160, T = 30, B = 40;
  double x0 = INFINITY, x1 = -INFINITY, y0 = INFINITY, y1 = -INFINITY;
  for (const auto& run : runs)
    for (const Point& p : run) {
      x0 = std::min(x0, p.step);
      x1 = std::max(x1, p.step);
      y0 = std::min(y0, p.value);
      y1 = std::max(y1, p.value);
    }
  if (metric != "train_loss") {
    y0 = std::min(y0, 0.0);
    y1 = std::max(y1, 1.0);
  }
  if (x1 <= x0) x1 = x0 + 1;
  if (y1 <= y0) y1 = y0 + 1;
  auto sx = [&](double x) { return L + (x - x0) / (x1 - x0) * (W - L - R); };
  auto sy = [&](double y) { return H - B - (y - y0) / (y1 - y0) * (H - T - B); };

  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  out << "<text x=\"" << L << "\" y=\"18\" font-size=\"13\">" << escape(metric) << "</text>\n";
  out << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  out << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double xv = x0 + (x1 - x0) * i / 4.0;
    const double yv = y0 + (y1 - y0) * i / 4.0;
    out << "<text x=\"" << sx(xv) << "\" y=\"" << H - B + 16 << "\" text-anchor=\"middle\">" << fmt(xv) << "</text>\n";
    out << "<text x=\"" << L - 6 << "\" y=\"" << sy(yv) + 4 << "\" text-anchor=\"end\">" << fmt(yv) << "</text>\n";
    out << "<line x1=\"" << L << "\" y1=\"" << sy(yv) << "\" x2=\"" << W - R << "\" y2=\"" << sy(yv)
        << "\" stroke=\"#ddd\"/>\n";
  }
  out << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 6 << "\" text-anchor=\"middle\">step</text>\n";
  for (std::size_t r = 0; r < runs.size(); ++r) {
    if (runs[r].empty()) continue;
    const char* color = kColors[r % std::size(kColors)];
    out << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
    for (const Point& p : runs[r]) out << fmt(sx(p.step)) << ',' << fmt(sy(p.value)) << ' ';
    out << "\"/>\n";
    const double ly = T + 14.0 * static_cast<double>(r);
    out << "<line x1=\"" << W - R + 10 << "\" y1=\"" << ly << "\" x2=\"" << W - R + 30 << "\" y2=\"" << ly
        << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
    out << "<text x=\"" << W - R + 34 << "\" y=\"" << ly + 4 << "\">" << escape(inputs[r].label) << "</text>\n";
  }
  out << "</svg>\n";
}

}  // namespace

PlotSummary write_plots(const std::vector<PlotInput>& inputs, const std::filesystem::path& out_dir) {
  PlotSummary summary;
  Series series;
  std::vector<std::string> order;
  for (std::size_t r = 0; r < inputs.size(); ++r) {
    std::ifstream in(inputs[r].path);
    if (!in) throw Error("cannot open metrics file " + inputs[r].path.string());
    std::string line;
    while (std::getline(in, line)) {
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      const json j = json::parse(line, nullptr, false);
      if (j.is_discarded() || !j.is_object() || !j.contains("step") || !j["step"].is_number()) {
        ++summary.skipped;
        continue;
      }
      ++summary.records;
      const double step = j["step"].get<double>();
      for (const auto& [key, value] : j.items()) {
        if (key == "step" || !value.is_number()) continue;
        auto& runs = series[key];
        if (runs.empty()) {
          runs.resize(inputs.size());
          order.push_back(key);
        }
        runs[r].push_back({step, value.get<double>()});
      }
    }
  }
  if (summary.records == 0) return summary;

  // known metrics first, in record order; anything else after
  std::vector<std::string> metrics;
  for (const char* k : kKnown)
    if (series.contains(k)) metrics.emplace_back(k);
  for (const auto& k : order)
    if (std::find(metrics.begin(), metrics.end(), k) == metrics.end()) metrics.push_back(k);

  std::filesystem::create_directories(out_dir);
  for (const auto& metric : metrics) {
    const auto& runs = series.at(metric);
    std::ofstream csv(out_dir / (metric + ".csv"), std::ios::trunc);
    if (!csv) throw Error("cannot write " + (out_dir / (metric + ".csv")).string());
    csv.precision(17);
    csv << "step,value,run_label\n";
    for (std::size_t r = 0; r < runs.size(); ++r)
      for (const Point& p : runs[r]) csv << static_cast<long long>(p.step) << ',' << p.value << ',' << inputs[r].label << '\n';
    write_svg(out_dir / (metric + ".svg"), metric, runs, inputs);
  }
  summary.metrics = metrics;
  return summary;
}

}  // namespace forgetlab::cli
