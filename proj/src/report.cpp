#include <algorithm>
#include <cmath>
#include <cstdio>
#include <json.hpp>
#include <map>
#include <sstream>

#include "stpc/analysis.hpp"

namespace stpc {

namespace {

using nlohmann::ordered_json;

ordered_json metrics_json(const MetricsReport& m) {
  ordered_json j;
  j["accuracy"] = m.accuracy;
  j["macro_f1"] = m.macro_f1;
  j["weighted_f1"] = m.weighted_f1;
  j["precision"] = m.precision;
  j["recall"] = m.recall;
  j["f1"] = m.f1;
  j["support"] = m.support;
  j["confusion"] = m.confusion;
  return j;
}

// Tasks in first-seen order, each with its cells.
std::vector<std::pair<std::string, std::vector<const ProbeCell*>>> by_task(const SuiteReport& r) {
  std::vector<std::pair<std::string, std::vector<const ProbeCell*>>> out;
  for (const auto& c : r.cells) {
    auto it = std::find_if(out.begin(), out.end(), [&](const auto& p) { return p.first == c.task; });
    if (it == out.end()) {
      out.push_back({c.task, {}});
      it = out.end() - 1;
    }
    it->second.push_back(&c);
  }
  return out;
}

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

std::string report_json(const SuiteReport& report) {
  ordered_json root;
  root["columns"] = {"accuracy", "macro_f1", "weighted_f1"};
  ordered_json tasks = ordered_json::array();
  for (const auto& [task, cells] : by_task(report)) {
    ordered_json t;
    t["task"] = task;
    t["num_classes"] = cells.front()->num_classes;
    t["n_train"] = cells.front()->n_train;
    t["n_test"] = cells.front()->n_test;
    ordered_json preds = ordered_json::object();
    for (const auto* c : cells) {
      ordered_json p = metrics_json(c->probe);
      p["pca_explained_variance"] = c->pca.explained_variance;
      p["pca_explained_ratio"] = c->pca.explained_ratio();
      preds[c->tag] = p;
    }
    preds["naive"] = metrics_json(cells.front()->naive);
    t["predictors"] = preds;
    tasks.push_back(t);
  }
  root["tasks"] = tasks;
  return root.dump(2) + "\n";
}

std::string report_csv(const SuiteReport& report) {
  std::string s = "task,predictor,accuracy,macro_f1,weighted_f1\n";
  auto row = [&](const std::string& task, const std::string& pred, const MetricsReport& m) {
    s += task + ',' + pred + ',' + num(m.accuracy) + ',' + num(m.macro_f1) + ',' + num(m.weighted_f1) + '\n';
  };
  for (const auto& [task, cells] : by_task(report)) {
    for (const auto* c : cells) row(task, c->tag, c->probe);
    row(task, "naive", cells.front()->naive);
  }
  return s;
}

std::string pca_csv(const ProbeCell& cell) {
  std::string s = "pca1,pca2,label\n";
  for (std::size_t r = 0; r < cell.projection.rows; ++r)
    s += num(cell.projection(r, 0)) + ',' + num(cell.projection(r, 1)) + ',' + std::to_string(cell.labels[r]) + '\n';
  return s;
}

std::string pca_svg(const ProbeCell& cell) {
  static constexpr const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};
  constexpr double W = 480, H = 480, pad = 40;
  double x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  if (cell.projection.rows > 0) {
    x0 = x1 = cell.projection(0, 0);
    y0 = y1 = cell.projection(0, 1);
    for (std::size_t r = 0; r < cell.projection.rows; ++r) {
      x0 = std::min(x0, cell.projection(r, 0));
      x1 = std::max(x1, cell.projection(r, 0));
      y0 = std::min(y0, cell.projection(r, 1));
      y1 = std::max(y1, cell.projection(r, 1));
    }
  }
  const double sx = (W - 2 * pad) / std::max(x1 - x0, 1e-12);
  const double sy = (H - 2 * pad) / std::max(y1 - y0, 1e-12);
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n"
     << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
     << "<text x=\"" << W / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">" << cell.task << " ("
     << cell.tag << ")</text>\n"
     << "<text x=\"" << W / 2 << "\" y=\"" << H - 8 << "\" text-anchor=\"middle\" font-size=\"12\">PCA1</text>\n"
     << "<text x=\"12\" y=\"" << H / 2 << "\" font-size=\"12\" transform=\"rotate(-90 12 " << H / 2
     << ")\">PCA2</text>\n";
  os.precision(6);
  for (std::size_t r = 0; r < cell.projection.rows; ++r) {
    const double px = pad + (cell.projection(r, 0) - x0) * sx;
    const double py = H - pad - (cell.projection(r, 1) - y0) * sy;
    os << "<circle cx=\"" << px << "\" cy=\"" << py << "\" r=\"2\" fill-opacity=\"0.6\" fill=\""
       << kPalette[static_cast<std::size_t>(cell.labels[r]) % 6] << "\"/>\n";
  }
  for (int k = 0; k < cell.num_classes; ++k)
    os << "<circle cx=\"" << W - pad << "\" cy=\"" << pad + 14 * k << "\" r=\"4\" fill=\"" << kPalette[k % 6]
       << "\"/><text x=\"" << W - pad + 8 << "\" y=\"" << pad + 14 * k + 4 << "\" font-size=\"10\">" << k
       << "</text>\n";
  os << "</svg>\n";
  return os.str();
}

}  // namespace stpc
