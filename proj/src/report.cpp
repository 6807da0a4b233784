#include "pckd/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ostream>
#include <set>

namespace pckd {

std::string csv_number(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

std::vector<RunRecord> load_runs(const std::vector<std::filesystem::path>& dirs) {
  std::vector<std::string> missing;
  for (const auto& d : dirs)
    if (!std::filesystem::is_regular_file(d / kRunLogFile)) missing.push_back((d / kRunLogFile).string());
  if (!missing.empty()) {
    std::string msg = "missing run logs:";
    for (const auto& m : missing) msg += "\n  " + m;
    throw IngestionError(msg);
  }
  std::vector<RunRecord> runs;
  for (const auto& d : dirs) {
    RunRecord r;
    r.dir = d;
    r.log = read_run_log(d / kRunLogFile);
    const auto& h = r.log.header_info();
    r.label = h.contains("label") ? h.at("label").get<std::string>() : d.filename().string();
    if (r.label.empty()) r.label = d.parent_path().filename().string();
    runs.push_back(std::move(r));
  }
  return runs;
}

AccuracyRow accuracy_row(const RunRecord& run) {
  const auto& s = run.log.run_summary();
  return {run.label, s.test_top1, s.test_top5};
}

std::string delta_tag(double value, double baseline) {
  const double d = value - baseline;
  char buf[32];
  if (std::abs(d) < 0.005) return "(=)";
  std::snprintf(buf, sizeof buf, "(%s%.2f)", d > 0 ? "↑" : "↓", std::abs(d));
  return buf;
}

std::string accuracy_table_markdown(const std::vector<AccuracyRow>& rows, std::size_t baseline) {
  require(rows.empty() || baseline < rows.size(), "accuracy table: baseline index out of range");
  std::string out = "| Run | Top-1 | Top-5 | Δ Top-1 |\n|---|---:|---:|---:|\n";
  char buf[64];
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out += "| " + rows[i].label + " | ";
    std::snprintf(buf, sizeof buf, "%.2f | %.2f | ", rows[i].top1, rows[i].top5);
    out += buf;
    out += (i == baseline ? std::string("baseline") : delta_tag(rows[i].top1, rows[baseline].top1)) + " |\n";
  }
  return out;
}

void write_accuracy_csv(std::ostream& out, const std::vector<AccuracyRow>& rows, std::size_t baseline) {
  require(rows.empty() || baseline < rows.size(), "accuracy csv: baseline index out of range");
  out << "label,top1,top5,delta_top1\n";
  for (const auto& r : rows)
    out << r.label << ',' << csv_number(r.top1) << ',' << csv_number(r.top5) << ','
        << csv_number(r.top1 - rows[baseline].top1) << '\n';
}

std::vector<SweepPoint> sweep_points(const std::vector<RunRecord>& runs) {
  std::vector<SweepPoint> out;
  for (const auto& r : runs) {
    const auto& h = r.log.header_info();
    if (!h.contains("sweep_param") || !h.contains("sweep_value")) continue;
    SweepPoint p;
    p.param = h.at("sweep_param").get<std::string>();
    p.value = h.at("sweep_value").get<double>();
    p.best_val_top1 = r.log.run_summary().best_val_top1;
    p.test_top1 = r.log.run_summary().test_top1;
    out.push_back(p);
  }
  return out;
}

void write_sweep_csv(std::ostream& out, std::vector<SweepPoint> points) {
  std::stable_sort(points.begin(), points.end(), [](const SweepPoint& a, const SweepPoint& b) {
    return a.param != b.param ? a.param < b.param : a.value < b.value;
  });
  out << "param,value,best_val_top1,test_top1\n";
  for (const auto& p : points)
    out << p.param << ',' << csv_number(p.value) << ',' << csv_number(p.best_val_top1) << ','
        << csv_number(p.test_top1) << '\n';
}

template <typename S>
FeatureExport export_features(Backbone<S>& model, const Dataset& data, const std::vector<int>& classes) {
  const std::set<int> keep(classes.begin(), classes.end());
  for (int c : keep) require(c >= 0 && c < data.num_classes, "export_features: class " + std::to_string(c) + " out of range");
  std::vector<int> idx;
  for (int i = 0; i < data.size(); ++i)
    if (keep.empty() || keep.count(data.samples.labels[std::size_t(i)])) idx.push_back(i);
  const Dataset sub = subset(data, idx);
  FeatureExport out;
  out.features = extract_features(model, sub);
  out.labels = sub.samples.labels;
  return out;
}

template FeatureExport export_features<float>(Backbone<float>&, const Dataset&, const std::vector<int>&);
template FeatureExport export_features<double>(Backbone<double>&, const Dataset&, const std::vector<int>&);

void write_feature_csv(std::ostream& out, const FeatureExport& f) {
  require(f.features.rows() == Index(f.labels.size()), "write_feature_csv: feature/label count mismatch");
  for (Index k = 0; k < f.features.cols(); ++k) out << 'f' << k << ',';
  out << "label\n";
  for (Index r = 0; r < f.features.rows(); ++r) {
    for (Index k = 0; k < f.features.cols(); ++k) out << csv_number(f.features(r, k)) << ',';
    out << f.labels[std::size_t(r)] << '\n';
  }
}

}  // namespace pckd
