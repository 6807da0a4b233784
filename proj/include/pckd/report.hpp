#pragma once

// Tables and CSV exports built from finished runs. All CSV output is
// comma-separated with a header row and six fractional digits.

#include "pckd/data.hpp"
#include "pckd/runlog.hpp"

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

namespace pckd {

/// File name of the run log inside a run directory.
inline constexpr const char* kRunLogFile = "run.ndjson";

struct RunRecord {
  std::string label;  // header "label", else the directory name
  std::filesystem::path dir;
  RunLog log;
};

/// Loads every run directory. All missing logs are reported together in one
/// IngestionError before anything is parsed.
std::vector<RunRecord> load_runs(const std::vector<std::filesystem::path>& dirs);

struct AccuracyRow {
  std::string label;
  double top1 = 0;
  double top5 = 0;
};

AccuracyRow accuracy_row(const RunRecord& run);

/// Signed difference to the baseline as "(↑1.23)", "(↓0.40)" or "(=)".
std::string delta_tag(double value, double baseline);

/// Markdown table; every row but the baseline carries a delta on top-1.
std::string accuracy_table_markdown(const std::vector<AccuracyRow>& rows, std::size_t baseline = 0);

/// `label,top1,top5,delta_top1`.
void write_accuracy_csv(std::ostream& out, const std::vector<AccuracyRow>& rows, std::size_t baseline = 0);

struct SweepPoint {
  std::string param;
  double value = 0;
  double best_val_top1 = -1;
  double test_top1 = -1;
};

/// Reads the sweep coordinates a run recorded in its header ("sweep_param",
/// "sweep_value"); runs without them are skipped.
std::vector<SweepPoint> sweep_points(const std::vector<RunRecord>& runs);

/// `param,value,best_val_top1,test_top1`, sorted by (param, value).
void write_sweep_csv(std::ostream& out, std::vector<SweepPoint> points);

/// Penultimate features for the samples whose label is in `classes`
/// (all samples when empty), one row per sample.
struct FeatureExport {
  RowMatrix<double> features;
  LabelBatch labels;
};

template <typename S>
FeatureExport export_features(Backbone<S>& model, const Dataset& data, const std::vector<int>& classes = {});

/// `f0,...,f{K-1},label`.
void write_feature_csv(std::ostream& out, const FeatureExport& features);

/// Six fractional digits, the fixed CSV float format.
std::string csv_number(double v);

}  // namespace pckd
