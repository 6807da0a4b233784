#pragma once

// Newline-delimited JSON run logs: one header, one record per optimizer
// step, one per epoch and a closing summary.

#include "pckd/preview.hpp"

#include <json.hpp>

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

namespace pckd {

inline constexpr int kRunLogVersion = 1;

/// Loss breakdown for one optimizer step. Term fields are batch means of the
/// unweighted terms; `contrib_*` are each term's share of `total`.
struct StepRecord {
  long step = 0;
  int epoch = 0;
  double lr = 0;
  double ce = 0, kd = 0, fa = 0, ca = 0, cc_t = 0, cc_s = 0;
  double contrib_ce = 0, contrib_kd = 0, contrib_fa = 0, contrib_ca = 0, contrib_cc = 0;
  double total = 0;
  double mean_v = 1;

  /// Sum of the contributions, in the order the total is accumulated.
  double recomposed_total() const { return contrib_ce + contrib_kd + contrib_fa + contrib_cc + contrib_ca; }
};

struct EpochRecord {
  int epoch = 0;
  WeightPolicy policy = WeightPolicy::none;
  double lambda = 1;
  double mean_v = 1;
  double frac_easy = 1;
  double lr = 0;
  double train_loss = 0;
  double train_top1 = 0;
  double val_top1 = -1;  // -1 when no validation split
  double wall_seconds = 0;
};

struct RunSummary {
  double best_val_top1 = -1;
  int best_epoch = -1;
  double final_val_top1 = -1;
  double test_top1 = -1;
  double test_top5 = -1;
  long steps = 0;
  double wall_seconds = 0;
};

void to_json(nlohmann::json& j, const StepRecord& r);
void from_json(const nlohmann::json& j, StepRecord& r);
void to_json(nlohmann::json& j, const EpochRecord& r);
void from_json(const nlohmann::json& j, EpochRecord& r);
void to_json(nlohmann::json& j, const RunSummary& r);
void from_json(const nlohmann::json& j, RunSummary& r);

/// Collects records in memory and mirrors them to an optional stream.
class RunLog {
 public:
  explicit RunLog(std::ostream* sink = nullptr) : sink_(sink) {}

  void header(const nlohmann::json& info);
  void step(const StepRecord& r);
  void epoch(const EpochRecord& r);
  void summary(const RunSummary& s);

  const nlohmann::json& header_info() const { return header_; }
  const std::vector<StepRecord>& steps() const { return steps_; }
  const std::vector<EpochRecord>& epochs() const { return epochs_; }
  const RunSummary& run_summary() const { return summary_; }

  /// Per-epoch weight statistics, the input of mean_weight_trace.
  std::vector<EpochWeightStats> weight_stats() const;

 private:
  void emit(const nlohmann::json& j);

  std::ostream* sink_;
  nlohmann::json header_ = nlohmann::json::object();
  std::vector<StepRecord> steps_;
  std::vector<EpochRecord> epochs_;
  RunSummary summary_;
};

/// Parses a log written by RunLog. Throws IngestionError naming the file and
/// line on malformed input or an unknown schema version.
RunLog read_run_log(const std::filesystem::path& path);

}  // namespace pckd
