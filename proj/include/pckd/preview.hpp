#pragma once

// Per-sample learning weights: difficulty scores, the growing easy/hard
// threshold, the preview weighting and the curriculum/focal baselines.

#include "pckd/types.hpp"

#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace pckd {

enum class WeightPolicy { preview, curriculum, focal, none };

std::string_view policy_name(WeightPolicy p);
std::optional<WeightPolicy> parse_policy(std::string_view name);

struct SchedulerConfig {
  double epsilon = 0.05;
  WeightPolicy policy = WeightPolicy::preview;
  double focal_gamma = 2.0;

  void validate() const;
  bool operator==(const SchedulerConfig&) const = default;
};

struct SampleWeights {
  Eigen::VectorXd gamma;
  Eigen::VectorXd v;
  double lambda = 1.0;
  int epoch = 0;
  bool degenerate = false;  // all-zero CE batch, gamma forced to 1

  Eigen::Index size() const { return v.size(); }
  /// Number of samples with gamma <= lambda.
  Eigen::Index easy_count() const;
};

/// Raised when every per-sample CE in the batch is zero.
class DegenerateBatch : public NumericError {
 public:
  using NumericError::NumericError;
};

/// Largest threshold value returned; exceeding it logs a warning.
inline constexpr double kThresholdCap = 1e100;

/// gamma_i = CE_i / mean(CE). Input is a detached copy of the batch CE.
Eigen::VectorXd difficulty_scores(const Eigen::VectorXd& per_sample_ce);

/// lambda = (1 + epsilon)^epoch, saturating at kThresholdCap.
double threshold(int epoch, double epsilon);

/// 1 where gamma <= lambda, exp(-gamma^2) otherwise.
Eigen::VectorXd preview_weights(const Eigen::VectorXd& gamma, double lambda);

/// 1 where gamma <= lambda, 0 otherwise (hard samples filtered out).
Eigen::VectorXd curriculum_weights(const Eigen::VectorXd& gamma, double lambda);

/// (1 - p)^focal_gamma, p the probability of the true class.
Eigen::VectorXd focal_weights(const Eigen::VectorXd& true_class_prob, double focal_gamma);

/// Epoch at which every sample of a fixed-difficulty batch becomes easy:
/// the smallest t with (1+epsilon)^t >= max gamma.
int all_easy_epoch(const Eigen::VectorXd& gamma, double epsilon);

/// Full weighting step for one batch. `true_class_prob` is only read by the
/// focal policy. Degenerate batches fall back to gamma = 1 with a warning.
SampleWeights compute_sample_weights(const SchedulerConfig& config, int epoch, const Eigen::VectorXd& per_sample_ce,
                                     const Eigen::VectorXd& true_class_prob);

/// Running per-epoch weight statistics as stored in a run log.
struct EpochWeightStats {
  int epoch = 0;
  WeightPolicy policy = WeightPolicy::preview;
  double sum_v = 0;
  double easy = 0;
  long count = 0;

  void add(const SampleWeights& w);
  double mean_v() const { return count ? sum_v / static_cast<double>(count) : 0.0; }
  double frac_easy() const { return count ? easy / static_cast<double>(count) : 0.0; }
};

struct WeightTracePoint {
  int epoch = 0;
  WeightPolicy policy = WeightPolicy::preview;
  double mean_weight = 0;
  double frac_easy = 0;
};

std::vector<WeightTracePoint> mean_weight_trace(const std::vector<EpochWeightStats>& log);

/// CSV with header `epoch,policy,mean_weight,frac_easy`, 6 fractional digits.
void write_weight_trace_csv(std::ostream& out, const std::vector<WeightTracePoint>& trace);

}  // namespace pckd
