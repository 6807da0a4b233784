#include "pckd/preview.hpp"

#include <spdlog/spdlog.h>

#include <cmath>
#include <cstdio>
#include <ostream>

namespace pckd {

std::string_view policy_name(WeightPolicy p) {
  switch (p) {
    case WeightPolicy::preview: return "preview";
    case WeightPolicy::curriculum: return "curriculum";
    case WeightPolicy::focal: return "focal";
    case WeightPolicy::none: return "none";
  }
  return "?";
}

std::optional<WeightPolicy> parse_policy(std::string_view name) {
  for (auto p : {WeightPolicy::preview, WeightPolicy::curriculum, WeightPolicy::focal, WeightPolicy::none})
    if (policy_name(p) == name) return p;
  return std::nullopt;
}

void SchedulerConfig::validate() const {
  if (!std::isfinite(epsilon) || epsilon <= 0.0) throw ContractViolation("epsilon must be finite and > 0");
  if (!std::isfinite(focal_gamma) || focal_gamma < 0.0) throw ContractViolation("focal_gamma must be >= 0");
}

Eigen::Index SampleWeights::easy_count() const { return (gamma.array() <= lambda).count(); }

Eigen::VectorXd difficulty_scores(const Eigen::VectorXd& per_sample_ce) {
  require(per_sample_ce.size() >= 1, "difficulty_scores: empty batch");
  require_finite(per_sample_ce, "difficulty_scores CE");
  require((per_sample_ce.array() >= 0.0).all(), "difficulty_scores: CE values must be >= 0");
  const double mean = per_sample_ce.mean();
  if (!(mean > 0.0)) throw DegenerateBatch("difficulty_scores: batch mean CE is zero");
  return per_sample_ce / mean;
}

double threshold(int epoch, double epsilon) {
  require(epoch >= 0, "threshold: epoch must be >= 0");
  require(epsilon > 0.0, "threshold: epsilon must be > 0");
  const double lambda = std::pow(1.0 + epsilon, epoch);
  if (!std::isfinite(lambda) || lambda > kThresholdCap) {
    spdlog::warn("threshold (1+{})^{} overflows, saturating at {}", epsilon, epoch, kThresholdCap);
    return kThresholdCap;
  }
  return lambda;
}

Eigen::VectorXd preview_weights(const Eigen::VectorXd& gamma, double lambda) {
  require(lambda >= 1.0, "preview_weights: lambda must be >= 1");
  require_finite(gamma, "preview_weights gamma");
  return (gamma.array() <= lambda).select(Eigen::VectorXd::Ones(gamma.size()), (-gamma.array().square()).exp());
}

Eigen::VectorXd curriculum_weights(const Eigen::VectorXd& gamma, double lambda) {
  require(lambda >= 1.0, "curriculum_weights: lambda must be >= 1");
  require_finite(gamma, "curriculum_weights gamma");
  return (gamma.array() <= lambda).cast<double>();
}

Eigen::VectorXd focal_weights(const Eigen::VectorXd& true_class_prob, double focal_gamma) {
  require_finite(true_class_prob, "focal_weights probabilities");
  require((true_class_prob.array() >= 0.0).all() && (true_class_prob.array() <= 1.0).all(),
          "focal_weights: probabilities must lie in [0, 1]");
  return (1.0 - true_class_prob.array()).pow(focal_gamma);
}

int all_easy_epoch(const Eigen::VectorXd& gamma, double epsilon) {
  const double hi = gamma.maxCoeff();
  if (hi <= 1.0) return 0;
  int t = static_cast<int>(std::ceil(std::log(hi) / std::log1p(epsilon)));
  // Guard the ceil against rounding in either direction.
  while (t > 0 && threshold(t - 1, epsilon) >= hi) --t;
  while (threshold(t, epsilon) < hi) ++t;
  return t;
}

SampleWeights compute_sample_weights(const SchedulerConfig& config, int epoch, const Eigen::VectorXd& per_sample_ce,
                                     const Eigen::VectorXd& true_class_prob) {
  SampleWeights w;
  w.epoch = epoch;
  w.lambda = threshold(epoch, config.epsilon);
  try {
    w.gamma = difficulty_scores(per_sample_ce);
  } catch (const DegenerateBatch&) {
    spdlog::warn("all-zero CE batch at epoch {}; treating every sample as easy", epoch);
    w.gamma = Eigen::VectorXd::Ones(per_sample_ce.size());
    w.degenerate = true;
  }
  switch (config.policy) {
    case WeightPolicy::preview: w.v = preview_weights(w.gamma, w.lambda); break;
    case WeightPolicy::curriculum: w.v = curriculum_weights(w.gamma, w.lambda); break;
    case WeightPolicy::focal: w.v = focal_weights(true_class_prob, config.focal_gamma); break;
    case WeightPolicy::none: w.v = Eigen::VectorXd::Ones(per_sample_ce.size()); break;
  }
  return w;
}

void EpochWeightStats::add(const SampleWeights& w) {
  sum_v += w.v.sum();
  easy += static_cast<double>(w.easy_count());
  count += static_cast<long>(w.size());
}

std::vector<WeightTracePoint> mean_weight_trace(const std::vector<EpochWeightStats>& log) {
  std::vector<WeightTracePoint> out;
  out.reserve(log.size());
  for (const auto& e : log) out.push_back({e.epoch, e.policy, e.mean_v(), e.frac_easy()});
  return out;
}

void write_weight_trace_csv(std::ostream& out, const std::vector<WeightTracePoint>& trace) {
  out << "epoch,policy,mean_weight,frac_easy\n";
  char buf[128];
  for (const auto& p : trace) {
    std::snprintf(buf, sizeof buf, "%d,%s,%.6f,%.6f\n", p.epoch, policy_name(p.policy).data(), p.mean_weight,
                  p.frac_easy);
    out << buf;
  }
}

}  // namespace pckd
