#pragma once

// Teacher pretraining, the distillation loop and evaluation.

#include "pckd/data.hpp"
#include "pckd/losses.hpp"
#include "pckd/models.hpp"
#include "pckd/optim.hpp"
#include "pckd/preview.hpp"
#include "pckd/runlog.hpp"

#include <filesystem>
#include <optional>

namespace pckd {

struct TrainConfig {
  LossWeights loss;
  SchedulerConfig scheduler;
  SgdConfig sgd;
  std::vector<int> lr_milestones;
  double lr_decay = 0.1;
  int epochs = 30;
  int batch_size = 64;
  std::uint64_t seed = 0;
  TermSet preview_applies_to{LossTerm::kd, LossTerm::cc};
  bool rotations = true;        // four rotated copies per sample
  bool cosine_contrast = true;  // cosine similarity in the contrast term; raw dot product otherwise
  double flip_prob = 0.5;
  int workers = 0;
  int head_hidden = 0;          // projection head hidden width; 0 = 2 x teacher feature dim
  bool cache_teacher = true;    // reuse teacher outputs per (sample, flip, rotation)

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

struct Accuracy {
  double top1 = 0;
  double top5 = 0;
  long count = 0;
};

/// Eval-mode top-1 / top-5 in percent, normalization only.
template <typename S>
Accuracy evaluate(Backbone<S>& model, const Dataset& data, int batch_size = 256);

struct TrainResult {
  Checkpoint final_checkpoint;
  Checkpoint best_checkpoint;  // best validation top-1; the final one without a val split
  RunSummary summary;
};

/// Cross-entropy training with flips; used for teachers and scratch students.
template <typename S>
TrainResult pretrain(Backbone<S>& model, const Dataset& train, const Dataset* val, const TrainConfig& config,
                     RunLog& log);

/// Distills `teacher` into `student` (+ projection head). The teacher is
/// only run in eval mode and never updated. Throws NumericError with the
/// offending step's term breakdown if a loss becomes non-finite.
template <typename S>
TrainResult distill(Backbone<S>& teacher, Backbone<S>& student, ProjectionHead<S>& head, const Dataset& train,
                    const Dataset* val, const TrainConfig& config, RunLog& log);

/// Projection head for a teacher/student pair with the configured width.
template <typename S>
ProjectionHead<S> make_projection_head(const Backbone<S>& student, const Backbone<S>& teacher,
                                       const TrainConfig& config) {
  return ProjectionHead<S>(student.feature_dim(), teacher.feature_dim(), config.head_hidden,
                           mix_seed(config.seed, 0x4ead));
}

extern template Accuracy evaluate<float>(Backbone<float>&, const Dataset&, int);
extern template Accuracy evaluate<double>(Backbone<double>&, const Dataset&, int);

}  // namespace pckd
