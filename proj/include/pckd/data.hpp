#pragma once

// Dataset ingestion (CIFAR-style binary records or the in-memory synthetic
// generator), split management, seeded batching and the linear-probe
// transfer protocol.

#include "pckd/augment.hpp"
#include "pckd/models.hpp"
#include "pckd/optim.hpp"

#include <cstdint>
#include <deque>
#include <filesystem>
#include <future>
#include <optional>
#include <string>
#include <vector>

namespace pckd {

enum class Split { train, val, test };

std::string_view split_name(Split s);
std::optional<Split> parse_split(std::string_view name);

/// Parameters of the procedural image generator. Each class is a shape
/// (one of five), solid or striped, drawn in a random colour at a random
/// position, scale and angle over a shaded background. A per-class fraction
/// of samples is "hard": lower contrast, heavier noise and distractor
/// shapes from other classes.
struct SyntheticSpec {
  int num_classes = 10;
  int per_class = 100;       // training pool (train + val) per class
  int test_per_class = 20;
  int image_size = 32;
  std::uint64_t seed = 0;
  double hard_fraction = 0.3;
  std::vector<double> class_hard_fraction;  // per-class override when non-empty
  double noise = 0.06;       // pixel noise stddev on the [0, 1] scale
  double hard_noise = 0.2;
  int clutter = 2;           // distractor shapes per hard sample

  double hard_fraction_of(int c) const {
    return class_hard_fraction.empty() ? hard_fraction : class_hard_fraction[std::size_t(c)];
  }
  void validate() const;
  bool operator==(const SyntheticSpec&) const = default;
};

struct DatasetSpec {
  std::string name = "synthetic";
  std::filesystem::path root;  // directory with train.bin / test.bin; unused for synthetic
  Split split = Split::train;
  int image_size = 32;
  int num_classes = 10;
  int label_bytes = 1;          // 2 for (coarse, fine) records; the last byte is the label
  double val_fraction = 0.1;    // carved from the training pool
  int max_train = 0;            // keep only the first N training records (0 = all)
  std::uint64_t split_seed = 0;
  Normalization norm;
  std::optional<SyntheticSpec> synthetic;

  bool is_synthetic() const { return synthetic.has_value(); }
  void validate() const;
  bool operator==(const DatasetSpec&) const = default;
};

struct Dataset {
  std::string name;
  Split split = Split::train;
  int num_classes = 0;
  Normalization norm;
  RawBatch samples;
  std::vector<std::uint8_t> hard;  // synthetic only: 1 for generated hard samples

  int size() const { return samples.size(); }
};

/// Loads one split. Training and validation come from the same pool,
/// partitioned by a seeded shuffle; sample ids are unique across splits.
Dataset load_dataset(const DatasetSpec& spec);

/// Generates the whole synthetic pool (train + val) or the test set.
Dataset generate_synthetic(const SyntheticSpec& spec, bool test_set);

/// Reads CIFAR-style records: `label_bytes` label bytes followed by
/// 3 x size x size pixel bytes in channel-plane order.
RawBatch read_cifar_records(const std::filesystem::path& file, int image_size, int label_bytes);

/// Writes records in the same layout (used by tests and the dataset exporter).
void write_cifar_records(const std::filesystem::path& file, const RawBatch& batch, int label_bytes,
                         const std::vector<int>& coarse_labels = {});

RawBatch gather(const RawBatch& source, const std::vector<int>& indices);
Dataset subset(const Dataset& data, const std::vector<int>& indices);

/// FNV-1a over a sample's label and pixels, for split-disjointness checks.
std::uint64_t sample_hash(const RawBatch& batch, int index);

/// Index batches for one epoch; the order depends only on (seed, epoch).
std::vector<std::vector<int>> batch_plan(int n, int batch_size, bool shuffle, std::uint64_t seed, int epoch,
                                         bool drop_last = false);

/// Mixes several integers into one seed (splitmix64 chain).
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c = 0);

struct LoaderOptions {
  int batch_size = 64;
  bool shuffle = true;
  double flip_prob = 0.5;
  std::uint64_t seed = 0;
  int workers = 0;  // background batch assembly; output is identical for any count
  bool drop_last = false;
};

/// Produces preprocessed batches in the seeded order. With workers > 0 up to
/// `workers` upcoming batches are assembled concurrently.
template <typename S>
class BatchLoader {
 public:
  BatchLoader(const Dataset& data, LoaderOptions options) : data_(&data), options_(options) {
    require(options_.batch_size > 0, "batch_size must be positive");
    require(options_.workers >= 0, "workers must be non-negative");
  }

  void start_epoch(int epoch) {
    pending_.clear();
    epoch_ = epoch;
    plan_ = batch_plan(data_->size(), options_.batch_size, options_.shuffle, options_.seed, epoch,
                       options_.drop_last);
    next_ = 0;
    queued_ = 0;
  }

  int num_batches() const { return static_cast<int>(plan_.size()); }

  std::optional<ImageBatch<S>> next() {
    if (next_ >= num_batches()) return std::nullopt;
    if (options_.workers == 0) return make(next_++);
    while (queued_ < num_batches() && int(pending_.size()) < options_.workers) {
      const int b = queued_++;
      pending_.push_back(std::async(std::launch::async, [this, b] { return make(b); }));
    }
    auto batch = pending_.front().get();
    pending_.pop_front();
    ++next_;
    return batch;
  }

 private:
  ImageBatch<S> make(int b) const {
    return preprocess<S>(gather(data_->samples, plan_[std::size_t(b)]), options_.flip_prob, data_->norm,
                         mix_seed(options_.seed, std::uint64_t(epoch_), std::uint64_t(b) + 1));
  }

  const Dataset* data_;
  LoaderOptions options_;
  std::vector<std::vector<int>> plan_;
  std::deque<std::future<ImageBatch<S>>> pending_;
  int epoch_ = 0, next_ = 0, queued_ = 0;
};

// ---------------------------------------------------------------------------
// Transfer: frozen backbone features, freshly initialized linear head.

struct TransferConfig {
  int epochs = 30;
  SgdConfig sgd{0.1, 0.9, 0.0};
  std::vector<int> milestones;
  double lr_decay = 0.1;
  int batch_size = 128;
  std::uint64_t seed = 0;
  int expected_feature_dim = 0;  // 0 accepts any backbone

  bool operator==(const TransferConfig&) const = default;
};

struct LinearProbe {
  nn::Dense<double> head;
  double initial_train_top1 = 0;
  double train_top1 = 0;
};

struct TransferResult {
  double initial_test_top1 = 0;  // untrained head
  double train_top1 = 0;
  double test_top1 = 0;
};

/// Eval-mode penultimate features for every sample (no flips, no rotations).
template <typename S>
RowMatrix<double> extract_features(Backbone<S>& backbone, const Dataset& data, int batch_size = 256);

/// Softmax-regression head trained by SGD on fixed features.
LinearProbe train_linear_head(const RowMatrix<double>& features, const LabelBatch& labels, int num_classes,
                              const TransferConfig& config);

double linear_head_accuracy(nn::Dense<double>& head, const RowMatrix<double>& features, const LabelBatch& labels);

template <typename S>
TransferResult transfer_protocol(Backbone<S>& backbone, const Dataset& target_train, const Dataset& target_test,
                                 const TransferConfig& config);

/// Rebuilds the backbone from a checkpoint (headless) and runs the protocol
/// on the target dataset's train and test splits.
TransferResult transfer_protocol(const Checkpoint& student, const DatasetSpec& target, const TransferConfig& config);

}  // namespace pckd
