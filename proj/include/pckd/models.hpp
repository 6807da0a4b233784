#pragma once

// Teacher/student backbones, the projection head and checkpoint I/O.

#include "pckd/augment.hpp"
#include "pckd/nn.hpp"

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace pckd {

enum class Architecture { resnet, vgg };

struct BackboneSpec {
  std::string name;
  Architecture arch = Architecture::resnet;
  std::vector<int> widths;  // channels per stage; the last entry is the feature dim K
  int blocks_per_stage = 1;
  int stem_stride = 2;
  int num_classes = 10;  // 0 builds a headless feature extractor
  bool classifier_bias = true;

  int feature_dim() const { return widths.empty() ? 0 : widths.back(); }
  void validate() const;
  bool operator==(const BackboneSpec&) const = default;
};

/// Registered backbone by name with the given class count.
BackboneSpec lookup_backbone(const std::string& name, int num_classes);
std::vector<std::string> registered_backbones();

template <typename S>
struct ModelOutputs {
  FeatureBatch<S> features;  // penultimate activations [N x K]
  LogitBatch<S> logits;      // [N x C]
  const CategoryCenters<S>* centers = nullptr;  // live classifier weight [K x C]
};

template <typename S>
class Backbone {
 public:
  explicit Backbone(BackboneSpec spec, std::uint64_t seed = 0);
  ~Backbone();
  Backbone(Backbone&&) noexcept;
  Backbone& operator=(Backbone&&) noexcept;

  const BackboneSpec& spec() const { return spec_; }
  int feature_dim() const { return spec_.feature_dim(); }
  int num_classes() const { return spec_.num_classes; }
  bool has_classifier() const { return spec_.num_classes > 0; }

  /// Features only (no classifier). Training mode keeps state for backward_features.
  RowMatrix<S> features(const FeatureMap<S>& images, nn::Mode mode);
  ModelOutputs<S> forward(const FeatureMap<S>& images, nn::Mode mode);

  /// Backward from gradients on features and logits of the last training
  /// forward. Either may be empty. Accumulates into parameter grads.
  void backward(const RowMatrix<S>& grad_features, const RowMatrix<S>& grad_logits);

  nn::Dense<S>& classifier();
  CategoryCenters<S>& centers();

  nn::ParameterList<S> parameters();
  void zero_grad();
  /// Trainable scalar count.
  Index parameter_count();

 private:
  struct Layers;
  BackboneSpec spec_;
  std::unique_ptr<Layers> layers_;
};

/// Runs the model on a batch and tags features with the batch's rotation indices.
template <typename S>
ModelOutputs<S> forward_with_features(Backbone<S>& model, const ImageBatch<S>& batch, nn::Mode mode) {
  ModelOutputs<S> out = model.forward(batch.pixels, mode);
  out.features.rotation = batch.rotation;
  out.features.source = batch.source;
  return out;
}

/// Live [K x C] view of the classifier weight; column c is class c.
template <typename S>
CategoryCenters<S>& category_centers(Backbone<S>& model) {
  return model.centers();
}

/// One-hidden-layer MLP mapping student features (K_S) to teacher feature
/// space (K_T): Dense -> ReLU -> Dense.
template <typename S>
class ProjectionHead {
 public:
  ProjectionHead() = default;
  ProjectionHead(int input_dim, int output_dim, int hidden_dim = 0, std::uint64_t seed = 0);

  /// Exact identity for K -> K: hidden = [x; -x], output = relu(x) - relu(-x).
  static ProjectionHead identity(int dim);

  int input_dim() const { return fc1_.in_dim(); }
  int output_dim() const { return fc2_.out_dim(); }
  int hidden_dim() const { return fc1_.out_dim(); }

  RowMatrix<S> forward(const RowMatrix<S>& x);
  RowMatrix<S> backward(const RowMatrix<S>& grad_out);

  nn::ParameterList<S> parameters();
  void zero_grad();
  Index parameter_count();

 private:
  nn::Dense<S> fc1_, fc2_;
  RowMatrix<S> hidden_pre_;
};

template <typename S>
FeatureBatch<S> project(ProjectionHead<S>& head, const FeatureBatch<S>& student_features) {
  require(student_features.dim() == head.input_dim(), "project: feature dim " +
                                                          std::to_string(student_features.dim()) + " != head input " +
                                                          std::to_string(head.input_dim()));
  FeatureBatch<S> out;
  out.values = head.forward(student_features.values);
  out.rotation = student_features.rotation;
  out.source = student_features.source;
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints: "PCKDCKPT\n", one line of JSON manifest, then the tensors as
// little-endian float64 in manifest order.

inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  int version = kCheckpointVersion;
  BackboneSpec backbone;
  long step = 0;
  std::map<std::string, Matrix<double>> tensors;
  std::optional<std::pair<int, int>> head_dims;  // projection head in/out if stored
  int head_hidden = 0;
};

template <typename S>
Checkpoint make_checkpoint(Backbone<S>& model, long step, ProjectionHead<S>* head = nullptr);

template <typename S>
void load_weights(Backbone<S>& model, const Checkpoint& ckpt);

template <typename S>
ProjectionHead<S> load_head(const Checkpoint& ckpt);

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& path);

/// Bit-level snapshot of every parameter and buffer, for freeze checks.
template <typename S>
std::vector<Matrix<S>> snapshot(Backbone<S>& model) {
  std::vector<Matrix<S>> out;
  for (auto* p : model.parameters()) out.push_back(p->value);
  return out;
}

extern template class Backbone<float>;
extern template class Backbone<double>;
extern template class ProjectionHead<float>;
extern template class ProjectionHead<double>;

}  // namespace pckd
