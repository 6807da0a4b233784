#pragma once

// Photometric preprocessing and the four-way rotation expansion.

#include "pckd/tensor.hpp"

#include <cstdint>
#include <vector>

namespace pckd {

/// Undecoded samples: 8-bit pixels, one sample per `channels*height*width`
/// block in channel-plane order (the CIFAR record layout).
struct RawBatch {
  std::vector<std::uint8_t> pixels;
  LabelBatch labels;
  std::vector<int> ids;  // dataset indices, for caching and split checks
  int channels = 3;
  int height = 0;
  int width = 0;

  int size() const { return static_cast<int>(labels.size()); }
  std::size_t sample_bytes() const { return std::size_t(channels) * height * width; }
};

/// Network-ready images plus rotation bookkeeping. Row n of the batch is
/// copy `rotation[n]` of original sample `source[n]`.
template <typename Scalar>
struct ImageBatch {
  FeatureMap<Scalar> pixels;
  LabelBatch labels;
  std::vector<int> rotation;
  std::vector<int> source;
  std::vector<int> ids;
  std::vector<std::uint8_t> flipped;

  int size() const { return pixels.batch; }
};

/// Exact counter-clockwise rotation by 90*k degrees of every plane.
template <typename Scalar>
FeatureMap<Scalar> rotate90(const FeatureMap<Scalar>& images, int k) {
  require(images.height == images.width, "rotate90: images must be square");
  k = ((k % 4) + 4) % 4;
  FeatureMap<Scalar> out(images.channels(), images.batch, images.height, images.width);
  for (int n = 0; n < images.batch; ++n) {
    for (int c = 0; c < images.channels(); ++c) {
      auto src = images.plane(n, c);
      auto dst = out.plane(n, c);
      switch (k) {
        case 0: dst = src; break;
        case 1: dst = src.transpose().colwise().reverse(); break;
        case 2: dst = src.reverse(); break;
        case 3: dst = src.transpose().rowwise().reverse(); break;
      }
    }
  }
  return out;
}

/// Each sample i becomes four rows (i,0)..(i,3) rotated by 0/90/180/270 degrees.
template <typename Scalar>
ImageBatch<Scalar> expand_rotations(const ImageBatch<Scalar>& batch) {
  const int B = batch.size();
  const auto& px = batch.pixels;
  require(px.height == px.width, "expand_rotations: images must be square");
  ImageBatch<Scalar> out;
  out.pixels = FeatureMap<Scalar>(px.channels(), 4 * B, px.height, px.width);
  std::vector<FeatureMap<Scalar>> turned;
  for (int k = 0; k < 4; ++k) turned.push_back(k == 0 ? px : rotate90(px, k));
  const Index plane = px.plane_size();
  for (int i = 0; i < B; ++i) {
    const int src = batch.source.empty() ? i : batch.source[i];
    for (int k = 0; k < 4; ++k) {
      out.pixels.data.middleCols(Index(4 * i + k) * plane, plane) = turned[k].data.middleCols(Index(i) * plane, plane);
      out.labels.push_back(batch.labels[i]);
      out.rotation.push_back(k);
      out.source.push_back(src);
      if (!batch.ids.empty()) out.ids.push_back(batch.ids[i]);
      if (!batch.flipped.empty()) out.flipped.push_back(batch.flipped[i]);
    }
  }
  return out;
}

/// Rows with the given rotation index, in order.
template <typename Scalar>
ImageBatch<Scalar> select_rotation(const ImageBatch<Scalar>& batch, int rotation) {
  std::vector<int> keep;
  for (int n = 0; n < batch.size(); ++n)
    if ((batch.rotation.empty() ? 0 : batch.rotation[n]) == rotation) keep.push_back(n);
  ImageBatch<Scalar> out;
  const auto& px = batch.pixels;
  out.pixels = FeatureMap<Scalar>(px.channels(), static_cast<int>(keep.size()), px.height, px.width);
  const Index plane = px.plane_size();
  for (std::size_t i = 0; i < keep.size(); ++i) {
    const int n = keep[i];
    out.pixels.data.middleCols(Index(i) * plane, plane) = px.data.middleCols(Index(n) * plane, plane);
    out.labels.push_back(batch.labels[n]);
    if (!batch.ids.empty()) out.ids.push_back(batch.ids[n]);
    if (!batch.flipped.empty()) out.flipped.push_back(batch.flipped[n]);
  }
  return out;
}

struct Normalization {
  std::vector<double> mean{0.0, 0.0, 0.0};
  std::vector<double> stddev{1.0, 1.0, 1.0};

  bool operator==(const Normalization&) const = default;
};

/// Scales to [0,1], flips each sample horizontally with probability
/// `flip_prob` and normalizes channel-wise. Deterministic for a given seed.
template <typename Scalar>
ImageBatch<Scalar> preprocess(const RawBatch& raw, double flip_prob, const Normalization& norm, std::uint64_t seed);

/// Normalization only; used for evaluation.
template <typename Scalar>
ImageBatch<Scalar> decode(const RawBatch& raw, const Normalization& norm) {
  return preprocess<Scalar>(raw, 0.0, norm, 0);
}

extern template ImageBatch<float> preprocess<float>(const RawBatch&, double, const Normalization&, std::uint64_t);
extern template ImageBatch<double> preprocess<double>(const RawBatch&, double, const Normalization&, std::uint64_t);

}  // namespace pckd
