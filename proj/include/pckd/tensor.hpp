#pragma once

#include "pckd/types.hpp"

namespace pckd {

/// Batch of C-channel planes stored channel-major: row c holds every
/// sample's plane for that channel back to back, so element (n, c, y, x)
/// lives at data(c, (n * height + y) * width + x). Convolutions become a
/// single GEMM in this layout and per-channel statistics are row reductions.
template <typename Scalar>
struct FeatureMap {
  RowMatrix<Scalar> data;
  int batch = 0;
  int height = 0;
  int width = 0;

  FeatureMap() = default;
  FeatureMap(int channels, int batch_, int height_, int width_)
      : data(RowMatrix<Scalar>::Zero(channels, Index(batch_) * height_ * width_)),
        batch(batch_),
        height(height_),
        width(width_) {}

  int channels() const { return static_cast<int>(data.rows()); }
  Index plane_size() const { return Index(height) * width; }

  Scalar& at(int n, int c, int y, int x) { return data(c, (Index(n) * height + y) * width + x); }
  Scalar at(int n, int c, int y, int x) const { return data(c, (Index(n) * height + y) * width + x); }

  /// Row-major height x width view of one plane.
  Eigen::Map<RowMatrix<Scalar>> plane(int n, int c) {
    return Eigen::Map<RowMatrix<Scalar>>(data.row(c).data() + Index(n) * plane_size(), height, width);
  }
  Eigen::Map<const RowMatrix<Scalar>> plane(int n, int c) const {
    return Eigen::Map<const RowMatrix<Scalar>>(data.row(c).data() + Index(n) * plane_size(), height, width);
  }

  bool same_shape(const FeatureMap& o) const {
    return channels() == o.channels() && batch == o.batch && height == o.height && width == o.width;
  }

  /// Copies samples [first, first + count) into a new map.
  FeatureMap slice(int first, int count) const {
    FeatureMap out(channels(), count, height, width);
    out.data = data.middleCols(Index(first) * plane_size(), Index(count) * plane_size());
    return out;
  }

  template <typename Other>
  FeatureMap<Other> cast() const {
    FeatureMap<Other> out;
    out.data = data.template cast<Other>();
    out.batch = batch;
    out.height = height;
    out.width = width;
    return out;
  }
};

}  // namespace pckd
