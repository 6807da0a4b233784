#include "pckd/augment.hpp"

#include <random>

namespace pckd {

template <typename Scalar>
ImageBatch<Scalar> preprocess(const RawBatch& raw, double flip_prob, const Normalization& norm, std::uint64_t seed) {
  const int C = raw.channels, H = raw.height, W = raw.width, B = raw.size();
  require(flip_prob >= 0.0 && flip_prob <= 1.0, "preprocess: flip_prob must lie in [0, 1]");
  require(static_cast<int>(norm.mean.size()) == C && static_cast<int>(norm.stddev.size()) == C,
          "preprocess: normalization needs one mean/std per channel");
  for (double s : norm.stddev) require(s > 0.0, "preprocess: std entries must be > 0");
  require(raw.pixels.size() == raw.sample_bytes() * B, "preprocess: pixel buffer size does not match the batch");

  std::mt19937_64 rng(seed);
  std::bernoulli_distribution coin(flip_prob);

  ImageBatch<Scalar> out;
  out.pixels = FeatureMap<Scalar>(C, B, H, W);
  out.labels = raw.labels;
  out.ids = raw.ids;
  out.flipped.resize(B);
  for (int n = 0; n < B; ++n) {
    const bool flip = flip_prob > 0.0 && coin(rng);
    out.flipped[n] = flip;
    const std::uint8_t* sample = raw.pixels.data() + raw.sample_bytes() * n;
    for (int c = 0; c < C; ++c) {
      const std::uint8_t* plane = sample + std::size_t(c) * H * W;
      const double scale = 1.0 / (255.0 * norm.stddev[c]);
      const double shift = norm.mean[c] / norm.stddev[c];
      auto dst = out.pixels.plane(n, c);
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
          const int sx = flip ? W - 1 - x : x;
          dst(y, x) = static_cast<Scalar>(plane[y * W + sx] * scale - shift);
        }
    }
  }
  return out;
}

template ImageBatch<float> preprocess<float>(const RawBatch&, double, const Normalization&, std::uint64_t);
template ImageBatch<double> preprocess<double>(const RawBatch&, double, const Normalization&, std::uint64_t);

}  // namespace pckd
