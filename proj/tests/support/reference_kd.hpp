#pragma once

// A plain distillation loop (cross-entropy + KL to the teacher) written
// without the library's loss, weighting or optimizer code. Used to check that
// the full objective collapses to it when the extra terms are switched off.

#include "pckd/data.hpp"
#include "pckd/models.hpp"
#include "support/oracles.hpp"

#include <cmath>
#include <vector>

namespace pckd::testing {

struct ReferenceKdConfig {
  double alpha = 1.0;
  double tau = 4.0;
  double lr = 0.05, momentum = 0.9, weight_decay = 5e-4;
  int batch_size = 8;
  int steps = 20;
  double flip_prob = 0.5;
  std::uint64_t seed = 0;
  bool rotations = false;  // feed four rotated copies, losses on the upright rows only
};

inline std::vector<double> row_of(const RowMatrix<double>& m, Index r) {
  return std::vector<double>(m.row(r).data(), m.row(r).data() + m.cols());
}

inline std::vector<double> softmax(const std::vector<double>& z, double tau) {
  double mx = z[0];
  for (double v : z) mx = std::max(mx, v);
  std::vector<double> p(z.size());
  double n = 0;
  for (std::size_t c = 0; c < z.size(); ++c) n += (p[c] = std::exp((z[c] - mx) / tau));
  for (double& v : p) v /= n;
  return p;
}

/// Returns the per-step total loss.
inline std::vector<double> reference_kd_loop(Backbone<double>& teacher, Backbone<double>& student, const Dataset& data,
                                             const ReferenceKdConfig& cfg) {
  std::vector<double> totals;
  nn::ParameterList<double> params;
  for (auto* p : student.parameters())
    if (p->trainable) params.push_back(p);
  std::vector<Matrix<double>> velocity;
  for (auto* p : params) velocity.push_back(Matrix<double>::Zero(p->value.rows(), p->value.cols()));

  LoaderOptions lo;
  lo.batch_size = cfg.batch_size;
  lo.flip_prob = cfg.flip_prob;
  lo.seed = cfg.seed;
  BatchLoader<double> loader(data, lo);
  for (int epoch = 0; int(totals.size()) < cfg.steps; ++epoch) {
    loader.start_epoch(epoch);
    while (int(totals.size()) < cfg.steps) {
      auto batch = loader.next();
      if (!batch) break;
      const int B = batch->size();
      ImageBatch<double> x = cfg.rotations ? expand_rotations(*batch) : *batch;
      const int stride = cfg.rotations ? 4 : 1;

      const RowMatrix<double> zt = teacher.forward(x.pixels, nn::Mode::eval).logits;
      for (auto* p : params) p->grad.setZero();
      const RowMatrix<double> zs = student.forward(x.pixels, nn::Mode::train).logits;

      double total = 0;
      RowMatrix<double> dz = RowMatrix<double>::Zero(zs.rows(), zs.cols());
      for (int i = 0; i < B; ++i) {
        const Index r = Index(i) * stride;
        const auto s = row_of(zs, r), t = row_of(zt, r);
        const int y = batch->labels[std::size_t(i)];
        total += (oracle_ce_row(s, y) + cfg.alpha * oracle_kl_row(s, t, cfg.tau)) / B;
        const auto p1 = softmax(s, 1.0), ps = softmax(s, cfg.tau), pt = softmax(t, cfg.tau);
        for (std::size_t c = 0; c < s.size(); ++c)
          dz(r, Index(c)) = (p1[c] - (int(c) == y ? 1.0 : 0.0)) / B + cfg.alpha * (ps[c] - pt[c]) / (cfg.tau * B);
      }
      student.backward(RowMatrix<double>(), dz);
      for (std::size_t k = 0; k < params.size(); ++k) {
        auto& p = *params[k];
        for (Index e = 0; e < p.value.size(); ++e) {
          double& v = velocity[k].data()[e];
          v = cfg.momentum * v + p.grad.data()[e] + cfg.weight_decay * p.value.data()[e];
          p.value.data()[e] -= cfg.lr * v;
        }
      }
      totals.push_back(total);
    }
  }
  return totals;
}

}  // namespace pckd::testing
