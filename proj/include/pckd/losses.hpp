#pragma once

// Distillation loss terms and their weighted composition.
//
// Every term comes in three flavours:
//   *_rows  unreduced value per row (or per sample)
//   *_loss  the reduced scalar
//   *_grad  gradient of sum_r w_r * row_r for caller-supplied row weights w
// so the training loop can apply per-sample weights without re-deriving
// gradients. Teacher-side inputs never receive a gradient.

#include "pckd/types.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <string_view>

namespace pckd {

struct LossWeights {
  double alpha = 1.0;
  double beta_cc = 0.05;
  double beta_fa = 20.0;
  double beta_ca = 1.0;
  double tau_kd = 4.0;
  double tau_cc = 0.1;

  void validate() const {
    auto finite_nonneg = [](double x, const char* name) {
      if (!std::isfinite(x) || x < 0.0) throw ContractViolation(std::string(name) + " must be finite and >= 0");
    };
    finite_nonneg(alpha, "alpha");
    finite_nonneg(beta_cc, "beta_cc");
    finite_nonneg(beta_fa, "beta_fa");
    finite_nonneg(beta_ca, "beta_ca");
    if (!std::isfinite(tau_kd) || tau_kd <= 0.0) throw ContractViolation("tau_kd must be finite and > 0");
    if (!std::isfinite(tau_cc) || tau_cc <= 0.0) throw ContractViolation("tau_cc must be finite and > 0");
  }

  bool operator==(const LossWeights&) const = default;
};

enum class LossTerm : unsigned { ce = 1u << 0, kd = 1u << 1, fa = 1u << 2, ca = 1u << 3, cc = 1u << 4 };

/// Set of loss terms the sample weights multiply.
class TermSet {
 public:
  constexpr TermSet() = default;
  constexpr TermSet(std::initializer_list<LossTerm> terms) {
    for (auto t : terms) bits_ |= static_cast<unsigned>(t);
  }
  constexpr bool contains(LossTerm t) const { return (bits_ & static_cast<unsigned>(t)) != 0; }
  constexpr void insert(LossTerm t) { bits_ |= static_cast<unsigned>(t); }
  constexpr bool empty() const { return bits_ == 0; }
  constexpr bool operator==(const TermSet&) const = default;

 private:
  unsigned bits_ = 0;
};

inline std::string_view term_name(LossTerm t) {
  switch (t) {
    case LossTerm::ce: return "ce";
    case LossTerm::kd: return "kd";
    case LossTerm::fa: return "fa";
    case LossTerm::ca: return "ca";
    case LossTerm::cc: return "cc";
  }
  return "?";
}

inline std::optional<LossTerm> parse_term(std::string_view name) {
  for (auto t : {LossTerm::ce, LossTerm::kd, LossTerm::fa, LossTerm::ca, LossTerm::cc})
    if (term_name(t) == name) return t;
  return std::nullopt;
}

inline constexpr LossTerm kAllTerms[] = {LossTerm::ce, LossTerm::kd, LossTerm::fa, LossTerm::ca, LossTerm::cc};

namespace detail {

template <typename S>
RowMatrix<S> log_softmax_rows(const RowMatrix<S>& z) {
  RowMatrix<S> shifted = z.colwise() - z.rowwise().maxCoeff();
  Vector<S> lse = shifted.array().exp().rowwise().sum().log().matrix();
  return shifted.colwise() - lse;
}

template <typename S>
void require_same_shape(const RowMatrix<S>& a, const RowMatrix<S>& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ContractViolation(std::string(what) + ": shape mismatch (" + std::to_string(a.rows()) + "x" +
                            std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                            std::to_string(b.cols()) + ")");
}

template <typename S>
void require_labels(const LabelBatch& labels, Index classes) {
  for (int y : labels)
    if (y < 0 || y >= classes) throw ContractViolation("label " + std::to_string(y) + " outside [0, " +
                                                       std::to_string(classes) + ")");
}

template <typename S>
Vector<S> row_norms_or_throw(const RowMatrix<S>& x, const char* what) {
  Vector<S> n = x.rowwise().norm();
  for (Index r = 0; r < n.size(); ++r)
    if (!(n(r) > S(0))) throw NumericError(std::string(what) + ": row " + std::to_string(r) +
                                           " has zero norm, normalization undefined");
  return n;
}

// Backpropagate through x_hat = x / |x| row-wise.
template <typename S>
RowMatrix<S> normalize_rows_backward(const RowMatrix<S>& x_hat, const Vector<S>& norms, const RowMatrix<S>& d_hat) {
  Vector<S> dots = (d_hat.array() * x_hat.array()).rowwise().sum().matrix();
  RowMatrix<S> d = d_hat - x_hat.cwiseProduct(dots.replicate(1, x_hat.cols()));
  return d.array().colwise() / norms.array();
}

template <typename Derived>
RowMatrix<typename Derived::Scalar> eval_rows(const Eigen::MatrixBase<Derived>& m) {
  return RowMatrix<typename Derived::Scalar>(m);
}

}  // namespace detail

/// Sums per-row values into per-sample values using the batch's source index.
template <typename S>
Vector<S> sum_by_sample(const Vector<S>& row_values, const FeatureBatch<S>& batch) {
  Vector<S> out = Vector<S>::Zero(batch.num_samples());
  for (Index r = 0; r < row_values.size(); ++r) out(batch.source_of(r)) += row_values(r);
  return out;
}

/// Spreads a per-sample vector back onto rows.
template <typename S>
Vector<S> spread_to_rows(const Vector<S>& per_sample, const FeatureBatch<S>& batch) {
  Vector<S> out(batch.rows());
  for (Index r = 0; r < batch.rows(); ++r) out(r) = per_sample(batch.source_of(r));
  return out;
}

// ---------------------------------------------------------------------------
// Vanilla KD: KL(softmax(z_T / tau) || softmax(z_S / tau)) per row.

template <typename D1, typename D2>
Vector<typename D1::Scalar> kd_loss_rows(const Eigen::MatrixBase<D1>& student_logits,
                                         const Eigen::MatrixBase<D2>& teacher_logits, double tau) {
  using S = typename D1::Scalar;
  auto zs = detail::eval_rows(student_logits);
  auto zt = detail::eval_rows(teacher_logits);
  detail::require_same_shape(zs, zt, "kd_loss");
  require(tau > 0.0, "kd_loss: tau must be > 0");
  require_finite(zs, "kd_loss student logits");
  require_finite(zt, "kd_loss teacher logits");
  RowMatrix<S> log_ps = detail::log_softmax_rows<S>(zs / S(tau));
  RowMatrix<S> log_pt = detail::log_softmax_rows<S>(zt / S(tau));
  RowMatrix<S> pt = log_pt.array().exp();
  return (pt.array() * (log_pt - log_ps).array()).rowwise().sum().matrix();
}

template <typename D1, typename D2>
typename D1::Scalar kd_loss(const Eigen::MatrixBase<D1>& student_logits, const Eigen::MatrixBase<D2>& teacher_logits,
                            double tau) {
  auto rows = kd_loss_rows(student_logits, teacher_logits, tau);
  require(rows.size() > 0, "kd_loss: empty batch");
  return rows.mean();
}

template <typename D1, typename D2>
RowMatrix<typename D1::Scalar> kd_loss_grad(const Eigen::MatrixBase<D1>& student_logits,
                                            const Eigen::MatrixBase<D2>& teacher_logits, double tau,
                                            const Vector<typename D1::Scalar>& row_weights) {
  using S = typename D1::Scalar;
  auto zs = detail::eval_rows(student_logits);
  auto zt = detail::eval_rows(teacher_logits);
  detail::require_same_shape(zs, zt, "kd_loss_grad");
  require(row_weights.size() == zs.rows(), "kd_loss_grad: weight count != rows");
  RowMatrix<S> ps = detail::log_softmax_rows<S>(zs / S(tau)).array().exp();
  RowMatrix<S> pt = detail::log_softmax_rows<S>(zt / S(tau)).array().exp();
  RowMatrix<S> g = (ps - pt) / S(tau);
  return g.array().colwise() * row_weights.array();
}

// ---------------------------------------------------------------------------
// Softmax cross-entropy per row.

template <typename D>
Vector<typename D::Scalar> cross_entropy_rows(const Eigen::MatrixBase<D>& logits, const LabelBatch& labels) {
  using S = typename D::Scalar;
  auto z = detail::eval_rows(logits);
  require(static_cast<Index>(labels.size()) == z.rows(), "cross_entropy: label count != rows");
  detail::require_labels<S>(labels, z.cols());
  require_finite(z, "cross_entropy logits");
  RowMatrix<S> log_p = detail::log_softmax_rows<S>(z);
  Vector<S> out(z.rows());
  for (Index r = 0; r < z.rows(); ++r) out(r) = -log_p(r, labels[r]);
  return out;
}

template <typename D>
typename D::Scalar cross_entropy_loss(const Eigen::MatrixBase<D>& logits, const LabelBatch& labels) {
  auto rows = cross_entropy_rows(logits, labels);
  require(rows.size() > 0, "cross_entropy: empty batch");
  return rows.mean();
}

template <typename D>
RowMatrix<typename D::Scalar> cross_entropy_grad(const Eigen::MatrixBase<D>& logits, const LabelBatch& labels,
                                                 const Vector<typename D::Scalar>& row_weights) {
  using S = typename D::Scalar;
  auto z = detail::eval_rows(logits);
  require(row_weights.size() == z.rows(), "cross_entropy_grad: weight count != rows");
  detail::require_labels<S>(labels, z.cols());
  RowMatrix<S> g = detail::log_softmax_rows<S>(z).array().exp();
  for (Index r = 0; r < z.rows(); ++r) g(r, labels[r]) -= S(1);
  return g.array().colwise() * row_weights.array();
}

/// Probability the model assigns to the true class, per row.
template <typename D>
Vector<typename D::Scalar> true_class_probability(const Eigen::MatrixBase<D>& logits, const LabelBatch& labels) {
  return (-cross_entropy_rows(logits, labels)).array().exp().matrix();
}

// ---------------------------------------------------------------------------
// Feature alignment: |g_hat - t_hat|^2 per row, rows l2-normalized.

template <typename S>
Vector<S> feature_alignment_rows(const FeatureBatch<S>& student_projected, const FeatureBatch<S>& teacher) {
  detail::require_same_shape(student_projected.values, teacher.values, "feature_alignment");
  require_finite(student_projected.values, "feature_alignment student features");
  require_finite(teacher.values, "feature_alignment teacher features");
  Vector<S> ns = detail::row_norms_or_throw(student_projected.values, "feature_alignment student");
  Vector<S> nt = detail::row_norms_or_throw(teacher.values, "feature_alignment teacher");
  RowMatrix<S> a = student_projected.values.array().colwise() / ns.array();
  RowMatrix<S> b = teacher.values.array().colwise() / nt.array();
  return (a - b).rowwise().squaredNorm();
}

/// Sum over rows divided by the number of original samples.
template <typename S>
S feature_alignment_loss(const FeatureBatch<S>& student_projected, const FeatureBatch<S>& teacher) {
  return feature_alignment_rows(student_projected, teacher).sum() / S(student_projected.num_samples());
}

template <typename S>
RowMatrix<S> feature_alignment_grad(const FeatureBatch<S>& student_projected, const FeatureBatch<S>& teacher,
                                    const Vector<S>& row_weights) {
  detail::require_same_shape(student_projected.values, teacher.values, "feature_alignment_grad");
  require(row_weights.size() == student_projected.rows(), "feature_alignment_grad: weight count != rows");
  Vector<S> ns = detail::row_norms_or_throw(student_projected.values, "feature_alignment student");
  Vector<S> nt = detail::row_norms_or_throw(teacher.values, "feature_alignment teacher");
  RowMatrix<S> a = student_projected.values.array().colwise() / ns.array();
  RowMatrix<S> b = teacher.values.array().colwise() / nt.array();
  RowMatrix<S> da = (S(2) * (a - b)).array().colwise() * row_weights.array();
  return detail::normalize_rows_backward<S>(a, ns, da);
}

// ---------------------------------------------------------------------------
// Category center alignment: squared Frobenius distance.

template <typename D1, typename D2>
typename D1::Scalar center_alignment_loss(const Eigen::MatrixBase<D1>& student_centers,
                                          const Eigen::MatrixBase<D2>& teacher_centers) {
  if (student_centers.rows() != teacher_centers.rows() || student_centers.cols() != teacher_centers.cols())
    throw ContractViolation("center_alignment: center matrices differ in shape; set beta_ca = 0 for this pair");
  require_finite(student_centers, "center_alignment student centers");
  require_finite(teacher_centers, "center_alignment teacher centers");
  return (student_centers - teacher_centers).squaredNorm();
}

template <typename D1, typename D2>
Matrix<typename D1::Scalar> center_alignment_grad(const Eigen::MatrixBase<D1>& student_centers,
                                                  const Eigen::MatrixBase<D2>& teacher_centers) {
  using S = typename D1::Scalar;
  if (student_centers.rows() != teacher_centers.rows() || student_centers.cols() != teacher_centers.cols())
    throw ContractViolation("center_alignment_grad: shape mismatch");
  return S(2) * (student_centers - teacher_centers);
}

// ---------------------------------------------------------------------------
// Category center contrast. For row r of sample i with label y:
//   -log( exp(s(f_r, W_y)/tau) / sum_{c != y} exp(s(f_r, W_c)/tau) )
// The ground-truth class is absent from the denominator, so values can be
// negative. s is cosine similarity when `normalize`, raw dot product otherwise.

template <typename S>
struct ContrastGrad {
  RowMatrix<S> features;
  Matrix<S> centers;
};

namespace detail {

template <typename S>
struct ContrastForward {
  RowMatrix<S> f_hat;
  Matrix<S> w_hat;
  Vector<S> f_norm;
  RowVector<S> w_norm;
  RowMatrix<S> sim;  // [R x C]
  std::vector<int> row_labels;
};

template <typename S>
ContrastForward<S> contrast_forward(const FeatureBatch<S>& features, const CategoryCenters<S>& centers,
                                    const LabelBatch& labels, double tau, bool normalize) {
  require(features.dim() == centers.rows(), "center_contrast: feature dim " + std::to_string(features.dim()) +
                                                " != center dim " + std::to_string(centers.rows()));
  require(tau > 0.0, "center_contrast: tau must be > 0");
  require(centers.cols() >= 2, "center_contrast: needs at least two classes (denominator excludes the true class)");
  require_finite(features.values, "center_contrast features");
  require_finite(centers, "center_contrast centers");
  require(static_cast<Index>(labels.size()) == features.num_samples(),
          "center_contrast: label count != number of samples");
  require_labels<S>(labels, centers.cols());

  ContrastForward<S> fw;
  if (normalize) {
    fw.f_norm = row_norms_or_throw(features.values, "center_contrast feature");
    fw.f_hat = features.values.array().colwise() / fw.f_norm.array();
    fw.w_norm = centers.colwise().norm();
    for (Index c = 0; c < centers.cols(); ++c)
      if (!(fw.w_norm(c) > S(0)))
        throw NumericError("center_contrast: center " + std::to_string(c) + " has zero norm, normalization undefined");
    fw.w_hat = centers.array().rowwise() / fw.w_norm.array();
  } else {
    fw.f_hat = features.values;
    fw.w_hat = centers;
  }
  fw.sim = fw.f_hat * fw.w_hat;
  fw.row_labels.resize(features.rows());
  for (Index r = 0; r < features.rows(); ++r) fw.row_labels[r] = labels[features.source_of(r)];
  return fw;
}

}  // namespace detail

template <typename S>
Vector<S> center_contrast_rows(const FeatureBatch<S>& features, const CategoryCenters<S>& centers,
                               const LabelBatch& labels, double tau, bool normalize = true) {
  auto fw = detail::contrast_forward(features, centers, labels, tau, normalize);
  const Index C = centers.cols();
  Vector<S> out(features.rows());
  for (Index r = 0; r < features.rows(); ++r) {
    const int y = fw.row_labels[r];
    RowVector<S> logits = fw.sim.row(r) / S(tau);
    S hi = -std::numeric_limits<S>::infinity();
    for (Index c = 0; c < C; ++c)
      if (c != y) hi = std::max(hi, logits(c));
    S acc = 0;
    for (Index c = 0; c < C; ++c)
      if (c != y) acc += std::exp(logits(c) - hi);
    out(r) = -logits(y) + hi + std::log(acc);
  }
  return out;
}

/// Sum over rows divided by the number of original samples.
template <typename S>
S center_contrast_loss(const FeatureBatch<S>& features, const CategoryCenters<S>& centers, const LabelBatch& labels,
                       double tau, bool normalize = true) {
  return center_contrast_rows(features, centers, labels, tau, normalize).sum() / S(features.num_samples());
}

template <typename S>
ContrastGrad<S> center_contrast_grad(const FeatureBatch<S>& features, const CategoryCenters<S>& centers,
                                     const LabelBatch& labels, double tau, bool normalize,
                                     const Vector<S>& row_weights) {
  require(row_weights.size() == features.rows(), "center_contrast_grad: weight count != rows");
  auto fw = detail::contrast_forward(features, centers, labels, tau, normalize);
  const Index C = centers.cols();
  const S inv_tau = S(1) / S(tau);

  RowMatrix<S> d_sim(features.rows(), C);
  for (Index r = 0; r < features.rows(); ++r) {
    const int y = fw.row_labels[r];
    RowVector<S> logits = fw.sim.row(r) * inv_tau;
    S hi = -std::numeric_limits<S>::infinity();
    for (Index c = 0; c < C; ++c)
      if (c != y) hi = std::max(hi, logits(c));
    RowVector<S> e(C);
    S acc = 0;
    for (Index c = 0; c < C; ++c) {
      e(c) = c == y ? S(0) : std::exp(logits(c) - hi);
      acc += e(c);
    }
    d_sim.row(r) = e * (row_weights(r) * inv_tau / acc);
    d_sim(r, y) = -row_weights(r) * inv_tau;
  }

  ContrastGrad<S> g;
  RowMatrix<S> d_f_hat = d_sim * fw.w_hat.transpose();
  Matrix<S> d_w_hat = fw.f_hat.transpose() * d_sim;
  if (normalize) {
    g.features = detail::normalize_rows_backward<S>(fw.f_hat, fw.f_norm, d_f_hat);
    // Same backward column-wise for the centers.
    RowVector<S> dots = (d_w_hat.array() * fw.w_hat.array()).colwise().sum();
    Matrix<S> d = d_w_hat - fw.w_hat.cwiseProduct(dots.replicate(fw.w_hat.rows(), 1));
    g.centers = d.array().rowwise() / fw.w_norm.array();
  } else {
    g.features = d_f_hat;
    g.centers = d_w_hat;
  }
  return g;
}

// ---------------------------------------------------------------------------
// Weighted composition.

/// Unreduced per-sample terms for one batch of B original samples.
/// `cc` and `fa` already hold the sum over a sample's rotated copies
/// (and for cc, over both teacher- and student-center variants).
template <typename S>
struct PerSampleTerms {
  Vector<S> ce;
  Vector<S> kd;
  Vector<S> fa;
  Vector<S> cc;
  S ca = 0;

  Index samples() const { return ce.size(); }
};

template <typename S>
struct TermValues {
  S ce = 0, kd = 0, fa = 0, ca = 0, cc = 0;
};

template <typename S>
struct TotalLoss {
  S value = 0;
  TermValues<S> unweighted;    // batch means (ca as-is)
  TermValues<S> contribution;  // each term's share of value; these sum to value
  // d value / d term_i, used to weight per-row gradients.
  Vector<S> d_ce, d_kd, d_fa, d_cc;
  S d_ca = 0;
};

/// sum_i ( a*w_kd_i*KD_i + b_cc*w_cc_i*CC_i + w_ce_i*CE_i + b_fa*w_fa_i*FA_i ) / B + b_ca*w_ca*CA,
/// where w_x_i = v_i for terms in `weighted` and 1 otherwise. CA is not per-sample;
/// when weighted it uses the batch mean of v.
template <typename S>
TotalLoss<S> total_pckd_loss(const PerSampleTerms<S>& terms, const Vector<S>& sample_weights,
                             const LossWeights& weights, TermSet weighted = {LossTerm::kd, LossTerm::cc}) {
  const Index B = terms.samples();
  require(B > 0, "total_pckd_loss: empty batch");
  require(terms.kd.size() == B && terms.fa.size() == B && terms.cc.size() == B,
          "total_pckd_loss: per-sample term lengths differ");
  require(sample_weights.size() == B, "total_pckd_loss: weight vector length " +
                                          std::to_string(sample_weights.size()) + " != batch size " +
                                          std::to_string(B));
  const Vector<S> ones = Vector<S>::Ones(B);
  auto w = [&](LossTerm t) -> const Vector<S>& { return weighted.contains(t) ? sample_weights : ones; };
  const S inv_b = S(1) / S(B);

  TotalLoss<S> out;
  out.d_ce = w(LossTerm::ce) * inv_b;
  out.d_kd = w(LossTerm::kd) * (S(weights.alpha) * inv_b);
  out.d_fa = w(LossTerm::fa) * (S(weights.beta_fa) * inv_b);
  out.d_cc = w(LossTerm::cc) * (S(weights.beta_cc) * inv_b);
  out.d_ca = S(weights.beta_ca) * (weighted.contains(LossTerm::ca) ? sample_weights.mean() : S(1));

  out.contribution.ce = out.d_ce.dot(terms.ce);
  out.contribution.kd = out.d_kd.dot(terms.kd);
  out.contribution.fa = out.d_fa.dot(terms.fa);
  out.contribution.cc = out.d_cc.dot(terms.cc);
  out.contribution.ca = out.d_ca * terms.ca;
  out.value = out.contribution.ce + out.contribution.kd + out.contribution.fa + out.contribution.cc +
              out.contribution.ca;

  out.unweighted.ce = terms.ce.mean();
  out.unweighted.kd = terms.kd.mean();
  out.unweighted.fa = terms.fa.mean();
  out.unweighted.cc = terms.cc.mean();
  out.unweighted.ca = terms.ca;
  return out;
}

}  // namespace pckd
