#include "pckd/train.hpp"

#include <spdlog/spdlog.h>

#include <chrono>
#include <cmath>
#include <unordered_map>

namespace pckd {

void TrainConfig::validate() const {
  loss.validate();
  scheduler.validate();
  sgd.validate();
  require(std::is_sorted(lr_milestones.begin(), lr_milestones.end()), "lr_milestones must be sorted ascending");
  for (int m : lr_milestones) require(m > 0, "lr_milestones must be positive epochs");
  require(lr_decay > 0 && lr_decay <= 1, "lr_decay must lie in (0, 1]");
  require(epochs >= 1, "epochs must be >= 1");
  require(batch_size >= 1, "batch_size must be >= 1");
  require(flip_prob >= 0 && flip_prob <= 1, "flip_prob must lie in [0, 1]");
  require(workers >= 0, "workers must be non-negative");
  require(head_hidden >= 0, "head_hidden must be non-negative");
}

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

template <typename S>
FeatureMap<S> gather_samples(const FeatureMap<S>& images, const std::vector<int>& idx) {
  FeatureMap<S> out(images.channels(), static_cast<int>(idx.size()), images.height, images.width);
  const Index plane = images.plane_size();
  for (std::size_t k = 0; k < idx.size(); ++k)
    out.data.middleCols(Index(k) * plane, plane) = images.data.middleCols(Index(idx[k]) * plane, plane);
  return out;
}

template <typename S>
ImageBatch<S> tag_unrotated(ImageBatch<S> batch) {
  batch.rotation.assign(std::size_t(batch.size()), 0);
  batch.source.resize(std::size_t(batch.size()));
  for (int i = 0; i < batch.size(); ++i) batch.source[std::size_t(i)] = i;
  return batch;
}

std::vector<int> rows_with_rotation(const std::vector<int>& rotation, int j) {
  std::vector<int> out;
  for (std::size_t r = 0; r < rotation.size(); ++r)
    if (rotation[r] == j) out.push_back(static_cast<int>(r));
  return out;
}

template <typename M>
M take_rows(const M& m, const std::vector<int>& rows) {
  M out(Index(rows.size()), m.cols());
  for (std::size_t k = 0; k < rows.size(); ++k) out.row(Index(k)) = m.row(rows[k]);
  return out;
}

template <typename S>
long count_correct(const RowMatrix<S>& logits, const LabelBatch& labels) {
  long correct = 0;
  for (Index r = 0; r < logits.rows(); ++r) {
    Index arg;
    logits.row(r).maxCoeff(&arg);
    correct += arg == labels[std::size_t(r)];
  }
  return correct;
}

// Teacher outputs keyed by (sample id, flip, rotation). Valid because the
// teacher is frozen and preprocessing is a pure function of those three.
template <typename S>
class TeacherOutputs {
 public:
  TeacherOutputs(Backbone<S>& teacher, bool cache) : teacher_(&teacher), cache_(cache) {}

  void run(const ImageBatch<S>& x, RowMatrix<S>& logits, RowMatrix<S>& features) {
    if (!cache_ || x.ids.empty()) {
      auto out = teacher_->forward(x.pixels, nn::Mode::eval);
      logits = std::move(out.logits);
      features = std::move(out.features.values);
      return;
    }
    const int R = x.size();
    std::vector<std::uint64_t> keys(static_cast<std::size_t>(R));
    std::vector<int> missing;
    for (int r = 0; r < R; ++r) {
      const std::uint64_t key = (std::uint64_t(std::uint32_t(x.ids[std::size_t(r)])) << 3) |
                                (std::uint64_t(x.flipped.empty() ? 0 : x.flipped[std::size_t(r)]) << 2) |
                                std::uint64_t(x.rotation[std::size_t(r)]);
      keys[std::size_t(r)] = key;
      if (!index_.count(key)) missing.push_back(r);
    }
    if (!missing.empty()) {
      auto out = teacher_->forward(gather_samples(x.pixels, missing), nn::Mode::eval);
      for (std::size_t k = 0; k < missing.size(); ++k) {
        const auto key = keys[std::size_t(missing[k])];
        if (index_.count(key)) continue;  // duplicate row within the batch
        index_[key] = static_cast<int>(logits_.size());
        logits_.push_back(out.logits.row(Index(k)));
        features_.push_back(out.features.values.row(Index(k)));
      }
    }
    logits.resize(R, logits_.front().size());
    features.resize(R, features_.front().size());
    for (int r = 0; r < R; ++r) {
      const int slot = index_.at(keys[std::size_t(r)]);
      logits.row(r) = logits_[std::size_t(slot)];
      features.row(r) = features_[std::size_t(slot)];
    }
  }

 private:
  Backbone<S>* teacher_;
  bool cache_;
  std::unordered_map<std::uint64_t, int> index_;
  std::vector<RowVector<S>> logits_, features_;
};

struct EpochAccumulator {
  EpochWeightStats weights;
  double loss_sum = 0;
  long batches = 0, correct = 0, seen = 0;
};

template <typename S>
void finish_epoch(Backbone<S>& model, ProjectionHead<S>* head, const Dataset* val, const TrainConfig& config, int epoch,
                  long step, double lr, const EpochAccumulator& acc, Clock::time_point t0, RunLog& log,
                  TrainResult& result) {
  EpochRecord rec;
  rec.epoch = epoch;
  rec.policy = acc.weights.policy;
  rec.lambda = threshold(epoch, config.scheduler.epsilon);
  rec.mean_v = acc.weights.mean_v();
  rec.frac_easy = acc.weights.frac_easy();
  rec.lr = lr;
  rec.train_loss = acc.batches ? acc.loss_sum / double(acc.batches) : 0.0;
  rec.train_top1 = acc.seen ? 100.0 * double(acc.correct) / double(acc.seen) : 0.0;
  if (val && val->size() > 0) rec.val_top1 = evaluate(model, *val).top1;
  rec.wall_seconds = seconds_since(t0);
  log.epoch(rec);
  spdlog::info("epoch {:3d}  loss {:.4f}  train {:.2f}%  val {:.2f}%  mean_v {:.3f}  lr {:.4g}  {:.1f}s", epoch,
               rec.train_loss, rec.train_top1, rec.val_top1, rec.mean_v, lr, rec.wall_seconds);

  const bool has_val = rec.val_top1 >= 0;
  if (!has_val || rec.val_top1 > result.summary.best_val_top1) {
    result.summary.best_val_top1 = rec.val_top1;
    result.summary.best_epoch = epoch;
    result.best_checkpoint = make_checkpoint(model, step, head);
  }
  result.summary.final_val_top1 = rec.val_top1;
}

nlohmann::json term_dump(int epoch, long step, const std::vector<int>& ids, const PerSampleTerms<double>& t,
                         const Eigen::VectorXd& v, double total) {
  auto vec = [](const Eigen::VectorXd& x) { return std::vector<double>(x.data(), x.data() + x.size()); };
  return nlohmann::json{{"epoch", epoch}, {"step", step}, {"sample_ids", ids}, {"ce", vec(t.ce)},
                        {"kd", vec(t.kd)},  {"fa", vec(t.fa)},    {"cc", vec(t.cc)},         {"ca", t.ca},
                        {"v", vec(v)},      {"total", total}};
}

}  // namespace

template <typename S>
Accuracy evaluate(Backbone<S>& model, const Dataset& data, int batch_size) {
  require(model.num_classes() == data.num_classes, "evaluate: model has " + std::to_string(model.num_classes()) +
                                                       " classes, dataset " + std::to_string(data.num_classes));
  Accuracy acc;
  const int k = std::min(5, data.num_classes);
  long top1 = 0, top5 = 0;
  for (const auto& idx : batch_plan(data.size(), batch_size, false, 0, 0)) {
    auto batch = decode<S>(gather(data.samples, idx), data.norm);
    auto z = model.forward(batch.pixels, nn::Mode::eval).logits;
    for (Index r = 0; r < z.rows(); ++r) {
      const int y = batch.labels[std::size_t(r)];
      const S target = z(r, y);
      // Rank of the true class; ties resolve towards the lower index.
      int above = 0;
      for (Index c = 0; c < z.cols(); ++c) above += z(r, c) > target || (z(r, c) == target && c < y);
      top1 += above == 0;
      top5 += above < k;
    }
  }
  acc.count = data.size();
  if (acc.count) {
    acc.top1 = 100.0 * double(top1) / double(acc.count);
    acc.top5 = 100.0 * double(top5) / double(acc.count);
  }
  return acc;
}

template <typename S>
TrainResult pretrain(Backbone<S>& model, const Dataset& train, const Dataset* val, const TrainConfig& config,
                     RunLog& log) {
  config.validate();
  require(model.num_classes() == train.num_classes, "pretrain: model class count " +
                                                        std::to_string(model.num_classes()) + " != dataset " +
                                                        std::to_string(train.num_classes));
  const auto t0 = Clock::now();
  Sgd<S> opt(model.parameters(), config.sgd);
  LoaderOptions lo{config.batch_size, true, config.flip_prob, config.seed, config.workers, false};
  BatchLoader<S> loader(train, lo);
  TrainResult result;
  long step = 0;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const double lr = step_learning_rate(config.sgd.lr, config.lr_milestones, config.lr_decay, epoch);
    opt.set_lr(lr);
    loader.start_epoch(epoch);
    EpochAccumulator acc;
    acc.weights.epoch = epoch;
    acc.weights.policy = WeightPolicy::none;
    while (auto batch = loader.next()) {
      const int B = batch->size();
      opt.zero_grad();
      auto out = model.forward(batch->pixels, nn::Mode::train);
      RowMatrix<double> z = out.logits.template cast<double>();
      Vector<double> ce = cross_entropy_rows(z, batch->labels);
      StepRecord rec;
      rec.step = ++step;
      rec.epoch = epoch;
      rec.lr = lr;
      rec.ce = rec.contrib_ce = rec.total = ce.mean();
      if (!std::isfinite(rec.total))
        throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + " step " + std::to_string(step));
      RowMatrix<double> dz = cross_entropy_grad(z, batch->labels, Vector<double>(Vector<double>::Constant(B, 1.0 / B)));
      model.backward(RowMatrix<S>(), dz.template cast<S>());
      opt.step();
      log.step(rec);
      acc.loss_sum += rec.total;
      ++acc.batches;
      acc.correct += count_correct(z, batch->labels);
      acc.seen += B;
      acc.weights.count += B;
      acc.weights.sum_v += B;
      acc.weights.easy += B;
    }
    finish_epoch<S>(model, nullptr, val, config, epoch, step, lr, acc, t0, log, result);
  }
  result.final_checkpoint = make_checkpoint(model, step);
  result.summary.steps = step;
  result.summary.wall_seconds = seconds_since(t0);
  return result;
}

template <typename S>
TrainResult distill(Backbone<S>& teacher, Backbone<S>& student, ProjectionHead<S>& head, const Dataset& train,
                    const Dataset* val, const TrainConfig& config, RunLog& log) {
  config.validate();
  const int C = train.num_classes;
  require(teacher.num_classes() == C, "distill: teacher class count " + std::to_string(teacher.num_classes()) +
                                          " != dataset " + std::to_string(C));
  require(student.num_classes() == C, "distill: student class count " + std::to_string(student.num_classes()) +
                                          " != dataset " + std::to_string(C));
  require(head.input_dim() == student.feature_dim() && head.output_dim() == teacher.feature_dim(),
          "distill: projection head must map " + std::to_string(student.feature_dim()) + " -> " +
              std::to_string(teacher.feature_dim()));
  const bool same_dim = student.feature_dim() == teacher.feature_dim();
  const LossWeights& w = config.loss;
  require(w.beta_ca == 0 || same_dim,
          "distill: beta_ca must be 0 when teacher and student feature dims differ (" +
              std::to_string(teacher.feature_dim()) + " vs " + std::to_string(student.feature_dim()) + ")");
  // Teacher centers enter the contrast through projected student features
  // when the pair is heterogeneous.
  const bool head_for_cc = w.beta_cc > 0 && !same_dim;
  const bool use_head = w.beta_fa > 0 || head_for_cc;

  const auto t0 = Clock::now();
  auto params = student.parameters();
  for (auto* p : head.parameters()) params.push_back(p);
  Sgd<S> opt(params, config.sgd);
  LoaderOptions lo{config.batch_size, true, config.flip_prob, config.seed, config.workers, false};
  BatchLoader<S> loader(train, lo);
  TeacherOutputs<S> teacher_out(teacher, config.cache_teacher);
  const Matrix<double> WT = category_centers(teacher).template cast<double>();

  TrainResult result;
  long step = 0;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const double lr = step_learning_rate(config.sgd.lr, config.lr_milestones, config.lr_decay, epoch);
    opt.set_lr(lr);
    loader.start_epoch(epoch);
    EpochAccumulator acc;
    acc.weights.epoch = epoch;
    acc.weights.policy = config.scheduler.policy;

    while (auto batch = loader.next()) {
      const int B = batch->size();
      const LabelBatch& y = batch->labels;
      ImageBatch<S> x = config.rotations ? expand_rotations(*batch) : tag_unrotated(*batch);
      const int R = x.size();
      const auto j0 = rows_with_rotation(x.rotation, 0);

      RowMatrix<S> zT_s, fT_s;
      teacher_out.run(x, zT_s, fT_s);
      opt.zero_grad();
      auto out = forward_with_features(student, x, nn::Mode::train);

      // Loss algebra in double regardless of the network precision.
      FeatureBatch<double> fs{out.features.values.template cast<double>(), x.rotation, x.source};
      FeatureBatch<double> ft{fT_s.template cast<double>(), x.rotation, x.source};
      const RowMatrix<double> zS = out.logits.template cast<double>();
      const RowMatrix<double> zS0 = take_rows(zS, j0);
      const RowMatrix<double> zT0 = take_rows(RowMatrix<double>(zT_s.template cast<double>()), j0);
      const Matrix<double> WS = category_centers(student).template cast<double>();

      PerSampleTerms<double> terms;
      terms.ce = Vector<double>::Zero(B);
      terms.kd = Vector<double>::Zero(B);
      terms.fa = Vector<double>::Zero(B);
      terms.cc = Vector<double>::Zero(B);
      Vector<double> cc_t = Vector<double>::Zero(B), cc_s = Vector<double>::Zero(B);
      FeatureBatch<double> gs;
      std::optional<SampleWeights> weights;
      TotalLoss<double> total;
      try {
        terms.ce = cross_entropy_rows(zS0, y);
        terms.kd = kd_loss_rows(zS0, zT0, w.tau_kd);
        if (use_head) gs = FeatureBatch<double>{head.forward(out.features.values).template cast<double>(), x.rotation,
                                                x.source};
        if (w.beta_fa > 0) terms.fa = sum_by_sample(feature_alignment_rows(gs, ft), fs);
        if (w.beta_cc > 0) {
          cc_t = sum_by_sample(center_contrast_rows(same_dim ? fs : gs, WT, y, w.tau_cc, config.cosine_contrast), fs);
          cc_s = sum_by_sample(center_contrast_rows(fs, WS, y, w.tau_cc, config.cosine_contrast), fs);
          terms.cc = cc_t + cc_s;
        }
        if (w.beta_ca > 0) terms.ca = center_alignment_loss(WS, WT);
        weights = compute_sample_weights(config.scheduler, epoch, terms.ce, (-terms.ce).array().exp().matrix());
        total = total_pckd_loss(terms, weights->v, w, config.preview_applies_to);
        if (!std::isfinite(total.value)) throw NumericError("total loss is not finite");
      } catch (const NumericError& e) {
        const auto dump = term_dump(epoch, step + 1, batch->ids, terms,
                                    weights ? weights->v : Eigen::VectorXd::Ones(B), total.value);
        spdlog::error("aborting distillation: {}\n{}", e.what(), dump.dump());
        throw NumericError(std::string(e.what()) + "; batch breakdown: " + dump.dump());
      }
      acc.weights.add(*weights);

      // Gradients.
      RowMatrix<double> dz = RowMatrix<double>::Zero(R, C);
      {
        RowMatrix<double> d0 = cross_entropy_grad(zS0, y, total.d_ce) + kd_loss_grad(zS0, zT0, w.tau_kd, total.d_kd);
        for (std::size_t k = 0; k < j0.size(); ++k) dz.row(j0[k]) = d0.row(Index(k));
      }
      RowMatrix<double> df = RowMatrix<double>::Zero(R, fs.dim());
      RowMatrix<double> dg;
      if (use_head) dg = RowMatrix<double>::Zero(R, head.output_dim());
      Matrix<double> dWS = Matrix<double>::Zero(WS.rows(), WS.cols());
      if (w.beta_cc > 0) {
        const Vector<double> rw = spread_to_rows(total.d_cc, fs);
        auto gs_grad = center_contrast_grad(fs, WS, y, w.tau_cc, config.cosine_contrast, rw);
        df += gs_grad.features;
        dWS += gs_grad.centers;
        auto gt_grad = center_contrast_grad(same_dim ? fs : gs, WT, y, w.tau_cc, config.cosine_contrast, rw);
        (same_dim ? df : dg) += gt_grad.features;
      }
      if (w.beta_fa > 0) dg += feature_alignment_grad(gs, ft, spread_to_rows(total.d_fa, fs));
      if (w.beta_ca > 0) dWS += total.d_ca * center_alignment_grad(WS, WT);
      if (use_head) df += head.backward(dg.template cast<S>()).template cast<double>();
      student.backward(df.template cast<S>(), dz.template cast<S>());
      student.classifier().weight().grad += dWS.template cast<S>();
      opt.step();

      StepRecord rec;
      rec.step = ++step;
      rec.epoch = epoch;
      rec.lr = lr;
      rec.ce = total.unweighted.ce;
      rec.kd = total.unweighted.kd;
      rec.fa = total.unweighted.fa;
      rec.ca = total.unweighted.ca;
      rec.cc_t = cc_t.mean();
      rec.cc_s = cc_s.mean();
      rec.contrib_ce = total.contribution.ce;
      rec.contrib_kd = total.contribution.kd;
      rec.contrib_fa = total.contribution.fa;
      rec.contrib_ca = total.contribution.ca;
      rec.contrib_cc = total.contribution.cc;
      rec.total = total.value;
      rec.mean_v = weights->v.mean();
      log.step(rec);

      acc.loss_sum += total.value;
      ++acc.batches;
      acc.correct += count_correct(zS0, y);
      acc.seen += B;
    }
    finish_epoch<S>(student, &head, val, config, epoch, step, lr, acc, t0, log, result);
  }
  result.final_checkpoint = make_checkpoint(student, step, &head);
  result.summary.steps = step;
  result.summary.wall_seconds = seconds_since(t0);
  return result;
}

template Accuracy evaluate<float>(Backbone<float>&, const Dataset&, int);
template Accuracy evaluate<double>(Backbone<double>&, const Dataset&, int);
template TrainResult pretrain<float>(Backbone<float>&, const Dataset&, const Dataset*, const TrainConfig&, RunLog&);
template TrainResult pretrain<double>(Backbone<double>&, const Dataset&, const Dataset*, const TrainConfig&, RunLog&);
template TrainResult distill<float>(Backbone<float>&, Backbone<float>&, ProjectionHead<float>&, const Dataset&,
                                    const Dataset*, const TrainConfig&, RunLog&);
template TrainResult distill<double>(Backbone<double>&, Backbone<double>&, ProjectionHead<double>&, const Dataset&,
                                     const Dataset*, const TrainConfig&, RunLog&);

}  // namespace pckd
