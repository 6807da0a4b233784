#include "pckd/data.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <set>

using namespace pckd;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("pckd_data_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

DatasetSpec synthetic_spec(int per_class, double val_fraction = 0.0) {
  DatasetSpec spec;
  SyntheticSpec syn;
  syn.per_class = per_class;
  syn.test_per_class = 10;
  syn.seed = 3;
  spec.synthetic = syn;
  spec.val_fraction = val_fraction;
  return spec;
}

RawBatch random_records(int n, int classes, int size, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  RawBatch b;
  b.height = b.width = size;
  b.pixels.resize(b.sample_bytes() * std::size_t(n));
  for (auto& p : b.pixels) p = static_cast<std::uint8_t>(rng());
  for (int i = 0; i < n; ++i) b.labels.push_back(i % classes);
  return b;
}

}  // namespace

TEST(LoadDataset, CifarStyleFiftyThousandRecords) {
  auto dir = scratch_dir("c100");
  auto records = random_records(50000, 100, 32, 1);
  std::vector<int> coarse(50000);
  for (int i = 0; i < 50000; ++i) coarse[std::size_t(i)] = records.labels[std::size_t(i)] / 5;
  write_cifar_records(dir / "train.bin", records, 2, coarse);
  DatasetSpec spec;
  spec.name = "cifar100";
  spec.root = dir;
  spec.num_classes = 100;
  spec.label_bytes = 2;
  spec.val_fraction = 0;
  auto data = load_dataset(spec);
  ASSERT_EQ(data.size(), 50000);
  std::set<int> labels(data.samples.labels.begin(), data.samples.labels.end());
  EXPECT_EQ(labels.size(), 100u);
  EXPECT_EQ(*labels.begin(), 0);
  EXPECT_EQ(*labels.rbegin(), 99);
  EXPECT_EQ(data.samples.labels, records.labels);  // fine label, not the coarse byte
  EXPECT_EQ(data.samples.pixels, records.pixels);
  fs::remove_all(dir);
}

TEST(LoadDataset, NumberedBatchFiles) {
  auto dir = scratch_dir("c10");
  write_cifar_records(dir / "data_batch_1.bin", random_records(30, 10, 8, 2), 1);
  write_cifar_records(dir / "data_batch_2.bin", random_records(20, 10, 8, 3), 1);
  DatasetSpec spec;
  spec.root = dir;
  spec.image_size = 8;
  spec.val_fraction = 0;
  auto data = load_dataset(spec);
  EXPECT_EQ(data.size(), 50);
  EXPECT_EQ(data.samples.ids.back(), 49);
  fs::remove_all(dir);
}

TEST(LoadDataset, MissingAndCorruptFilesNameThePath) {
  auto dir = scratch_dir("bad");
  DatasetSpec spec;
  spec.root = dir;
  try {
    load_dataset(spec);
    FAIL() << "expected IngestionError";
  } catch (const IngestionError& e) {
    EXPECT_NE(std::string(e.what()).find((dir / "train.bin").string()), std::string::npos);
  }
  {
    std::ofstream out(dir / "train.bin", std::ios::binary);
    out << "short";
  }
  EXPECT_THROW(load_dataset(spec), IngestionError);
  fs::remove_all(dir);
}

TEST(LoadDataset, DeclaredClassCountMustMatchLabels) {
  auto dir = scratch_dir("labels");
  write_cifar_records(dir / "train.bin", random_records(40, 5, 8, 4), 1);
  DatasetSpec spec;
  spec.root = dir;
  spec.image_size = 8;
  spec.num_classes = 10;
  EXPECT_THROW(load_dataset(spec), IngestionError);
  spec.num_classes = 3;
  EXPECT_THROW(load_dataset(spec), IngestionError);
  spec.num_classes = 5;
  EXPECT_NO_THROW(load_dataset(spec));
  fs::remove_all(dir);
}

TEST(LoadDataset, SyntheticCountAndDeterminism) {
  auto spec = synthetic_spec(100);
  auto a = load_dataset(spec);
  EXPECT_EQ(a.size(), 1000);
  std::vector<int> per_class(10);
  for (int y : a.samples.labels) ++per_class[std::size_t(y)];
  for (int c : per_class) EXPECT_EQ(c, 100);
  auto b = load_dataset(spec);
  EXPECT_EQ(a.samples.pixels, b.samples.pixels);
  EXPECT_EQ(a.samples.labels, b.samples.labels);
  // 30% hard per class by default.
  int hard = 0;
  for (auto h : a.hard) hard += h;
  EXPECT_EQ(hard, 300);
  spec.synthetic->seed = 4;
  EXPECT_NE(load_dataset(spec).samples.pixels, a.samples.pixels);
}

TEST(LoadDataset, SplitsAreDisjointByIdentity) {
  auto spec = synthetic_spec(50, 0.2);
  auto train = load_dataset(spec);
  spec.split = Split::val;
  auto val = load_dataset(spec);
  spec.split = Split::test;
  auto test = load_dataset(spec);
  EXPECT_EQ(train.size(), 400);
  EXPECT_EQ(val.size(), 100);
  EXPECT_EQ(test.size(), 100);
  std::set<int> ids;
  std::set<std::uint64_t> hashes;
  std::size_t total = 0;
  for (const Dataset* d : {&train, &val, &test}) {
    for (int i = 0; i < d->size(); ++i) {
      ids.insert(d->samples.ids[std::size_t(i)]);
      hashes.insert(sample_hash(d->samples, i));
      ++total;
    }
  }
  EXPECT_EQ(ids.size(), total);
  EXPECT_EQ(hashes.size(), total);
}

TEST(BatchPlan, SeededOrder) {
  auto a = batch_plan(103, 10, true, 7, 0);
  EXPECT_EQ(a.size(), 11u);
  EXPECT_EQ(a.back().size(), 3u);
  EXPECT_EQ(a, batch_plan(103, 10, true, 7, 0));
  EXPECT_NE(a, batch_plan(103, 10, true, 7, 1));
  EXPECT_EQ(batch_plan(103, 10, true, 7, 0, true).size(), 10u);
  std::set<int> seen;
  for (auto& b : a) seen.insert(b.begin(), b.end());
  EXPECT_EQ(seen.size(), 103u);
}

TEST(BatchLoader, WorkerCountDoesNotChangeOutput) {
  auto data = load_dataset(synthetic_spec(20));
  data.norm = Normalization{{0.4, 0.4, 0.4}, {0.2, 0.2, 0.2}};
  LoaderOptions opt;
  opt.batch_size = 32;
  opt.seed = 5;
  BatchLoader<float> serial(data, opt);
  opt.workers = 3;
  BatchLoader<float> parallel(data, opt);
  serial.start_epoch(2);
  parallel.start_epoch(2);
  int batches = 0;
  while (auto a = serial.next()) {
    auto b = parallel.next();
    ASSERT_TRUE(b.has_value());
    EXPECT_EQ(a->pixels.data, b->pixels.data);
    EXPECT_EQ(a->labels, b->labels);
    EXPECT_EQ(a->flipped, b->flipped);
    ++batches;
  }
  EXPECT_FALSE(parallel.next().has_value());
  EXPECT_EQ(batches, 7);
}

TEST(BatchLoader, UsesDeclaredNormalization) {
  auto spec = synthetic_spec(5);
  spec.norm = Normalization{{0.5, 0.4, 0.3}, {0.25, 0.2, 0.1}};
  auto data = load_dataset(spec);
  LoaderOptions opt;
  opt.batch_size = 50;
  opt.shuffle = false;
  opt.flip_prob = 0;
  BatchLoader<double> loader(data, opt);
  loader.start_epoch(0);
  auto batch = loader.next();
  auto expected = preprocess<double>(data.samples, 0.0, spec.norm, 0);
  EXPECT_EQ(batch->pixels.data, expected.pixels.data);
}

// A separable fixture: class c sits at a distinct vertex of a scaled simplex
// with small isotropic noise.
TEST(Transfer, LinearHeadOnSeparableFeatures) {
  const int C = 10, per = 60, K = 16;
  std::mt19937_64 rng(11);
  std::normal_distribution<double> n(0.0, 0.3);
  RowMatrix<double> means = RowMatrix<double>::Zero(C, K);
  for (int c = 0; c < C; ++c) means(c, c) = 4.0;
  RowMatrix<double> x(C * per, K);
  LabelBatch y;
  for (int i = 0; i < C * per; ++i) {
    const int c = i % C;
    for (int k = 0; k < K; ++k) x(i, k) = means(c, k) + n(rng);
    y.push_back(c);
  }
  // Oracle: one-vs-rest least squares on [x, 1] separates the fixture.
  Matrix<double> a(x.rows(), K + 1);
  a << x, Matrix<double>::Ones(x.rows(), 1);
  Matrix<double> targets = Matrix<double>::Zero(x.rows(), C);
  for (int i = 0; i < C * per; ++i) targets(i, y[std::size_t(i)]) = 1.0;
  Matrix<double> w = a.colPivHouseholderQr().solve(targets);
  Matrix<double> scores = a * w;
  int oracle_correct = 0;
  for (Index r = 0; r < scores.rows(); ++r) {
    Index arg;
    scores.row(r).maxCoeff(&arg);
    oracle_correct += arg == y[std::size_t(r)];
  }
  ASSERT_GE(oracle_correct, 0.99 * C * per);

  TransferConfig cfg;
  cfg.epochs = 20;
  cfg.batch_size = 64;
  auto probe = train_linear_head(x, y, C, cfg);
  EXPECT_GE(probe.train_top1, 99.0);
  EXPECT_LT(probe.initial_train_top1, 50.0);
}

TEST(Transfer, BackboneFrozenAndHeadOnly) {
  auto spec = synthetic_spec(20);
  auto train = load_dataset(spec);
  spec.split = Split::test;
  auto test = load_dataset(spec);
  Backbone<float> model(lookup_backbone("resnet8", 5), 1);  // source class count differs
  auto before = snapshot(model);
  RowMatrix<double> f_before = extract_features(model, test);
  TransferConfig cfg;
  cfg.epochs = 5;
  auto result = transfer_protocol(model, train, test, cfg);
  auto after = snapshot(model);
  ASSERT_EQ(before.size(), after.size());
  for (std::size_t i = 0; i < before.size(); ++i) EXPECT_EQ(before[i], after[i]);
  EXPECT_EQ(extract_features(model, test), f_before);
  EXPECT_GE(result.test_top1, 0.0);
  EXPECT_LE(result.initial_test_top1, 40.0);

  cfg.expected_feature_dim = 64;
  EXPECT_THROW(transfer_protocol(model, train, test, cfg), ContractViolation);
}

TEST(DatasetSpec, Validation) {
  DatasetSpec spec;
  EXPECT_THROW(spec.validate(), ContractViolation);  // on-disk without root
  spec = synthetic_spec(10);
  spec.num_classes = 5;
  EXPECT_THROW(spec.validate(), ContractViolation);
  spec = synthetic_spec(10);
  spec.label_bytes = 3;
  EXPECT_THROW(spec.validate(), ContractViolation);
}
