#include "pckd/data.hpp"
#include "pckd/losses.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>
#include <set>

namespace pckd {

std::string_view split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

std::optional<Split> parse_split(std::string_view name) {
  for (Split s : {Split::train, Split::val, Split::test})
    if (split_name(s) == name) return s;
  return std::nullopt;
}

void SyntheticSpec::validate() const {
  require(num_classes >= 2, "synthetic.num_classes must be >= 2");
  require(per_class >= 1, "synthetic.per_class must be >= 1");
  require(test_per_class >= 0, "synthetic.test_per_class must be >= 0");
  require(image_size >= 8, "synthetic.image_size must be >= 8");
  require(hard_fraction >= 0 && hard_fraction <= 1, "synthetic.hard_fraction must lie in [0, 1]");
  require(class_hard_fraction.empty() || int(class_hard_fraction.size()) == num_classes,
          "synthetic.class_hard_fraction needs one entry per class");
  for (double f : class_hard_fraction) require(f >= 0 && f <= 1, "synthetic.class_hard_fraction entries must lie in [0, 1]");
  require(noise >= 0 && hard_noise >= 0, "synthetic noise levels must be non-negative");
  require(clutter >= 0, "synthetic.clutter must be non-negative");
}

void DatasetSpec::validate() const {
  require(num_classes >= 2, "dataset.num_classes must be >= 2");
  require(image_size >= 1, "dataset.image_size must be positive");
  require(label_bytes == 1 || label_bytes == 2, "dataset.label_bytes must be 1 or 2");
  require(val_fraction >= 0 && val_fraction < 1, "dataset.val_fraction must lie in [0, 1)");
  require(max_train >= 0, "dataset.max_train must be non-negative");
  require(norm.mean.size() == 3 && norm.stddev.size() == 3, "dataset.norm needs three means and three stddevs");
  for (double s : norm.stddev) require(s > 0, "dataset.norm.stddev entries must be > 0");
  if (synthetic) {
    synthetic->validate();
    require(synthetic->num_classes == num_classes, "dataset.num_classes does not match synthetic.num_classes");
    require(synthetic->image_size == image_size, "dataset.image_size does not match synthetic.image_size");
  } else {
    require(!root.empty(), "dataset.root is required for on-disk datasets");
  }
}

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c) {
  auto splitmix = [](std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
  };
  return splitmix(splitmix(splitmix(a) ^ b) ^ c);
}

std::uint64_t sample_hash(const RawBatch& batch, int index) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto eat = [&h](std::uint8_t byte) {
    h ^= byte;
    h *= 0x100000001b3ULL;
  };
  eat(static_cast<std::uint8_t>(batch.labels[std::size_t(index)]));
  const std::uint8_t* p = batch.pixels.data() + batch.sample_bytes() * std::size_t(index);
  for (std::size_t k = 0; k < batch.sample_bytes(); ++k) eat(p[k]);
  return h;
}

RawBatch gather(const RawBatch& source, const std::vector<int>& indices) {
  RawBatch out;
  out.channels = source.channels;
  out.height = source.height;
  out.width = source.width;
  const std::size_t bytes = source.sample_bytes();
  out.pixels.resize(bytes * indices.size());
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const int i = indices[k];
    require(i >= 0 && i < source.size(), "gather: index out of range");
    std::copy_n(source.pixels.begin() + std::ptrdiff_t(bytes * std::size_t(i)), bytes,
                out.pixels.begin() + std::ptrdiff_t(bytes * k));
    out.labels.push_back(source.labels[std::size_t(i)]);
    out.ids.push_back(source.ids.empty() ? i : source.ids[std::size_t(i)]);
  }
  return out;
}

Dataset subset(const Dataset& data, const std::vector<int>& indices) {
  Dataset out;
  out.name = data.name;
  out.split = data.split;
  out.num_classes = data.num_classes;
  out.norm = data.norm;
  out.samples = gather(data.samples, indices);
  if (!data.hard.empty())
    for (int i : indices) out.hard.push_back(data.hard[std::size_t(i)]);
  return out;
}

std::vector<std::vector<int>> batch_plan(int n, int batch_size, bool shuffle, std::uint64_t seed, int epoch,
                                         bool drop_last) {
  require(batch_size > 0, "batch_plan: batch_size must be positive");
  std::vector<int> order(std::size_t(std::max(n, 0)));
  std::iota(order.begin(), order.end(), 0);
  if (shuffle) {
    std::mt19937_64 rng(mix_seed(seed, std::uint64_t(epoch)));
    std::shuffle(order.begin(), order.end(), rng);
  }
  std::vector<std::vector<int>> plan;
  for (int start = 0; start < n; start += batch_size) {
    const int end = std::min(n, start + batch_size);
    if (drop_last && end - start < batch_size) break;
    plan.emplace_back(order.begin() + start, order.begin() + end);
  }
  return plan;
}

// ---------------------------------------------------------------------------
// CIFAR-style records

RawBatch read_cifar_records(const std::filesystem::path& file, int image_size, int label_bytes) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw IngestionError("cannot open dataset file " + file.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  RawBatch out;
  out.height = out.width = image_size;
  const std::size_t record = std::size_t(label_bytes) + out.sample_bytes();
  if (bytes.empty() || bytes.size() % record != 0)
    throw IngestionError("corrupt dataset file " + file.string() + ": size " + std::to_string(bytes.size()) +
                         " is not a positive multiple of the record size " + std::to_string(record));
  const std::size_t n = bytes.size() / record;
  out.pixels.resize(n * out.sample_bytes());
  out.labels.resize(n);
  out.ids.resize(n);
  for (std::size_t r = 0; r < n; ++r) {
    const std::uint8_t* rec = bytes.data() + r * record;
    out.labels[r] = rec[label_bytes - 1];
    out.ids[r] = static_cast<int>(r);
    std::copy_n(rec + label_bytes, out.sample_bytes(), out.pixels.begin() + std::ptrdiff_t(r * out.sample_bytes()));
  }
  return out;
}

void write_cifar_records(const std::filesystem::path& file, const RawBatch& batch, int label_bytes,
                         const std::vector<int>& coarse_labels) {
  require(label_bytes == 1 || label_bytes == 2, "write_cifar_records: label_bytes must be 1 or 2");
  require(batch.channels == 3, "write_cifar_records: records hold three channels");
  std::ofstream out(file, std::ios::binary);
  if (!out) throw IngestionError("cannot write dataset file " + file.string());
  for (int i = 0; i < batch.size(); ++i) {
    if (label_bytes == 2)
      out.put(static_cast<char>(coarse_labels.empty() ? 0 : coarse_labels[std::size_t(i)]));
    out.put(static_cast<char>(batch.labels[std::size_t(i)]));
    out.write(reinterpret_cast<const char*>(batch.pixels.data() + batch.sample_bytes() * std::size_t(i)),
              std::streamsize(batch.sample_bytes()));
  }
  if (!out) throw IngestionError("failed writing dataset file " + file.string());
}

namespace {

std::filesystem::path locate(const std::filesystem::path& root, std::initializer_list<const char*> names) {
  for (const char* n : names)
    if (std::filesystem::exists(root / n)) return root / n;
  return root / *names.begin();
}

RawBatch concat(std::vector<RawBatch> parts) {
  RawBatch out = std::move(parts.front());
  for (std::size_t k = 1; k < parts.size(); ++k) {
    out.pixels.insert(out.pixels.end(), parts[k].pixels.begin(), parts[k].pixels.end());
    out.labels.insert(out.labels.end(), parts[k].labels.begin(), parts[k].labels.end());
  }
  out.ids.resize(out.labels.size());
  std::iota(out.ids.begin(), out.ids.end(), 0);
  return out;
}

RawBatch read_training_pool(const DatasetSpec& spec) {
  // A single train.bin, or the numbered batches of the original distribution.
  if (!std::filesystem::exists(spec.root / "train.bin")) {
    std::vector<RawBatch> parts;
    for (int k = 1;; ++k) {
      auto f = spec.root / ("data_batch_" + std::to_string(k) + ".bin");
      if (!std::filesystem::exists(f)) break;
      parts.push_back(read_cifar_records(f, spec.image_size, spec.label_bytes));
    }
    if (!parts.empty()) return concat(std::move(parts));
  }
  return read_cifar_records(spec.root / "train.bin", spec.image_size, spec.label_bytes);
}

void check_labels(const RawBatch& b, int num_classes, const std::string& where, bool require_all) {
  std::set<int> seen;
  for (int y : b.labels) {
    if (y < 0 || y >= num_classes)
      throw IngestionError(where + ": label " + std::to_string(y) + " outside [0, " + std::to_string(num_classes) + ")");
    seen.insert(y);
  }
  if (require_all && int(seen.size()) != num_classes)
    throw IngestionError(where + ": declared " + std::to_string(num_classes) + " classes but found " +
                         std::to_string(seen.size()));
}

}  // namespace

Dataset load_dataset(const DatasetSpec& spec) {
  spec.validate();
  Dataset out;
  out.name = spec.name;
  out.split = spec.split;
  out.num_classes = spec.num_classes;
  out.norm = spec.norm;

  if (spec.split == Split::test) {
    if (spec.synthetic) {
      Dataset gen = generate_synthetic(*spec.synthetic, true);
      out.samples = std::move(gen.samples);
      out.hard = std::move(gen.hard);
    } else {
      auto file = locate(spec.root, {"test.bin", "test_batch.bin"});
      out.samples = read_cifar_records(file, spec.image_size, spec.label_bytes);
      check_labels(out.samples, spec.num_classes, file.string(), false);
    }
    // Test ids follow the training pool so identities never collide.
    for (auto& id : out.samples.ids) id += 1 << 24;
    return out;
  }

  Dataset pool;
  if (spec.synthetic) {
    pool = generate_synthetic(*spec.synthetic, false);
  } else {
    pool.samples = read_training_pool(spec);
    if (spec.max_train > 0 && spec.max_train < pool.size()) {
      std::vector<int> head(std::size_t(spec.max_train));
      std::iota(head.begin(), head.end(), 0);
      pool.samples = gather(pool.samples, head);
    }
    check_labels(pool.samples, spec.num_classes, (spec.root / "train.bin").string(), true);
  }

  std::vector<int> order(std::size_t(pool.size()));
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(mix_seed(spec.split_seed, 0x5eed));
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_val = static_cast<std::size_t>(std::llround(spec.val_fraction * double(pool.size())));
  std::vector<int> chosen = spec.split == Split::val ? std::vector<int>(order.begin(), order.begin() + std::ptrdiff_t(n_val))
                                                     : std::vector<int>(order.begin() + std::ptrdiff_t(n_val), order.end());
  std::sort(chosen.begin(), chosen.end());
  Dataset part = subset(pool, chosen);
  out.samples = std::move(part.samples);
  out.hard = std::move(part.hard);
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic generator

namespace {

using Rgb = std::array<double, 3>;

Rgb hsv(double h, double s, double v) {
  h = h - std::floor(h);
  const double c = v * s, hp = h * 6.0, x = c * (1 - std::abs(std::fmod(hp, 2.0) - 1));
  Rgb rgb{};
  switch (static_cast<int>(hp) % 6) {
    case 0: rgb = {c, x, 0}; break;
    case 1: rgb = {x, c, 0}; break;
    case 2: rgb = {0, c, x}; break;
    case 3: rgb = {0, x, c}; break;
    case 4: rgb = {x, 0, c}; break;
    default: rgb = {c, 0, x}; break;
  }
  for (double& ch : rgb) ch += v - c;
  return rgb;
}

constexpr int kShapes = 5;

// Shape membership in the shape's own frame, scaled so the shape fits the unit disc.
bool inside(int shape, double u, double v) {
  switch (shape) {
    case 0: return u * u + v * v < 0.81;  // disc
    case 1: {                             // ring
      const double r2 = u * u + v * v;
      return r2 < 1.0 && r2 > 0.36;
    }
    case 2: return std::abs(u) < 0.7 && std::abs(v) < 0.7;  // square
    case 3: return (std::abs(u) < 0.28 && std::abs(v) < 1.0) || (std::abs(v) < 0.28 && std::abs(u) < 1.0);  // cross
    default: {  // triangle
      const double s3 = std::sqrt(3.0);
      return v > -0.5 && s3 * u + v < 1.0 && -s3 * u + v < 1.0;
    }
  }
}

struct Stroke {
  int shape;
  bool striped;  // alternate bands of the second colour across the shape
  Rgb color, band;
  double cx, cy, radius, angle, alpha;
};

void draw(std::vector<double>& img, int size, const Stroke& s) {
  const double ca = std::cos(s.angle), sa = std::sin(s.angle);
  const int plane = size * size;
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      // 2x2 supersampling keeps small shapes from aliasing into each other.
      int hits = 0, banded = 0;
      for (int sy = 0; sy < 2; ++sy)
        for (int sx = 0; sx < 2; ++sx) {
          const double dx = (x + 0.25 + 0.5 * sx - s.cx) / s.radius, dy = (y + 0.25 + 0.5 * sy - s.cy) / s.radius;
          const double u = ca * dx + sa * dy, v = -sa * dx + ca * dy;
          if (!inside(s.shape, u, v)) continue;
          ++hits;
          banded += s.striped && std::sin(3.0 * std::numbers::pi * u) > 0;
        }
      if (hits == 0) continue;
      const double a = s.alpha * hits / 4.0, mix = hits ? double(banded) / hits : 0.0;
      for (int c = 0; c < 3; ++c) {
        double& p = img[std::size_t(c * plane + y * size + x)];
        const double ink = (1 - mix) * s.color[std::size_t(c)] + mix * s.band[std::size_t(c)];
        p = (1 - a) * p + a * ink;
      }
    }
}

// Ten classes are the five shapes, solid or striped, in arbitrary colours.
// Larger class counts add a hue family per block of ten.
Rgb class_color(int c, int num_classes, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> U(0.0, 1.0);
  const int families = (num_classes + 9) / 10;
  const double hue = families == 1 ? U(rng) : (double(c / 10) + 0.6 * U(rng)) / families;
  return hsv(hue, 0.6 + 0.4 * U(rng), 0.7 + 0.3 * U(rng));
}

void render(const SyntheticSpec& spec, int label, bool hard, std::uint64_t seed, std::uint8_t* out) {
  const int S = spec.image_size, plane = S * S;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> U(0.0, 1.0);
  std::normal_distribution<double> N(0.0, 1.0);

  // Background: dim colour gradient.
  std::vector<double> img(std::size_t(3 * plane));
  const Rgb base = hsv(U(rng), 0.3 * U(rng), 0.15 + 0.25 * U(rng));
  const double gx = 0.2 * (U(rng) - 0.5), gy = 0.2 * (U(rng) - 0.5);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < S; ++y)
      for (int x = 0; x < S; ++x)
        img[std::size_t(c * plane + y * S + x)] = base[std::size_t(c)] + gx * (x - S / 2.0) / S + gy * (y - S / 2.0) / S;

  const double two_pi = 2 * std::numbers::pi;
  auto stroke_for = [&](int cls, double scale, double alpha) {
    Stroke s;
    s.shape = cls % kShapes;
    s.striped = (cls / kShapes) % 2 == 1;
    s.color = class_color(cls, spec.num_classes, rng);
    const Rgb inverse{1 - s.color[0], 1 - s.color[1], 1 - s.color[2]};
    s.band = inverse;
    s.radius = S * scale * (0.2 + 0.1 * U(rng));
    s.cx = S * (0.3 + 0.4 * U(rng));
    s.cy = S * (0.3 + 0.4 * U(rng));
    s.angle = two_pi * U(rng);
    s.alpha = alpha;
    return s;
  };

  if (hard) {
    for (int k = 0; k < spec.clutter; ++k) {
      int other = static_cast<int>(rng() % std::uint64_t(spec.num_classes - 1));
      if (other >= label) ++other;
      draw(img, S, stroke_for(other, 0.7, 0.5 + 0.3 * U(rng)));
    }
    draw(img, S, stroke_for(label, 1.0, 0.55 + 0.25 * U(rng)));
  } else {
    draw(img, S, stroke_for(label, 1.0, 1.0));
  }

  const double sigma = hard ? spec.hard_noise : spec.noise;
  for (int k = 0; k < 3 * plane; ++k) {
    const double v = img[std::size_t(k)] + sigma * N(rng);
    out[k] = static_cast<std::uint8_t>(std::clamp(std::lround(255.0 * v), 0L, 255L));
  }
}

}  // namespace

Dataset generate_synthetic(const SyntheticSpec& spec, bool test_set) {
  spec.validate();
  const int per_class = test_set ? spec.test_per_class : spec.per_class;
  const int n = per_class * spec.num_classes;
  Dataset out;
  out.name = "synthetic";
  out.split = test_set ? Split::test : Split::train;
  out.num_classes = spec.num_classes;
  out.samples.height = out.samples.width = spec.image_size;
  out.samples.pixels.resize(out.samples.sample_bytes() * std::size_t(n));
  out.samples.labels.resize(std::size_t(n));
  out.samples.ids.resize(std::size_t(n));
  out.hard.resize(std::size_t(n));
  const std::uint64_t stream = test_set ? 2 : 1;
  for (int i = 0; i < n; ++i) {
    const int label = i % spec.num_classes;
    const int rank = i / spec.num_classes;  // position within the class
    // Hard samples are spread evenly through each class.
    const double f = spec.hard_fraction_of(label);
    const bool hard = std::floor((rank + 1) * f) > std::floor(rank * f);
    out.samples.labels[std::size_t(i)] = label;
    out.samples.ids[std::size_t(i)] = i;
    out.hard[std::size_t(i)] = hard;
    render(spec, label, hard, mix_seed(spec.seed, stream, std::uint64_t(i)),
           out.samples.pixels.data() + out.samples.sample_bytes() * std::size_t(i));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Transfer

template <typename S>
RowMatrix<double> extract_features(Backbone<S>& backbone, const Dataset& data, int batch_size) {
  RowMatrix<double> out(data.size(), backbone.feature_dim());
  for (const auto& idx : batch_plan(data.size(), batch_size, false, 0, 0)) {
    auto batch = decode<S>(gather(data.samples, idx), data.norm);
    RowMatrix<S> f = backbone.features(batch.pixels, nn::Mode::eval);
    out.middleRows(idx.front(), Index(idx.size())) = f.template cast<double>();
  }
  return out;
}

double linear_head_accuracy(nn::Dense<double>& head, const RowMatrix<double>& features, const LabelBatch& labels) {
  if (labels.empty()) return 0.0;
  RowMatrix<double> z = head.forward(features, false);
  int correct = 0;
  for (Index r = 0; r < z.rows(); ++r) {
    Index arg;
    z.row(r).maxCoeff(&arg);
    correct += arg == labels[std::size_t(r)];
  }
  return 100.0 * correct / double(labels.size());
}

LinearProbe train_linear_head(const RowMatrix<double>& features, const LabelBatch& labels, int num_classes,
                              const TransferConfig& config) {
  require(features.rows() == Index(labels.size()), "train_linear_head: feature/label count mismatch");
  require(config.expected_feature_dim == 0 || features.cols() == config.expected_feature_dim,
          "transfer: backbone feature dim " + std::to_string(features.cols()) + " != expected " +
              std::to_string(config.expected_feature_dim));
  detail::require_labels<double>(labels, num_classes);
  LinearProbe probe{nn::Dense<double>("transfer_head", int(features.cols()), num_classes), 0, 0};
  nn::Rng rng(mix_seed(config.seed, 0x7ead));
  probe.head.init(rng);
  probe.initial_train_top1 = linear_head_accuracy(probe.head, features, labels);

  nn::ParameterList<double> params;
  probe.head.collect(params);
  Sgd<double> opt(params, config.sgd);
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    opt.set_lr(step_learning_rate(config.sgd.lr, config.milestones, config.lr_decay, epoch));
    for (const auto& idx : batch_plan(int(labels.size()), config.batch_size, true, config.seed, epoch)) {
      RowMatrix<double> x(Index(idx.size()), features.cols());
      LabelBatch y;
      for (std::size_t k = 0; k < idx.size(); ++k) {
        x.row(Index(k)) = features.row(idx[k]);
        y.push_back(labels[std::size_t(idx[k])]);
      }
      opt.zero_grad();
      RowMatrix<double> z = probe.head.forward(x);
      probe.head.backward(cross_entropy_grad(z, y, Vector<double>(Vector<double>::Constant(Index(idx.size()), 1.0 / double(idx.size())))));
      opt.step();
    }
  }
  probe.train_top1 = linear_head_accuracy(probe.head, features, labels);
  return probe;
}

template <typename S>
TransferResult transfer_protocol(Backbone<S>& backbone, const Dataset& target_train, const Dataset& target_test,
                                 const TransferConfig& config) {
  require(config.expected_feature_dim == 0 || backbone.feature_dim() == config.expected_feature_dim,
          "transfer: backbone feature dim " + std::to_string(backbone.feature_dim()) + " != expected " +
              std::to_string(config.expected_feature_dim));
  require(target_train.num_classes == target_test.num_classes, "transfer: train/test class counts differ");
  RowMatrix<double> train_f = extract_features(backbone, target_train);
  RowMatrix<double> test_f = extract_features(backbone, target_test);
  auto probe = train_linear_head(train_f, target_train.samples.labels, target_train.num_classes, config);
  TransferResult r;
  r.train_top1 = probe.train_top1;
  r.test_top1 = linear_head_accuracy(probe.head, test_f, target_test.samples.labels);
  nn::Dense<double> fresh("transfer_head", backbone.feature_dim(), target_train.num_classes);
  nn::Rng rng(mix_seed(config.seed, 0x7ead));
  fresh.init(rng);
  r.initial_test_top1 = linear_head_accuracy(fresh, test_f, target_test.samples.labels);
  return r;
}

TransferResult transfer_protocol(const Checkpoint& student, const DatasetSpec& target, const TransferConfig& config) {
  Backbone<float> backbone(student.backbone);
  load_weights(backbone, student);
  DatasetSpec train_spec = target, test_spec = target;
  train_spec.split = Split::train;
  train_spec.val_fraction = 0;
  test_spec.split = Split::test;
  return transfer_protocol(backbone, load_dataset(train_spec), load_dataset(test_spec), config);
}

template RowMatrix<double> extract_features<float>(Backbone<float>&, const Dataset&, int);
template RowMatrix<double> extract_features<double>(Backbone<double>&, const Dataset&, int);
template TransferResult transfer_protocol<float>(Backbone<float>&, const Dataset&, const Dataset&, const TransferConfig&);
template TransferResult transfer_protocol<double>(Backbone<double>&, const Dataset&, const Dataset&, const TransferConfig&);

}  // namespace pckd
