#include "pckd/config.hpp"

#include <yaml-cpp/yaml.h>

#include <charconv>
#include <fstream>
#include <set>
#include <sstream>

namespace pckd {

std::string_view precision_name(Precision p) { return p == Precision::f32 ? "float" : "double"; }

ConfigError::ConfigError(std::string source, int line, std::string field, const std::string& reason)
    : ContractViolation(source + (line > 0 ? ":" + std::to_string(line) : std::string()) + ": " + field + ": " +
                        reason),
      source_(std::move(source)),
      line_(line),
      field_(std::move(field)),
      reason_(reason) {}

void ExperimentConfig::validate() const {
  auto wrap = [](const std::string& field, auto&& fn) {
    try {
      fn();
    } catch (const ConfigError&) {
      throw;
    } catch (const ContractViolation& e) {
      throw ConfigError("<config>", 0, field, e.what());
    }
  };
  wrap("data", [&] { data.validate(); });
  wrap("teacher.backbone", [&] { teacher.spec.validate(); });
  wrap("student.backbone", [&] { student.spec.validate(); });
  wrap("train", [&] {
    train.validate();
    train.loss.validate();
    train.scheduler.validate();
    train.sgd.validate();
  });
  wrap("transfer", [&] { transfer.sgd.validate(); });
  if (teacher.spec.num_classes != data.num_classes)
    throw ConfigError("<config>", 0, "teacher.backbone", "class count differs from data.num_classes");
  if (student.spec.num_classes != data.num_classes)
    throw ConfigError("<config>", 0, "student.backbone", "class count differs from data.num_classes");
}

namespace {

std::string join(const std::string& path, const std::string& key) { return path.empty() ? key : path + "." + key; }

class Reader {
 public:
  Reader(std::string source, std::set<std::string> overridden)
      : source_(std::move(source)), overridden_(std::move(overridden)) {}

  [[noreturn]] void fail(const YAML::Node& node, const std::string& field, const std::string& reason) const {
    for (const auto& o : overridden_)
      if (field == o || field.rfind(o + ".", 0) == 0) throw ConfigError("override " + o, 0, field, reason);
    int line = 0;
    if (node.IsDefined() && !node.Mark().is_null()) line = node.Mark().line + 1;
    throw ConfigError(source_, line, field, reason);
  }

  void check(bool ok, const YAML::Node& node, const std::string& field, const std::string& reason) const {
    if (!ok) fail(node, field, reason);
  }

  template <typename T>
  T convert(const YAML::Node& node, const std::string& field) const {
    try {
      return node.as<T>();
    } catch (const YAML::Exception&) {
      fail(node, field, std::string("expected ") + kind<T>());
    }
  }

 private:
  template <typename T>
  static const char* kind() {
    if constexpr (std::is_same_v<T, bool>) return "true or false";
    else if constexpr (std::is_integral_v<T>) return "an integer";
    else if constexpr (std::is_floating_point_v<T>) return "a number";
    else if constexpr (std::is_same_v<T, std::string>) return "a string";
    else return "a list";
  }

  std::string source_;
  std::set<std::string> overridden_;
};

/// A mapping whose keys are checked against an allow-list on construction.
class Section {
 public:
  Section(const Reader& r, const YAML::Node& node, std::string path, std::initializer_list<const char*> allowed)
      : r_(r), node_(node), path_(std::move(path)) {
    if (!node_.IsDefined() || node_.IsNull()) return;
    r_.check(node_.IsMap(), node_, path_.empty() ? "<root>" : path_, "expected a mapping");
    for (const auto& kv : node_) {
      const auto key = kv.first.as<std::string>();
      bool known = false;
      for (const char* a : allowed) known = known || key == a;
      if (!known) {
        std::string list;
        for (const char* a : allowed) list += (list.empty() ? "" : ", ") + std::string(a);
        r_.fail(kv.first, join(path_, key), "unknown key (expected one of: " + list + ")");
      }
    }
  }

  bool has(const char* key) const { return is_map() && node_[key].IsDefined() && !node_[key].IsNull(); }
  YAML::Node child(const char* key) const { return is_map() ? node_[key] : YAML::Node(); }
  std::string field(const char* key) const { return join(path_, key); }

  template <typename T>
  bool get(const char* key, T& out) const {
    if (!has(key)) return false;
    out = r_.template convert<T>(node_[key], field(key));
    return true;
  }

  /// Reads `key` if present and checks the result.
  template <typename T, typename Pred>
  bool get(const char* key, T& out, Pred ok, const char* reason) const {
    if (!get(key, out)) return false;
    r_.check(ok(out), node_[key], field(key), reason);
    return true;
  }

 private:
  bool is_map() const { return node_.IsDefined() && node_.IsMap(); }

  const Reader& r_;
  YAML::Node node_;
  std::string path_;
};

const auto positive = [](auto v) { return v > 0; };
const auto non_negative = [](auto v) { return v >= 0; };
const auto finite_positive = [](double v) { return std::isfinite(v) && v > 0; };
const auto finite_non_negative = [](double v) { return std::isfinite(v) && v >= 0; };
const auto unit_interval = [](double v) { return v >= 0 && v <= 1; };

void read_data(const Reader& r, const YAML::Node& node, DatasetSpec& d) {
  Section s(r, node, "data",
            {"name", "root", "image_size", "num_classes", "label_bytes", "val_fraction", "max_train", "split_seed",
             "normalization", "synthetic"});
  s.get("name", d.name);
  std::string root;
  if (s.get("root", root)) d.root = root;
  s.get("image_size", d.image_size, positive, "must be > 0");
  s.get("num_classes", d.num_classes, [](int v) { return v >= 2; }, "must be >= 2");
  s.get("label_bytes", d.label_bytes, [](int v) { return v == 1 || v == 2; }, "must be 1 or 2");
  s.get("val_fraction", d.val_fraction, [](double v) { return v >= 0 && v < 1; }, "must lie in [0, 1)");
  s.get("max_train", d.max_train, non_negative, "must be >= 0");
  s.get("split_seed", d.split_seed);

  Section n(r, s.child("normalization"), "data.normalization", {"mean", "std"});
  const auto three = [](const std::vector<double>& v) { return v.size() == 3; };
  n.get("mean", d.norm.mean, three, "needs exactly three values");
  n.get("std", d.norm.stddev,
        [](const std::vector<double>& v) {
          return v.size() == 3 && std::all_of(v.begin(), v.end(), [](double x) { return x > 0; });
        },
        "needs three values > 0");

  if (s.has("synthetic") || d.name == "synthetic") {
    SyntheticSpec syn;
    Section g(r, s.child("synthetic"), "data.synthetic",
              {"per_class", "test_per_class", "seed", "hard_fraction", "class_hard_fraction", "noise", "hard_noise",
               "clutter"});
    g.get("per_class", syn.per_class, positive, "must be > 0");
    g.get("test_per_class", syn.test_per_class, non_negative, "must be >= 0");
    g.get("seed", syn.seed);
    g.get("hard_fraction", syn.hard_fraction, unit_interval, "must lie in [0, 1]");
    g.get("class_hard_fraction", syn.class_hard_fraction,
          [&](const std::vector<double>& v) {
            return int(v.size()) == d.num_classes && std::all_of(v.begin(), v.end(), unit_interval);
          },
          "needs one value in [0, 1] per class");
    g.get("noise", syn.noise, finite_non_negative, "must be >= 0");
    g.get("hard_noise", syn.hard_noise, finite_non_negative, "must be >= 0");
    g.get("clutter", syn.clutter, non_negative, "must be >= 0");
    syn.num_classes = d.num_classes;
    syn.image_size = d.image_size;
    r.check(syn.image_size >= 8, s.child("image_size"), "data.image_size", "synthetic images need image_size >= 8");
    d.synthetic = syn;
  } else {
    r.check(!d.root.empty(), node, "data.root", "required for on-disk datasets");
  }
}

BackboneSpec read_backbone(const Reader& r, const YAML::Node& node, const std::string& path, int num_classes) {
  if (node.IsScalar()) {
    const auto name = node.as<std::string>();
    try {
      return lookup_backbone(name, num_classes);
    } catch (const ContractViolation&) {
      std::string list;
      for (const auto& n : registered_backbones()) list += (list.empty() ? "" : ", ") + n;
      r.fail(node, path, "unknown backbone '" + name + "' (registered: " + list + ")");
    }
  }
  BackboneSpec b;
  Section s(r, node, path, {"name", "arch", "widths", "blocks_per_stage", "stem_stride", "classifier_bias"});
  s.get("name", b.name);
  std::string arch = "resnet";
  s.get("arch", arch, [](const std::string& a) { return a == "resnet" || a == "vgg"; }, "must be resnet or vgg");
  b.arch = arch == "vgg" ? Architecture::vgg : Architecture::resnet;
  r.check(s.has("widths"), node, join(path, "widths"), "required");
  s.get("widths", b.widths,
        [](const std::vector<int>& w) { return !w.empty() && std::all_of(w.begin(), w.end(), positive); },
        "needs at least one width, all > 0");
  s.get("blocks_per_stage", b.blocks_per_stage, positive, "must be > 0");
  s.get("stem_stride", b.stem_stride, [](int v) { return v == 1 || v == 2; }, "must be 1 or 2");
  s.get("classifier_bias", b.classifier_bias);
  b.num_classes = num_classes;
  return b;
}

void read_model(const Reader& r, const YAML::Node& node, const std::string& path, int num_classes, ModelEntry& m) {
  Section s(r, node, path, {"backbone", "checkpoint"});
  if (s.has("backbone")) {
    m.spec = read_backbone(r, s.child("backbone"), s.field("backbone"), num_classes);
  } else {
    m.spec.num_classes = num_classes;
  }
  std::string ckpt;
  if (s.get("checkpoint", ckpt)) m.checkpoint = ckpt;
}

void read_terms(const Reader& r, const YAML::Node& node, const std::string& path, TermSet& out) {
  r.check(node.IsSequence(), node, path, "expected a list of loss names (ce, kd, fa, ca, cc)");
  out = TermSet{};
  for (const auto& item : node) {
    const auto name = r.convert<std::string>(item, path);
    auto t = parse_term(name);
    r.check(t.has_value(), item, path, "unknown loss name '" + name + "' (expected ce, kd, fa, ca or cc)");
    out.insert(*t);
  }
}

void read_train(const Reader& r, const YAML::Node& node, TrainConfig& t) {
  Section s(r, node, "train",
            {"epochs", "batch_size", "seed", "lr", "momentum", "weight_decay", "lr_milestones", "lr_decay",
             "rotations", "cosine_contrast", "flip_prob", "workers", "head_hidden", "cache_teacher", "loss",
             "preview"});
  s.get("epochs", t.epochs, positive, "must be > 0");
  s.get("batch_size", t.batch_size, positive, "must be > 0");
  s.get("seed", t.seed);
  s.get("lr", t.sgd.lr, finite_positive, "must be > 0");
  s.get("momentum", t.sgd.momentum, [](double v) { return v >= 0 && v < 1; }, "must lie in [0, 1)");
  s.get("weight_decay", t.sgd.weight_decay, finite_non_negative, "must be >= 0");
  s.get("lr_milestones", t.lr_milestones,
        [](const std::vector<int>& m) {
          return std::is_sorted(m.begin(), m.end()) && std::all_of(m.begin(), m.end(), positive);
        },
        "must be positive epochs in ascending order");
  s.get("lr_decay", t.lr_decay, [](double v) { return v > 0 && v <= 1; }, "must lie in (0, 1]");
  s.get("rotations", t.rotations);
  s.get("cosine_contrast", t.cosine_contrast);
  s.get("flip_prob", t.flip_prob, unit_interval, "must lie in [0, 1]");
  s.get("workers", t.workers, non_negative, "must be >= 0");
  s.get("head_hidden", t.head_hidden, non_negative, "must be >= 0");
  s.get("cache_teacher", t.cache_teacher);

  Section l(r, s.child("loss"), "train.loss", {"alpha", "beta_cc", "beta_fa", "beta_ca", "tau_kd", "tau_cc"});
  l.get("alpha", t.loss.alpha, finite_non_negative, "must be >= 0");
  l.get("beta_cc", t.loss.beta_cc, finite_non_negative, "must be >= 0");
  l.get("beta_fa", t.loss.beta_fa, finite_non_negative, "must be >= 0");
  l.get("beta_ca", t.loss.beta_ca, finite_non_negative, "must be >= 0");
  l.get("tau_kd", t.loss.tau_kd, finite_positive, "must be > 0");
  l.get("tau_cc", t.loss.tau_cc, finite_positive, "must be > 0");

  Section p(r, s.child("preview"), "train.preview", {"policy", "epsilon", "focal_gamma", "applies_to"});
  std::string policy;
  if (p.get("policy", policy)) {
    auto w = parse_policy(policy);
    r.check(w.has_value(), p.child("policy"), p.field("policy"),
            "unknown policy '" + policy + "' (expected preview, curriculum, focal or none)");
    t.scheduler.policy = *w;
  }
  p.get("epsilon", t.scheduler.epsilon, finite_positive, "must be > 0");
  p.get("focal_gamma", t.scheduler.focal_gamma, finite_non_negative, "must be >= 0");
  if (p.has("applies_to")) read_terms(r, p.child("applies_to"), p.field("applies_to"), t.preview_applies_to);
}

void read_transfer(const Reader& r, const YAML::Node& node, TransferConfig& t) {
  Section s(r, node, "transfer",
            {"epochs", "lr", "momentum", "weight_decay", "milestones", "lr_decay", "batch_size", "seed"});
  s.get("epochs", t.epochs, positive, "must be > 0");
  s.get("lr", t.sgd.lr, finite_positive, "must be > 0");
  s.get("momentum", t.sgd.momentum, [](double v) { return v >= 0 && v < 1; }, "must lie in [0, 1)");
  s.get("weight_decay", t.sgd.weight_decay, finite_non_negative, "must be >= 0");
  s.get("milestones", t.milestones,
        [](const std::vector<int>& m) {
          return std::is_sorted(m.begin(), m.end()) && std::all_of(m.begin(), m.end(), positive);
        },
        "must be positive epochs in ascending order");
  s.get("lr_decay", t.lr_decay, [](double v) { return v > 0 && v <= 1; }, "must lie in (0, 1]");
  s.get("batch_size", t.batch_size, positive, "must be > 0");
  s.get("seed", t.seed);
}

ExperimentConfig parse_with(const Reader& r, const YAML::Node& root) {
  ExperimentConfig c;
  Section s(r, root, "", {"output_dir", "precision", "data", "teacher", "student", "train", "transfer"});
  std::string out;
  if (s.get("output_dir", out)) c.output_dir = out;
  std::string prec;
  if (s.get("precision", prec, [](const std::string& p) { return p == "float" || p == "double"; },
            "must be float or double"))
    c.precision = prec == "double" ? Precision::f64 : Precision::f32;

  read_data(r, s.child("data"), c.data);
  c.teacher.spec = lookup_backbone("resnet8w", c.data.num_classes);
  c.student.spec = lookup_backbone("resnet8", c.data.num_classes);
  read_model(r, s.child("teacher"), "teacher", c.data.num_classes, c.teacher);
  read_model(r, s.child("student"), "student", c.data.num_classes, c.student);
  read_train(r, s.child("train"), c.train);
  read_transfer(r, s.child("transfer"), c.transfer);

  // Range checks above carry positions; this catches anything cross-field.
  try {
    c.validate();
  } catch (const ConfigError& e) {
    r.fail(root[e.field().substr(0, e.field().find('.'))], e.field(), e.reason());
  }
  return c;
}

std::vector<std::string> split_path(const std::string& path) {
  std::vector<std::string> out;
  std::string part;
  std::istringstream in(path);
  while (std::getline(in, part, '.')) out.push_back(part);
  return out;
}

void set_path(YAML::Node node, const std::vector<std::string>& parts, std::size_t i, const YAML::Node& value,
              const std::string& full) {
  if (!node.IsMap() && !node.IsNull())
    throw ConfigError("override " + full, 0, full, "'" + parts[i - 1] + "' is not a mapping");
  if (i + 1 == parts.size()) {
    node[parts[i]] = value;
    return;
  }
  if (!node[parts[i]].IsDefined() || node[parts[i]].IsNull()) node[parts[i]] = YAML::Node(YAML::NodeType::Map);
  set_path(node[parts[i]], parts, i + 1, value, full);
}

std::string number(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  std::string s(buf, res.ptr);
  // Keep the scalar a float on re-read.
  if (s.find_first_of(".eEn") == std::string::npos) s += ".0";
  return s;
}

}  // namespace

ExperimentConfig parse_config(const YAML::Node& root, const std::string& source) {
  return parse_with(Reader(source, {}), root);
}

ExperimentConfig parse_config_text(const std::string& text, const std::string& source) {
  return apply_overrides(text, {}, source);
}

ExperimentConfig apply_overrides(const std::string& text, const std::vector<ConfigOverride>& overrides,
                                 const std::string& source) {
  YAML::Node root;
  try {
    root = YAML::Load(text);
  } catch (const YAML::ParserException& e) {
    throw ConfigError(source, e.mark.line + 1, "<syntax>", e.msg);
  }
  if (root.IsNull()) root = YAML::Node(YAML::NodeType::Map);
  std::set<std::string> overridden;
  for (const auto& o : overrides) {
    if (o.path.empty()) throw ConfigError("override", 0, "<path>", "empty override path");
    YAML::Node value;
    try {
      value = YAML::Load(o.value);
    } catch (const YAML::ParserException& e) {
      throw ConfigError("override " + o.path, 0, o.path, e.msg);
    }
    set_path(root, split_path(o.path), 0, value, o.path);
    overridden.insert(o.path);
  }
  return parse_with(Reader(source, overridden), root);
}

ExperimentConfig load_config(const std::filesystem::path& path, const std::vector<ConfigOverride>& overrides) {
  std::ifstream in(path);
  if (!in) throw IngestionError("cannot open config file " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return apply_overrides(buf.str(), overrides, path.string());
}

std::string to_yaml(const ExperimentConfig& c) {
  YAML::Emitter e;
  auto num = [&](const char* key, double v) { e << YAML::Key << key << YAML::Value << number(v); };
  auto nums = [&](const char* key, const std::vector<double>& v) {
    e << YAML::Key << key << YAML::Value << YAML::Flow << YAML::BeginSeq;
    for (double x : v) e << number(x);
    e << YAML::EndSeq;
  };
  auto ints = [&](const char* key, const std::vector<int>& v) {
    e << YAML::Key << key << YAML::Value << YAML::Flow << YAML::BeginSeq;
    for (int x : v) e << x;
    e << YAML::EndSeq;
  };
  auto backbone = [&](const BackboneSpec& b) {
    e << YAML::Key << "backbone" << YAML::Value << YAML::BeginMap;
    e << YAML::Key << "name" << YAML::Value << b.name;
    e << YAML::Key << "arch" << YAML::Value << (b.arch == Architecture::vgg ? "vgg" : "resnet");
    ints("widths", b.widths);
    e << YAML::Key << "blocks_per_stage" << YAML::Value << b.blocks_per_stage;
    e << YAML::Key << "stem_stride" << YAML::Value << b.stem_stride;
    e << YAML::Key << "classifier_bias" << YAML::Value << b.classifier_bias;
    e << YAML::EndMap;
  };

  e << YAML::BeginMap;
  e << YAML::Key << "output_dir" << YAML::Value << c.output_dir.string();
  e << YAML::Key << "precision" << YAML::Value << std::string(precision_name(c.precision));

  const auto& d = c.data;
  e << YAML::Key << "data" << YAML::Value << YAML::BeginMap;
  e << YAML::Key << "name" << YAML::Value << d.name;
  if (!d.root.empty()) e << YAML::Key << "root" << YAML::Value << d.root.string();
  e << YAML::Key << "image_size" << YAML::Value << d.image_size;
  e << YAML::Key << "num_classes" << YAML::Value << d.num_classes;
  e << YAML::Key << "label_bytes" << YAML::Value << d.label_bytes;
  num("val_fraction", d.val_fraction);
  e << YAML::Key << "max_train" << YAML::Value << d.max_train;
  e << YAML::Key << "split_seed" << YAML::Value << d.split_seed;
  e << YAML::Key << "normalization" << YAML::Value << YAML::BeginMap;
  nums("mean", d.norm.mean);
  nums("std", d.norm.stddev);
  e << YAML::EndMap;
  if (d.synthetic) {
    const auto& g = *d.synthetic;
    e << YAML::Key << "synthetic" << YAML::Value << YAML::BeginMap;
    e << YAML::Key << "per_class" << YAML::Value << g.per_class;
    e << YAML::Key << "test_per_class" << YAML::Value << g.test_per_class;
    e << YAML::Key << "seed" << YAML::Value << g.seed;
    num("hard_fraction", g.hard_fraction);
    if (!g.class_hard_fraction.empty()) nums("class_hard_fraction", g.class_hard_fraction);
    num("noise", g.noise);
    num("hard_noise", g.hard_noise);
    e << YAML::Key << "clutter" << YAML::Value << g.clutter;
    e << YAML::EndMap;
  }
  e << YAML::EndMap;

  for (auto [key, m] : {std::pair{"teacher", &c.teacher}, std::pair{"student", &c.student}}) {
    e << YAML::Key << key << YAML::Value << YAML::BeginMap;
    backbone(m->spec);
    if (!m->checkpoint.empty()) e << YAML::Key << "checkpoint" << YAML::Value << m->checkpoint.string();
    e << YAML::EndMap;
  }

  const auto& t = c.train;
  e << YAML::Key << "train" << YAML::Value << YAML::BeginMap;
  e << YAML::Key << "epochs" << YAML::Value << t.epochs;
  e << YAML::Key << "batch_size" << YAML::Value << t.batch_size;
  e << YAML::Key << "seed" << YAML::Value << t.seed;
  num("lr", t.sgd.lr);
  num("momentum", t.sgd.momentum);
  num("weight_decay", t.sgd.weight_decay);
  ints("lr_milestones", t.lr_milestones);
  num("lr_decay", t.lr_decay);
  e << YAML::Key << "rotations" << YAML::Value << t.rotations;
  e << YAML::Key << "cosine_contrast" << YAML::Value << t.cosine_contrast;
  num("flip_prob", t.flip_prob);
  e << YAML::Key << "workers" << YAML::Value << t.workers;
  e << YAML::Key << "head_hidden" << YAML::Value << t.head_hidden;
  e << YAML::Key << "cache_teacher" << YAML::Value << t.cache_teacher;
  e << YAML::Key << "loss" << YAML::Value << YAML::BeginMap;
  num("alpha", t.loss.alpha);
  num("beta_cc", t.loss.beta_cc);
  num("beta_fa", t.loss.beta_fa);
  num("beta_ca", t.loss.beta_ca);
  num("tau_kd", t.loss.tau_kd);
  num("tau_cc", t.loss.tau_cc);
  e << YAML::EndMap;
  e << YAML::Key << "preview" << YAML::Value << YAML::BeginMap;
  e << YAML::Key << "policy" << YAML::Value << std::string(policy_name(t.scheduler.policy));
  num("epsilon", t.scheduler.epsilon);
  num("focal_gamma", t.scheduler.focal_gamma);
  e << YAML::Key << "applies_to" << YAML::Value << YAML::Flow << YAML::BeginSeq;
  for (auto term : {LossTerm::ce, LossTerm::kd, LossTerm::fa, LossTerm::ca, LossTerm::cc})
    if (t.preview_applies_to.contains(term)) e << std::string(term_name(term));
  e << YAML::EndSeq;
  e << YAML::EndMap;
  e << YAML::EndMap;

  const auto& x = c.transfer;
  e << YAML::Key << "transfer" << YAML::Value << YAML::BeginMap;
  e << YAML::Key << "epochs" << YAML::Value << x.epochs;
  num("lr", x.sgd.lr);
  num("momentum", x.sgd.momentum);
  num("weight_decay", x.sgd.weight_decay);
  ints("milestones", x.milestones);
  num("lr_decay", x.lr_decay);
  e << YAML::Key << "batch_size" << YAML::Value << x.batch_size;
  e << YAML::Key << "seed" << YAML::Value << x.seed;
  e << YAML::EndMap;

  e << YAML::EndMap;
  return std::string(e.c_str()) + "\n";
}

}  // namespace pckd
