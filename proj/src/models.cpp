#include "pckd/models.hpp"

#include <json.hpp>

#include <bit>
#include <cstring>
#include <fstream>

namespace pckd {

using nn::Mode;

void BackboneSpec::validate() const {
  require(!widths.empty(), "backbone " + name + ": needs at least one stage width");
  for (int w : widths) require(w >= 1, "backbone " + name + ": widths must be >= 1");
  require(blocks_per_stage >= 1, "backbone " + name + ": blocks_per_stage must be >= 1");
  require(stem_stride == 1 || stem_stride == 2, "backbone " + name + ": stem_stride must be 1 or 2");
  require(num_classes >= 0, "backbone " + name + ": num_classes must be >= 0");
}

namespace {

struct RegistryEntry {
  const char* name;
  Architecture arch;
  std::vector<int> widths;
  int blocks;
  int stem_stride;
};

const std::vector<RegistryEntry>& registry() {
  // Desk-scale nets downsample in the stem; the wrn_* entries follow the
  // full-resolution CIFAR layout and are far slower on a CPU.
  static const std::vector<RegistryEntry> entries = {
      {"resnet8", Architecture::resnet, {8, 16, 32}, 1, 2},
      {"resnet8w", Architecture::resnet, {16, 32, 64}, 1, 2},
      {"resnet14", Architecture::resnet, {16, 32, 64}, 2, 2},
      {"resnet20", Architecture::resnet, {16, 32, 64}, 3, 2},
      {"vgg8", Architecture::vgg, {16, 32, 64}, 2, 2},
      {"wrn_16_2", Architecture::resnet, {32, 64, 128}, 2, 1},
      {"wrn_40_2", Architecture::resnet, {32, 64, 128}, 6, 1},
  };
  return entries;
}

}  // namespace

BackboneSpec lookup_backbone(const std::string& name, int num_classes) {
  for (const auto& e : registry()) {
    if (name != e.name) continue;
    BackboneSpec spec;
    spec.name = e.name;
    spec.arch = e.arch;
    spec.widths = e.widths;
    spec.blocks_per_stage = e.blocks;
    spec.stem_stride = e.stem_stride;
    spec.num_classes = num_classes;
    spec.validate();
    return spec;
  }
  throw ContractViolation("unknown backbone '" + name + "'");
}

std::vector<std::string> registered_backbones() {
  std::vector<std::string> out;
  for (const auto& e : registry()) out.emplace_back(e.name);
  return out;
}

// ---------------------------------------------------------------------------

template <typename S>
struct Backbone<S>::Layers {
  nn::Conv2d<S> stem_conv;
  nn::BatchNorm2d<S> stem_bn;
  nn::Relu<S> stem_relu;
  std::vector<nn::BasicBlock<S>> blocks;
  std::vector<nn::ConvBnRelu<S>> vgg_units;
  std::vector<int> pool_after;  // vgg: unit index followed by a 2x2 max-pool
  std::vector<nn::MaxPool2x2<S>> pools;
  std::optional<nn::Dense<S>> classifier;
  int final_h = 0, final_w = 0;
};

template <typename S>
Backbone<S>::Backbone(BackboneSpec spec, std::uint64_t seed) : spec_(std::move(spec)), layers_(std::make_unique<Layers>()) {
  spec_.validate();
  auto& L = *layers_;
  const int w0 = spec_.widths.front();
  L.stem_conv = nn::Conv2d<S>("stem.conv", 3, w0, 3, spec_.stem_stride, 1);
  L.stem_bn = nn::BatchNorm2d<S>("stem.bn", w0);
  int in = w0;
  for (std::size_t s = 0; s < spec_.widths.size(); ++s) {
    const int out = spec_.widths[s];
    for (int b = 0; b < spec_.blocks_per_stage; ++b) {
      const std::string name = "stage" + std::to_string(s) + ".unit" + std::to_string(b);
      if (spec_.arch == Architecture::resnet) {
        const int stride = (s > 0 && b == 0) ? 2 : 1;
        L.blocks.emplace_back(name, in, out, stride);
      } else {
        L.vgg_units.emplace_back(name, in, out, 1);
      }
      in = out;
    }
    if (spec_.arch == Architecture::vgg && s + 1 < spec_.widths.size()) {
      L.pool_after.push_back(static_cast<int>(L.vgg_units.size()) - 1);
      L.pools.emplace_back();
    }
  }
  if (spec_.num_classes > 0) L.classifier.emplace("classifier", in, spec_.num_classes, spec_.classifier_bias);

  nn::Rng rng(seed);
  L.stem_conv.init(rng);
  for (auto& b : L.blocks) b.init(rng);
  for (auto& u : L.vgg_units) u.init(rng);
  if (L.classifier) L.classifier->init(rng);
}

template <typename S>
Backbone<S>::~Backbone() = default;
template <typename S>
Backbone<S>::Backbone(Backbone&&) noexcept = default;
template <typename S>
Backbone<S>& Backbone<S>::operator=(Backbone&&) noexcept = default;

template <typename S>
RowMatrix<S> Backbone<S>::features(const FeatureMap<S>& images, Mode mode) {
  require(images.channels() == 3, "backbone: expected 3-channel images");
  auto& L = *layers_;
  FeatureMap<S> h = L.stem_relu.forward(L.stem_bn.forward(L.stem_conv.forward(images, mode), mode), mode);
  for (auto& b : L.blocks) h = b.forward(h, mode);
  std::size_t pool = 0;
  for (std::size_t u = 0; u < L.vgg_units.size(); ++u) {
    h = L.vgg_units[u].forward(h, mode);
    if (pool < L.pool_after.size() && L.pool_after[pool] == static_cast<int>(u)) h = L.pools[pool++].forward(h, mode);
  }
  L.final_h = h.height;
  L.final_w = h.width;
  return nn::global_avg_pool(h);
}

template <typename S>
ModelOutputs<S> Backbone<S>::forward(const FeatureMap<S>& images, Mode mode) {
  ModelOutputs<S> out;
  out.features.values = features(images, mode);
  if (layers_->classifier) {
    out.logits = layers_->classifier->forward(out.features.values, mode == Mode::train);
    out.centers = &layers_->classifier->weight().value;
  }
  return out;
}

template <typename S>
void Backbone<S>::backward(const RowMatrix<S>& grad_features, const RowMatrix<S>& grad_logits) {
  auto& L = *layers_;
  RowMatrix<S> g = grad_features;
  if (grad_logits.size() > 0) {
    require(L.classifier.has_value(), "backward: model has no classifier");
    RowMatrix<S> from_logits = L.classifier->backward(grad_logits);
    if (g.size() == 0)
      g = std::move(from_logits);
    else
      g += from_logits;
  }
  if (g.size() == 0) return;
  FeatureMap<S> h = nn::global_avg_pool_backward<S>(g, L.final_h, L.final_w);
  std::size_t pool = L.pools.size();
  for (std::size_t u = L.vgg_units.size(); u-- > 0;) {
    if (pool > 0 && L.pool_after[pool - 1] == static_cast<int>(u)) h = L.pools[--pool].backward(h);
    h = L.vgg_units[u].backward(h);
  }
  for (std::size_t b = L.blocks.size(); b-- > 0;) h = L.blocks[b].backward(h);
  L.stem_conv.backward(L.stem_bn.backward(L.stem_relu.backward(h)));
}

template <typename S>
nn::Dense<S>& Backbone<S>::classifier() {
  if (!layers_->classifier) throw UnsupportedArchitecture("backbone '" + spec_.name + "' has no linear classifier");
  return *layers_->classifier;
}

template <typename S>
CategoryCenters<S>& Backbone<S>::centers() {
  return classifier().weight().value;
}

template <typename S>
nn::ParameterList<S> Backbone<S>::parameters() {
  auto& L = *layers_;
  nn::ParameterList<S> out;
  L.stem_conv.collect(out);
  L.stem_bn.collect(out);
  for (auto& b : L.blocks) b.collect(out);
  for (auto& u : L.vgg_units) u.collect(out);
  if (L.classifier) L.classifier->collect(out);
  return out;
}

template <typename S>
void Backbone<S>::zero_grad() {
  for (auto* p : parameters()) p->zero_grad();
}

template <typename S>
Index Backbone<S>::parameter_count() {
  Index n = 0;
  for (auto* p : parameters())
    if (p->trainable) n += p->value.size();
  return n;
}

// ---------------------------------------------------------------------------

template <typename S>
ProjectionHead<S>::ProjectionHead(int input_dim, int output_dim, int hidden_dim, std::uint64_t seed)
    : fc1_("head.fc1", input_dim, hidden_dim > 0 ? hidden_dim : 2 * output_dim),
      fc2_("head.fc2", hidden_dim > 0 ? hidden_dim : 2 * output_dim, output_dim) {
  require(input_dim >= 1 && output_dim >= 1, "projection head dims must be >= 1");
  nn::Rng rng(seed ^ 0x9e3779b97f4a7c15ull);
  fc1_.init(rng);
  fc2_.init(rng);
}

template <typename S>
ProjectionHead<S> ProjectionHead<S>::identity(int dim) {
  ProjectionHead<S> h(dim, dim, 2 * dim);
  Matrix<S> eye = Matrix<S>::Identity(dim, dim);
  h.fc1_.weight().value << eye, -eye;
  h.fc1_.bias().value.setZero();
  h.fc2_.weight().value << eye, -eye;
  h.fc2_.bias().value.setZero();
  return h;
}

template <typename S>
RowMatrix<S> ProjectionHead<S>::forward(const RowMatrix<S>& x) {
  hidden_pre_ = fc1_.forward(x);
  return fc2_.forward(hidden_pre_.cwiseMax(S(0)));
}

template <typename S>
RowMatrix<S> ProjectionHead<S>::backward(const RowMatrix<S>& grad_out) {
  RowMatrix<S> g = fc2_.backward(grad_out);
  g.array() *= (hidden_pre_.array() > S(0)).template cast<S>();
  return fc1_.backward(g);
}

template <typename S>
nn::ParameterList<S> ProjectionHead<S>::parameters() {
  nn::ParameterList<S> out;
  fc1_.collect(out);
  fc2_.collect(out);
  return out;
}

template <typename S>
void ProjectionHead<S>::zero_grad() {
  for (auto* p : parameters()) p->zero_grad();
}

template <typename S>
Index ProjectionHead<S>::parameter_count() {
  Index n = 0;
  for (auto* p : parameters()) n += p->value.size();
  return n;
}

// ---------------------------------------------------------------------------

template <typename S>
Checkpoint make_checkpoint(Backbone<S>& model, long step, ProjectionHead<S>* head) {
  Checkpoint ck;
  ck.backbone = model.spec();
  ck.step = step;
  for (auto* p : model.parameters()) ck.tensors[p->name] = p->value.template cast<double>();
  if (head) {
    ck.head_dims = std::make_pair(head->input_dim(), head->output_dim());
    ck.head_hidden = head->hidden_dim();
    for (auto* p : head->parameters()) ck.tensors[p->name] = p->value.template cast<double>();
  }
  return ck;
}

template <typename S>
void load_weights(Backbone<S>& model, const Checkpoint& ckpt) {
  require(ckpt.backbone == model.spec(), "checkpoint backbone '" + ckpt.backbone.name + "' does not match model '" +
                                             model.spec().name + "'");
  for (auto* p : model.parameters()) {
    auto it = ckpt.tensors.find(p->name);
    if (it == ckpt.tensors.end()) throw IngestionError("checkpoint is missing tensor " + p->name);
    require(it->second.rows() == p->value.rows() && it->second.cols() == p->value.cols(),
            "checkpoint tensor " + p->name + " has the wrong shape");
    p->value = it->second.template cast<S>();
  }
}

template <typename S>
ProjectionHead<S> load_head(const Checkpoint& ckpt) {
  if (!ckpt.head_dims) throw IngestionError("checkpoint has no projection head");
  ProjectionHead<S> head(ckpt.head_dims->first, ckpt.head_dims->second, ckpt.head_hidden);
  for (auto* p : head.parameters()) {
    auto it = ckpt.tensors.find(p->name);
    if (it == ckpt.tensors.end()) throw IngestionError("checkpoint is missing tensor " + p->name);
    p->value = it->second.template cast<S>();
  }
  return head;
}

namespace {

constexpr char kMagic[] = "PCKDCKPT\n";

nlohmann::json spec_to_json(const BackboneSpec& s) {
  return {{"name", s.name},
          {"arch", s.arch == Architecture::resnet ? "resnet" : "vgg"},
          {"widths", s.widths},
          {"blocks_per_stage", s.blocks_per_stage},
          {"stem_stride", s.stem_stride},
          {"num_classes", s.num_classes},
          {"classifier_bias", s.classifier_bias}};
}

BackboneSpec spec_from_json(const nlohmann::json& j) {
  BackboneSpec s;
  s.name = j.at("name").get<std::string>();
  s.arch = j.at("arch").get<std::string>() == "vgg" ? Architecture::vgg : Architecture::resnet;
  s.widths = j.at("widths").get<std::vector<int>>();
  s.blocks_per_stage = j.at("blocks_per_stage").get<int>();
  s.stem_stride = j.at("stem_stride").get<int>();
  s.num_classes = j.at("num_classes").get<int>();
  s.classifier_bias = j.value("classifier_bias", true);
  return s;
}

}  // namespace

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  nlohmann::json manifest;
  manifest["format_version"] = ckpt.version;
  manifest["backbone"] = spec_to_json(ckpt.backbone);
  manifest["num_classes"] = ckpt.backbone.num_classes;
  manifest["step"] = ckpt.step;
  if (ckpt.head_dims)
    manifest["head"] = {{"input_dim", ckpt.head_dims->first},
                        {"output_dim", ckpt.head_dims->second},
                        {"hidden_dim", ckpt.head_hidden}};
  std::size_t offset = 0;
  nlohmann::json tensors = nlohmann::json::array();
  for (const auto& [name, m] : ckpt.tensors) {
    tensors.push_back({{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}, {"offset", offset}});
    offset += static_cast<std::size_t>(m.size());
  }
  manifest["tensors"] = tensors;

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IngestionError("cannot write checkpoint " + path.string());
  out << kMagic << manifest.dump() << '\n';
  static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");
  for (const auto& [name, m] : ckpt.tensors)
    out.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
  if (!out) throw IngestionError("failed writing checkpoint " + path.string());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestionError("cannot open checkpoint " + path.string());
  std::string magic(sizeof(kMagic) - 1, '\0');
  in.read(magic.data(), static_cast<std::streamsize>(magic.size()));
  if (magic != kMagic) throw IngestionError("not a checkpoint file: " + path.string());
  std::string line;
  std::getline(in, line);
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw IngestionError("corrupt checkpoint manifest in " + path.string() + ": " + e.what());
  }
  Checkpoint ck;
  ck.version = manifest.value("format_version", 0);
  if (ck.version < 1 || ck.version > kCheckpointVersion)
    throw IngestionError("unsupported checkpoint version " + std::to_string(ck.version) + " in " + path.string());
  ck.backbone = spec_from_json(manifest.at("backbone"));
  ck.step = manifest.value("step", 0L);
  if (manifest.contains("head")) {
    const auto& h = manifest["head"];
    ck.head_dims = std::make_pair(h.at("input_dim").get<int>(), h.at("output_dim").get<int>());
    ck.head_hidden = h.value("hidden_dim", 2 * ck.head_dims->second);
  }
  for (const auto& t : manifest.at("tensors")) {
    Matrix<double> m(t.at("rows").get<Index>(), t.at("cols").get<Index>());
    in.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
    if (!in) throw IngestionError("truncated checkpoint " + path.string() + " at tensor " + t.at("name").get<std::string>());
    ck.tensors[t.at("name").get<std::string>()] = std::move(m);
  }
  return ck;
}

template class Backbone<float>;
template class Backbone<double>;
template class ProjectionHead<float>;
template class ProjectionHead<double>;

template Checkpoint make_checkpoint<float>(Backbone<float>&, long, ProjectionHead<float>*);
template Checkpoint make_checkpoint<double>(Backbone<double>&, long, ProjectionHead<double>*);
template void load_weights<float>(Backbone<float>&, const Checkpoint&);
template void load_weights<double>(Backbone<double>&, const Checkpoint&);
template ProjectionHead<float> load_head<float>(const Checkpoint&);
template ProjectionHead<double> load_head<double>(const Checkpoint&);

}  // namespace pckd
