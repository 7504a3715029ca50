#include "mbafl/model.hpp"

#include <cmath>
#include <cstring>

#include <ATen/CPUGeneratorImpl.h>

#include "binary_io.hpp"
#include "mbafl/errors.hpp"
#include "mbafl/rng.hpp"

namespace mbafl {

namespace nn = torch::nn;

namespace {

constexpr char kModelMagic[8] = {'M', 'B', 'A', 'F', 'L', 'M', 'D', 'L'};

// Per-channel standardization with constant statistics. Not a parameter, so
// it never enters the flat vector and never moves during training.
class NormalizeImpl : public nn::Cloneable<NormalizeImpl> {
 public:
  explicit NormalizeImpl(Normalization norm) : norm_(std::move(norm)) { reset(); }
  void reset() override {
    const auto c = static_cast<std::int64_t>(norm_.mean.size());
    if (c == 0) return;
    mean_ = torch::tensor(norm_.mean, torch::kFloat64).view({1, c, 1, 1});
    std_ = torch::tensor(norm_.std, torch::kFloat64).view({1, c, 1, 1});
  }
  torch::Tensor forward(const torch::Tensor& x) {
    if (!mean_.defined()) return x;
    return (x - mean_.to(x.dtype())) / std_.to(x.dtype());
  }

 private:
  Normalization norm_;
  torch::Tensor mean_, std_;
};
TORCH_MODULE(Normalize);

class BasicBlockImpl : public nn::Cloneable<BasicBlockImpl> {
 public:
  BasicBlockImpl(std::int64_t in, std::int64_t out, std::int64_t stride)
      : in_(in), out_(out), stride_(stride) {
    reset();
  }
  void reset() override {
    conv1 = register_module("conv1", nn::Conv2d(nn::Conv2dOptions(in_, out_, 3).stride(stride_).padding(1).bias(false)));
    bn1 = register_module("bn1", nn::BatchNorm2d(out_));
    conv2 = register_module("conv2", nn::Conv2d(nn::Conv2dOptions(out_, out_, 3).padding(1).bias(false)));
    bn2 = register_module("bn2", nn::BatchNorm2d(out_));
    if (stride_ != 1 || in_ != out_) {
      short_conv = register_module("short_conv", nn::Conv2d(nn::Conv2dOptions(in_, out_, 1).stride(stride_).bias(false)));
      short_bn = register_module("short_bn", nn::BatchNorm2d(out_));
    }
  }
  torch::Tensor forward(const torch::Tensor& x) {
    auto y = torch::relu(bn1(conv1(x)));
    y = bn2(conv2(y));
    auto s = short_conv ? short_bn(short_conv(x)) : x;
    return torch::relu(y + s);
  }

  nn::Conv2d conv1{nullptr}, conv2{nullptr}, short_conv{nullptr};
  nn::BatchNorm2d bn1{nullptr}, bn2{nullptr}, short_bn{nullptr};

 private:
  std::int64_t in_, out_, stride_;
};
TORCH_MODULE(BasicBlock);

// He-normal weights and zero biases, drawn from a private generator. With
// torch's default uniform init the small CNN sat at chance for several
// epochs on CIFAR before moving.
void initialize(nn::Module& root, std::uint64_t seed) {
  torch::NoGradGuard guard;
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
  auto fill = [&](torch::Tensor& w, torch::Tensor& b) {
    const double fan_in = static_cast<double>(w.numel() / w.size(0));
    w.normal_(0.0, std::sqrt(2.0 / fan_in), gen);
    if (b.defined()) b.zero_();
  };
  for (const auto& m : root.modules(/*include_self=*/true)) {
    if (auto* conv = m->as<nn::Conv2d>()) {
      fill(conv->weight, conv->bias);
    } else if (auto* lin = m->as<nn::Linear>()) {
      fill(lin->weight, lin->bias);
    } else if (auto* bn = m->as<nn::BatchNorm2d>()) {
      bn->reset_parameters();
    }
  }
}

std::vector<torch::Tensor> slot_tensors(const Net& net) {
  std::vector<torch::Tensor> out;
  for (const auto& p : net->named_parameters(true)) out.push_back(p.value());
  for (const auto& b : net->named_buffers(true)) {
    if (b.value().is_floating_point()) out.push_back(b.value());
  }
  return out;
}

std::shared_ptr<const ParamLayout> make_layout(const Net& net) {
  auto layout = std::make_shared<ParamLayout>();
  auto add = [&](const std::string& name, const torch::Tensor& t, bool trainable) {
    ParamLayout::Entry e;
    e.name = name;
    e.shape = t.sizes().vec();
    e.offset = layout->total;
    e.numel = t.numel();
    e.trainable = trainable;
    layout->total += e.numel;
    layout->entries.push_back(std::move(e));
  };
  for (const auto& p : net->named_parameters(true)) add(p.key(), p.value(), true);
  for (const auto& b : net->named_buffers(true)) {
    if (b.value().is_floating_point()) add(b.key(), b.value(), false);
  }
  return layout;
}

}  // namespace

Arch parse_arch(std::string_view name) {
  if (name == "small-cnn" || name == "small_cnn") return Arch::small_cnn;
  if (name == "resnet18") return Arch::resnet18;
  if (name == "linear") return Arch::linear;
  throw ConfigError("unknown architecture '" + std::string(name) + "'");
}

std::string to_string(Arch arch) {
  switch (arch) {
    case Arch::small_cnn: return "small-cnn";
    case Arch::resnet18: return "resnet18";
    case Arch::linear: return "linear";
  }
  return "?";
}

NetImpl::NetImpl(ArchSpec spec) : spec_(std::move(spec)) { reset(); }

void NetImpl::reset() {
  const auto c = spec_.input_shape[0];
  extractor = nn::Sequential();
  extractor->push_back(Normalize(spec_.normalization));
  switch (spec_.arch) {
    case Arch::small_cnn: {
      if (spec_.input_shape[1] < 8 || spec_.input_shape[2] < 8) {
        throw ConfigError("small-cnn needs images of at least 8x8");  // three 2x2 pools
      }
      const std::int64_t widths[] = {32, 64, 128, 128};
      std::int64_t in = c;
      for (int i = 0; i < 4; ++i) {
        extractor->push_back(nn::Conv2d(nn::Conv2dOptions(in, widths[i], 3).padding(1)));
        extractor->push_back(nn::ReLU());
        if (i < 3) extractor->push_back(nn::MaxPool2d(nn::MaxPool2dOptions(2)));
        in = widths[i];
      }
      extractor->push_back(nn::AdaptiveAvgPool2d(nn::AdaptiveAvgPool2dOptions(1)));
      extractor->push_back(nn::Flatten());
      feature_dim_ = 128;
      break;
    }
    case Arch::resnet18: {
      extractor->push_back(nn::Conv2d(nn::Conv2dOptions(c, 64, 3).padding(1).bias(false)));
      extractor->push_back(nn::BatchNorm2d(64));
      extractor->push_back(nn::ReLU());
      std::int64_t in = 64;
      const std::int64_t widths[] = {64, 128, 256, 512};
      for (int stage = 0; stage < 4; ++stage) {
        for (int block = 0; block < 2; ++block) {
          const std::int64_t stride = (stage > 0 && block == 0) ? 2 : 1;
          extractor->push_back(BasicBlock(in, widths[stage], stride));
          in = widths[stage];
        }
      }
      extractor->push_back(nn::AdaptiveAvgPool2d(nn::AdaptiveAvgPool2dOptions(1)));
      extractor->push_back(nn::Flatten());
      feature_dim_ = 512;
      break;
    }
    case Arch::linear:
      extractor->push_back(nn::Flatten());
      feature_dim_ = spec_.input_shape[0] * spec_.input_shape[1] * spec_.input_shape[2];
      break;
  }
  register_module("extractor", extractor);
  classifier = register_module("classifier", nn::Linear(feature_dim_, spec_.num_classes));
}

torch::Tensor NetImpl::features(const torch::Tensor& x) { return extractor->forward(x); }

torch::Tensor NetImpl::forward(const torch::Tensor& x) { return classifier->forward(features(x)); }

Model::Model(Net net, std::shared_ptr<const ParamLayout> layout)
    : net_(std::move(net)), layout_(std::move(layout)) {}

Model Model::clone() const {
  return Model(Net(std::dynamic_pointer_cast<NetImpl>(net_->clone())), layout_);
}

torch::Tensor Model::predict(const torch::Tensor& images, std::int64_t chunk) const {
  torch::NoGradGuard guard;
  const bool was_training = net_->is_training();
  net_->eval();
  std::vector<torch::Tensor> parts;
  for (std::int64_t i = 0; i < images.size(0); i += chunk) {
    parts.push_back(net_->forward(images.slice(0, i, std::min(images.size(0), i + chunk))));
  }
  net_->train(was_training);
  if (parts.empty()) return torch::empty({0, spec().num_classes});
  return torch::cat(parts);
}

torch::Tensor Model::extract_features(const torch::Tensor& images, std::int64_t chunk) const {
  torch::NoGradGuard guard;
  const bool was_training = net_->is_training();
  net_->eval();
  std::vector<torch::Tensor> parts;
  for (std::int64_t i = 0; i < images.size(0); i += chunk) {
    parts.push_back(net_->features(images.slice(0, i, std::min(images.size(0), i + chunk))));
  }
  net_->train(was_training);
  if (parts.empty()) return torch::empty({0, feature_dim()});
  return torch::cat(parts);
}

Model build_model(const ArchSpec& spec, std::uint64_t seed) {
  if (spec.num_classes < 2) throw ConfigError("model needs at least two classes");
  if (!spec.normalization.mean.empty() &&
      static_cast<std::int64_t>(spec.normalization.mean.size()) != spec.input_shape[0]) {
    throw ConfigError("normalization channels do not match input channels");
  }
  Net net(spec);
  initialize(*net, derive_seed(seed, Stream::init));
  auto layout = make_layout(net);
  return Model(std::move(net), std::move(layout));
}

ParamVector to_vector(const Model& model) {
  ParamVector v;
  v.layout = model.layout();
  v.values.resize(model.parameter_count());
  const auto tensors = slot_tensors(model.net());
  const auto& entries = v.layout->entries;
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    const auto t = tensors[i].detach().to(torch::kFloat64).contiguous();
    std::memcpy(v.values.data() + entries[i].offset, t.data_ptr<double>(),
                static_cast<std::size_t>(entries[i].numel) * sizeof(double));
  }
  return v;
}

void from_vector(Model& model, const Eigen::VectorXd& v) {
  if (v.size() != model.parameter_count()) {
    throw ShapeError("parameter vector has " + std::to_string(v.size()) + " entries, model expects " +
                     std::to_string(model.parameter_count()));
  }
  torch::NoGradGuard guard;
  auto tensors = slot_tensors(model.net());
  const auto& entries = model.layout()->entries;
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    auto src = torch::from_blob(const_cast<double*>(v.data()) + entries[i].offset, entries[i].shape,
                                torch::kFloat64);
    tensors[i].copy_(src);
  }
}

void from_vector(Model& model, const ParamVector& v) {
  if (v.layout && *v.layout != *model.layout()) throw ShapeError("parameter layout mismatch");
  from_vector(model, v.values);
}

torch::Tensor Detector::logits_from_features(const torch::Tensor& features) {
  return head->forward(features).squeeze(-1);
}

torch::Tensor Detector::logits(const torch::Tensor& images) {
  return logits_from_features(body->features(images));
}

void reset_detector_head(Detector& detector, std::uint64_t seed) {
  initialize(*detector.head, derive_seed(seed, Stream::detector, {0x4ead}));
}

Detector build_detector(const Model& global_model, std::uint64_t seed) {
  Detector d;
  d.body = Net(std::dynamic_pointer_cast<NetImpl>(global_model.net()->clone()));
  for (auto& p : d.body->parameters()) p.set_requires_grad(false);
  d.body->eval();
  d.head = nn::Linear(global_model.feature_dim(), 1);
  reset_detector_head(d, seed);
  return d;
}

nlohmann::json arch_to_json(const ArchSpec& spec) {
  return {
      {"arch", to_string(spec.arch)},
      {"num_classes", spec.num_classes},
      {"input_shape", {spec.input_shape[0], spec.input_shape[1], spec.input_shape[2]}},
      {"normalization", {{"mean", spec.normalization.mean}, {"std", spec.normalization.std}}},
  };
}

ArchSpec arch_from_json(const nlohmann::json& j) {
  ArchSpec s;
  s.arch = parse_arch(j.at("arch").get<std::string>());
  s.num_classes = j.at("num_classes").get<std::int64_t>();
  const auto shape = j.at("input_shape").get<std::vector<std::int64_t>>();
  if (shape.size() != 3) throw IoError("input_shape must have three entries");
  s.input_shape = {shape[0], shape[1], shape[2]};
  s.normalization.mean = j.at("normalization").at("mean").get<std::vector<double>>();
  s.normalization.std = j.at("normalization").at("std").get<std::vector<double>>();
  return s;
}

void save_model(const Model& model, const std::filesystem::path& path) {
  nlohmann::json names = nlohmann::json::array();
  for (const auto& e : model.layout()->entries) names.push_back({{"name", e.name}, {"shape", e.shape}});
  const nlohmann::json header = {{"spec", arch_to_json(model.spec())}, {"layout", names}};
  const auto v = to_vector(model);
  detail::Writer w(path);
  w.bytes(kModelMagic, sizeof kModelMagic);
  w.pod<std::uint32_t>(1);
  w.string(header.dump());
  w.pod<std::uint64_t>(static_cast<std::uint64_t>(v.size()));
  w.bytes(v.values.data(), static_cast<std::size_t>(v.size()) * sizeof(double));
}

Model load_model(const std::filesystem::path& path) {
  detail::Reader r(detail::read_file(path), path.string());
  char magic[8];
  r.bytes(magic, sizeof magic);
  if (std::memcmp(magic, kModelMagic, sizeof magic) != 0) throw IoError(path.string() + " is not a model file");
  if (const auto version = r.pod<std::uint32_t>(); version != 1) {
    throw IoError(path.string() + ": unsupported model version " + std::to_string(version));
  }
  const auto header = nlohmann::json::parse(r.string());
  auto model = build_model(arch_from_json(header.at("spec")), 0);
  const auto& entries = model.layout()->entries;
  const auto& names = header.at("layout");
  if (names.size() != entries.size()) throw ShapeError(path.string() + ": layout does not match architecture");
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (names[i].at("name").get<std::string>() != entries[i].name ||
        names[i].at("shape").get<std::vector<std::int64_t>>() != entries[i].shape) {
      throw ShapeError(path.string() + ": layout entry " + entries[i].name + " differs");
    }
  }
  Eigen::VectorXd v(static_cast<Eigen::Index>(r.pod<std::uint64_t>()));
  r.bytes(v.data(), static_cast<std::size_t>(v.size()) * sizeof(double));
  from_vector(model, v);
  return model;
}

}  // namespace mbafl
