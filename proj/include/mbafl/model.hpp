#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>
#include <torch/torch.h>

#include "mbafl/data.hpp"

namespace mbafl {

enum class Arch { small_cnn, resnet18, linear };

Arch parse_arch(std::string_view name);
std::string to_string(Arch arch);

struct ArchSpec {
  Arch arch = Arch::small_cnn;
  std::int64_t num_classes = 10;
  ImageShape input_shape{3, 32, 32};
  Normalization normalization;  // empty means identity
};

/// theta_c(theta_f(x)). The extractor starts with input normalization, so
/// callers always feed pixel-space images in [0,1].
class NetImpl : public torch::nn::Cloneable<NetImpl> {
 public:
  explicit NetImpl(ArchSpec spec);

  void reset() override;

  torch::Tensor features(const torch::Tensor& x);
  torch::Tensor forward(const torch::Tensor& x);

  const ArchSpec& spec() const { return spec_; }
  std::int64_t feature_dim() const { return feature_dim_; }

  torch::nn::Sequential extractor{nullptr};
  torch::nn::Linear classifier{nullptr};

 private:
  ArchSpec spec_;
  std::int64_t feature_dim_ = 0;
};
TORCH_MODULE(Net);

/// Slots of the flat parameter view: every trainable parameter plus the
/// floating-point buffers (batch-norm statistics), in registration order.
struct ParamLayout {
  struct Entry {
    std::string name;
    std::vector<std::int64_t> shape;
    std::int64_t offset = 0;
    std::int64_t numel = 0;
    bool trainable = true;

    bool operator==(const Entry&) const = default;
  };
  std::vector<Entry> entries;
  std::int64_t total = 0;

  bool operator==(const ParamLayout&) const = default;
};

struct ParamVector {
  Eigen::VectorXd values;
  std::shared_ptr<const ParamLayout> layout;

  std::int64_t size() const { return values.size(); }
};

class Model {
 public:
  Model() = default;
  Model(Net net, std::shared_ptr<const ParamLayout> layout);

  Net& net() { return net_; }
  const Net& net() const { return net_; }
  const ArchSpec& spec() const { return net_->spec(); }
  std::int64_t feature_dim() const { return net_->feature_dim(); }
  std::int64_t parameter_count() const { return layout_->total; }
  const std::shared_ptr<const ParamLayout>& layout() const { return layout_; }

  /// Deep copy with independent parameters.
  Model clone() const;

  /// Logits in eval mode without autograd, processed in chunks.
  torch::Tensor predict(const torch::Tensor& images, std::int64_t chunk = 500) const;
  torch::Tensor extract_features(const torch::Tensor& images, std::int64_t chunk = 500) const;

 private:
  mutable Net net_{nullptr};
  std::shared_ptr<const ParamLayout> layout_;
};

Model build_model(const ArchSpec& spec, std::uint64_t seed);

ParamVector to_vector(const Model& model);
/// Writes v into the model in place; ShapeError on a length or layout mismatch.
void from_vector(Model& model, const ParamVector& v);
void from_vector(Model& model, const Eigen::VectorXd& v);

/// Frozen copy of a global model's extractor with a fresh one-logit head.
struct Detector {
  Net body{nullptr};
  torch::nn::Linear head{nullptr};

  torch::Tensor logits(const torch::Tensor& images);
  torch::Tensor logits_from_features(const torch::Tensor& features);
};

Detector build_detector(const Model& global_model, std::uint64_t seed);
void reset_detector_head(Detector& detector, std::uint64_t seed);

void save_model(const Model& model, const std::filesystem::path& path);
Model load_model(const std::filesystem::path& path);

nlohmann::json arch_to_json(const ArchSpec& spec);
ArchSpec arch_from_json(const nlohmann::json& j);

}  // namespace mbafl
